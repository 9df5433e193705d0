//! Guided consistency distillation from a frozen teacher, and teacher-free
//! consistency fine-tuning.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::consistency::ConsistencyModel;
use crate::error::{check_dim, Error, Result};
use crate::metrics::{endpoint_error, forward_probes, Probe};
use crate::net::{Condition, Optimizer, OptimizerKind};
use crate::solver::{cfg_solver_step, SolverKind};
use crate::teacher::TeacherModel;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Metric {
    SquaredL2,
    Huber(f64),
}

impl Metric {
    pub fn parse(name: &str, delta: f64) -> Option<Self> {
        match name {
            "squared_l2" => Some(Metric::SquaredL2),
            "huber" => Some(Metric::Huber(delta)),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Metric::SquaredL2 => "squared_l2",
            Metric::Huber(_) => "huber",
        }
    }
}

fn huber(x: f64, delta: f64) -> f64 {
    if x.abs() <= delta {
        0.5 * x * x
    } else {
        delta * (x.abs() - 0.5 * delta)
    }
}

pub fn distance(metric: Metric, a: &[f64], b: &[f64]) -> Result<f64> {
    check_dim(a.len(), b.len())?;
    let diffs = a.iter().zip(b).map(|(x, y)| x - y);
    Ok(match metric {
        Metric::SquaredL2 => diffs.map(|d| d * d).sum(),
        Metric::Huber(delta) => diffs.map(|d| huber(d, delta)).sum(),
    })
}

/// `d distance(a, b) / d a`.
pub fn distance_grad(metric: Metric, a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    check_dim(a.len(), b.len())?;
    let diffs = a.iter().zip(b).map(|(x, y)| x - y);
    Ok(match metric {
        Metric::SquaredL2 => diffs.map(|d| 2.0 * d).collect(),
        Metric::Huber(delta) => diffs.map(|d| d.clamp(-delta, delta)).collect(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub mu: f64,
    pub batch: usize,
    pub iters: u64,
    pub k: usize,
    pub omega_min: f64,
    pub omega_max: f64,
    pub metric: Metric,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub solver: SolverKind,
    pub log_every: u64,
    /// Probes for the logged endpoint error; 0 disables it.
    pub eval_probes: usize,
    /// RK4 substeps used by the logged endpoint error.
    pub eval_substeps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 8e-6,
            mu: 0.999943,
            batch: 72,
            iters: 1000,
            k: 20,
            omega_min: 2.0,
            omega_max: 14.0,
            metric: Metric::SquaredL2,
            seed: 0,
            optimizer: OptimizerKind::Sgd,
            solver: SolverKind::Ddim,
            log_every: 100,
            eval_probes: 0,
            eval_substeps: 2000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, num_steps: usize) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidRange(format!("learning rate {} must be positive", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.mu) {
            return Err(Error::InvalidRange(format!("EMA rate {} outside [0, 1]", self.mu)));
        }
        if !(self.omega_min <= self.omega_max) {
            return Err(Error::InvalidRange(format!("omega range [{}, {}]", self.omega_min, self.omega_max)));
        }
        if self.batch == 0 {
            return Err(Error::InvalidRange("batch must be positive".into()));
        }
        if self.k == 0 || self.k >= num_steps {
            return Err(Error::InvalidK { k: self.k, n: num_steps });
        }
        if let Metric::Huber(d) = self.metric {
            if !(d > 0.0) {
                return Err(Error::InvalidRange(format!("huber delta {d} must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLogRow {
    pub iter: u64,
    pub loss: f64,
    pub endpoint_error: Option<f64>,
    pub wall_ms: u64,
}

/// `n ~ U[1, N - k]`.
pub fn draw_index<R: Rng + ?Sized>(num_steps: usize, k: usize, rng: &mut R) -> usize {
    rng.random_range(1..=num_steps - k)
}

/// `omega ~ U[omega_min, omega_max]`.
pub fn draw_omega<R: Rng + ?Sized>(cfg: &TrainConfig, rng: &mut R) -> f64 {
    if cfg.omega_min == cfg.omega_max {
        cfg.omega_min
    } else {
        rng.random_range(cfg.omega_min..=cfg.omega_max)
    }
}

/// Independent RNG stream for one iteration, so resumed runs replay the same draws.
pub fn iteration_rng(seed: u64, iter: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iter);
    rng
}

fn guided_cond(c: Condition) -> Result<Condition> {
    match c {
        Condition::Class(_) => Ok(c),
        Condition::Null => Err(Error::MissingCondition("training pairs need a class label".into())),
    }
}

/// Which pair construction a loss uses.
enum Pairing<'a> {
    Teacher(&'a TeacherModel),
    SharedNoise,
}

fn pair_loss<R: Rng + ?Sized>(
    m: &ConsistencyModel,
    pairing: &Pairing,
    batch: &[(Vec<f64>, Condition)],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::Empty("training batch".into()));
    }
    let s = &m.schedule;
    cfg.validate(s.num_steps())?;
    let mut grad = vec![0.0; m.online().num_params()];
    let inv_b = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    for (x, c) in batch {
        let c = guided_cond(*c)?;
        check_dim(m.data_dim(), x.len())?;
        let n = draw_index(s.num_steps(), cfg.k, rng);
        let omega = draw_omega(cfg, rng);
        let eps: Vec<f64> = (0..x.len()).map(|_| rng.sample(StandardNormal)).collect();
        let z_far = s.forward_sample(x, n + cfg.k, &eps)?;
        let z_near = match pairing {
            Pairing::Teacher(t) => cfg_solver_step(*t, &z_far, n + cfg.k, n, omega, c, cfg.solver)?,
            Pairing::SharedNoise => s.forward_sample(x, n, &eps)?,
        };
        let target = m.consistency_apply(&z_near, omega, c, n, true)?;
        let (online, cache) = m.apply_cached(&z_far, omega, c, n + cfg.k)?;
        loss += distance(cfg.metric, &online, &target)?;
        let upstream: Vec<f64> = distance_grad(cfg.metric, &online, &target)?.into_iter().map(|g| g * inv_b).collect();
        m.backprop(&cache, &upstream, &mut grad)?;
    }
    Ok((loss * inv_b, grad))
}

/// Mean distillation loss over `batch` and its gradient in the online parameters.
/// The teacher and the target network are only read.
pub fn lcd_loss<R: Rng + ?Sized>(
    m: &ConsistencyModel,
    teacher: &TeacherModel,
    batch: &[(Vec<f64>, Condition)],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<(f64, Vec<f64>)> {
    if teacher.dim() != m.data_dim() {
        return Err(Error::DimensionMismatch { expected: m.data_dim(), got: teacher.dim() });
    }
    if crate::teacher::EpsModel::schedule(teacher) != &m.schedule {
        return Err(Error::ShapeMismatch("teacher and student schedules differ".into()));
    }
    pair_loss(m, &Pairing::Teacher(teacher), batch, cfg, rng)
}

/// Fine-tuning loss: both points of a pair share one noise draw; no teacher.
pub fn lcf_loss<R: Rng + ?Sized>(
    m: &ConsistencyModel,
    batch: &[(Vec<f64>, Condition)],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<(f64, Vec<f64>)> {
    pair_loss(m, &Pairing::SharedNoise, batch, cfg, rng)
}

/// Model plus optimizer state and the global iteration counter.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainer {
    pub model: ConsistencyModel,
    pub optimizer: Optimizer,
    pub iter: u64,
}

impl Trainer {
    pub fn new(model: ConsistencyModel, cfg: &TrainConfig) -> Self {
        let optimizer = Optimizer::new(cfg.optimizer, cfg.lr, model.online().num_params());
        Self { model, optimizer, iter: 0 }
    }

    /// Run `cfg.iters` distillation iterations from the current counter.
    pub fn run_lcd(&mut self, teacher: &TeacherModel, data: &[(Vec<f64>, Condition)], cfg: &TrainConfig) -> Result<Vec<TrainLogRow>> {
        let probes = match teacher.mixture() {
            Some(mix) if cfg.eval_probes > 0 => {
                let mut rng = iteration_rng(cfg.seed ^ 0x9e37_79b9_7f4a_7c15, 0);
                let cond = data.first().map(|d| d.1).unwrap_or(Condition::Class(0));
                Some(forward_probes(mix, &self.model.schedule, cfg.eval_probes, cond, &mut rng)?)
            }
            _ => None,
        };
        self.run(&Pairing::Teacher(teacher), data, cfg, probes.as_deref())
    }

    /// Run `cfg.iters` fine-tuning iterations from the current counter.
    pub fn run_lcf(&mut self, data: &[(Vec<f64>, Condition)], cfg: &TrainConfig) -> Result<Vec<TrainLogRow>> {
        self.run(&Pairing::SharedNoise, data, cfg, None)
    }

    fn run(
        &mut self,
        pairing: &Pairing,
        data: &[(Vec<f64>, Condition)],
        cfg: &TrainConfig,
        probes: Option<&[Probe]>,
    ) -> Result<Vec<TrainLogRow>> {
        if data.is_empty() {
            return Err(Error::Empty("training data".into()));
        }
        cfg.validate(self.model.schedule.num_steps())?;
        let start = Instant::now();
        let mut log = Vec::new();
        let end = self.iter + cfg.iters;
        while self.iter < end {
            let mut rng = iteration_rng(cfg.seed, self.iter);
            let batch: Vec<(Vec<f64>, Condition)> =
                (0..cfg.batch).map(|_| data[rng.random_range(0..data.len())].clone()).collect();
            let (loss, grad) = match pairing {
                Pairing::Teacher(t) => lcd_loss(&self.model, t, &batch, cfg, &mut rng)?,
                Pairing::SharedNoise => lcf_loss(&self.model, &batch, cfg, &mut rng)?,
            };
            if !loss.is_finite() || loss > 1e6 {
                return Err(Error::Divergence { iter: self.iter, loss });
            }
            self.optimizer.step(self.model.ema.online.theta_mut(), &grad)?;
            self.model.ema.update(cfg.mu)?;
            self.iter += 1;
            if cfg.log_every > 0 && (self.iter.is_multiple_of(cfg.log_every) || self.iter == end) {
                let endpoint_error = match (pairing, probes) {
                    (Pairing::Teacher(t), Some(p)) => {
                        let mix = t.mixture().expect("probes imply an analytic teacher");
                        let omega = 0.5 * (cfg.omega_min + cfg.omega_max);
                        Some(endpoint_error(&self.model, mix, &self.model.schedule, p, omega, cfg.eval_substeps)?)
                    }
                    _ => None,
                };
                log.push(TrainLogRow { iter: self.iter, loss, endpoint_error, wall_ms: start.elapsed().as_millis() as u64 });
            }
        }
        Ok(log)
    }
}

/// Distill `m` from `teacher` on `data` for `cfg.iters` iterations.
pub fn lcd_train(
    m: ConsistencyModel,
    teacher: &TeacherModel,
    data: &[(Vec<f64>, Condition)],
    cfg: &TrainConfig,
) -> Result<(ConsistencyModel, Vec<TrainLogRow>)> {
    let mut t = Trainer::new(m, cfg);
    let log = t.run_lcd(teacher, data, cfg)?;
    Ok((t.model, log))
}

/// Fine-tune a pretrained `m` on `data` without a teacher.
pub fn lcf_train(m: ConsistencyModel, data: &[(Vec<f64>, Condition)], cfg: &TrainConfig) -> Result<(ConsistencyModel, Vec<TrainLogRow>)> {
    let mut t = Trainer::new(m, cfg);
    let log = t.run_lcf(data, cfg)?;
    Ok((t.model, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::consistency::BoundarySpec;
    use crate::net::{Denoiser, NetConfig};
    use crate::schedule::NoiseSchedule;
    use crate::solver::solver_step;
    use crate::teacher::{EpsModel, MixtureSpec};
    use proptest::prelude::*;
    use rand::Rng;

    fn sched() -> NoiseSchedule {
        NoiseSchedule::new(1000, 1e-4, 0.02).unwrap()
    }

    fn small_model(seed: u64) -> ConsistencyModel {
        let cfg = NetConfig {
            hidden_width: 16,
            embed_dim: 8,
            num_classes: 1,
            omega_conditioned: true,
            prediction_kind: crate::net::PredictionKind::V,
            ..NetConfig::new(2)
        };
        let net = Denoiser::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        ConsistencyModel::new(net, BoundarySpec::default(), sched()).unwrap()
    }

    fn data(m: &MixtureSpec, count: usize) -> Vec<(Vec<f64>, Condition)> {
        m.sample(&mut ChaCha8Rng::seed_from_u64(11), count).into_iter().map(|(x, c)| (x, Condition::Class(c))).collect()
    }

    fn quick_cfg() -> TrainConfig {
        TrainConfig { batch: 8, iters: 5, k: 10, lr: 1e-3, ..Default::default() }
    }

    #[test]
    fn distance_cases() {
        assert_eq!(distance(Metric::SquaredL2, &[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(distance(Metric::SquaredL2, &[0.0, 0.0], &[3.0, 4.0]).unwrap(), 25.0);
        assert_eq!(distance(Metric::Huber(1.0), &[0.5, -0.5], &[0.0, 0.0]).unwrap(), 0.25);
        assert_eq!(distance(Metric::Huber(1.0), &[3.0], &[0.0]).unwrap(), 2.5);
        assert!(distance(Metric::SquaredL2, &[0.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn distance_grad_matches_differences() {
        let a = [0.3, -2.0, 1.5];
        let b = [0.1, 0.4, -0.2];
        for metric in [Metric::SquaredL2, Metric::Huber(1.0)] {
            let g = distance_grad(metric, &a, &b).unwrap();
            for i in 0..3 {
                let mut p = a;
                let mut q = a;
                p[i] += 1e-6;
                q[i] -= 1e-6;
                let fd = (distance(metric, &p, &b).unwrap() - distance(metric, &q, &b).unwrap()) / 2e-6;
                assert!((fd - g[i]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn config_validation() {
        let n = 1000;
        assert!(TrainConfig::default().validate(n).is_ok());
        assert!(TrainConfig { k: 0, ..Default::default() }.validate(n).is_err());
        assert!(TrainConfig { k: 1000, ..Default::default() }.validate(n).is_err());
        assert!(TrainConfig { mu: 1.5, ..Default::default() }.validate(n).is_err());
        assert!(TrainConfig { lr: 0.0, ..Default::default() }.validate(n).is_err());
        assert!(TrainConfig { omega_min: 3.0, omega_max: 2.0, ..Default::default() }.validate(n).is_err());
        assert!(TrainConfig { metric: Metric::Huber(0.0), ..Default::default() }.validate(n).is_err());
        let d = TrainConfig::default();
        assert_eq!((d.k, d.omega_min, d.omega_max, d.mu, d.lr), (20, 2.0, 14.0, 0.999943, 8e-6));
    }

    #[test]
    fn loss_leaves_teacher_and_target_untouched() {
        let mix = MixtureSpec::ring(4, 1.0, 0.2, 1).unwrap();
        let teacher = TeacherModel::analytic(mix.clone(), sched());
        let m = small_model(1);
        let before = m.clone();
        let (loss, grad) = lcd_loss(&m, &teacher, &data(&mix, 8), &quick_cfg(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert!(loss.is_finite() && loss >= 0.0);
        assert_eq!(grad.len(), m.online().num_params());
        assert_eq!(m, before);
        assert_eq!(teacher.mixture(), Some(&mix));
        assert!(teacher.query_count() > 0);
    }

    #[test]
    fn gradient_matches_finite_differences_with_fixed_draws() {
        let mix = MixtureSpec::ring(4, 1.0, 0.2, 1).unwrap();
        let teacher = TeacherModel::analytic(mix.clone(), sched());
        let mut m = small_model(3);
        // Let the target differ from the online copy so the loss is not trivially flat.
        m.ema.online.theta_mut().iter_mut().enumerate().for_each(|(i, p)| *p += 1e-2 * ((i % 7) as f64 - 3.0));
        let batch = data(&mix, 4);
        let cfg = TrainConfig { metric: Metric::Huber(0.3), ..quick_cfg() };
        let (_, grad) = lcd_loss(&m, &teacher, &batch, &cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let h = 1e-6;
        for i in (0..grad.len()).step_by(17) {
            let orig = m.ema.online.theta()[i];
            m.ema.online.theta_mut()[i] = orig + h;
            let lp = lcd_loss(&m, &teacher, &batch, &cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap().0;
            m.ema.online.theta_mut()[i] = orig - h;
            let lm = lcd_loss(&m, &teacher, &batch, &cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap().0;
            m.ema.online.theta_mut()[i] = orig;
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - grad[i]).abs() <= 1e-5 * fd.abs().max(grad[i].abs()).max(1e-2), "{i}: {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn identity_model_loss_bounded_by_solver_error() {
        // N(0, I) data: trajectories are constant in z, so an identity f has
        // loss equal to the squared one-step DDIM displacement.
        let mix = MixtureSpec::standard_normal(2);
        let teacher = TeacherModel::analytic(mix.clone(), sched());
        let cfg = TrainConfig { k: 10, omega_min: 0.0, omega_max: 0.0, ..quick_cfg() };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut worst: f64 = 0.0;
        for _ in 0..50 {
            let n = draw_index(1000, cfg.k, &mut rng);
            let z: Vec<f64> = (0..2).map(|_| rng.sample(StandardNormal)).collect();
            let inc = solver_step(SolverKind::Ddim, &teacher, &z, n + 10, n, Condition::Class(0)).unwrap();
            worst = worst.max(inc.iter().map(|v| v * v).sum::<f64>());
        }
        // DDIM on N(0, I) moves z by (a_t a_s + s_t s_s - 1) z, which is O(h^2).
        assert!(worst < 1e-4, "{worst}");
    }

    #[test]
    fn vanilla_interval_is_valid() {
        let mix = MixtureSpec::ring(4, 1.0, 0.2, 1).unwrap();
        let teacher = TeacherModel::analytic(mix.clone(), sched());
        let cfg = TrainConfig { k: 1, ..quick_cfg() };
        assert!(lcd_loss(&small_model(6), &teacher, &data(&mix, 4), &cfg, &mut ChaCha8Rng::seed_from_u64(0)).is_ok());
    }

    #[test]
    fn zero_iterations_leave_model_unchanged() {
        let mix = MixtureSpec::ring(4, 1.0, 0.2, 1).unwrap();
        let teacher = TeacherModel::analytic(mix.clone(), sched());
        let m = small_model(7);
        let (out, log) = lcd_train(m.clone(), &teacher, &data(&mix, 16), &TrainConfig { iters: 0, ..quick_cfg() }).unwrap();
        assert_eq!(out, m);
        assert!(log.is_empty());
    }

    #[test]
    fn training_is_deterministic_and_resumable() {
        let mix = MixtureSpec::ring(4, 1.0, 0.2, 1).unwrap();
        let teacher = TeacherModel::analytic(mix.clone(), sched());
        let d = data(&mix, 32);
        let cfg = TrainConfig { iters: 6, log_every: 2, optimizer: OptimizerKind::Adam, ..quick_cfg() };
        let (a, log) = lcd_train(small_model(8), &teacher, &d, &cfg).unwrap();
        let (b, _) = lcd_train(small_model(8), &teacher, &d, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(log.iter().map(|r| r.iter).collect::<Vec<_>>(), vec![2, 4, 6]);
        let mut t = Trainer::new(small_model(8), &cfg);
        t.run_lcd(&teacher, &d, &TrainConfig { iters: 4, ..cfg.clone() }).unwrap();
        let rows = t.run_lcd(&teacher, &d, &TrainConfig { iters: 2, ..cfg.clone() }).unwrap();
        assert_eq!(t.iter, 6);
        assert_eq!(rows.last().unwrap().iter, 6);
        assert_eq!(t.model, a);
    }

    #[test]
    fn target_tracks_online_by_ema() {
        let mix = MixtureSpec::ring(4, 1.0, 0.2, 1).unwrap();
        let teacher = TeacherModel::analytic(mix.clone(), sched());
        let cfg = TrainConfig { iters: 1, mu: 0.0, ..quick_cfg() };
        let (m, _) = lcd_train(small_model(9), &teacher, &data(&mix, 8), &cfg).unwrap();
        assert_eq!(m.online().theta(), m.target().theta());
        let cfg = TrainConfig { iters: 1, mu: 1.0, ..quick_cfg() };
        let init = small_model(9);
        let (m, _) = lcd_train(init.clone(), &teacher, &data(&mix, 8), &cfg).unwrap();
        assert_eq!(m.target().theta(), init.target().theta());
        assert_ne!(m.online().theta(), init.online().theta());
    }

    #[test]
    fn finetuning_never_queries_a_teacher() {
        let mix = MixtureSpec::ring(4, 1.0, 0.2, 1).unwrap();
        let teacher = TeacherModel::analytic(mix.clone(), sched());
        let (_, log) = lcf_train(small_model(10), &data(&mix, 16), &TrainConfig { iters: 3, log_every: 1, ..quick_cfg() }).unwrap();
        assert_eq!(log.len(), 3);
        assert!(log.iter().all(|r| r.endpoint_error.is_none()));
        assert_eq!(teacher.query_count(), 0);
        assert!(lcf_train(small_model(10), &data(&mix, 4), &TrainConfig { k: 0, ..quick_cfg() }).is_err());
    }

    #[test]
    fn finetuning_pairs_share_noise() {
        // With theta^- = theta equal to an identity-like zero net in x
        // parameterization, f(z_n) = c_skip z_n; the loss is then the
        // squared gap between c_skip-weighted noisings of one datum.
        let cfg = NetConfig { hidden_width: 8, embed_dim: 4, omega_conditioned: true, prediction_kind: crate::net::PredictionKind::X, ..NetConfig::new(1) };
        let m = ConsistencyModel::new(Denoiser::zeros(cfg).unwrap(), BoundarySpec::default(), sched()).unwrap();
        let batch = vec![(vec![0.0], Condition::Class(0))];
        // Zero data with shared noise: z_{n+k} = s_{n+k} e, z_n = s_n e.
        let tcfg = TrainConfig { batch: 1, k: 5, ..quick_cfg() };
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (loss, _) = lcf_loss(&m, &batch, &tcfg, &mut rng).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n = draw_index(1000, 5, &mut rng);
        draw_omega(&tcfg, &mut rng);
        let e: f64 = rng.sample(StandardNormal);
        let s = sched();
        let (cs_far, _) = crate::consistency::boundary_coeffs(&m.boundary, &s, n + 5).unwrap();
        let (cs_near, _) = crate::consistency::boundary_coeffs(&m.boundary, &s, n).unwrap();
        let (_, s_far) = s.alpha_sigma(n + 5).unwrap();
        let (_, s_near) = s.alpha_sigma(n).unwrap();
        let expect = (cs_far * s_far * e - cs_near * s_near * e).powi(2);
        assert!((loss - expect).abs() < 1e-14, "{loss} vs {expect}");
    }

    #[test]
    fn omega_draws_are_uniform() {
        let cfg = TrainConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let bins = 12;
        let draws = 12_000;
        let mut hist = vec![0usize; bins];
        for _ in 0..draws {
            let w = draw_omega(&cfg, &mut rng);
            assert!((2.0..=14.0).contains(&w));
            hist[(((w - 2.0) / 12.0 * bins as f64) as usize).min(bins - 1)] += 1;
        }
        let p = 1.0 / bins as f64;
        let mean = draws as f64 * p;
        let sd = (draws as f64 * p * (1.0 - p)).sqrt();
        for h in hist {
            assert!((h as f64 - mean).abs() < 3.0 * sd, "{h}");
        }
    }

    #[test]
    fn divergence_is_reported() {
        let mix = MixtureSpec::ring(4, 1e4, 0.2, 1).unwrap();
        let teacher = TeacherModel::analytic(mix.clone(), sched());
        let err = lcd_train(small_model(14), &teacher, &data(&mix, 8), &TrainConfig { lr: 10.0, iters: 50, ..quick_cfg() }).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. } | Error::NonFinite(_)), "{err}");
    }

    #[test]
    fn null_labels_rejected() {
        let mix = MixtureSpec::ring(4, 1.0, 0.2, 1).unwrap();
        let teacher = TeacherModel::analytic(mix, sched());
        let batch = vec![(vec![0.0, 0.0], Condition::Null)];
        assert!(lcd_loss(&small_model(15), &teacher, &batch, &quick_cfg(), &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        let _ = teacher.schedule();
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn squared_l2_is_zero_only_on_equal_inputs(
            a in prop::collection::vec(-5.0f64..5.0, 3),
            b in prop::collection::vec(-5.0f64..5.0, 3),
        ) {
            let d = distance(Metric::SquaredL2, &a, &b).unwrap();
            prop_assert!(d >= 0.0);
            prop_assert_eq!(d == 0.0, a == b);
            prop_assert!(distance(Metric::Huber(0.5), &a, &b).unwrap() >= 0.0);
        }

        #[test]
        fn index_draws_stay_in_range(seed in 0u64..500, k in 1usize..999) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = draw_index(1000, k, &mut rng);
            prop_assert!(n >= 1 && n + k <= 1000);
        }
    }
}
