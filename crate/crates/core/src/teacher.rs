//! Noise-prediction teachers: an exact Gaussian-mixture teacher and a
//! network fit by denoising score matching, plus the guidance combination.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::StandardNormal;

use crate::error::{check_dim, Error, Result};
use crate::net::{Condition, Denoiser, Optimizer, OptimizerKind, PredictionKind};
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub weight: f64,
    pub mean: Vec<f64>,
    /// Isotropic per-coordinate variance.
    pub variance: f64,
    pub label: usize,
}

/// Labeled isotropic Gaussian mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureSpec {
    components: Vec<Component>,
    dim: usize,
}

impl MixtureSpec {
    pub fn new(components: Vec<Component>) -> Result<Self> {
        let Some(first) = components.first() else {
            return Err(Error::Empty("mixture has no components".into()));
        };
        let dim = first.mean.len();
        if dim == 0 {
            return Err(Error::InvalidRange("mixture dimension must be positive".into()));
        }
        for c in &components {
            check_dim(dim, c.mean.len())?;
            if !(c.weight > 0.0) || !(c.variance > 0.0) {
                return Err(Error::InvalidRange("mixture weights and variances must be positive".into()));
            }
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidRange(format!("mixture weights sum to {total}, expected 1")));
        }
        Ok(Self { components, dim })
    }

    /// Same as [`MixtureSpec::new`] after rescaling the weights to sum to one.
    pub fn normalized(mut components: Vec<Component>) -> Result<Self> {
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if !(total > 0.0) {
            return Err(Error::InvalidRange("mixture weights must be positive".into()));
        }
        for c in &mut components {
            c.weight /= total;
        }
        Self::new(components)
    }

    /// `modes` equal-weight components evenly spaced on a circle; mode `i`
    /// carries label `i % classes`.
    pub fn ring(modes: usize, radius: f64, std: f64, classes: usize) -> Result<Self> {
        if modes == 0 || classes == 0 {
            return Err(Error::InvalidRange("ring needs at least one mode and one class".into()));
        }
        let comps = (0..modes)
            .map(|i| {
                let a = 2.0 * std::f64::consts::PI * i as f64 / modes as f64;
                Component {
                    weight: 1.0 / modes as f64,
                    mean: vec![radius * a.cos(), radius * a.sin()],
                    variance: std * std,
                    label: i % classes,
                }
            })
            .collect();
        Self::normalized(comps)
    }

    pub fn standard_normal(dim: usize) -> Self {
        Self::new(vec![Component { weight: 1.0, mean: vec![0.0; dim], variance: 1.0, label: 0 }]).unwrap()
    }

    /// Every mean translated by `shift`.
    pub fn shifted(&self, shift: &[f64]) -> Result<Self> {
        check_dim(self.dim, shift.len())?;
        let comps = self
            .components
            .iter()
            .map(|c| Component {
                mean: c.mean.iter().zip(shift).map(|(m, s)| m + s).collect(),
                ..c.clone()
            })
            .collect();
        Self::new(comps)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn num_classes(&self) -> usize {
        self.components.iter().map(|c| c.label + 1).max().unwrap_or(1)
    }

    /// Components selected by `cond` with their renormalized weights.
    pub fn select(&self, cond: Condition) -> Result<Vec<(f64, &Component)>> {
        let picked: Vec<&Component> = match cond {
            Condition::Null => self.components.iter().collect(),
            Condition::Class(c) => self.components.iter().filter(|comp| comp.label == c).collect(),
        };
        if picked.is_empty() {
            return Err(Error::MissingCondition(format!("no mixture component carries {cond:?}")));
        }
        let total: f64 = picked.iter().map(|c| c.weight).sum();
        Ok(picked.into_iter().map(|c| (c.weight / total, c)).collect())
    }

    /// Per-component log weight plus log-density of `z` under the perturbed
    /// marginal `N(alpha m_i, (alpha^2 s_i^2 + sigma^2) I)`.
    fn component_terms(&self, z: &[f64], alpha: f64, sigma: f64, cond: Condition) -> Result<Vec<(f64, f64, &Component)>> {
        check_dim(self.dim, z.len())?;
        let d = self.dim as f64;
        Ok(self
            .select(cond)?
            .into_iter()
            .map(|(w, c)| {
                let var = alpha * alpha * c.variance + sigma * sigma;
                let sq: f64 = z.iter().zip(&c.mean).map(|(zi, mi)| (zi - alpha * mi).powi(2)).sum();
                let log_p = w.ln() - 0.5 * sq / var - 0.5 * d * (2.0 * std::f64::consts::PI * var).ln();
                (log_p, var, c)
            })
            .collect())
    }

    /// Log-density of the perturbed marginal at `z`.
    pub fn log_density_at(&self, z: &[f64], alpha: f64, sigma: f64, cond: Condition) -> Result<f64> {
        let terms = self.component_terms(z, alpha, sigma, cond)?;
        let max = terms.iter().map(|t| t.0).fold(f64::NEG_INFINITY, f64::max);
        Ok(max + terms.iter().map(|t| (t.0 - max).exp()).sum::<f64>().ln())
    }

    /// Exact score `grad_z log q_t(z)` of the perturbed marginal.
    pub fn score_at(&self, z: &[f64], alpha: f64, sigma: f64, cond: Condition) -> Result<Vec<f64>> {
        let terms = self.component_terms(z, alpha, sigma, cond)?;
        let max = terms.iter().map(|t| t.0).fold(f64::NEG_INFINITY, f64::max);
        let resp: Vec<f64> = terms.iter().map(|t| (t.0 - max).exp()).collect();
        let norm: f64 = resp.iter().sum();
        let mut score = vec![0.0; self.dim];
        for ((_, var, c), r) in terms.iter().zip(&resp) {
            let r = r / norm;
            for ((s, zi), mi) in score.iter_mut().zip(z).zip(&c.mean) {
                *s -= r * (zi - alpha * mi) / var;
            }
        }
        Ok(score)
    }

    /// Optimal noise prediction `-sigma * score`.
    pub fn eps_at(&self, z: &[f64], alpha: f64, sigma: f64, cond: Condition) -> Result<Vec<f64>> {
        Ok(self.score_at(z, alpha, sigma, cond)?.into_iter().map(|s| -sigma * s).collect())
    }

    /// Draw one labeled sample, optionally restricted to a class.
    pub fn sample_one<R: Rng>(&self, rng: &mut R, cond: Condition) -> Result<(Vec<f64>, usize)> {
        let sel = self.select(cond)?;
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut chosen = sel.last().unwrap().1;
        for (w, c) in &sel {
            acc += w;
            if u < acc {
                chosen = c;
                break;
            }
        }
        let s = chosen.variance.sqrt();
        let x = chosen.mean.iter().map(|m| m + s * rng.sample::<f64, _>(StandardNormal)).collect();
        Ok((x, chosen.label))
    }

    pub fn sample<R: Rng>(&self, rng: &mut R, count: usize) -> Vec<(Vec<f64>, usize)> {
        (0..count).map(|_| self.sample_one(rng, Condition::Null).unwrap()).collect()
    }

    /// Square root of the mean per-coordinate variance of the mixture.
    pub fn data_std(&self) -> f64 {
        let d = self.dim;
        let mut mean = vec![0.0; d];
        for c in &self.components {
            mean.iter_mut().zip(&c.mean).for_each(|(a, m)| *a += c.weight * m);
        }
        let mut var = 0.0;
        for c in &self.components {
            let sq: f64 = c.mean.iter().zip(&mean).map(|(m, mu)| (m - mu).powi(2)).sum();
            var += c.weight * (sq + d as f64 * c.variance);
        }
        (var / d as f64).sqrt()
    }
}

/// Anything that predicts noise on the discrete schedule.
pub trait EpsModel {
    fn schedule(&self) -> &NoiseSchedule;
    fn eps(&self, z: &[f64], n: usize, cond: Condition) -> Result<Vec<f64>>;

    /// The exact mixture behind the predictions, when there is one.
    fn mixture(&self) -> Option<&MixtureSpec> {
        None
    }
}

#[derive(Debug, Clone)]
pub enum TeacherKind {
    Analytic(MixtureSpec),
    Learned(Denoiser),
}

/// Frozen teacher with an instrumented query counter.
#[derive(Debug)]
pub struct TeacherModel {
    kind: TeacherKind,
    schedule: NoiseSchedule,
    queries: AtomicU64,
}

impl TeacherModel {
    pub fn analytic(mixture: MixtureSpec, schedule: NoiseSchedule) -> Self {
        Self { kind: TeacherKind::Analytic(mixture), schedule, queries: AtomicU64::new(0) }
    }

    pub fn learned(net: Denoiser, schedule: NoiseSchedule) -> Result<Self> {
        if net.prediction_kind() != PredictionKind::Epsilon {
            return Err(Error::Unsupported("learned teachers must predict epsilon".into()));
        }
        if net.config().omega_conditioned {
            return Err(Error::Unsupported("learned teachers take no omega input".into()));
        }
        Ok(Self { kind: TeacherKind::Learned(net), schedule, queries: AtomicU64::new(0) })
    }

    pub fn kind(&self) -> &TeacherKind {
        &self.kind
    }

    pub fn mixture(&self) -> Option<&MixtureSpec> {
        match &self.kind {
            TeacherKind::Analytic(m) => Some(m),
            TeacherKind::Learned(_) => None,
        }
    }

    pub fn net(&self) -> Option<&Denoiser> {
        match &self.kind {
            TeacherKind::Learned(n) => Some(n),
            TeacherKind::Analytic(_) => None,
        }
    }

    pub fn dim(&self) -> usize {
        match &self.kind {
            TeacherKind::Analytic(m) => m.dim(),
            TeacherKind::Learned(n) => n.data_dim(),
        }
    }

    /// Number of noise predictions served so far.
    pub fn query_count(&self) -> u64 {
        self.queries.load(Ordering::Relaxed)
    }

    /// Exact score of the analytic teacher at index `n`.
    pub fn gmm_score(&self, z: &[f64], n: usize, cond: Condition) -> Result<Vec<f64>> {
        let m = self.mixture().ok_or_else(|| Error::Unsupported("score requires an analytic teacher".into()))?;
        let (a, s) = self.alpha_sigma_noisy(n)?;
        m.score_at(z, a, s, cond)
    }

    fn alpha_sigma_noisy(&self, n: usize) -> Result<(f64, f64)> {
        if n == 0 {
            return Err(Error::IndexOutOfRange { index: 0, lo: 1, hi: self.schedule.num_steps() });
        }
        self.schedule.alpha_sigma(n)
    }

    /// Guided prediction `(1 + omega) eps(z, c) - omega eps(z, null)`.
    pub fn cfg_eps(&self, z: &[f64], omega: f64, cond: Condition, n: usize) -> Result<Vec<f64>> {
        cfg_combine(self, z, omega, cond, n)
    }
}

impl EpsModel for TeacherModel {
    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn eps(&self, z: &[f64], n: usize, cond: Condition) -> Result<Vec<f64>> {
        self.queries.fetch_add(1, Ordering::Relaxed);
        let (a, s) = self.alpha_sigma_noisy(n)?;
        match &self.kind {
            TeacherKind::Analytic(m) => m.eps_at(z, a, s, cond),
            TeacherKind::Learned(net) => net.forward(z, self.schedule.t(n), None, cond),
        }
    }

    fn mixture(&self) -> Option<&MixtureSpec> {
        TeacherModel::mixture(self)
    }
}

/// Guidance combination over any noise model.
pub fn cfg_combine<M: EpsModel + ?Sized>(model: &M, z: &[f64], omega: f64, cond: Condition, n: usize) -> Result<Vec<f64>> {
    if cond == Condition::Null {
        return Err(Error::MissingCondition("guidance needs a class condition".into()));
    }
    let ec = model.eps(z, n, cond)?;
    let eu = model.eps(z, n, Condition::Null)?;
    Ok(ec.iter().zip(&eu).map(|(c, u)| (1.0 + omega) * c - omega * u).collect())
}

/// Fixed-scale guided view of a model: `eps(z, n, c)` returns the guided prediction.
pub struct Guided<'a, M: EpsModel + ?Sized> {
    pub model: &'a M,
    pub omega: f64,
}

impl<M: EpsModel + ?Sized> EpsModel for Guided<'_, M> {
    fn schedule(&self) -> &NoiseSchedule {
        self.model.schedule()
    }

    fn eps(&self, z: &[f64], n: usize, cond: Condition) -> Result<Vec<f64>> {
        match cond {
            Condition::Null => self.model.eps(z, n, cond),
            c => cfg_combine(self.model, z, self.omega, c, n),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherTrainConfig {
    pub iters: u64,
    pub batch: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    /// Probability of replacing the label with the null condition.
    pub p_uncond: f64,
    pub seed: u64,
}

impl Default for TeacherTrainConfig {
    fn default() -> Self {
        Self { iters: 5000, batch: 64, lr: 1e-3, optimizer: OptimizerKind::Adam, p_uncond: 0.1, seed: 0 }
    }
}

/// Mean of `||eps_theta(x_t, t) - eps||^2` over one random batch.
pub fn score_matching_loss<R: Rng>(
    net: &Denoiser,
    schedule: &NoiseSchedule,
    data: &[(Vec<f64>, Condition)],
    batch: usize,
    rng: &mut R,
) -> Result<f64> {
    let mut total = 0.0;
    for _ in 0..batch {
        let (x, c) = &data[rng.random_range(0..data.len())];
        let n = rng.random_range(1..=schedule.num_steps());
        let eps: Vec<f64> = (0..x.len()).map(|_| rng.sample(StandardNormal)).collect();
        let xt = schedule.forward_sample(x, n, &eps)?;
        let pred = net.forward(&xt, schedule.t(n), None, *c)?;
        total += pred.iter().zip(&eps).map(|(p, e)| (p - e).powi(2)).sum::<f64>();
    }
    Ok(total / batch as f64)
}

/// Fit an epsilon-prediction network by denoising score matching with unit weighting.
pub fn train_teacher(
    mut net: Denoiser,
    data: &[(Vec<f64>, Condition)],
    schedule: &NoiseSchedule,
    cfg: &TeacherTrainConfig,
) -> Result<Denoiser> {
    if data.is_empty() {
        return Err(Error::Empty("teacher training data".into()));
    }
    if net.prediction_kind() != PredictionKind::Epsilon {
        return Err(Error::Unsupported("score matching trains epsilon prediction".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, net.num_params());
    let mut grad = vec![0.0; net.num_params()];
    let inv_b = 1.0 / cfg.batch as f64;
    for iter in 0..cfg.iters {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut loss = 0.0;
        for _ in 0..cfg.batch {
            let (x, c) = &data[rng.random_range(0..data.len())];
            let cond = if rng.random::<f64>() < cfg.p_uncond { Condition::Null } else { *c };
            let n = rng.random_range(1..=schedule.num_steps());
            let eps: Vec<f64> = (0..x.len()).map(|_| rng.sample(StandardNormal)).collect();
            let xt = schedule.forward_sample(x, n, &eps)?;
            let (pred, cache) = net.forward_cached(&xt, schedule.t(n), None, cond)?;
            let diff: Vec<f64> = pred.iter().zip(&eps).map(|(p, e)| p - e).collect();
            loss += diff.iter().map(|d| d * d).sum::<f64>();
            let upstream: Vec<f64> = diff.iter().map(|d| 2.0 * d * inv_b).collect();
            net.accumulate_grad(&cache, &upstream, &mut grad)?;
        }
        loss *= inv_b;
        if !loss.is_finite() || loss > 1e6 {
            return Err(Error::Divergence { iter, loss });
        }
        opt.step(net.theta_mut(), &grad)?;
    }
    Ok(net)
}
