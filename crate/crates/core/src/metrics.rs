//! Sample-set distances and trajectory diagnostics for analytic toy problems.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::consistency::{Branch, ConsistencyFn};
use crate::error::{check_dim, Error, Result};
use crate::net::Condition;
use crate::schedule::NoiseSchedule;
use crate::solver::oracle_integrate;
use crate::teacher::MixtureSpec;

/// Exact 1-D Wasserstein-1 distance between two empirical distributions.
/// Both slices must be sorted ascending.
pub fn w1_sorted(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut u = 0.0;
    let mut total = 0.0;
    while i < a.len() && j < b.len() {
        let next_a = (i + 1) as f64 / na;
        let next_b = (j + 1) as f64 / nb;
        let next = next_a.min(next_b);
        total += (next - u) * (a[i] - b[j]).abs();
        u = next;
        if next_a <= next {
            i += 1;
        }
        if next_b <= next {
            j += 1;
        }
    }
    total
}

/// Random unit directions in `dim` dimensions.
pub fn random_directions<R: Rng + ?Sized>(dim: usize, count: usize, rng: &mut R) -> Vec<Vec<f64>> {
    (0..count)
        .map(|_| loop {
            let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                break v.into_iter().map(|x| x / norm).collect();
            }
        })
        .collect()
}

/// Sliced W1 over fixed directions.
pub fn sliced_w1_with(a: &[Vec<f64>], b: &[Vec<f64>], directions: &[Vec<f64>]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("sliced W1 needs two non-empty sample sets".into()));
    }
    if directions.is_empty() {
        return Err(Error::Empty("sliced W1 needs at least one projection".into()));
    }
    let dim = a[0].len();
    for x in a.iter().chain(b) {
        check_dim(dim, x.len())?;
    }
    let project = |set: &[Vec<f64>], u: &[f64]| -> Vec<f64> {
        let mut p: Vec<f64> = set.iter().map(|x| x.iter().zip(u).map(|(s, t)| s * t).sum()).collect();
        p.sort_by(f64::total_cmp);
        p
    };
    let mut total = 0.0;
    for u in directions {
        check_dim(dim, u.len())?;
        total += w1_sorted(&project(a, u), &project(b, u));
    }
    Ok(total / directions.len() as f64)
}

/// Average 1-D W1 over `n_projections` random unit directions.
pub fn sliced_w1<R: Rng + ?Sized>(a: &[Vec<f64>], b: &[Vec<f64>], n_projections: usize, rng: &mut R) -> Result<f64> {
    let dim = a.first().or(b.first()).map(|x| x.len()).ok_or_else(|| Error::Empty("sample sets".into()))?;
    let dirs = random_directions(dim, n_projections, rng);
    sliced_w1_with(a, b, &dirs)
}

/// `(coverage, purity)` of a sample set against a known mixture.
///
/// A mode is covered when at least `count / (2 * modes)` samples have it as
/// their nearest mean. Purity is minus the mean std-normalized distance from
/// each sample to the nearest mode of the conditioned class (any mode when
/// `class` is `None`), so larger is better and 0 is the maximum.
pub fn mode_metrics(samples: &[Vec<f64>], mixture: &MixtureSpec, class: Option<usize>) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::Empty("mode metrics need samples".into()));
    }
    let comps = mixture.components();
    let modes = comps.len();
    let dist = |x: &[f64], m: &[f64]| x.iter().zip(m).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let mut owned = vec![0usize; modes];
    let mut purity = 0.0;
    for x in samples {
        check_dim(mixture.dim(), x.len())?;
        let nearest = (0..modes)
            .min_by(|&i, &j| dist(x, &comps[i].mean).total_cmp(&dist(x, &comps[j].mean)))
            .unwrap_or(0);
        owned[nearest] += 1;
        let best = comps
            .iter()
            .filter(|c| class.is_none_or(|k| c.label == k))
            .map(|c| dist(x, &c.mean) / c.variance.sqrt())
            .fold(f64::INFINITY, f64::min);
        if !best.is_finite() {
            return Err(Error::UnknownClass { class: class.unwrap_or(0), classes: mixture.num_classes() });
        }
        purity -= best;
    }
    let threshold = samples.len() as f64 / (2.0 * modes as f64);
    let covered = owned.iter().filter(|&&c| c as f64 >= threshold).count();
    Ok((covered as f64 / modes as f64, purity / samples.len() as f64))
}

/// A noisy point drawn from the forward process.
#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub z: Vec<f64>,
    pub n: usize,
    pub cond: Condition,
}

/// `count` probes `z = alpha_n x + sigma_n eps` with `x` from the mixture and `n ~ U[1, N]`.
pub fn forward_probes<R: Rng>(
    mixture: &MixtureSpec,
    schedule: &NoiseSchedule,
    count: usize,
    cond: Condition,
    rng: &mut R,
) -> Result<Vec<Probe>> {
    (0..count)
        .map(|_| {
            let (x, _) = mixture.sample_one(rng, cond)?;
            let n = rng.random_range(1..=schedule.num_steps());
            let eps: Vec<f64> = (0..x.len()).map(|_| rng.sample(StandardNormal)).collect();
            Ok(Probe { z: schedule.forward_sample(&x, n, &eps)?, n, cond })
        })
        .collect()
}

fn guidance(cond: Condition, omega: f64) -> Option<f64> {
    match cond {
        Condition::Null => None,
        Condition::Class(_) => Some(omega),
    }
}

fn norm_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Mean distance between `f(z_n)` and the oracle origin of the guided flow through `z_n`.
pub fn endpoint_error<F: ConsistencyFn + ?Sized>(
    f: &F,
    mixture: &MixtureSpec,
    schedule: &NoiseSchedule,
    probes: &[Probe],
    omega: f64,
    substeps: usize,
) -> Result<f64> {
    if probes.is_empty() {
        return Err(Error::Empty("endpoint error needs probes".into()));
    }
    let mut total = 0.0;
    for p in probes {
        let origin = oracle_integrate(mixture, schedule, &p.z, p.n, 0, p.cond, guidance(p.cond, omega), substeps)?;
        let pred = f.apply(&p.z, omega, p.cond, p.n, Branch::Online)?;
        total += norm_diff(&pred, &origin);
    }
    Ok(total / probes.len() as f64)
}

/// Mean `||f(z_n, n) - f(z_m, m)||` where `z_m` lies on the oracle trajectory
/// through `z_n` and `m = floor(ratio * n)`.
pub fn self_consistency_gap<F: ConsistencyFn + ?Sized>(
    f: &F,
    mixture: &MixtureSpec,
    schedule: &NoiseSchedule,
    probes: &[Probe],
    omega: f64,
    ratio: f64,
    substeps: usize,
) -> Result<f64> {
    if probes.is_empty() {
        return Err(Error::Empty("self-consistency gap needs probes".into()));
    }
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::InvalidRange(format!("partner ratio {ratio} outside [0, 1]")));
    }
    let mut total = 0.0;
    for p in probes {
        let m = (ratio * p.n as f64).floor() as usize;
        let zm = oracle_integrate(mixture, schedule, &p.z, p.n, m, p.cond, guidance(p.cond, omega), substeps)?;
        let a = f.apply(&p.z, omega, p.cond, p.n, Branch::Online)?;
        let b = f.apply(&zm, omega, p.cond, m, Branch::Online)?;
        total += norm_diff(&a, &b);
    }
    Ok(total / probes.len() as f64)
}
