//! Probability-flow ODE step functions on the discrete schedule.
//!
//! Every step function returns the *increment* `z_to - z_from`, so a guided
//! step can be formed as `z + (1 + w) inc_c - w inc_null`. Steps move from a
//! larger index `n_from` to a smaller one `n_to`.

use crate::error::{check_dim, Error, Result};
use crate::net::Condition;
use crate::schedule::NoiseSchedule;
use crate::teacher::{EpsModel, MixtureSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverKind {
    Ddim,
    Dpm2,
    Dpmpp2,
    /// Dense RK4 reference; analytic teachers only.
    OracleRk4,
}

impl SolverKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ddim" => Some(SolverKind::Ddim),
            "dpm2" | "dpm-solver-2" => Some(SolverKind::Dpm2),
            "dpmpp2" | "dpm-solver++-2" => Some(SolverKind::Dpmpp2),
            "oracle" | "rk4" => Some(SolverKind::OracleRk4),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            SolverKind::Ddim => "ddim",
            SolverKind::Dpm2 => "dpm2",
            SolverKind::Dpmpp2 => "dpmpp2",
            SolverKind::OracleRk4 => "oracle",
        }
    }
}

/// One recorded solver invocation.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverStep {
    pub z_from: Vec<f64>,
    pub n_from: usize,
    pub n_to: usize,
    pub condition: Condition,
    pub increment: Vec<f64>,
}

impl SolverStep {
    pub fn run<M: EpsModel + ?Sized>(
        kind: SolverKind,
        model: &M,
        z: &[f64],
        n_from: usize,
        n_to: usize,
        cond: Condition,
    ) -> Result<Self> {
        let increment = solver_step(kind, model, z, n_from, n_to, cond)?;
        Ok(Self { z_from: z.to_vec(), n_from, n_to, condition: cond, increment })
    }

    pub fn endpoint(&self) -> Vec<f64> {
        self.z_from.iter().zip(&self.increment).map(|(a, b)| a + b).collect()
    }
}

/// Returns `Ok(true)` when the step is degenerate (same endpoints).
fn check_order(s: &NoiseSchedule, n_from: usize, n_to: usize) -> Result<bool> {
    if n_from > s.num_steps() {
        return Err(Error::IndexOutOfRange { index: n_from, lo: 0, hi: s.num_steps() });
    }
    if n_to > n_from {
        return Err(Error::IndexOrder { from: n_from, to: n_to });
    }
    Ok(n_to == n_from)
}

fn diff(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// First-order (DDIM) increment.
pub fn ddim_step<M: EpsModel + ?Sized>(model: &M, z: &[f64], n_from: usize, n_to: usize, cond: Condition) -> Result<Vec<f64>> {
    let s = model.schedule();
    if check_order(s, n_from, n_to)? {
        return Ok(vec![0.0; z.len()]);
    }
    let eps = model.eps(z, n_from, cond)?;
    check_dim(z.len(), eps.len())?;
    Ok(ddim_with_eps(s, z, &eps, n_from, n_to))
}

/// DDIM increment for a given noise prediction. Written as
/// `(a_t/a_s) z - (s_s a_t/a_s - s_t) eps - z`, which equals
/// `(a_t/a_s) z - s_t (s_s a_t / (a_s s_t) - 1) eps - z` and stays finite at `s_t = 0`.
pub fn ddim_with_eps(s: &NoiseSchedule, z: &[f64], eps: &[f64], n_from: usize, n_to: usize) -> Vec<f64> {
    let (a_s, s_s) = s.alpha_sigma_unchecked(n_from);
    let (a_t, s_t) = s.alpha_sigma_unchecked(n_to);
    let cz = a_t / a_s;
    let ce = s_s * a_t / a_s - s_t;
    z.iter().zip(eps).map(|(zi, ei)| cz * zi - ce * ei - zi).collect()
}

/// Midpoint index between the endpoints; ties on odd spans go toward `n_to`.
pub fn midpoint_index(n_from: usize, n_to: usize) -> usize {
    n_to + (n_from - n_to) / 2
}

/// Second-order DPM-Solver increment (noise prediction).
///
/// With `h0 = lambda_to - lambda_from`, `h1 = lambda_mid - lambda_from` and
/// `r = h1 / h0`:
///
/// ```text
/// z_mid = (a_mid/a_s) z - s_mid (e^{h1} - 1) eps_s
/// z_to  = (a_t/a_s) z - s_t (e^{h0} - 1) eps_s - s_t/(2r) (e^{h0} - 1)(eps_mid - eps_s)
/// ```
///
/// Spans of one index have no interior midpoint and steps that land on
/// index 0 have infinite log-SNR; both reduce to the first-order step.
pub fn dpm2_step<M: EpsModel + ?Sized>(model: &M, z: &[f64], n_from: usize, n_to: usize, cond: Condition) -> Result<Vec<f64>> {
    let s = model.schedule();
    if check_order(s, n_from, n_to)? {
        return Ok(vec![0.0; z.len()]);
    }
    let mid = midpoint_index(n_from, n_to);
    if n_to == 0 || mid == n_to {
        return ddim_step(model, z, n_from, n_to, cond);
    }
    let (a_s, _) = s.alpha_sigma_unchecked(n_from);
    let (a_m, s_m) = s.alpha_sigma_unchecked(mid);
    let (a_t, s_t) = s.alpha_sigma_unchecked(n_to);
    let (l_s, l_m, l_t) = (s.lambda_unchecked(n_from), s.lambda_unchecked(mid), s.lambda_unchecked(n_to));
    let h0 = l_t - l_s;
    let h1 = l_m - l_s;
    let r = h1 / h0;

    let eps_s = model.eps(z, n_from, cond)?;
    check_dim(z.len(), eps_s.len())?;
    let em1_h1 = h1.exp_m1();
    let z_mid: Vec<f64> = z.iter().zip(&eps_s).map(|(zi, ei)| a_m / a_s * zi - s_m * em1_h1 * ei).collect();
    let eps_m = model.eps(&z_mid, mid, cond)?;
    let em1_h0 = h0.exp_m1();
    Ok(z
        .iter()
        .zip(&eps_s)
        .zip(&eps_m)
        .map(|((zi, es), em)| a_t / a_s * zi - s_t * em1_h0 * es - s_t / (2.0 * r) * em1_h0 * (em - es) - zi)
        .collect())
}

/// Data prediction `(z - s eps) / a`.
fn x_pred<M: EpsModel + ?Sized>(model: &M, z: &[f64], n: usize, cond: Condition) -> Result<Vec<f64>> {
    let (a, sg) = model.schedule().alpha_sigma_unchecked(n);
    let eps = model.eps(z, n, cond)?;
    check_dim(z.len(), eps.len())?;
    Ok(z.iter().zip(&eps).map(|(zi, ei)| (zi - sg * ei) / a).collect())
}

/// Second-order DPM-Solver++ increment (data prediction).
///
/// ```text
/// z_mid = (s_mid/s_s) z - a_mid (e^{-h1} - 1) x_s
/// z_to  = (s_t/s_s) z - a_t (e^{-h0} - 1) x_s - a_t/(2r) (e^{-h0} - 1)(x_mid - x_s)
/// ```
pub fn dpmpp2_step<M: EpsModel + ?Sized>(model: &M, z: &[f64], n_from: usize, n_to: usize, cond: Condition) -> Result<Vec<f64>> {
    let s = model.schedule();
    if check_order(s, n_from, n_to)? {
        return Ok(vec![0.0; z.len()]);
    }
    let mid = midpoint_index(n_from, n_to);
    if n_to == 0 || mid == n_to {
        return ddim_step(model, z, n_from, n_to, cond);
    }
    let (_, s_s) = s.alpha_sigma_unchecked(n_from);
    let (a_m, s_m) = s.alpha_sigma_unchecked(mid);
    let (a_t, s_t) = s.alpha_sigma_unchecked(n_to);
    let (l_s, l_m, l_t) = (s.lambda_unchecked(n_from), s.lambda_unchecked(mid), s.lambda_unchecked(n_to));
    let h0 = l_t - l_s;
    let h1 = l_m - l_s;
    let r = h1 / h0;

    let x_s = x_pred(model, z, n_from, cond)?;
    let em1_h1 = (-h1).exp_m1();
    let z_mid: Vec<f64> = z.iter().zip(&x_s).map(|(zi, xi)| s_m / s_s * zi - a_m * em1_h1 * xi).collect();
    let x_m = x_pred(model, &z_mid, mid, cond)?;
    let em1_h0 = (-h0).exp_m1();
    Ok(z
        .iter()
        .zip(&x_s)
        .zip(&x_m)
        .map(|((zi, xs), xm)| s_t / s_s * zi - a_t * em1_h0 * xs - a_t / (2.0 * r) * em1_h0 * (xm - xs) - zi)
        .collect())
}

/// Dispatch on solver kind. The oracle kind integrates the exact mixture
/// field with [`ORACLE_SUBSTEPS`] RK4 substeps.
pub fn solver_step<M: EpsModel + ?Sized>(
    kind: SolverKind,
    model: &M,
    z: &[f64],
    n_from: usize,
    n_to: usize,
    cond: Condition,
) -> Result<Vec<f64>> {
    match kind {
        SolverKind::Ddim => ddim_step(model, z, n_from, n_to, cond),
        SolverKind::Dpm2 => dpm2_step(model, z, n_from, n_to, cond),
        SolverKind::Dpmpp2 => dpmpp2_step(model, z, n_from, n_to, cond),
        SolverKind::OracleRk4 => {
            let mixture = model
                .mixture()
                .ok_or_else(|| Error::Unsupported("oracle solver requires an analytic teacher".into()))?;
            let end = oracle_integrate(mixture, model.schedule(), z, n_from, n_to, cond, None, ORACLE_SUBSTEPS)?;
            Ok(diff(&end, z))
        }
    }
}

pub const ORACLE_SUBSTEPS: usize = 10_000;

/// Guided estimate `z + (1 + w) Psi(z, c) - w Psi(z, null)`.
pub fn cfg_solver_step<M: EpsModel + ?Sized>(
    model: &M,
    z: &[f64],
    n_from: usize,
    n_to: usize,
    omega: f64,
    cond: Condition,
    kind: SolverKind,
) -> Result<Vec<f64>> {
    if cond == Condition::Null {
        return Err(Error::MissingCondition("guided step needs a class condition".into()));
    }
    let inc_c = solver_step(kind, model, z, n_from, n_to, cond)?;
    if omega == 0.0 {
        return Ok(z.iter().zip(&inc_c).map(|(a, b)| a + b).collect());
    }
    let inc_u = solver_step(kind, model, z, n_from, n_to, Condition::Null)?;
    Ok(z
        .iter()
        .zip(&inc_c)
        .zip(&inc_u)
        .map(|((zi, c), u)| zi + (1.0 + omega) * c - omega * u)
        .collect())
}

/// Run `steps` equal solver steps from `n_from` down to `n_to`, optionally guided.
#[allow(clippy::too_many_arguments)]
pub fn integrate<M: EpsModel + ?Sized>(
    kind: SolverKind,
    model: &M,
    z: &[f64],
    n_from: usize,
    n_to: usize,
    steps: usize,
    omega: Option<f64>,
    cond: Condition,
) -> Result<Vec<f64>> {
    if steps == 0 || n_to > n_from || !(n_from - n_to).is_multiple_of(steps) {
        return Err(Error::InvalidRange(format!(
            "span {n_from}->{n_to} is not divisible into {steps} equal steps"
        )));
    }
    let k = (n_from - n_to) / steps;
    let mut cur = z.to_vec();
    let mut n = n_from;
    while n > n_to {
        cur = match omega {
            Some(w) => cfg_solver_step(model, &cur, n, n - k, w, cond, kind)?,
            None => {
                let inc = solver_step(kind, model, &cur, n, n - k, cond)?;
                cur.iter().zip(&inc).map(|(a, b)| a + b).collect()
            }
        };
        n -= k;
    }
    Ok(cur)
}

/// Reference solution of the (optionally guided) probability-flow ODE for an
/// analytic mixture, from index `n_from` down to `n_to`.
///
/// The flow map between two schedule points depends only on their
/// noise-to-signal ratios `rho = sigma/alpha`, so the ODE is integrated as
/// `d(z/alpha)/d rho = eps(z)` in the smooth variable `u = ln(rho + delta)`
/// with `substeps` uniform RK4 steps. This covers `n_to = 0` (`rho = 0`).
#[allow(clippy::too_many_arguments)]
pub fn oracle_integrate(
    mixture: &MixtureSpec,
    schedule: &NoiseSchedule,
    z: &[f64],
    n_from: usize,
    n_to: usize,
    cond: Condition,
    omega: Option<f64>,
    substeps: usize,
) -> Result<Vec<f64>> {
    check_dim(mixture.dim(), z.len())?;
    if substeps == 0 {
        return Err(Error::InvalidRange("oracle needs at least one substep".into()));
    }
    if check_order(schedule, n_from, n_to)? {
        return Ok(z.to_vec());
    }
    if omega.is_some() && cond == Condition::Null {
        return Err(Error::MissingCondition("guided oracle needs a class condition".into()));
    }
    let (a_s, s_s) = schedule.alpha_sigma_unchecked(n_from);
    let (a_t, s_t) = schedule.alpha_sigma_unchecked(n_to);
    let rho_s = s_s / a_s;
    let rho_t = s_t / a_t;
    let min_std = mixture.components().iter().map(|c| c.variance.sqrt()).fold(f64::INFINITY, f64::min);
    let delta = (0.1 * min_std).clamp(1e-4, 1e-1);

    let field = |y: &[f64], u: f64| -> Result<Vec<f64>> {
        let rho = (u.exp() - delta).max(0.0);
        let alpha = 1.0 / (1.0 + rho * rho).sqrt();
        let sigma = rho * alpha;
        let zz: Vec<f64> = y.iter().map(|v| alpha * v).collect();
        let eps = match omega {
            None => mixture.eps_at(&zz, alpha, sigma, cond)?,
            Some(w) => {
                let ec = mixture.eps_at(&zz, alpha, sigma, cond)?;
                let eu = mixture.eps_at(&zz, alpha, sigma, Condition::Null)?;
                ec.iter().zip(&eu).map(|(c, u)| (1.0 + w) * c - w * u).collect()
            }
        };
        let scale = rho + delta;
        Ok(eps.into_iter().map(|e| scale * e).collect())
    };

    let u0 = (rho_s + delta).ln();
    let u1 = (rho_t + delta).ln();
    let du = (u1 - u0) / substeps as f64;
    let mut y: Vec<f64> = z.iter().map(|v| v / a_s).collect();
    let axpy = |y: &[f64], k: &[f64], h: f64| -> Vec<f64> { y.iter().zip(k).map(|(a, b)| a + h * b).collect() };
    for i in 0..substeps {
        let u = u0 + du * i as f64;
        let k1 = field(&y, u)?;
        let k2 = field(&axpy(&y, &k1, 0.5 * du), u + 0.5 * du)?;
        let k3 = field(&axpy(&y, &k2, 0.5 * du), u + 0.5 * du)?;
        let k4 = field(&axpy(&y, &k3, du), u + du)?;
        for j in 0..y.len() {
            y[j] += du / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("oracle state at substep {i}")));
        }
    }
    Ok(y.into_iter().map(|v| a_t * v).collect())
}

/// One row of a convergence study.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceRow {
    pub solver: SolverKind,
    pub steps: usize,
    pub k: usize,
    pub step_size: f64,
    pub endpoint_error: f64,
}

/// Endpoint error of `kind` against the oracle over `probes`, for each step count.
#[allow(clippy::too_many_arguments)]
pub fn convergence_study<M: EpsModel + ?Sized>(
    kind: SolverKind,
    model: &M,
    mixture: &MixtureSpec,
    probes: &[Vec<f64>],
    n_from: usize,
    n_to: usize,
    step_counts: &[usize],
    cond: Condition,
    oracle_substeps: usize,
) -> Result<Vec<ConvergenceRow>> {
    let s = model.schedule();
    let refs: Vec<Vec<f64>> = probes
        .iter()
        .map(|z| oracle_integrate(mixture, s, z, n_from, n_to, cond, None, oracle_substeps))
        .collect::<Result<_>>()?;
    let span_t = s.t(n_from) - s.t(n_to);
    step_counts
        .iter()
        .map(|&steps| {
            let mut err = 0.0;
            for (z, r) in probes.iter().zip(&refs) {
                let end = integrate(kind, model, z, n_from, n_to, steps, None, cond)?;
                err += end.iter().zip(r).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            }
            Ok(ConvergenceRow {
                solver: kind,
                steps,
                k: (n_from - n_to) / steps,
                step_size: span_t / steps as f64,
                endpoint_error: err / probes.len() as f64,
            })
        })
        .collect()
}

/// Least-squares slope of `ln(error)` against `ln(step_size)`.
pub fn fitted_order(rows: &[ConvergenceRow]) -> f64 {
    let pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.step_size.ln(), r.endpoint_error.ln())).collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}
