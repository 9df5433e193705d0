//! Consistency function `f(z, w, c, t) = c_skip(t) z + c_out(t) * x0_hat`.
//!
//! `x0_hat` is built from the network output according to the prediction kind:
//!
//! | kind    | `x0_hat`                    |
//! |---------|-----------------------------|
//! | epsilon | `(z - sigma * eps_hat) / alpha` |
//! | x       | `x_hat`                     |
//! | v       | `alpha * z - sigma * v_hat` |

use crate::error::{Error, Result};
use crate::net::{Condition, Denoiser, EmaPair, ForwardCache, NetConfig, PredictionKind};
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundarySpec {
    pub sigma_data: f64,
    pub t_scale: f64,
}

impl Default for BoundarySpec {
    fn default() -> Self {
        Self { sigma_data: 0.5, t_scale: 1e-4 }
    }
}

impl BoundarySpec {
    pub fn new(sigma_data: f64, t_scale: f64) -> Result<Self> {
        if !(sigma_data > 0.0 && t_scale > 0.0) {
            return Err(Error::InvalidRange("sigma_data and t_scale must be positive".into()));
        }
        Ok(Self { sigma_data, t_scale })
    }

    /// `(c_skip, c_out)` at continuous time `t`.
    pub fn coeffs_at(&self, t: f64) -> (f64, f64) {
        let x = t / self.t_scale;
        let sd2 = self.sigma_data * self.sigma_data;
        (sd2 / (x * x + sd2), x / (x * x + sd2).sqrt())
    }
}

/// `(c_skip, c_out)` at schedule index `n`; exactly `(1, 0)` at `n = 0`.
pub fn boundary_coeffs(b: &BoundarySpec, schedule: &NoiseSchedule, n: usize) -> Result<(f64, f64)> {
    if n > schedule.num_steps() {
        return Err(Error::IndexOutOfRange { index: n, lo: 0, hi: schedule.num_steps() });
    }
    Ok(b.coeffs_at(schedule.t(n)))
}

/// Which parameter copy evaluates the function.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Online,
    /// EMA target, never differentiated.
    Target,
}

/// Anything that maps a noisy point to a trajectory origin estimate.
pub trait ConsistencyFn {
    fn apply(&self, z: &[f64], omega: f64, cond: Condition, n: usize, branch: Branch) -> Result<Vec<f64>>;
}

/// `f(z) = z` for every input. The exact consistency function of data whose
/// PF-ODE trajectories are constant (standard normal under VP).
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityConsistency;

impl ConsistencyFn for IdentityConsistency {
    fn apply(&self, z: &[f64], _: f64, _: Condition, _: usize, _: Branch) -> Result<Vec<f64>> {
        Ok(z.to_vec())
    }
}

/// Online pass state kept for backpropagation.
#[derive(Debug, Clone)]
pub struct ApplyCache {
    net: ForwardCache,
    /// `d f / d net_output` (a scalar multiple of the identity).
    out_scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyModel {
    pub ema: EmaPair,
    pub boundary: BoundarySpec,
    pub schedule: NoiseSchedule,
}

impl ConsistencyModel {
    pub fn new(net: Denoiser, boundary: BoundarySpec, schedule: NoiseSchedule) -> Result<Self> {
        if !net.config().omega_conditioned {
            return Err(Error::Unsupported("consistency networks take an omega input".into()));
        }
        Ok(Self { ema: EmaPair::new(net), boundary, schedule })
    }

    /// Copy a trained (omega-free) teacher network into an omega-conditioned
    /// student with a zero omega projection; the target starts equal to the online copy.
    pub fn init_from_teacher(teacher: &Denoiser, boundary: BoundarySpec, schedule: NoiseSchedule) -> Result<Self> {
        if teacher.config().omega_conditioned {
            return Err(Error::ShapeMismatch("teacher network already has an omega pathway".into()));
        }
        let cfg = NetConfig { omega_conditioned: true, ..teacher.config().clone() };
        let mut net = Denoiser::zeros(cfg)?;
        net.copy_shared_from(teacher)?;
        Self::new(net, boundary, schedule)
    }

    pub fn prediction_kind(&self) -> PredictionKind {
        self.ema.online.prediction_kind()
    }

    pub fn data_dim(&self) -> usize {
        self.ema.online.data_dim()
    }

    pub fn online(&self) -> &Denoiser {
        &self.ema.online
    }

    pub fn target(&self) -> &Denoiser {
        self.ema.target()
    }

    /// `(c_skip, c_out, a, b)` with `f = c_skip z + c_out (a z + b net(z))`.
    fn coefficients(&self, n: usize) -> Result<(f64, f64, f64, f64)> {
        let (c_skip, c_out) = boundary_coeffs(&self.boundary, &self.schedule, n)?;
        let (alpha, sigma) = self.schedule.alpha_sigma(n)?;
        let (a, b) = match self.prediction_kind() {
            PredictionKind::Epsilon => {
                if alpha == 0.0 {
                    return Err(Error::NonFinite("alpha = 0 in epsilon parameterization".into()));
                }
                (1.0 / alpha, -sigma / alpha)
            }
            PredictionKind::X => (0.0, 1.0),
            PredictionKind::V => (alpha, -sigma),
        };
        Ok((c_skip, c_out, a, b))
    }

    fn combine(&self, z: &[f64], net_out: &[f64], n: usize) -> Result<(Vec<f64>, f64)> {
        let (c_skip, c_out, a, b) = self.coefficients(n)?;
        if c_out == 0.0 {
            return Ok((z.to_vec(), 0.0));
        }
        let out = z.iter().zip(net_out).map(|(zi, oi)| c_skip * zi + c_out * (a * zi + b * oi)).collect();
        Ok((out, c_out * b))
    }

    /// Consistency output for a given raw network prediction at index `n`.
    pub fn from_prediction(&self, z: &[f64], prediction: &[f64], n: usize) -> Result<Vec<f64>> {
        crate::error::check_dim(z.len(), prediction.len())?;
        Ok(self.combine(z, prediction, n)?.0)
    }

    pub fn consistency_apply(&self, z: &[f64], omega: f64, cond: Condition, n: usize, use_target: bool) -> Result<Vec<f64>> {
        let net = if use_target { self.ema.target() } else { &self.ema.online };
        let out = net.forward(z, self.schedule.t(n), Some(omega), cond)?;
        Ok(self.combine(z, &out, n)?.0)
    }

    /// Online evaluation that keeps what [`Self::backprop`] needs.
    pub fn apply_cached(&self, z: &[f64], omega: f64, cond: Condition, n: usize) -> Result<(Vec<f64>, ApplyCache)> {
        let (out, cache) = self.ema.online.forward_cached(z, self.schedule.t(n), Some(omega), cond)?;
        let (f, out_scale) = self.combine(z, &out, n)?;
        Ok((f, ApplyCache { net: cache, out_scale }))
    }

    /// Accumulate `dL/dtheta` (online parameters) from `dL/df`.
    pub fn backprop(&self, cache: &ApplyCache, d_out: &[f64], grad: &mut [f64]) -> Result<()> {
        if cache.out_scale == 0.0 {
            return Ok(());
        }
        let upstream: Vec<f64> = d_out.iter().map(|g| g * cache.out_scale).collect();
        self.ema.online.accumulate_grad(&cache.net, &upstream, grad)
    }
}

impl ConsistencyFn for ConsistencyModel {
    fn apply(&self, z: &[f64], omega: f64, cond: Condition, n: usize, branch: Branch) -> Result<Vec<f64>> {
        self.consistency_apply(z, omega, cond, n, branch == Branch::Target)
    }
}
