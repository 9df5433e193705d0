//! Fully-connected prediction network over a flat parameter vector.
//!
//! Layout of the first hidden pre-activation:
//!
//! ```text
//! h1 = W_in z + b_in + P_t phi(t) + P_omega phi(omega) + E[c]
//! ```
//!
//! where `phi` is a sin/cos Fourier embedding with log-spaced frequencies,
//! `P_omega` exists only for omega-conditioned networks and starts at zero,
//! and `E` is a per-class embedding table whose last row is the null
//! condition. Hidden layers use SiLU; the output layer is affine.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{check_dim, Error, Result};

static GENERATION: AtomicU64 = AtomicU64::new(1);

fn next_generation() -> u64 {
    GENERATION.fetch_add(1, Ordering::Relaxed)
}

/// What the network output means.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictionKind {
    Epsilon,
    X,
    V,
}

impl PredictionKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            PredictionKind::Epsilon => "epsilon",
            PredictionKind::X => "x",
            PredictionKind::V => "v",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "epsilon" | "eps" => Some(PredictionKind::Epsilon),
            "x" => Some(PredictionKind::X),
            "v" => Some(PredictionKind::V),
            _ => None,
        }
    }
}

/// Conditioning input: a class id or the null condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Condition {
    Class(usize),
    Null,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    pub data_dim: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub embed_dim: usize,
    pub num_classes: usize,
    pub t_freq_range: (f64, f64),
    pub omega_freq_range: (f64, f64),
    pub omega_conditioned: bool,
    pub prediction_kind: PredictionKind,
}

impl NetConfig {
    pub fn new(data_dim: usize) -> Self {
        Self {
            data_dim,
            hidden_width: 128,
            hidden_layers: 3,
            embed_dim: 32,
            num_classes: 1,
            t_freq_range: (1.0, 1000.0),
            omega_freq_range: (0.1, 10.0),
            omega_conditioned: false,
            prediction_kind: PredictionKind::Epsilon,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || !self.embed_dim.is_multiple_of(2) {
            return Err(Error::OddDim(self.embed_dim));
        }
        if self.data_dim == 0 || self.hidden_width == 0 || self.hidden_layers == 0 {
            return Err(Error::InvalidRange("network dimensions must be positive".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::InvalidRange("num_classes must be >= 1".into()));
        }
        for (lo, hi) in [self.t_freq_range, self.omega_freq_range] {
            if !(lo > 0.0 && lo <= hi) {
                return Err(Error::InvalidRange(format!("frequency range [{lo}, {hi}]")));
            }
        }
        Ok(())
    }
}

/// Offsets of each parameter block inside the flat vector.
#[derive(Debug, Clone, PartialEq)]
struct Layout {
    w_in: usize,
    b_in: usize,
    p_t: usize,
    p_omega: Option<usize>,
    class_emb: usize,
    /// `(weight, bias)` offsets for hidden layers 2..=L.
    hidden: Vec<(usize, usize)>,
    w_out: usize,
    b_out: usize,
    len: usize,
}

impl Layout {
    fn new(cfg: &NetConfig) -> Self {
        let (d, h, e) = (cfg.data_dim, cfg.hidden_width, cfg.embed_dim);
        let mut off = 0;
        let mut take = |n: usize| {
            let o = off;
            off += n;
            o
        };
        let w_in = take(h * d);
        let b_in = take(h);
        let p_t = take(h * e);
        let p_omega = cfg.omega_conditioned.then(|| take(h * e));
        let class_emb = take((cfg.num_classes + 1) * h);
        let hidden = (1..cfg.hidden_layers).map(|_| (take(h * h), take(h))).collect();
        let w_out = take(d * h);
        let b_out = take(d);
        Self { w_in, b_in, p_t, p_omega, class_emb, hidden, w_out, b_out, len: off }
    }
}

/// Sin/cos features `[sin(f_i v)..., cos(f_i v)...]`.
pub fn fourier_embed(value: f64, embed_dim: usize, base_freqs: &[f64]) -> Result<Vec<f64>> {
    if !embed_dim.is_multiple_of(2) {
        return Err(Error::OddDim(embed_dim));
    }
    check_dim(embed_dim / 2, base_freqs.len())?;
    let mut out = Vec::with_capacity(embed_dim);
    out.extend(base_freqs.iter().map(|f| (f * value).sin()));
    out.extend(base_freqs.iter().map(|f| (f * value).cos()));
    Ok(out)
}

/// `count` frequencies log-spaced over `[lo, hi]`.
pub fn log_spaced(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..count).map(|i| (a + (b - a) * i as f64 / (count - 1) as f64).exp()).collect()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// `out += W x` for row-major `W` of shape `rows x x.len()`.
#[inline]
fn matvec_add(w: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for (o, row) in out.iter_mut().zip(w.chunks_exact(cols)) {
        *o += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// `grad_w += delta x^T` and, if requested, `dx += W^T delta`.
#[inline]
fn matvec_backward(w: &[f64], x: &[f64], delta: &[f64], grad_w: &mut [f64], dx: Option<&mut [f64]>) {
    let cols = x.len();
    for (g_row, &d) in grad_w.chunks_exact_mut(cols).zip(delta) {
        if d != 0.0 {
            g_row.iter_mut().zip(x).for_each(|(g, xi)| *g += d * xi);
        }
    }
    if let Some(dx) = dx {
        for (row, &d) in w.chunks_exact(cols).zip(delta) {
            if d != 0.0 {
                dx.iter_mut().zip(row).for_each(|(o, wi)| *o += d * wi);
            }
        }
    }
}

/// Activations recorded by a forward pass, consumed by [`Denoiser::grad`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    generation: u64,
    z: Vec<f64>,
    t_emb: Vec<f64>,
    omega_emb: Option<Vec<f64>>,
    class_row: usize,
    /// Pre-activations of each hidden layer.
    pre: Vec<Vec<f64>>,
    /// Post-activations of each hidden layer.
    act: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct Denoiser {
    cfg: NetConfig,
    layout: Layout,
    t_freqs: Vec<f64>,
    omega_freqs: Vec<f64>,
    theta: Vec<f64>,
    generation: u64,
}

impl PartialEq for Denoiser {
    fn eq(&self, other: &Self) -> bool {
        self.cfg == other.cfg && self.theta == other.theta
    }
}

impl Denoiser {
    /// Network with all parameters zero.
    pub fn zeros(cfg: NetConfig) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::new(&cfg);
        let half = cfg.embed_dim / 2;
        let t_freqs = log_spaced(cfg.t_freq_range.0, cfg.t_freq_range.1, half);
        let omega_freqs = log_spaced(cfg.omega_freq_range.0, cfg.omega_freq_range.1, half);
        Ok(Self {
            theta: vec![0.0; layout.len],
            layout,
            t_freqs,
            omega_freqs,
            cfg,
            generation: next_generation(),
        })
    }

    /// Randomly initialized network. The omega projection stays zero.
    pub fn new<R: Rng>(cfg: NetConfig, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(cfg)?;
        let (d, h, e) = (net.cfg.data_dim, net.cfg.hidden_width, net.cfg.embed_dim);
        let lay = net.layout.clone();
        let mut fill = |theta: &mut [f64], off: usize, n: usize, std: f64| {
            for v in &mut theta[off..off + n] {
                *v = std * rng.sample::<f64, _>(StandardNormal);
            }
        };
        let th = &mut net.theta;
        fill(th, lay.w_in, h * d, (1.0 / d as f64).sqrt());
        fill(th, lay.p_t, h * e, (2.0 / e as f64).sqrt());
        fill(th, lay.class_emb, (net.cfg.num_classes + 1) * h, 0.5);
        for &(w, _) in &lay.hidden {
            fill(th, w, h * h, (2.0 / h as f64).sqrt());
        }
        fill(th, lay.w_out, d * h, (1.0 / h as f64).sqrt());
        Ok(net)
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn prediction_kind(&self) -> PredictionKind {
        self.cfg.prediction_kind
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    /// Mutable parameter access. Invalidates outstanding forward caches.
    pub fn theta_mut(&mut self) -> &mut [f64] {
        self.generation = next_generation();
        &mut self.theta
    }

    pub fn set_theta(&mut self, theta: &[f64]) -> Result<()> {
        check_dim(self.theta.len(), theta.len())?;
        self.theta_mut().copy_from_slice(theta);
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.layout.len
    }

    pub fn data_dim(&self) -> usize {
        self.cfg.data_dim
    }

    pub fn t_freqs(&self) -> &[f64] {
        &self.t_freqs
    }

    pub fn omega_freqs(&self) -> &[f64] {
        &self.omega_freqs
    }

    /// Range of the omega projection matrix inside `theta`, if present.
    pub fn omega_projection_range(&self) -> Option<std::ops::Range<usize>> {
        let h = self.cfg.hidden_width;
        self.layout.p_omega.map(|o| o..o + h * self.cfg.embed_dim)
    }

    /// `P_omega phi(omega)`: the additive contribution of omega to the first hidden layer.
    pub fn omega_projection(&self, omega: f64) -> Result<Vec<f64>> {
        let Some(off) = self.layout.p_omega else {
            return Err(Error::UnexpectedOmega);
        };
        let h = self.cfg.hidden_width;
        let emb = fourier_embed(omega, self.cfg.embed_dim, &self.omega_freqs)?;
        let mut out = vec![0.0; h];
        matvec_add(&self.theta[off..off + h * self.cfg.embed_dim], &emb, &mut out);
        Ok(out)
    }

    /// Copy every parameter block shared with `src`; blocks `src` lacks
    /// (the omega projection) are zeroed.
    pub fn copy_shared_from(&mut self, src: &Denoiser) -> Result<()> {
        let (a, b) = (&self.cfg, &src.cfg);
        let compatible = a.data_dim == b.data_dim
            && a.hidden_width == b.hidden_width
            && a.hidden_layers == b.hidden_layers
            && a.embed_dim == b.embed_dim
            && a.num_classes == b.num_classes
            && a.t_freq_range == b.t_freq_range;
        if !compatible {
            return Err(Error::ShapeMismatch("teacher and student architectures differ".into()));
        }
        let (dst_l, src_l) = (self.layout.clone(), src.layout.clone());
        let (d, h, e, k) = (a.data_dim, a.hidden_width, a.embed_dim, a.num_classes);
        let mut blocks = vec![
            (dst_l.w_in, src_l.w_in, h * d),
            (dst_l.b_in, src_l.b_in, h),
            (dst_l.p_t, src_l.p_t, h * e),
            (dst_l.class_emb, src_l.class_emb, (k + 1) * h),
            (dst_l.w_out, src_l.w_out, d * h),
            (dst_l.b_out, src_l.b_out, d),
        ];
        for (dh, sh) in dst_l.hidden.iter().zip(&src_l.hidden) {
            blocks.push((dh.0, sh.0, h * h));
            blocks.push((dh.1, sh.1, h));
        }
        let src_theta = src.theta.clone();
        let theta = self.theta_mut();
        for (dst, s, n) in blocks {
            theta[dst..dst + n].copy_from_slice(&src_theta[s..s + n]);
        }
        match (dst_l.p_omega, src_l.p_omega) {
            (Some(dst), Some(s)) => theta[dst..dst + h * e].copy_from_slice(&src_theta[s..s + h * e]),
            (Some(dst), None) => theta[dst..dst + h * e].fill(0.0),
            _ => {}
        }
        Ok(())
    }

    fn class_row(&self, cond: Condition) -> Result<usize> {
        match cond {
            Condition::Class(c) if c < self.cfg.num_classes => Ok(c),
            Condition::Class(c) => Err(Error::UnknownClass { class: c, classes: self.cfg.num_classes }),
            Condition::Null => Ok(self.cfg.num_classes),
        }
    }

    pub fn forward(&self, z: &[f64], t: f64, omega: Option<f64>, cond: Condition) -> Result<Vec<f64>> {
        self.forward_cached(z, t, omega, cond).map(|(out, _)| out)
    }

    /// Forward pass that also records what the backward pass needs.
    pub fn forward_cached(
        &self,
        z: &[f64],
        t: f64,
        omega: Option<f64>,
        cond: Condition,
    ) -> Result<(Vec<f64>, ForwardCache)> {
        check_dim(self.cfg.data_dim, z.len())?;
        let omega = match (self.cfg.omega_conditioned, omega) {
            (true, Some(w)) => Some(w),
            (true, None) => return Err(Error::MissingOmega),
            (false, Some(_)) => return Err(Error::UnexpectedOmega),
            (false, None) => None,
        };
        let class_row = self.class_row(cond)?;
        let (d, h, e) = (self.cfg.data_dim, self.cfg.hidden_width, self.cfg.embed_dim);
        let lay = &self.layout;
        let th = &self.theta;

        let t_emb = fourier_embed(t, e, &self.t_freqs)?;
        let mut pre0 = th[lay.b_in..lay.b_in + h].to_vec();
        matvec_add(&th[lay.w_in..lay.w_in + h * d], z, &mut pre0);
        matvec_add(&th[lay.p_t..lay.p_t + h * e], &t_emb, &mut pre0);
        let omega_emb = match (lay.p_omega, omega) {
            (Some(off), Some(w)) => {
                let emb = fourier_embed(w, e, &self.omega_freqs)?;
                matvec_add(&th[off..off + h * e], &emb, &mut pre0);
                Some(emb)
            }
            _ => None,
        };
        let ce = lay.class_emb + class_row * h;
        pre0.iter_mut().zip(&th[ce..ce + h]).for_each(|(p, c)| *p += c);

        let mut pre = Vec::with_capacity(self.cfg.hidden_layers);
        let mut act = Vec::with_capacity(self.cfg.hidden_layers);
        act.push(pre0.iter().map(|&x| silu(x)).collect::<Vec<_>>());
        pre.push(pre0);
        for &(w, b) in &lay.hidden {
            let mut p = th[b..b + h].to_vec();
            matvec_add(&th[w..w + h * h], act.last().unwrap(), &mut p);
            act.push(p.iter().map(|&x| silu(x)).collect());
            pre.push(p);
        }
        let mut out = th[lay.b_out..lay.b_out + d].to_vec();
        matvec_add(&th[lay.w_out..lay.w_out + d * h], act.last().unwrap(), &mut out);

        let cache = ForwardCache {
            generation: self.generation,
            z: z.to_vec(),
            t_emb,
            omega_emb,
            class_row,
            pre,
            act,
        };
        Ok((out, cache))
    }

    /// `dL/dtheta` given `dL/d(output)` for the cached forward pass.
    pub fn grad(&self, cache: &ForwardCache, upstream: &[f64]) -> Result<Vec<f64>> {
        let mut g = vec![0.0; self.layout.len];
        self.accumulate_grad(cache, upstream, &mut g)?;
        Ok(g)
    }

    /// Adds `dL/dtheta` into `grad`.
    pub fn accumulate_grad(&self, cache: &ForwardCache, upstream: &[f64], grad: &mut [f64]) -> Result<()> {
        if cache.generation != self.generation {
            return Err(Error::StaleCache);
        }
        check_dim(self.cfg.data_dim, upstream.len())?;
        check_dim(self.layout.len, grad.len())?;
        let (d, h, e) = (self.cfg.data_dim, self.cfg.hidden_width, self.cfg.embed_dim);
        let lay = &self.layout;
        let th = &self.theta;

        for (g, u) in grad[lay.b_out..lay.b_out + d].iter_mut().zip(upstream) {
            *g += u;
        }
        let mut d_act = vec![0.0; h];
        {
            let (w_range, g_range) = (lay.w_out..lay.w_out + d * h, lay.w_out..lay.w_out + d * h);
            matvec_backward(&th[w_range], cache.act.last().unwrap(), upstream, &mut grad[g_range], Some(&mut d_act));
        }
        // Walk hidden layers from the top down.
        for layer in (0..self.cfg.hidden_layers).rev() {
            let delta: Vec<f64> = d_act
                .iter()
                .zip(&cache.pre[layer])
                .map(|(da, &p)| da * silu_grad(p))
                .collect();
            if layer == 0 {
                for (g, dl) in grad[lay.b_in..lay.b_in + h].iter_mut().zip(&delta) {
                    *g += dl;
                }
                matvec_backward(&th[lay.w_in..lay.w_in + h * d], &cache.z, &delta, &mut grad[lay.w_in..lay.w_in + h * d], None);
                matvec_backward(&th[lay.p_t..lay.p_t + h * e], &cache.t_emb, &delta, &mut grad[lay.p_t..lay.p_t + h * e], None);
                if let (Some(off), Some(emb)) = (lay.p_omega, &cache.omega_emb) {
                    matvec_backward(&th[off..off + h * e], emb, &delta, &mut grad[off..off + h * e], None);
                }
                let ce = lay.class_emb + cache.class_row * h;
                for (g, dl) in grad[ce..ce + h].iter_mut().zip(&delta) {
                    *g += dl;
                }
            } else {
                let (w, b) = lay.hidden[layer - 1];
                for (g, dl) in grad[b..b + h].iter_mut().zip(&delta) {
                    *g += dl;
                }
                let mut d_prev = vec![0.0; h];
                matvec_backward(&th[w..w + h * h], &cache.act[layer - 1], &delta, &mut grad[w..w + h * h], Some(&mut d_prev));
                d_act = d_prev;
            }
        }
        Ok(())
    }
}

/// `target <- mu * target + (1 - mu) * online`, elementwise.
pub fn ema_update(target: &mut [f64], online: &[f64], mu: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&mu) {
        return Err(Error::InvalidRange(format!("EMA rate must lie in [0, 1], got {mu}")));
    }
    check_dim(target.len(), online.len())?;
    for (t, o) in target.iter_mut().zip(online) {
        *t = mu * *t + (1.0 - mu) * o;
    }
    Ok(())
}

/// Online parameters and their slow-moving target copy.
///
/// The target only ever changes through [`EmaPair::update`]; it never sees a gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaPair {
    pub online: Denoiser,
    target: Denoiser,
}

impl EmaPair {
    /// Target starts as an exact copy of `online`.
    pub fn new(online: Denoiser) -> Self {
        let target = online.clone();
        Self { online, target }
    }

    pub fn from_parts(online: Denoiser, target: Denoiser) -> Result<Self> {
        if online.config() != target.config() {
            return Err(Error::ShapeMismatch("online and target networks differ".into()));
        }
        Ok(Self { online, target })
    }

    pub fn target(&self) -> &Denoiser {
        &self.target
    }

    pub fn update(&mut self, mu: f64) -> Result<()> {
        let online = self.online.theta();
        ema_update(self.target.theta_mut(), online, mu)
    }

    /// Re-synchronize the target with the online parameters.
    pub fn reset_target(&mut self) {
        let theta = self.online.theta().to_vec();
        self.target.theta_mut().copy_from_slice(&theta);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl OptimizerKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sgd" => Some(OptimizerKind::Sgd),
            "adam" => Some(OptimizerKind::Adam),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        }
    }
}

/// First-order optimizers over the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub enum Optimizer {
    Sgd { lr: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64, step: u64, m: Vec<f64>, v: Vec<f64> },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, num_params: usize) -> Self {
        match kind {
            OptimizerKind::Sgd => Self::sgd(lr),
            OptimizerKind::Adam => Self::adam(lr, num_params),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        match self {
            Optimizer::Sgd { .. } => OptimizerKind::Sgd,
            Optimizer::Adam { .. } => OptimizerKind::Adam,
        }
    }

    pub fn sgd(lr: f64) -> Self {
        Optimizer::Sgd { lr }
    }

    pub fn adam(lr: f64, num_params: usize) -> Self {
        Optimizer::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }

    pub fn step(&mut self, theta: &mut [f64], grad: &[f64]) -> Result<()> {
        check_dim(theta.len(), grad.len())?;
        match self {
            Optimizer::Sgd { lr } => {
                theta.iter_mut().zip(grad).for_each(|(p, g)| *p -= *lr * g);
            }
            Optimizer::Adam { lr, beta1, beta2, eps, step, m, v } => {
                check_dim(theta.len(), m.len())?;
                *step += 1;
                let bc1 = 1.0 - beta1.powi(*step as i32);
                let bc2 = 1.0 - beta2.powi(*step as i32);
                for i in 0..theta.len() {
                    m[i] = *beta1 * m[i] + (1.0 - *beta1) * grad[i];
                    v[i] = *beta2 * v[i] + (1.0 - *beta2) * grad[i] * grad[i];
                    let mh = m[i] / bc1;
                    let vh = v[i] / bc2;
                    theta[i] -= *lr * mh / (vh.sqrt() + *eps);
                }
            }
        }
        Ok(())
    }
}
