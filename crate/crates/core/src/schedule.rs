//! Discrete variance-preserving noise schedule.
//!
//! Index `n` runs over `0..=N` with continuous time `t_n = n / N`. Index 0 is
//! the data boundary (`alpha = 1`, `sigma = 0`); the per-step variances are
//! linear in `n` and `alpha_bar[n]` is their running product of `1 - beta`.

use crate::error::{check_dim, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    num_steps: usize,
    beta_min: f64,
    beta_max: f64,
    alpha_bar: Vec<f64>,
    alpha: Vec<f64>,
    sigma: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear-beta VP schedule with `num_steps` discrete train timesteps.
    pub fn new(num_steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if num_steps < 2 {
            return Err(Error::InvalidRange(format!("N must be >= 2, got {num_steps}")));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::InvalidRange(format!(
                "need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
            )));
        }
        let mut alpha_bar = Vec::with_capacity(num_steps + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0;
        for i in 1..=num_steps {
            let beta = beta_min + (beta_max - beta_min) * (i - 1) as f64 / (num_steps - 1) as f64;
            acc *= 1.0 - beta;
            alpha_bar.push(acc);
        }
        let alpha = alpha_bar.iter().map(|a| a.sqrt()).collect();
        let sigma = alpha_bar.iter().map(|a| (1.0 - a).sqrt()).collect();
        Ok(Self { num_steps, beta_min, beta_max, alpha_bar, alpha, sigma })
    }

    pub fn num_steps(&self) -> usize {
        self.num_steps
    }

    pub fn beta_min(&self) -> f64 {
        self.beta_min
    }

    pub fn beta_max(&self) -> f64 {
        self.beta_max
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Per-step variance `beta_n` for `1 <= n <= N`.
    pub fn beta(&self, n: usize) -> Result<f64> {
        self.check_index(n, 1)?;
        Ok(self.beta_min + (self.beta_max - self.beta_min) * (n - 1) as f64 / (self.num_steps - 1) as f64)
    }

    pub fn t(&self, n: usize) -> f64 {
        n as f64 / self.num_steps as f64
    }

    fn check_index(&self, n: usize, lo: usize) -> Result<()> {
        if n < lo || n > self.num_steps {
            return Err(Error::IndexOutOfRange { index: n, lo, hi: self.num_steps });
        }
        Ok(())
    }

    /// `(alpha(t_n), sigma(t_n))`.
    pub fn alpha_sigma(&self, n: usize) -> Result<(f64, f64)> {
        self.check_index(n, 0)?;
        Ok((self.alpha[n], self.sigma[n]))
    }

    /// Unchecked variant for hot loops that already validated `n`.
    #[inline]
    pub(crate) fn alpha_sigma_unchecked(&self, n: usize) -> (f64, f64) {
        (self.alpha[n], self.sigma[n])
    }

    /// Central finite-difference estimates of the drift `f = d log(alpha)/dt`
    /// and squared diffusion `g^2 = d sigma^2/dt - 2 f sigma^2` at an interior index.
    pub fn drift_diffusion(&self, n: usize) -> Result<(f64, f64)> {
        if n < 1 || n + 1 > self.num_steps {
            return Err(Error::IndexOutOfRange { index: n, lo: 1, hi: self.num_steps - 1 });
        }
        let dt = 2.0 / self.num_steps as f64;
        let f = (self.alpha[n + 1].ln() - self.alpha[n - 1].ln()) / dt;
        let dsig2 = (self.sigma[n + 1].powi(2) - self.sigma[n - 1].powi(2)) / dt;
        let g2 = dsig2 - 2.0 * f * self.sigma[n].powi(2);
        Ok((f, g2))
    }

    /// Log-SNR `lambda = log(alpha / sigma)`; undefined at index 0.
    pub fn log_snr(&self, n: usize) -> Result<f64> {
        if n == 0 {
            return Err(Error::ZeroSigma);
        }
        self.check_index(n, 1)?;
        Ok(self.lambda_unchecked(n))
    }

    #[inline]
    pub(crate) fn lambda_unchecked(&self, n: usize) -> f64 {
        // 0.5 * log(abar / (1 - abar)) avoids cancellation in alpha/sigma.
        let ab = self.alpha_bar[n];
        0.5 * (ab.ln() - (-ab).ln_1p())
    }

    /// Draw from the transition kernel: `alpha(t_n) z0 + sigma(t_n) eps`.
    pub fn forward_sample(&self, z0: &[f64], n: usize, eps: &[f64]) -> Result<Vec<f64>> {
        check_dim(z0.len(), eps.len())?;
        let (a, s) = self.alpha_sigma(n)?;
        Ok(z0.iter().zip(eps).map(|(z, e)| a * z + s * e).collect())
    }

    pub fn time_grid(&self, k: usize) -> Result<TimeGrid> {
        TimeGrid::new(self.num_steps, k)
    }
}

/// Pairs `(n, n + k)` sampled during distillation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimeGrid {
    pub k: usize,
    pub n_max: usize,
}

impl TimeGrid {
    pub fn new(num_steps: usize, k: usize) -> Result<Self> {
        if k < 1 || k + 1 > num_steps {
            return Err(Error::InvalidK { k, n: num_steps });
        }
        Ok(Self { k, n_max: num_steps - k })
    }

    /// Start indices `1..=N-k`.
    pub fn indices(&self) -> std::ops::RangeInclusive<usize> {
        1..=self.n_max
    }
}

/// VP coefficients recovered from a log-SNR value.
#[inline]
pub fn alpha_sigma_from_lambda(lambda: f64) -> (f64, f64) {
    // alpha^2 = sigmoid(2 lambda), sigma^2 = sigmoid(-2 lambda)
    let a2 = 1.0 / (1.0 + (-2.0 * lambda).exp());
    let s2 = 1.0 / (1.0 + (2.0 * lambda).exp());
    (a2.sqrt(), s2.sqrt())
}
