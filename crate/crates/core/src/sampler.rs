//! Multistep consistency sampling: denoise, re-noise at the next time, repeat.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::consistency::{Branch, ConsistencyFn};
use crate::error::{Error, Result};
use crate::latent::LatentCodec;
use crate::net::Condition;
use crate::schedule::NoiseSchedule;

/// Re-noising indices `tau_1 > tau_2 > ...` visited after the first evaluation at `N`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleSchedule {
    taus: Vec<usize>,
}

impl SampleSchedule {
    pub fn new(taus: Vec<usize>, schedule: &NoiseSchedule) -> Result<Self> {
        let n = schedule.num_steps();
        let mut prev = n;
        for &t in &taus {
            if t >= prev {
                return Err(Error::InvalidRange(format!(
                    "sampling indices must decrease strictly from {n}, got {taus:?}"
                )));
            }
            prev = t;
        }
        Ok(Self { taus })
    }

    /// `steps` evaluations with re-noising at `round(N * j / steps)` for `j = steps-1, ..., 1`.
    pub fn uniform(steps: usize, schedule: &NoiseSchedule) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidRange("at least one sampling step".into()));
        }
        let n = schedule.num_steps() as f64;
        let taus = (1..steps).rev().map(|j| (n * j as f64 / steps as f64).round() as usize).collect();
        Self::new(taus, schedule)
    }

    pub fn taus(&self) -> &[usize] {
        &self.taus
    }

    pub fn steps(&self) -> usize {
        self.taus.len() + 1
    }
}

/// Draw one sample in latent space from its own RNG stream.
#[allow(clippy::too_many_arguments)]
pub fn sample_one<F: ConsistencyFn + ?Sized, R: Rng + ?Sized>(
    f: &F,
    schedule: &NoiseSchedule,
    plan: &SampleSchedule,
    omega: f64,
    cond: Condition,
    dim: usize,
    branch: Branch,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let n_max = schedule.num_steps();
    let (_, sigma_t) = schedule.alpha_sigma(n_max)?;
    let z_t: Vec<f64> = (0..dim).map(|_| sigma_t * rng.sample::<f64, _>(StandardNormal)).collect();
    let mut z = f.apply(&z_t, omega, cond, n_max, branch)?;
    for &tau in plan.taus() {
        let eps: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let noisy = schedule.forward_sample(&z, tau, &eps)?;
        z = f.apply(&noisy, omega, cond, tau, branch)?;
    }
    Ok(z)
}

/// `count` decoded samples. Per-sample seeds are drawn from `rng` up front so
/// results do not depend on evaluation order.
#[allow(clippy::too_many_arguments)]
pub fn multistep_sample<F: ConsistencyFn + ?Sized, R: Rng + ?Sized>(
    f: &F,
    schedule: &NoiseSchedule,
    plan: &SampleSchedule,
    omega: f64,
    cond: Condition,
    count: usize,
    rng: &mut R,
    codec: &LatentCodec,
) -> Result<Vec<Vec<f64>>> {
    let seeds: Vec<u64> = (0..count).map(|_| rng.random()).collect();
    seeds
        .into_iter()
        .map(|seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let z = sample_one(f, schedule, plan, omega, cond, codec.d_latent(), Branch::Online, &mut r)?;
            codec.decode(&z)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::consistency::IdentityConsistency;
    use std::cell::Cell;

    fn sched() -> NoiseSchedule {
        NoiseSchedule::new(1000, 1e-4, 0.02).unwrap()
    }

    struct Counting(Cell<usize>);
    impl ConsistencyFn for Counting {
        fn apply(&self, z: &[f64], _: f64, _: Condition, _: usize, _: Branch) -> Result<Vec<f64>> {
            self.0.set(self.0.get() + 1);
            Ok(z.iter().map(|v| 0.5 * v).collect())
        }
    }

    #[test]
    fn uniform_schedule_values() {
        assert_eq!(SampleSchedule::uniform(4, &sched()).unwrap().taus(), &[750, 500, 250]);
        assert!(SampleSchedule::uniform(1, &sched()).unwrap().taus().is_empty());
        assert_eq!(SampleSchedule::uniform(2, &sched()).unwrap().steps(), 2);
        assert!(SampleSchedule::uniform(0, &sched()).is_err());
        assert!(SampleSchedule::new(vec![500, 500], &sched()).is_err());
        assert!(SampleSchedule::new(vec![1000], &sched()).is_err());
        assert!(SampleSchedule::new(vec![999, 0], &sched()).is_ok());
    }

    #[test]
    fn evaluation_count_matches_steps() {
        let codec = LatentCodec::identity(2);
        for steps in [1, 2, 4] {
            let f = Counting(Cell::new(0));
            let plan = SampleSchedule::uniform(steps, &sched()).unwrap();
            let out = multistep_sample(&f, &sched(), &plan, 1.0, Condition::Null, 5, &mut ChaCha8Rng::seed_from_u64(0), &codec).unwrap();
            assert_eq!(out.len(), 5);
            assert_eq!(f.0.get(), 5 * steps);
        }
    }

    #[test]
    fn single_step_equals_direct_application() {
        let codec = LatentCodec::identity(2);
        let plan = SampleSchedule::uniform(1, &sched()).unwrap();
        let f = Counting(Cell::new(0));
        let out = multistep_sample(&f, &sched(), &plan, 2.0, Condition::Null, 3, &mut ChaCha8Rng::seed_from_u64(9), &codec).unwrap();
        let mut master = ChaCha8Rng::seed_from_u64(9);
        let (_, s) = sched().alpha_sigma(1000).unwrap();
        for got in out {
            let mut r = ChaCha8Rng::seed_from_u64(master.random());
            let z: Vec<f64> = (0..2).map(|_| s * r.sample::<f64, _>(StandardNormal)).collect();
            assert_eq!(got, f.apply(&z, 2.0, Condition::Null, 1000, Branch::Online).unwrap());
        }
    }

    #[test]
    fn renoise_at_index_zero_is_a_no_op() {
        let codec = LatentCodec::identity(2);
        let with_zero = SampleSchedule::new(vec![500, 0], &sched()).unwrap();
        let without = SampleSchedule::new(vec![500], &sched()).unwrap();
        let a = multistep_sample(&IdentityConsistency, &sched(), &with_zero, 0.0, Condition::Null, 4, &mut ChaCha8Rng::seed_from_u64(3), &codec).unwrap();
        let b = multistep_sample(&IdentityConsistency, &sched(), &without, 0.0, Condition::Null, 4, &mut ChaCha8Rng::seed_from_u64(3), &codec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn same_seed_same_samples() {
        let codec = LatentCodec::identity(3);
        let plan = SampleSchedule::uniform(4, &sched()).unwrap();
        let f = Counting(Cell::new(0));
        let a = multistep_sample(&f, &sched(), &plan, 1.0, Condition::Class(0), 6, &mut ChaCha8Rng::seed_from_u64(1), &codec).unwrap();
        let b = multistep_sample(&f, &sched(), &plan, 1.0, Condition::Class(0), 6, &mut ChaCha8Rng::seed_from_u64(1), &codec).unwrap();
        assert_eq!(a, b);
    }
}
