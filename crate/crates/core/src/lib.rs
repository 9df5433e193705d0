//! Latent consistency distillation at desk scale.
//!
//! The crate covers the whole pipeline: a discrete VP noise schedule,
//! Gaussian-mixture and learned noise-prediction teachers, guided PF-ODE
//! solvers, consistency-function parameterizations, one-stage guided
//! distillation and teacher-free fine-tuning, multistep sampling, and the
//! metrics used to check all of it against exact mixture trajectories.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod consistency;
pub mod distill;
pub mod error;
pub mod latent;
pub mod metrics;
pub mod net;
pub mod sampler;
pub mod schedule;
pub mod solver;
pub mod teacher;

pub use error::{Error, Result};
pub use net::{Condition, PredictionKind};
pub use schedule::NoiseSchedule;
