//! Flat `key = value` run configuration.
//!
//! Every key has a default, so an empty file is a valid configuration.
//! Training defaults are the published LCM hyperparameters, which are tuned
//! for pretrained image models; small 2D runs normally override `lr`, `mu`,
//! `batch`, `k` and `optimizer`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::consistency::BoundarySpec;
use crate::distill::{Metric, TrainConfig};
use crate::error::{Error, Result};
use crate::latent::CodecKind;
use crate::net::{Condition, NetConfig, OptimizerKind, PredictionKind};
use crate::sampler::SampleSchedule;
use crate::schedule::NoiseSchedule;
use crate::solver::SolverKind;
use crate::teacher::{Component, MixtureSpec, TeacherTrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MixtureKind {
    Ring,
    StandardNormal,
    Components,
}

impl MixtureKind {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "ring" => Some(Self::Ring),
            "standard_normal" => Some(Self::StandardNormal),
            "components" => Some(Self::Components),
            _ => None,
        }
    }

    fn as_str(&self) -> &'static str {
        match self {
            Self::Ring => "ring",
            Self::StandardNormal => "standard_normal",
            Self::Components => "components",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TeacherSource {
    Analytic,
    Learned,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,

    pub num_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,

    pub mixture: MixtureKind,
    pub modes: usize,
    pub radius: f64,
    pub mode_std: f64,
    pub classes: usize,
    pub dim: usize,
    /// `weight/m1,m2,.../variance/label` entries separated by `;`.
    pub components: String,
    pub shift: Vec<f64>,
    /// Optional CSV of training samples; mixture samples are drawn otherwise.
    pub data: Option<PathBuf>,
    pub data_count: usize,

    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub embed_dim: usize,
    pub t_freq_min: f64,
    pub t_freq_max: f64,
    pub omega_freq_min: f64,
    pub omega_freq_max: f64,
    pub prediction_kind: PredictionKind,

    pub teacher: TeacherSource,
    pub teacher_checkpoint: Option<PathBuf>,
    pub teacher_iters: u64,
    pub teacher_batch: usize,
    pub teacher_lr: f64,
    pub p_uncond: f64,

    pub sigma_data: f64,
    pub t_scale: f64,

    pub lr: f64,
    pub mu: f64,
    pub batch: usize,
    pub iters: u64,
    pub k: usize,
    pub omega_min: f64,
    pub omega_max: f64,
    pub metric: Metric,
    pub huber_delta: f64,
    pub optimizer: OptimizerKind,
    pub solver: SolverKind,
    pub log_every: u64,
    pub checkpoint_every: u64,
    pub eval_probes: usize,
    pub eval_substeps: usize,

    pub model_checkpoint: Option<PathBuf>,
    pub steps: usize,
    /// Explicit re-noising indices; overrides `steps` when set.
    pub taus: Option<Vec<usize>>,
    pub count: usize,
    pub omega: f64,
    pub class: Option<usize>,
    pub svg: bool,

    pub omegas: Vec<f64>,
    pub projections: usize,
    pub reference_steps: usize,
    pub reference_count: usize,
    pub probes: usize,
    pub probe_substeps: usize,

    pub codec: CodecKind,
    pub d_latent: usize,
    pub codec_checkpoint: Option<PathBuf>,

    pub bench_steps: Vec<usize>,
    pub bench_from: usize,
    pub bench_to: usize,
    pub bench_probes: usize,
    pub bench_substeps: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        let boundary = BoundarySpec::default();
        let net = NetConfig::new(2);
        Self {
            seed: 0,
            out_dir: PathBuf::from("out"),
            num_steps: 1000,
            beta_min: 1e-4,
            beta_max: 0.02,
            mixture: MixtureKind::Ring,
            modes: 8,
            radius: 2.0,
            mode_std: 0.15,
            classes: 1,
            dim: 2,
            components: String::new(),
            shift: vec![1.5, 0.0],
            data: None,
            data_count: 8192,
            hidden_width: net.hidden_width,
            hidden_layers: net.hidden_layers,
            embed_dim: net.embed_dim,
            t_freq_min: net.t_freq_range.0,
            t_freq_max: net.t_freq_range.1,
            omega_freq_min: net.omega_freq_range.0,
            omega_freq_max: net.omega_freq_range.1,
            prediction_kind: PredictionKind::V,
            teacher: TeacherSource::Analytic,
            teacher_checkpoint: None,
            teacher_iters: 5000,
            teacher_batch: 64,
            teacher_lr: 1e-3,
            p_uncond: 0.1,
            sigma_data: boundary.sigma_data,
            t_scale: boundary.t_scale,
            lr: train.lr,
            mu: train.mu,
            batch: train.batch,
            iters: train.iters,
            k: train.k,
            omega_min: train.omega_min,
            omega_max: train.omega_max,
            metric: train.metric,
            huber_delta: 1.0,
            optimizer: train.optimizer,
            solver: train.solver,
            log_every: train.log_every,
            checkpoint_every: 0,
            eval_probes: train.eval_probes,
            eval_substeps: train.eval_substeps,
            model_checkpoint: None,
            steps: 4,
            taus: None,
            count: 1000,
            omega: 8.0,
            class: Some(0),
            svg: false,
            omegas: vec![0.0, 8.0],
            projections: 200,
            reference_steps: 500,
            reference_count: 2000,
            probes: 64,
            probe_substeps: 2000,
            codec: CodecKind::Identity,
            d_latent: 2,
            codec_checkpoint: None,
            bench_steps: vec![5, 10, 20, 40, 80],
            bench_from: 1000,
            bench_to: 200,
            bench_probes: 8,
            bench_substeps: 10_000,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::ConfigValue { key: key.into(), msg: format!("cannot parse `{value}`") })
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse_value(key, v.trim())).collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::ConfigValue { key: key.into(), msg: format!("expected true/false, got `{value}`") }),
    }
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn bad(key: &str, msg: impl Into<String>) -> Error {
    Error::ConfigValue { key: key.into(), msg: msg.into() }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn path_str(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    /// Assign one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value;
        match key {
            "seed" => self.seed = parse_value(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            "num_steps" => self.num_steps = parse_value(key, v)?,
            "beta_min" => self.beta_min = parse_value(key, v)?,
            "beta_max" => self.beta_max = parse_value(key, v)?,
            "mixture" => self.mixture = MixtureKind::parse(v).ok_or_else(|| bad(key, format!("unknown mixture `{v}`")))?,
            "modes" => self.modes = parse_value(key, v)?,
            "radius" => self.radius = parse_value(key, v)?,
            "mode_std" => self.mode_std = parse_value(key, v)?,
            "classes" => self.classes = parse_value(key, v)?,
            "dim" => self.dim = parse_value(key, v)?,
            "components" => self.components = v.to_string(),
            "shift" => self.shift = parse_list(key, v)?,
            "data" => self.data = opt_path(v),
            "data_count" => self.data_count = parse_value(key, v)?,
            "hidden_width" => self.hidden_width = parse_value(key, v)?,
            "hidden_layers" => self.hidden_layers = parse_value(key, v)?,
            "embed_dim" => self.embed_dim = parse_value(key, v)?,
            "t_freq_min" => self.t_freq_min = parse_value(key, v)?,
            "t_freq_max" => self.t_freq_max = parse_value(key, v)?,
            "omega_freq_min" => self.omega_freq_min = parse_value(key, v)?,
            "omega_freq_max" => self.omega_freq_max = parse_value(key, v)?,
            "prediction_kind" => {
                self.prediction_kind = PredictionKind::parse(v).ok_or_else(|| bad(key, format!("unknown kind `{v}`")))?
            }
            "teacher" => {
                self.teacher = match v {
                    "analytic" => TeacherSource::Analytic,
                    "learned" => TeacherSource::Learned,
                    _ => return Err(bad(key, format!("expected analytic or learned, got `{v}`"))),
                }
            }
            "teacher_checkpoint" => self.teacher_checkpoint = opt_path(v),
            "teacher_iters" => self.teacher_iters = parse_value(key, v)?,
            "teacher_batch" => self.teacher_batch = parse_value(key, v)?,
            "teacher_lr" => self.teacher_lr = parse_value(key, v)?,
            "p_uncond" => self.p_uncond = parse_value(key, v)?,
            "sigma_data" => self.sigma_data = parse_value(key, v)?,
            "t_scale" => self.t_scale = parse_value(key, v)?,
            "lr" => self.lr = parse_value(key, v)?,
            "mu" => self.mu = parse_value(key, v)?,
            "batch" => self.batch = parse_value(key, v)?,
            "iters" => self.iters = parse_value(key, v)?,
            "k" => self.k = parse_value(key, v)?,
            "omega_min" => self.omega_min = parse_value(key, v)?,
            "omega_max" => self.omega_max = parse_value(key, v)?,
            "metric" => {
                self.metric = Metric::parse(v, self.huber_delta).ok_or_else(|| bad(key, format!("unknown metric `{v}`")))?
            }
            "huber_delta" => {
                self.huber_delta = parse_value(key, v)?;
                if let Metric::Huber(_) = self.metric {
                    self.metric = Metric::Huber(self.huber_delta);
                }
            }
            "optimizer" => self.optimizer = OptimizerKind::parse(v).ok_or_else(|| bad(key, format!("unknown optimizer `{v}`")))?,
            "solver" => self.solver = SolverKind::parse(v).ok_or_else(|| bad(key, format!("unknown solver `{v}`")))?,
            "log_every" => self.log_every = parse_value(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse_value(key, v)?,
            "eval_probes" => self.eval_probes = parse_value(key, v)?,
            "eval_substeps" => self.eval_substeps = parse_value(key, v)?,
            "model_checkpoint" => self.model_checkpoint = opt_path(v),
            "steps" => self.steps = parse_value(key, v)?,
            "taus" => self.taus = if v.is_empty() { None } else { Some(parse_list(key, v)?) },
            "count" => self.count = parse_value(key, v)?,
            "omega" => self.omega = parse_value(key, v)?,
            "class" => self.class = if v == "none" { None } else { Some(parse_value(key, v)?) },
            "svg" => self.svg = parse_bool(key, v)?,
            "omegas" => self.omegas = parse_list(key, v)?,
            "projections" => self.projections = parse_value(key, v)?,
            "reference_steps" => self.reference_steps = parse_value(key, v)?,
            "reference_count" => self.reference_count = parse_value(key, v)?,
            "probes" => self.probes = parse_value(key, v)?,
            "probe_substeps" => self.probe_substeps = parse_value(key, v)?,
            "codec" => self.codec = CodecKind::parse(v).ok_or_else(|| bad(key, format!("unknown codec `{v}`")))?,
            "d_latent" => self.d_latent = parse_value(key, v)?,
            "codec_checkpoint" => self.codec_checkpoint = opt_path(v),
            "bench_steps" => self.bench_steps = parse_list(key, v)?,
            "bench_from" => self.bench_from = parse_value(key, v)?,
            "bench_to" => self.bench_to = parse_value(key, v)?,
            "bench_probes" => self.bench_probes = parse_value(key, v)?,
            "bench_substeps" => self.bench_substeps = parse_value(key, v)?,
            _ => return Err(Error::UnknownKey(key.into())),
        }
        Ok(())
    }
}

impl RunConfig {
    /// Parse configuration text. `origin` only labels error messages.
    pub fn parse_str(text: &str, origin: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::ConfigParse { path: origin.display().to_string(), line: i + 1, msg };
            let (key, value) = line.split_once('=').ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            let key = key.trim();
            if key.is_empty() || key.contains(char::is_whitespace) {
                return Err(err(format!("malformed key `{key}`")));
            }
            cfg.set(key, value.trim()).map_err(|e| match e {
                Error::ConfigValue { key, msg } => err(format!("{key}: {msg}")),
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("beta_min", self.beta_min),
            ("radius", self.radius),
            ("mode_std", self.mode_std),
            ("teacher_lr", self.teacher_lr),
            ("sigma_data", self.sigma_data),
            ("t_scale", self.t_scale),
            ("lr", self.lr),
            ("huber_delta", self.huber_delta),
            ("t_freq_min", self.t_freq_min),
            ("omega_freq_min", self.omega_freq_min),
        ];
        for (key, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(bad(key, format!("{v} must be positive")));
            }
        }
        let counts = [
            ("num_steps", self.num_steps),
            ("modes", self.modes),
            ("classes", self.classes),
            ("dim", self.dim),
            ("data_count", self.data_count),
            ("hidden_width", self.hidden_width),
            ("hidden_layers", self.hidden_layers),
            ("teacher_batch", self.teacher_batch),
            ("batch", self.batch),
            ("steps", self.steps),
            ("count", self.count),
            ("projections", self.projections),
            ("reference_steps", self.reference_steps),
            ("reference_count", self.reference_count),
            ("probes", self.probes),
            ("probe_substeps", self.probe_substeps),
            ("d_latent", self.d_latent),
            ("bench_probes", self.bench_probes),
            ("bench_substeps", self.bench_substeps),
        ];
        for (key, v) in counts {
            if v == 0 {
                return Err(bad(key, "must be at least 1"));
            }
        }
        if !(self.beta_max > self.beta_min && self.beta_max < 1.0) {
            return Err(bad("beta_max", format!("{} must lie in (beta_min, 1)", self.beta_max)));
        }
        if self.embed_dim == 0 || !self.embed_dim.is_multiple_of(2) {
            return Err(bad("embed_dim", "must be even and positive"));
        }
        if self.t_freq_max < self.t_freq_min {
            return Err(bad("t_freq_max", "below t_freq_min"));
        }
        if self.omega_freq_max < self.omega_freq_min {
            return Err(bad("omega_freq_max", "below omega_freq_min"));
        }
        if !(0.0..=1.0).contains(&self.mu) {
            return Err(bad("mu", format!("{} outside [0, 1]", self.mu)));
        }
        if !(0.0..=1.0).contains(&self.p_uncond) {
            return Err(bad("p_uncond", format!("{} outside [0, 1]", self.p_uncond)));
        }
        if !(self.omega_min <= self.omega_max) {
            return Err(bad("omega_max", format!("omega range [{}, {}] is empty", self.omega_min, self.omega_max)));
        }
        if self.k == 0 || self.k >= self.num_steps {
            return Err(bad("k", format!("{} must lie in [1, num_steps)", self.k)));
        }
        if self.bench_to >= self.bench_from || self.bench_from > self.num_steps {
            return Err(bad("bench_from", format!("span {} -> {} invalid", self.bench_from, self.bench_to)));
        }
        if self.bench_steps.is_empty() || self.bench_steps.contains(&0) {
            return Err(bad("bench_steps", "needs positive step counts"));
        }
        if self.omegas.is_empty() {
            return Err(bad("omegas", "needs at least one value"));
        }
        if let Some(c) = self.class {
            if c >= self.classes && self.mixture == MixtureKind::Ring {
                return Err(bad("class", format!("{c} but the ring has {} classes", self.classes)));
            }
        }
        Ok(())
    }

    /// Canonical `key = value` text; parsing it gives back the same config.
    pub fn echo(&self) -> String {
        let pairs: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("out_dir", self.out_dir.display().to_string()),
            ("num_steps", self.num_steps.to_string()),
            ("beta_min", self.beta_min.to_string()),
            ("beta_max", self.beta_max.to_string()),
            ("mixture", self.mixture.as_str().into()),
            ("modes", self.modes.to_string()),
            ("radius", self.radius.to_string()),
            ("mode_std", self.mode_std.to_string()),
            ("classes", self.classes.to_string()),
            ("dim", self.dim.to_string()),
            ("components", self.components.clone()),
            ("shift", join(&self.shift)),
            ("data", path_str(&self.data)),
            ("data_count", self.data_count.to_string()),
            ("hidden_width", self.hidden_width.to_string()),
            ("hidden_layers", self.hidden_layers.to_string()),
            ("embed_dim", self.embed_dim.to_string()),
            ("t_freq_min", self.t_freq_min.to_string()),
            ("t_freq_max", self.t_freq_max.to_string()),
            ("omega_freq_min", self.omega_freq_min.to_string()),
            ("omega_freq_max", self.omega_freq_max.to_string()),
            ("prediction_kind", self.prediction_kind.as_str().into()),
            ("teacher", match self.teacher {
                TeacherSource::Analytic => "analytic".into(),
                TeacherSource::Learned => "learned".into(),
            }),
            ("teacher_checkpoint", path_str(&self.teacher_checkpoint)),
            ("teacher_iters", self.teacher_iters.to_string()),
            ("teacher_batch", self.teacher_batch.to_string()),
            ("teacher_lr", self.teacher_lr.to_string()),
            ("p_uncond", self.p_uncond.to_string()),
            ("sigma_data", self.sigma_data.to_string()),
            ("t_scale", self.t_scale.to_string()),
            ("lr", self.lr.to_string()),
            ("mu", self.mu.to_string()),
            ("batch", self.batch.to_string()),
            ("iters", self.iters.to_string()),
            ("k", self.k.to_string()),
            ("omega_min", self.omega_min.to_string()),
            ("omega_max", self.omega_max.to_string()),
            ("huber_delta", self.huber_delta.to_string()),
            ("metric", self.metric.as_str().into()),
            ("optimizer", self.optimizer.as_str().into()),
            ("solver", self.solver.as_str().into()),
            ("log_every", self.log_every.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("eval_probes", self.eval_probes.to_string()),
            ("eval_substeps", self.eval_substeps.to_string()),
            ("model_checkpoint", path_str(&self.model_checkpoint)),
            ("steps", self.steps.to_string()),
            ("taus", self.taus.as_deref().map(join).unwrap_or_default()),
            ("count", self.count.to_string()),
            ("omega", self.omega.to_string()),
            ("class", self.class.map(|c| c.to_string()).unwrap_or_else(|| "none".into())),
            ("svg", self.svg.to_string()),
            ("omegas", join(&self.omegas)),
            ("projections", self.projections.to_string()),
            ("reference_steps", self.reference_steps.to_string()),
            ("reference_count", self.reference_count.to_string()),
            ("probes", self.probes.to_string()),
            ("probe_substeps", self.probe_substeps.to_string()),
            ("codec", self.codec.as_str().into()),
            ("d_latent", self.d_latent.to_string()),
            ("codec_checkpoint", path_str(&self.codec_checkpoint)),
            ("bench_steps", join(&self.bench_steps)),
            ("bench_from", self.bench_from.to_string()),
            ("bench_to", self.bench_to.to_string()),
            ("bench_probes", self.bench_probes.to_string()),
            ("bench_substeps", self.bench_substeps.to_string()),
        ];
        let mut out = String::new();
        for (k, v) in pairs {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.num_steps, self.beta_min, self.beta_max)
    }

    pub fn mixture_spec(&self) -> Result<MixtureSpec> {
        match self.mixture {
            MixtureKind::Ring => MixtureSpec::ring(self.modes, self.radius, self.mode_std, self.classes),
            MixtureKind::StandardNormal => Ok(MixtureSpec::standard_normal(self.dim)),
            MixtureKind::Components => parse_components(&self.components),
        }
    }

    fn net_config(&self, dim: usize, classes: usize) -> NetConfig {
        NetConfig {
            data_dim: dim,
            hidden_width: self.hidden_width,
            hidden_layers: self.hidden_layers,
            embed_dim: self.embed_dim,
            num_classes: classes,
            t_freq_range: (self.t_freq_min, self.t_freq_max),
            omega_freq_range: (self.omega_freq_min, self.omega_freq_max),
            omega_conditioned: false,
            prediction_kind: PredictionKind::Epsilon,
        }
    }

    /// Epsilon-prediction network trained by score matching.
    pub fn teacher_net_config(&self, dim: usize, classes: usize) -> NetConfig {
        self.net_config(dim, classes)
    }

    /// Guidance-conditioned consistency network.
    pub fn student_net_config(&self, dim: usize, classes: usize) -> NetConfig {
        NetConfig { omega_conditioned: true, prediction_kind: self.prediction_kind, ..self.net_config(dim, classes) }
    }

    pub fn boundary(&self) -> Result<BoundarySpec> {
        BoundarySpec::new(self.sigma_data, self.t_scale)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            mu: self.mu,
            batch: self.batch,
            iters: self.iters,
            k: self.k,
            omega_min: self.omega_min,
            omega_max: self.omega_max,
            metric: self.metric,
            seed: self.seed,
            optimizer: self.optimizer,
            solver: self.solver,
            log_every: self.log_every,
            eval_probes: self.eval_probes,
            eval_substeps: self.eval_substeps,
        }
    }

    pub fn teacher_train_config(&self) -> TeacherTrainConfig {
        TeacherTrainConfig {
            iters: self.teacher_iters,
            batch: self.teacher_batch,
            lr: self.teacher_lr,
            p_uncond: self.p_uncond,
            seed: self.seed,
            ..TeacherTrainConfig::default()
        }
    }

    pub fn sample_schedule(&self, schedule: &NoiseSchedule) -> Result<SampleSchedule> {
        match &self.taus {
            Some(t) => SampleSchedule::new(t.clone(), schedule),
            None => SampleSchedule::uniform(self.steps, schedule),
        }
    }

    pub fn condition(&self) -> Condition {
        self.class.map_or(Condition::Null, Condition::Class)
    }
}

/// Parse `weight/m1,m2,.../variance/label;...`. Weights are renormalized.
pub fn parse_components(text: &str) -> Result<MixtureSpec> {
    let mut comps = Vec::new();
    for entry in text.split(';').map(str::trim).filter(|e| !e.is_empty()) {
        let fields: Vec<&str> = entry.split('/').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(bad("components", format!("`{entry}` needs weight/mean/variance/label")));
        }
        comps.push(Component {
            weight: parse_value("components", fields[0])?,
            mean: parse_list("components", fields[1])?,
            variance: parse_value("components", fields[2])?,
            label: parse_value("components", fields[3])?,
        });
    }
    if comps.is_empty() {
        return Err(bad("components", "no components given"));
    }
    if comps.iter().any(|c| c.mean.len() != comps[0].mean.len()) {
        return Err(bad("components", "component means differ in dimension"));
    }
    MixtureSpec::normalized(comps).map_err(|e| bad("components", e.to_string()))
}

/// Read and parse a configuration file.
pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let text = String::from_utf8(bytes)
        .map_err(|_| Error::ConfigParse { path: path.display().to_string(), line: 0, msg: "file is not UTF-8".into() })?;
    RunConfig::parse_str(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig> {
        RunConfig::parse_str(text, Path::new("test.cfg"))
    }

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = parse("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.k, 20);
        assert_eq!((cfg.omega_min, cfg.omega_max), (2.0, 14.0));
        assert_eq!(cfg.mu, 0.999943);
        assert_eq!(cfg.lr, 8e-6);
    }

    #[test]
    fn comments_and_values() {
        let cfg = parse("# header\nk = 10  # skip\n\n  lr=1e-3\nmetric = huber\nhuber_delta = 0.5\nclass = none\ntaus = 600, 300\n").unwrap();
        assert_eq!(cfg.k, 10);
        assert_eq!(cfg.lr, 1e-3);
        assert_eq!(cfg.metric, Metric::Huber(0.5));
        assert_eq!(cfg.condition(), Condition::Null);
        assert_eq!(cfg.taus, Some(vec![600, 300]));
        // Delta given before the metric name still applies.
        assert_eq!(parse("huber_delta = 2\nmetric = huber").unwrap().metric, Metric::Huber(2.0));
    }

    #[test]
    fn errors_are_specific() {
        assert!(matches!(parse("mu = 2.0"), Err(Error::ConfigValue { ref key, .. }) if key == "mu"));
        assert!(matches!(parse("bogus = 1"), Err(Error::UnknownKey(ref k)) if k == "bogus"));
        assert!(matches!(parse("k = 20\nno equals here"), Err(Error::ConfigParse { line: 2, .. })));
        assert!(matches!(parse("\nk = ten"), Err(Error::ConfigParse { line: 2, .. })));
        assert!(matches!(parse("k = 1000"), Err(Error::ConfigValue { .. })));
        assert!(matches!(parse("omega_min = 5\nomega_max = 1"), Err(Error::ConfigValue { .. })));
        assert!(matches!(parse("solver = rk9"), Err(Error::ConfigParse { .. })));
    }

    #[test]
    fn echo_round_trips() {
        let mut cfg = parse("k = 7\nmetric = huber\nhuber_delta = 0.25\ntaus = 900,100\nclass = none\ndata = d.csv\nshift = -1,2.5").unwrap();
        cfg.mixture = MixtureKind::Components;
        cfg.components = "0.5/-2,0/0.25/0; 0.5/2,0/0.25/1".into();
        assert_eq!(parse(&cfg.echo()).unwrap(), cfg);
        assert_eq!(parse(&RunConfig::default().echo()).unwrap(), RunConfig::default());
    }

    #[test]
    fn component_list() {
        let m = parse_components("1/-2,0/0.25/0; 3/2,0/0.5/1").unwrap();
        assert_eq!(m.components().len(), 2);
        assert!((m.components()[1].weight - 0.75).abs() < 1e-15);
        assert!(parse_components("1/0/1").is_err());
        assert!(parse_components("1/0/1/0; 1/0,0/1/0").is_err());
        assert!(parse_components("").is_err());
    }

    #[test]
    fn missing_file_is_io() {
        assert!(matches!(parse_config(Path::new("/nonexistent/x.cfg")), Err(Error::Io { .. })));
    }
}
