//! Command-line front end: subcommands, artifact files, exit codes.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::checkpoint::{self, Checkpoint};
use crate::config::{parse_config, RunConfig, TeacherSource};
use crate::consistency::ConsistencyModel;
use crate::distill::{TrainLogRow, Trainer};
use crate::error::{Error, Result};
use crate::latent::{fit_linear_codec, reconstruction_mse, CodecKind, LatentCodec};
use crate::metrics::{endpoint_error, forward_probes, mode_metrics, self_consistency_gap, sliced_w1};
use crate::net::{Condition, Denoiser, Optimizer};
use crate::sampler::multistep_sample;
use crate::schedule::NoiseSchedule;
use crate::solver::{convergence_study, fitted_order, integrate, SolverKind};
use crate::teacher::{score_matching_loss, train_teacher, MixtureSpec, EpsModel, TeacherModel};

#[derive(Debug, Parser)]
#[command(name = "lcmkit", version, about = "Latent consistency distillation on analytic and learned teachers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Run configuration (`key = value` lines).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory for every artifact.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Fit an epsilon-prediction teacher by score matching.
    TeacherTrain,
    /// Fit the linear latent codec to data samples.
    FitCodec,
    /// Guided latent consistency distillation.
    Distill {
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Teacher-free fine-tuning of a distilled model on new data.
    Finetune {
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Multistep sampling from a consistency model.
    Sample {
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        omega: Option<f64>,
    },
    /// Sample quality against the analytic mixture.
    Eval {
        #[arg(long)]
        omega: Option<f64>,
    },
    /// Convergence order of the PF-ODE solvers.
    SolverBench,
}

pub const TEACHER_FILE: &str = "teacher.ckpt";
pub const CODEC_FILE: &str = "codec.ckpt";
pub const MODEL_FILE: &str = "model.ckpt";
pub const FINETUNED_FILE: &str = "finetuned.ckpt";

// Independent random streams per purpose, all derived from the run seed.
const DATA_STREAM: u64 = 1;
const INIT_STREAM: u64 = 2;
const SAMPLE_STREAM: u64 = 3;
const REFERENCE_STREAM: u64 = 4;
const PROBE_STREAM: u64 = 5;
const PROJECTION_STREAM: u64 = 6;
const LOSS_STREAM: u64 = 7;

fn stream(seed: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_add(tag.wrapping_mul(0x9e37_79b9_7f4a_7c15)))
}

/// Parse arguments, run, and return the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match load_config(&cli).and_then(|cfg| run(&cli.command, &cfg)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("lcmkit: {e}");
            e.exit_code()
        }
    }
}

/// Config file (or defaults) with command-line overrides applied.
pub fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => parse_config(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    match &cli.command {
        Command::Sample { steps, omega } => {
            if let Some(s) = steps {
                cfg.steps = *s;
                cfg.taus = None;
            }
            if let Some(w) = omega {
                cfg.omega = *w;
            }
        }
        Command::Eval { omega: Some(w) } => cfg.omegas = vec![*w],
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(command: &Command, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    match command {
        Command::TeacherTrain => cmd_teacher_train(cfg),
        Command::FitCodec => cmd_fit_codec(cfg),
        Command::Distill { resume } => cmd_distill(cfg, resume.as_deref()),
        Command::Finetune { resume } => cmd_finetune(cfg, resume.as_deref()),
        Command::Sample { .. } => cmd_sample(cfg),
        Command::Eval { .. } => cmd_eval(cfg),
        Command::SolverBench => cmd_solver_bench(cfg),
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::from(e))
}

fn data_err(path: &Path, msg: String) -> Error {
    Error::io(path, std::io::Error::new(std::io::ErrorKind::InvalidData, msg))
}

/// Write a CSV with a header row; floats use the shortest round-trip form.
pub fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn coord_header(dim: usize) -> Vec<String> {
    (0..dim).map(|i| format!("x{i}")).collect()
}

/// Samples with coordinates in `x*` columns and an optional `class` column
/// (an integer, or `none` for the null condition).
pub fn read_samples(path: &Path) -> Result<Vec<(Vec<f64>, Condition)>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    let coords: Vec<usize> = header.iter().enumerate().filter(|(_, h)| h.starts_with('x')).map(|(i, _)| i).collect();
    if coords.is_empty() {
        return Err(data_err(path, "no x* coordinate columns".into()));
    }
    let class_col = header.iter().position(|h| h == "class");
    let mut out = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let row = line + 2;
        let x = coords
            .iter()
            .map(|&i| rec[i].trim().parse::<f64>().map_err(|_| data_err(path, format!("row {row}: bad coordinate `{}`", &rec[i]))))
            .collect::<Result<Vec<f64>>>()?;
        let cond = match class_col.map(|i| rec[i].trim()) {
            None | Some("none") => Condition::Class(0),
            Some(c) => Condition::Class(c.parse().map_err(|_| data_err(path, format!("row {row}: bad class `{c}`")))?),
        };
        out.push((x, cond));
    }
    if out.is_empty() {
        return Err(Error::Empty(format!("no samples in {}", path.display())));
    }
    Ok(out)
}

fn write_samples(path: &Path, samples: &[Vec<f64>], cond: Condition, omega: f64) -> Result<()> {
    let dim = samples.first().map_or(0, Vec::len);
    let mut header = coord_header(dim);
    header.push("class".into());
    header.push("omega".into());
    let class = match cond {
        Condition::Class(c) => c.to_string(),
        Condition::Null => "none".into(),
    };
    let rows: Vec<Vec<String>> = samples
        .iter()
        .map(|s| {
            let mut r: Vec<String> = s.iter().map(f64::to_string).collect();
            r.push(class.clone());
            r.push(omega.to_string());
            r
        })
        .collect();
    write_csv(path, &header, &rows)
}

/// Scatter plot of the first two coordinates.
pub fn write_svg(path: &Path, samples: &[Vec<f64>]) -> Result<()> {
    let pts: Vec<(f64, f64)> = samples.iter().filter(|s| s.len() >= 2).map(|s| (s[0], s[1])).collect();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in &pts {
        lo = lo.min(x.min(y));
        hi = hi.max(x.max(y));
    }
    if !(hi > lo) {
        lo -= 1.0;
        hi += 1.0;
    }
    let size = 480.0;
    let scale = size / (hi - lo) * 0.9;
    let pad = size * 0.05;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size}\" height=\"{size}\" viewBox=\"0 0 {size} {size}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    );
    for (x, y) in pts {
        let cx = pad + (x - lo) * scale;
        let cy = size - pad - (y - lo) * scale;
        svg.push_str(&format!("<circle cx=\"{cx:.2}\" cy=\"{cy:.2}\" r=\"1.5\" fill=\"#1f5f9f\" fill-opacity=\"0.5\"/>\n"));
    }
    svg.push_str("</svg>\n");
    fs::write(path, svg).map_err(|e| Error::io(path, e))
}

fn write_train_log(dir: &Path, stem: &str, log: &[TrainLogRow]) -> Result<()> {
    let header = ["iter", "loss", "endpoint_error"].map(String::from);
    let rows: Vec<Vec<String>> = log
        .iter()
        .map(|r| vec![r.iter.to_string(), r.loss.to_string(), r.endpoint_error.map(|e| e.to_string()).unwrap_or_default()])
        .collect();
    write_csv(&dir.join(format!("{stem}_log.csv")), &header, &rows)?;
    // Wall time lives apart so the log itself is reproducible byte for byte.
    let timing: Vec<Vec<String>> = log.iter().map(|r| vec![r.iter.to_string(), r.wall_ms.to_string()]).collect();
    write_csv(&dir.join(format!("{stem}_timing.csv")), &["iter".into(), "wall_ms".into()], &timing)
}

fn or_out(cfg: &RunConfig, explicit: &Option<PathBuf>, file: &str) -> PathBuf {
    explicit.clone().unwrap_or_else(|| cfg.out_dir.join(file))
}

fn num_classes(data: &[(Vec<f64>, Condition)]) -> usize {
    data.iter()
        .map(|(_, c)| match c {
            Condition::Class(k) => k + 1,
            Condition::Null => 1,
        })
        .max()
        .unwrap_or(1)
}

/// Training data in data space: the CSV if configured, else mixture samples.
fn load_data(cfg: &RunConfig, mixture: &MixtureSpec) -> Result<Vec<(Vec<f64>, Condition)>> {
    match &cfg.data {
        Some(p) => read_samples(p),
        None => {
            let mut rng = stream(cfg.seed, DATA_STREAM);
            Ok(mixture.sample(&mut rng, cfg.data_count).into_iter().map(|(x, l)| (x, Condition::Class(l))).collect())
        }
    }
}

fn encode_data(codec: &LatentCodec, data: Vec<(Vec<f64>, Condition)>) -> Result<Vec<(Vec<f64>, Condition)>> {
    if codec.kind() == CodecKind::Identity {
        if let Some((x, _)) = data.first() {
            crate::error::check_dim(codec.d_data(), x.len())?;
        }
        return Ok(data);
    }
    data.into_iter().map(|(x, c)| Ok((codec.encode(&x)?, c))).collect()
}

/// Codec from `codec_checkpoint`, from the output directory when `codec = linear`,
/// or the identity.
fn load_codec(cfg: &RunConfig, dim: usize) -> Result<LatentCodec> {
    match (&cfg.codec_checkpoint, cfg.codec) {
        (Some(p), _) => checkpoint::get_codec(&Checkpoint::load(p)?),
        (None, CodecKind::Linear) => checkpoint::get_codec(&Checkpoint::load(&cfg.out_dir.join(CODEC_FILE))?),
        (None, CodecKind::Identity) => Ok(LatentCodec::identity(dim)),
    }
}

fn check_schedule(found: &NoiseSchedule, cfg: &RunConfig) -> Result<()> {
    if *found != cfg.schedule()? {
        return Err(Error::ShapeMismatch("checkpoint noise schedule differs from the configured one".into()));
    }
    Ok(())
}

fn cmd_teacher_train(cfg: &RunConfig) -> Result<()> {
    let schedule = cfg.schedule()?;
    let mixture = cfg.mixture_spec()?;
    let raw = load_data(cfg, &mixture)?;
    let codec = load_codec(cfg, raw[0].0.len())?;
    let data = encode_data(&codec, raw)?;
    let net_cfg = cfg.teacher_net_config(codec.d_latent(), num_classes(&data));
    let net = Denoiser::new(net_cfg, &mut stream(cfg.seed, INIT_STREAM))?;
    let tcfg = cfg.teacher_train_config();
    let before = score_matching_loss(&net, &schedule, &data, 512, &mut stream(cfg.seed, LOSS_STREAM))?;
    let net = train_teacher(net, &data, &schedule, &tcfg)?;
    let after = score_matching_loss(&net, &schedule, &data, 512, &mut stream(cfg.seed, LOSS_STREAM))?;
    let path = or_out(cfg, &cfg.teacher_checkpoint, TEACHER_FILE);
    checkpoint::teacher_checkpoint(&net, &schedule)?.save(&path)?;
    write_csv(
        &cfg.out_dir.join("teacher_loss.csv"),
        &["stage".into(), "loss".into()],
        &[vec!["init".into(), before.to_string()], vec!["final".into(), after.to_string()]],
    )?;
    println!("teacher-train: loss {before:.4} -> {after:.4}, wrote {}", path.display());
    Ok(())
}

fn cmd_fit_codec(cfg: &RunConfig) -> Result<()> {
    let data: Vec<Vec<f64>> = load_data(cfg, &cfg.mixture_spec()?)?.into_iter().map(|(x, _)| x).collect();
    let codec = fit_linear_codec(&data, cfg.d_latent)?;
    let mse = reconstruction_mse(&codec, &data)?;
    let path = or_out(cfg, &cfg.codec_checkpoint, CODEC_FILE);
    checkpoint::codec_checkpoint(&codec)?.save(&path)?;
    write_csv(
        &cfg.out_dir.join("codec.csv"),
        &["d_data".into(), "d_latent".into(), "reconstruction_mse".into()],
        &[vec![codec.d_data().to_string(), codec.d_latent().to_string(), mse.to_string()]],
    )?;
    println!("fit-codec: {} -> {} dims, reconstruction mse {mse:.3e}, wrote {}", codec.d_data(), codec.d_latent(), path.display());
    Ok(())
}

/// Keep resumed optimizer state when the kind matches; the configured rate wins.
fn adopt_optimizer(trainer: &mut Trainer, cfg: &RunConfig) {
    if trainer.optimizer.kind() != cfg.optimizer {
        trainer.optimizer = Optimizer::new(cfg.optimizer, cfg.lr, trainer.model.online().num_params());
    }
    match &mut trainer.optimizer {
        Optimizer::Sgd { lr } | Optimizer::Adam { lr, .. } => *lr = cfg.lr,
    }
}

/// Run `cfg.iters` iterations in chunks of `checkpoint_every`, saving after each chunk.
fn train_chunks(
    cfg: &RunConfig,
    trainer: &mut Trainer,
    codec: &LatentCodec,
    final_path: &Path,
    mut step: impl FnMut(&mut Trainer, u64) -> Result<Vec<TrainLogRow>>,
) -> Result<Vec<TrainLogRow>> {
    // The output location is not a parameter of the run.
    let echo: String = cfg.echo().lines().filter(|l| !l.starts_with("out_dir ")).map(|l| format!("{l}\n")).collect();
    let chunk = if cfg.checkpoint_every == 0 { cfg.iters.max(1) } else { cfg.checkpoint_every };
    let end = trainer.iter + cfg.iters;
    let mut log = Vec::new();
    while trainer.iter < end {
        let n = chunk.min(end - trainer.iter);
        log.extend(step(trainer, n)?);
        if cfg.checkpoint_every > 0 {
            let p = cfg.out_dir.join(format!("checkpoint_{:08}.ckpt", trainer.iter));
            checkpoint::model_checkpoint(trainer, codec, &echo)?.save(&p)?;
        }
    }
    checkpoint::model_checkpoint(trainer, codec, &echo)?.save(final_path)?;
    Ok(log)
}

fn cmd_distill(cfg: &RunConfig, resume: Option<&Path>) -> Result<()> {
    let schedule = cfg.schedule()?;
    let mixture = cfg.mixture_spec()?;
    let raw = load_data(cfg, &mixture)?;
    let (teacher, codec) = match cfg.teacher {
        TeacherSource::Analytic => {
            if cfg.codec == CodecKind::Linear || cfg.codec_checkpoint.is_some() {
                return Err(Error::Unsupported("the analytic teacher works in data space; use the identity codec".into()));
            }
            (TeacherModel::analytic(mixture.clone(), schedule.clone()), LatentCodec::identity(mixture.dim()))
        }
        TeacherSource::Learned => {
            let ck = Checkpoint::load(&or_out(cfg, &cfg.teacher_checkpoint, TEACHER_FILE))?;
            let (net, s) = checkpoint::load_teacher(&ck)?;
            check_schedule(&s, cfg)?;
            let codec = load_codec(cfg, raw[0].0.len())?;
            (TeacherModel::learned(net, s)?, codec)
        }
    };
    let data = encode_data(&codec, raw)?;
    crate::error::check_dim(teacher.dim(), data[0].0.len())?;
    let mut trainer = match resume {
        Some(p) => {
            let (mut t, c) = checkpoint::load_model(&Checkpoint::load(p)?)?;
            check_schedule(&t.model.schedule, cfg)?;
            if c != codec {
                return Err(Error::ShapeMismatch("resumed checkpoint uses a different codec".into()));
            }
            adopt_optimizer(&mut t, cfg);
            t
        }
        None => {
            let model = match teacher.net() {
                Some(net) => ConsistencyModel::init_from_teacher(net, cfg.boundary()?, schedule.clone())?,
                None => {
                    let classes = mixture.num_classes().max(num_classes(&data));
                    let net = Denoiser::new(cfg.student_net_config(teacher.dim(), classes), &mut stream(cfg.seed, INIT_STREAM))?;
                    ConsistencyModel::new(net, cfg.boundary()?, schedule.clone())?
                }
            };
            Trainer::new(model, &cfg.train_config())
        }
    };
    let start = trainer.iter;
    let tcfg = cfg.train_config();
    let path = or_out(cfg, &cfg.model_checkpoint, MODEL_FILE);
    let log = train_chunks(cfg, &mut trainer, &codec, &path, |t, n| {
        t.run_lcd(&teacher, &data, &crate::distill::TrainConfig { iters: n, ..tcfg.clone() })
    })?;
    write_train_log(&cfg.out_dir, "train", &log)?;
    let last = log.last().map_or(f64::NAN, |r| r.loss);
    println!("distill: iterations {start} -> {}, final loss {last:.4e}, wrote {}", trainer.iter, path.display());
    Ok(())
}

fn cmd_finetune(cfg: &RunConfig, resume: Option<&Path>) -> Result<()> {
    let src = resume.map(Path::to_path_buf).unwrap_or_else(|| or_out(cfg, &cfg.model_checkpoint, MODEL_FILE));
    let (mut trainer, codec) = checkpoint::load_model(&Checkpoint::load(&src)?)?;
    check_schedule(&trainer.model.schedule, cfg)?;
    adopt_optimizer(&mut trainer, cfg);
    let target = cfg.mixture_spec()?.shifted(&cfg.shift)?;
    let data = encode_data(&codec, load_data(cfg, &target)?)?;
    let start = trainer.iter;
    let tcfg = cfg.train_config();
    let path = cfg.out_dir.join(FINETUNED_FILE);
    let log = train_chunks(cfg, &mut trainer, &codec, &path, |t, n| {
        t.run_lcf(&data, &crate::distill::TrainConfig { iters: n, ..tcfg.clone() })
    })?;
    write_train_log(&cfg.out_dir, "finetune", &log)?;
    println!("finetune: iterations {start} -> {}, wrote {}", trainer.iter, path.display());
    Ok(())
}

fn load_for_sampling(cfg: &RunConfig) -> Result<(ConsistencyModel, LatentCodec)> {
    let (t, codec) = checkpoint::load_model(&Checkpoint::load(&or_out(cfg, &cfg.model_checkpoint, MODEL_FILE))?)?;
    Ok((t.model, codec))
}

fn draw_samples(cfg: &RunConfig, model: &ConsistencyModel, codec: &LatentCodec, omega: f64, cond: Condition) -> Result<Vec<Vec<f64>>> {
    let plan = cfg.sample_schedule(&model.schedule)?;
    let mut rng = stream(cfg.seed, SAMPLE_STREAM);
    multistep_sample(model, &model.schedule, &plan, omega, cond, cfg.count, &mut rng, codec)
}

fn cmd_sample(cfg: &RunConfig) -> Result<()> {
    let (model, codec) = load_for_sampling(cfg)?;
    let cond = cfg.condition();
    let samples = draw_samples(cfg, &model, &codec, cfg.omega, cond)?;
    let path = cfg.out_dir.join("samples.csv");
    write_samples(&path, &samples, cond, cfg.omega)?;
    if cfg.svg {
        write_svg(&cfg.out_dir.join("samples.svg"), &samples)?;
    }
    println!("sample: {} samples with {} steps at omega {}, wrote {}", samples.len(), cfg.sample_schedule(&model.schedule)?.steps(), cfg.omega, path.display());
    Ok(())
}

/// `count` samples of the teacher's guided PF-ODE by many-step DDIM from `N(0, sigma_N^2 I)`.
pub fn teacher_reference<R: Rng>(
    teacher: &TeacherModel,
    count: usize,
    steps: usize,
    omega: f64,
    cond: Condition,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    let s = teacher.schedule();
    let n = s.num_steps();
    let (_, sigma) = s.alpha_sigma(n)?;
    let guide = match cond {
        Condition::Class(_) => Some(omega),
        Condition::Null => None,
    };
    (0..count)
        .map(|_| {
            let z: Vec<f64> = (0..teacher.dim()).map(|_| sigma * rng.sample::<f64, _>(StandardNormal)).collect();
            integrate(SolverKind::Ddim, teacher, &z, n, 0, steps, guide, cond)
        })
        .collect()
}

fn cmd_eval(cfg: &RunConfig) -> Result<()> {
    let (model, codec) = load_for_sampling(cfg)?;
    let mixture = cfg.mixture_spec()?;
    let teacher = TeacherModel::analytic(mixture.clone(), model.schedule.clone());
    let cond = cfg.condition();
    let class = match cond {
        Condition::Class(c) => Some(c),
        Condition::Null => None,
    };
    let header = ["omega", "sliced_w1", "mode_coverage", "mode_purity", "endpoint_error", "self_consistency_gap"].map(String::from);
    let mut rows = Vec::new();
    for &omega in &cfg.omegas {
        let samples = draw_samples(cfg, &model, &codec, omega, cond)?;
        let reference = teacher_reference(&teacher, cfg.reference_count, cfg.reference_steps, omega, cond, &mut stream(cfg.seed, REFERENCE_STREAM))?;
        let w1 = sliced_w1(&samples, &reference, cfg.projections, &mut stream(cfg.seed, PROJECTION_STREAM))?;
        let (coverage, purity) = mode_metrics(&samples, &mixture, class)?;
        // Trajectory metrics need the model to live in the mixture's space.
        let (ep, gap) = if codec.kind() == CodecKind::Identity && model.data_dim() == mixture.dim() {
            let probes = forward_probes(&mixture, &model.schedule, cfg.probes, cond, &mut stream(cfg.seed, PROBE_STREAM))?;
            (
                endpoint_error(&model, &mixture, &model.schedule, &probes, omega, cfg.probe_substeps)?.to_string(),
                self_consistency_gap(&model, &mixture, &model.schedule, &probes, omega, 0.5, cfg.probe_substeps)?.to_string(),
            )
        } else {
            (String::new(), String::new())
        };
        println!("eval: omega {omega}: sliced_w1 {w1:.4}, coverage {coverage:.3}, purity {purity:.3}");
        rows.push(vec![omega.to_string(), w1.to_string(), coverage.to_string(), purity.to_string(), ep, gap]);
    }
    write_csv(&cfg.out_dir.join("eval.csv"), &header, &rows)
}

fn cmd_solver_bench(cfg: &RunConfig) -> Result<()> {
    let schedule = cfg.schedule()?;
    let mixture = cfg.mixture_spec()?;
    let teacher = TeacherModel::analytic(mixture.clone(), schedule.clone());
    let mut rng = stream(cfg.seed, PROBE_STREAM);
    let (a, s) = schedule.alpha_sigma(cfg.bench_from)?;
    let probes: Vec<Vec<f64>> = (0..cfg.bench_probes)
        .map(|_| {
            let (x, _) = mixture.sample_one(&mut rng, Condition::Null)?;
            Ok(x.iter().map(|v| a * v + s * rng.sample::<f64, _>(StandardNormal)).collect::<Vec<f64>>())
        })
        .collect::<Result<_>>()?;
    let header = ["solver", "k", "step_size", "endpoint_error", "fitted_order"].map(String::from);
    let mut rows = Vec::new();
    for kind in [SolverKind::Ddim, SolverKind::Dpm2, SolverKind::Dpmpp2] {
        let study = convergence_study(kind, &teacher, &mixture, &probes, cfg.bench_from, cfg.bench_to, &cfg.bench_steps, Condition::Null, cfg.bench_substeps)?;
        let order = fitted_order(&study);
        println!("solver-bench: {} fitted order {order:.3}", kind.as_str());
        for r in &study {
            rows.push(vec![kind.as_str().into(), r.k.to_string(), r.step_size.to_string(), r.endpoint_error.to_string(), order.to_string()]);
        }
    }
    write_csv(&cfg.out_dir.join("solver_bench.csv"), &header, &rows)
}
