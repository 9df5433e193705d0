use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use lcmkit::checkpoint::{load_model, Checkpoint};

const SMALL: &str = "\
hidden_width = 24
embed_dim = 8
hidden_layers = 2
iters = 120
lr = 1e-3
mu = 0.99
batch = 16
k = 10
optimizer = adam
log_every = 40
eval_probes = 4
eval_substeps = 400
data_count = 512
count = 64
reference_count = 64
reference_steps = 100
probes = 4
probe_substeps = 400
projections = 32
";

fn lcmkit(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lcmkit")).current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) {
    let out = lcmkit(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn setup(extra: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.cfg"), format!("{SMALL}{extra}")).unwrap();
    dir
}

#[test]
fn same_config_and_seed_give_identical_files() {
    let dir = setup("");
    let p = dir.path();
    for out in ["a", "b"] {
        ok(p, &["distill", "--config", "run.cfg", "--seed", "3", "--out", out]);
        ok(p, &["sample", "--config", "run.cfg", "--seed", "3", "--out", out]);
        ok(p, &["eval", "--config", "run.cfg", "--seed", "3", "--out", out]);
    }
    for f in ["train_log.csv", "samples.csv", "eval.csv", "model.ckpt"] {
        let a = fs::read(p.join("a").join(f)).unwrap();
        let b = fs::read(p.join("b").join(f)).unwrap();
        assert!(a == b, "{f} differs between identical runs");
    }
    // A different seed changes the outputs.
    ok(p, &["distill", "--config", "run.cfg", "--seed", "4", "--out", "c"]);
    assert_ne!(fs::read(p.join("a/train_log.csv")).unwrap(), fs::read(p.join("c/train_log.csv")).unwrap());
    let log = fs::read_to_string(p.join("a/train_log.csv")).unwrap();
    assert_eq!(log.lines().next().unwrap(), "iter,loss,endpoint_error");
    assert_eq!(log.lines().count(), 4);
    assert!(fs::read_to_string(p.join("a/train_timing.csv")).unwrap().starts_with("iter,wall_ms"));
}

#[test]
fn resume_continues_the_run_exactly() {
    let dir = setup("");
    let p = dir.path();
    ok(p, &["distill", "--config", "run.cfg", "--out", "full"]);
    fs::write(p.join("half.cfg"), format!("{SMALL}iters = 60\n")).unwrap();
    ok(p, &["distill", "--config", "half.cfg", "--out", "split"]);
    ok(p, &["distill", "--config", "half.cfg", "--out", "split", "--resume", "split/model.ckpt"]);
    let (full, _) = load_model(&Checkpoint::load(&p.join("full/model.ckpt")).unwrap()).unwrap();
    let (split, _) = load_model(&Checkpoint::load(&p.join("split/model.ckpt")).unwrap()).unwrap();
    assert_eq!(full.iter, 120);
    assert_eq!(split.iter, 120);
    assert_eq!(full.model.online().theta(), split.model.online().theta());
    assert_eq!(full.model.target().theta(), split.model.target().theta());

    // Fine-tuning picks up the distilled iteration counter.
    ok(p, &["finetune", "--config", "half.cfg", "--out", "full", "--resume", "full/model.ckpt"]);
    let (tuned, _) = load_model(&Checkpoint::load(&p.join("full/finetuned.ckpt")).unwrap()).unwrap();
    assert_eq!(tuned.iter, 180);
    let log = fs::read_to_string(p.join("full/finetune_log.csv")).unwrap();
    assert_eq!(log.lines().nth(1).unwrap().split(',').next().unwrap(), "160");
}

#[test]
fn sampling_step_count_and_columns() {
    let dir = setup("");
    let p = dir.path();
    ok(p, &["distill", "--config", "run.cfg", "--out", "o"]);
    ok(p, &["sample", "--config", "run.cfg", "--out", "o", "--steps", "1", "--omega", "2.5"]);
    let one = fs::read_to_string(p.join("o/samples.csv")).unwrap();
    assert_eq!(one.lines().next().unwrap(), "x0,x1,class,omega");
    assert_eq!(one.lines().count(), 65);
    assert!(one.lines().skip(1).all(|l| l.ends_with(",0,2.5")));
    ok(p, &["sample", "--config", "run.cfg", "--out", "o", "--steps", "4", "--omega", "2.5"]);
    assert_ne!(one, fs::read_to_string(p.join("o/samples.csv")).unwrap());
}

#[test]
fn solver_bench_reports_orders() {
    let dir = setup("mixture = components\ncomponents = 0.4/-1.5,0.5/0.09/0; 0.6/1,-1/0.25/1\nbench_probes = 3\n");
    let p = dir.path();
    ok(p, &["solver-bench", "--config", "run.cfg", "--out", "o"]);
    let csv = fs::read_to_string(p.join("o/solver_bench.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "solver,k,step_size,endpoint_error,fitted_order");
    assert_eq!(csv.lines().count(), 1 + 3 * 5);
    for line in csv.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let order: f64 = f[4].parse().unwrap();
        let (lo, hi) = if f[0] == "ddim" { (0.8, 1.2) } else { (1.6, 2.4) };
        assert!((lo..=hi).contains(&order), "{line}");
    }
}

#[test]
fn learned_teacher_with_linear_codec_pipeline() {
    let dir = setup("teacher = learned\ncodec = linear\nteacher_iters = 200\nd_latent = 2\nprediction_kind = epsilon\niters = 40\n");
    let p = dir.path();
    ok(p, &["fit-codec", "--config", "run.cfg", "--out", "o"]);
    ok(p, &["teacher-train", "--config", "run.cfg", "--out", "o"]);
    ok(p, &["distill", "--config", "run.cfg", "--out", "o"]);
    ok(p, &["sample", "--config", "run.cfg", "--out", "o", "--steps", "2"]);
    let codec = fs::read_to_string(p.join("o/codec.csv")).unwrap();
    assert!(codec.starts_with("d_data,d_latent,reconstruction_mse\n2,2,"));
    let loss = fs::read_to_string(p.join("o/teacher_loss.csv")).unwrap();
    let vals: Vec<f64> = loss.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert!(vals[1] < vals[0], "teacher loss did not decrease: {vals:?}");
    let samples = fs::read_to_string(p.join("o/samples.csv")).unwrap();
    assert!(samples.lines().skip(1).all(|l| l.split(',').take(2).all(|v| v.parse::<f64>().unwrap().is_finite())));
}

#[test]
fn errors_map_to_distinct_exit_codes() {
    let dir = setup("");
    let p = dir.path();
    fs::write(p.join("bad_range.cfg"), "mu = 2.0\n").unwrap();
    fs::write(p.join("bad_key.cfg"), "colour = blue\n").unwrap();
    fs::write(p.join("bad.ckpt"), b"NOTMAGIC and more").unwrap();
    let code = |args: &[&str]| lcmkit(p, args).status.code().unwrap();
    assert_eq!(code(&["distill", "--config", "bad_range.cfg", "--out", "o"]), 2);
    assert_eq!(code(&["distill", "--config", "bad_key.cfg", "--out", "o"]), 2);
    assert_eq!(code(&["distill", "--config", "missing.cfg", "--out", "o"]), 3);
    assert_eq!(code(&["sample", "--config", "run.cfg", "--out", "empty"]), 3);
    assert_eq!(code(&["finetune", "--config", "run.cfg", "--out", "o", "--resume", "bad.ckpt"]), 4);
    assert_eq!(code(&["no-such-command"]), 2);

    fs::write(p.join("diverge.cfg"), format!("{SMALL}optimizer = sgd\nlr = 1e4\nprediction_kind = epsilon\n")).unwrap();
    let out = lcmkit(p, &["distill", "--config", "diverge.cfg", "--out", "d"]);
    assert_eq!(out.status.code(), Some(5), "{}", String::from_utf8_lossy(&out.stderr));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert_eq!(stderr.lines().count(), 1, "diagnostic should be one line: {stderr}");
    // A failed run leaves no checkpoint or temporary file behind.
    let left: Vec<_> = fs::read_dir(p.join("d")).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert!(left.iter().all(|n| !n.to_string_lossy().contains("ckpt")), "{left:?}");
}
