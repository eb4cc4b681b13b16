use std::path::Path;
use std::process::{Command, Output};

fn hyperconv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hyperconv")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY: &str = "\
# tiny eq3 classifier
variant = eq3
stem_channels = 4
stage_depths = 1,1
stage_channels = 4,4
num_classes = 4
image_size = 8
activation = relu
activation_placement = all
total_epochs = 3
warmup_epochs = 1
batch_size = 32
peak_lr = 0.1
seed = 7
";

fn write(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(code(&hyperconv(&[])), 1);
    assert_eq!(code(&hyperconv(&["count-params", "--config", "x", "--bogus"])), 1);
    assert_eq!(code(&hyperconv(&["frobnicate"])), 1);
    assert_eq!(code(&hyperconv(&["--help"])), 0);
    let missing = hyperconv(&["count-params", "--config", "/nonexistent/file.cfg"]);
    assert_eq!(code(&missing), 1);
}

#[test]
fn count_params_matches_the_published_size() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "full.cfg", "preset = full\nvariant = eq3\n");
    let ok = hyperconv(&["count-params", "--config", &cfg, "--expect", "8610000", "--tol-pct", "2"]);
    assert_eq!(code(&ok), 0);
    assert_eq!(stdout(&ok).trim(), "8645732");
    let off = hyperconv(&["count-params", "--config", &cfg, "--expect", "5000000", "--tol-pct", "2"]);
    assert_eq!(code(&off), 2);
    let bad = write(dir.path(), "bad.cfg", "preset = full\nvariant = eq9\n");
    assert_eq!(code(&hyperconv(&["count-params", "--config", &bad])), 1);
}

#[test]
fn train_eval_transform_verify_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write(d, "tiny.cfg", TINY);
    let data = d.join("data");
    let g = hyperconv(&["gen-data", "--kind", "texture", "--count", "64", "--seed", "3", "--out", p(&data)]);
    assert_eq!(code(&g), 0, "{}", String::from_utf8_lossy(&g.stderr));

    let ckpt = d.join("m.ckpt");
    let ckdir = d.join("epochs");
    let t = hyperconv(&[
        "train", "--config", &cfg, "--data", p(&data), "--out", p(&ckpt), "--checkpoint-dir", p(&ckdir),
    ]);
    assert_eq!(code(&t), 0, "{}", String::from_utf8_lossy(&t.stderr));
    let metrics = std::fs::read_to_string(d.join("m.ckpt.metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 4);
    assert!(metrics.starts_with("epoch,lr,train_loss,train_acc,val_loss,val_acc,backoff_count"));
    assert_eq!(std::fs::read_dir(&ckdir).unwrap().count(), 3);

    // Same seed, same bytes.
    let again = d.join("again.ckpt");
    assert_eq!(code(&hyperconv(&["train", "--config", &cfg, "--data", p(&data), "--out", p(&again)])), 0);
    assert_eq!(std::fs::read(&ckpt).unwrap(), std::fs::read(&again).unwrap());
    assert_eq!(metrics, std::fs::read_to_string(d.join("again.ckpt.metrics.csv")).unwrap());

    let e = hyperconv(&["eval", "--ckpt", p(&ckpt), "--data", p(&data)]);
    assert_eq!(code(&e), 0);
    assert!(stdout(&e).contains("accuracy:"));

    let report = d.join("self.csv");
    let v = hyperconv(&["verify", "--ckpt-a", p(&ckpt), "--ckpt-b", p(&ckpt), "--probes", "8", "--report", p(&report)]);
    assert_eq!(code(&v), 0);
    assert!(stdout(&v).contains("max deviation: 0.000000e0"), "{}", stdout(&v));
    assert_eq!(std::fs::read_to_string(&report).unwrap().lines().count(), 9);

    for kind in ["perm", "diag"] {
        let moved = d.join(format!("{kind}.ckpt"));
        let tr = hyperconv(&["transform", "--ckpt", p(&ckpt), "--kind", kind, "--seed", "4", "--out", p(&moved)]);
        assert_eq!(code(&tr), 0, "{kind}: {}", String::from_utf8_lossy(&tr.stderr));
        let v = hyperconv(&["verify", "--ckpt-a", p(&ckpt), "--ckpt-b", p(&moved), "--probes", "16"]);
        assert_eq!(code(&v), 0, "{kind}: {}", stdout(&v));
        let twice = d.join(format!("{kind}2.ckpt"));
        hyperconv(&["transform", "--ckpt", p(&ckpt), "--kind", kind, "--seed", "4", "--out", p(&twice)]);
        assert_eq!(std::fs::read(&moved).unwrap(), std::fs::read(&twice).unwrap());
    }
    // A factored relu network admits no rotations.
    let rot = hyperconv(&["transform", "--ckpt", p(&ckpt), "--kind", "orth", "--out", p(&d.join("o.ckpt"))]);
    assert_eq!(code(&rot), 1);

    let other = d.join("other.ckpt");
    let cfg2 = write(d, "other.cfg", &TINY.replace("seed = 7", "seed = 8"));
    assert_eq!(code(&hyperconv(&["train", "--config", &cfg2, "--data", p(&data), "--out", p(&other)])), 0);
    let v = hyperconv(&["verify", "--ckpt-a", p(&ckpt), "--ckpt-b", p(&other), "--probes", "8"]);
    assert_eq!(code(&v), 2);

    let sp = d.join("sparse.ckpt");
    let s = hyperconv(&["sparsify", "--ckpt", p(&ckpt), "--steps", "5", "--lambda", "1", "--out", p(&sp)]);
    assert_eq!(code(&s), 0, "{}", String::from_utf8_lossy(&s.stderr));
    assert!(stdout(&s).contains("kind: diagonal"), "{}", stdout(&s));
    assert_eq!(code(&hyperconv(&["verify", "--ckpt-a", p(&ckpt), "--ckpt-b", p(&sp), "--probes", "8"])), 0);

    // Softball admits no positive rescaling, so only permutations remain.
    let soft = d.join("soft.ckpt");
    let cfg3 = write(d, "soft.cfg", &TINY.replace("activation = relu", "activation = softball"));
    assert_eq!(code(&hyperconv(&["train", "--config", &cfg3, "--data", p(&data), "--out", p(&soft)])), 0);
    let s = hyperconv(&["sparsify", "--ckpt", p(&soft), "--steps", "5", "--lambda", "1", "--out", p(&sp)]);
    assert_eq!(code(&s), 0, "{}", String::from_utf8_lossy(&s.stderr));
    assert!(stdout(&s).contains("kind: permutation"), "{}", stdout(&s));
}

#[test]
fn injected_blowup_recovers_and_runaway_rate_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = d.join("data");
    hyperconv(&["gen-data", "--kind", "separable", "--count", "32", "--out", p(&data)]);
    let cfg = write(d, "tiny.cfg", TINY.replace("num_classes = 4", "num_classes = 2").as_str());
    let t = hyperconv(&[
        "train", "--config", &cfg, "--data", p(&data), "--out", p(&d.join("m.ckpt")), "--inject-blowup", "2",
    ]);
    assert_eq!(code(&t), 0, "{}", String::from_utf8_lossy(&t.stderr));
    assert!(String::from_utf8_lossy(&t.stderr).contains("backoff at epoch 2"));

    let wild = write(d, "wild.cfg", &TINY.replace("num_classes = 4", "num_classes = 2").replace("peak_lr = 0.1", "peak_lr = 1e300"));
    let t = hyperconv(&["train", "--config", &wild, "--data", p(&data), "--out", p(&d.join("w.ckpt"))]);
    assert_eq!(code(&t), 3, "{}", String::from_utf8_lossy(&t.stderr));
    assert!(!d.join("w.ckpt").exists());
}

#[test]
fn rotation_demo_returns_after_a_full_turn() {
    let dir = tempfile::tempdir().unwrap();
    let prefix = dir.path().join("rot");
    let o = hyperconv(&["pde-demo", "rotate", "--grid", "129", "--time", "6.283185307179586", "--out-prefix", p(&prefix)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    let err: f64 = out
        .lines()
        .find_map(|l| l.strip_prefix("l2 error vs initial data: "))
        .unwrap()
        .parse()
        .unwrap();
    // Same bound as the full-revolution test of the solver suite.
    assert!(err < 0.1, "{out}");
    assert!(dir.path().join("rot_trace.csv").exists());
    assert!(dir.path().join("rot_final.tnsr").exists());
}

#[test]
fn every_pde_demo_writes_a_trace() {
    let dir = tempfile::tempdir().unwrap();
    for problem in ["heat", "wave", "rotate", "quasilinear"] {
        let prefix = dir.path().join(problem);
        let o = hyperconv(&["pde-demo", problem, "--grid", "33", "--steps", "40", "--out-prefix", p(&prefix)]);
        assert_eq!(code(&o), 0, "{problem}: {}", String::from_utf8_lossy(&o.stderr));
        let trace = std::fs::read_to_string(dir.path().join(format!("{problem}_trace.csv"))).unwrap();
        assert!(trace.starts_with("step,time,max_abs,l2"));
        assert!(trace.lines().count() >= 2);
    }
    let o = hyperconv(&["pde-demo", "heat", "--time", "1", "--out-prefix", p(&dir.path().join("x"))]);
    assert_eq!(code(&o), 1);
}

#[test]
fn thread_variable_is_validated() {
    let o = Command::new(env!("CARGO_BIN_EXE_hyperconv"))
        .env("HYPERCONV_THREADS", "zero")
        .args(["pde-demo", "heat", "--grid", "9", "--steps", "1", "--out-prefix", "/tmp/never-written"])
        .output()
        .unwrap();
    assert_eq!(code(&o), 1);
}
