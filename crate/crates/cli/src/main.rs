//! `hyperconv` command-line tool.
//!
//! Exit codes: 0 success, 1 usage or input error, 2 verification failure,
//! 3 unrecoverable training divergence.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use hyperconv::blocks::count_parameters;
use hyperconv::nn::ActivationKind;
use hyperconv::pde::{
    heat_step, linear_advect, quasilinear_step, write_trace_csv, Boundary, BlowupMonitor, LinearOperatorSpec,
    QuasiWeights, StepRecord, WaveSolver,
};
use hyperconv::symmetry::{sparsify_search, transform_network, verify_invariance};
use hyperconv::tensor::{write_tensor, Dtype};
use hyperconv::training::{
    evaluate, load_checkpoint, load_dataset, save_checkpoint, separable_two_class, texture_four_class, train_with,
    write_metrics_csv, RunConfig, TrainHooks, WeightExplosion,
};
use hyperconv::{BlockVariant, ChannelTransform, Model, PdeGrid, Tensor, TransformKind};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "hyperconv", version, about = "Quasi-linear hyperbolic ConvNets: training, symmetry tools and PDE demos")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network described by a key = value config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory holding images.tnsr and labels.tnsr.
        #[arg(long)]
        data: PathBuf,
        /// Final checkpoint.
        #[arg(long)]
        out: PathBuf,
        /// Optional validation dataset directory.
        #[arg(long)]
        val: Option<PathBuf>,
        /// Metrics CSV; defaults to OUT with a .metrics.csv suffix.
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Save every clean epoch into this directory.
        #[arg(long)]
        checkpoint_dir: Option<PathBuf>,
        /// Fault injection: blow the weights up before the first batch of this epoch.
        #[arg(long)]
        inject_blowup: Option<usize>,
    },
    /// Inference-mode loss and accuracy of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 64)]
        batch: usize,
    },
    /// Exact trainable parameter count of a configuration.
    CountParams {
        #[arg(long)]
        config: PathBuf,
        /// Expected count; a relative gap above --tol-pct exits with 2.
        #[arg(long)]
        expect: Option<u64>,
        #[arg(long, default_value_t = 2.0, requires = "expect")]
        tol_pct: f64,
    },
    /// Apply seeded random channel transforms, one per stage.
    Transform {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum)]
        kind: KindArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare two checkpoints on seeded random probes.
    Verify {
        #[arg(long)]
        ckpt_a: PathBuf,
        #[arg(long)]
        ckpt_b: PathBuf,
        #[arg(long, default_value_t = 64)]
        probes: usize,
        /// Per-probe deviations as CSV.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Largest accepted logit deviation.
        #[arg(long, default_value_t = 1e-8)]
        tol: f64,
    },
    /// Search channel transforms that make pointwise weights sparse.
    Sparsify {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 50)]
        steps: usize,
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
        #[arg(long)]
        out: PathBuf,
        /// Transform family; `auto` picks orthogonal when the model admits it.
        #[arg(long, value_enum, default_value_t = SparsifyKind::Auto)]
        kind: SparsifyKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run a finite-difference solver and write a per-step trace.
    PdeDemo {
        #[arg(value_enum)]
        problem: Problem,
        /// Grid points per side.
        #[arg(long, default_value_t = 65)]
        grid: usize,
        #[arg(long, default_value_t = 100)]
        steps: usize,
        /// Integrate to this time instead of a fixed step count (rotate only).
        #[arg(long)]
        time: Option<f64>,
        /// Writes PREFIX_trace.csv and PREFIX_final.tnsr.
        #[arg(long)]
        out_prefix: PathBuf,
    },
    /// Write a synthetic dataset directory.
    GenData {
        #[arg(long, value_enum)]
        kind: DataKind,
        #[arg(long, default_value_t = 256)]
        count: usize,
        #[arg(long, default_value_t = 3)]
        channels: usize,
        #[arg(long, default_value_t = 8)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Perm,
    Diag,
    Orth,
    Gl,
}

#[derive(Clone, Copy, ValueEnum)]
enum SparsifyKind {
    Auto,
    Perm,
    Diag,
    Orth,
}

#[derive(Clone, Copy, ValueEnum)]
enum Problem {
    Heat,
    Wave,
    Rotate,
    Quasilinear,
}

#[derive(Clone, Copy, ValueEnum)]
enum DataKind {
    Separable,
    Texture,
}

/// A check that ran and failed; maps to exit code 2.
#[derive(Debug)]
struct VerificationFailed(String);

impl std::fmt::Display for VerificationFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for VerificationFailed {}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Err(e) = init_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(1);
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<VerificationFailed>().is_some() {
                ExitCode::from(2)
            } else if matches!(e.downcast_ref::<hyperconv::Error>(), Some(hyperconv::Error::Divergence { .. })) {
                ExitCode::from(3)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

/// `HYPERCONV_THREADS` caps the worker pool; the default of 1 keeps every
/// reduction order fixed.
fn init_threads() -> Result<()> {
    let threads = match std::env::var("HYPERCONV_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .with_context(|| format!("HYPERCONV_THREADS must be a positive integer, got '{v}'"))?,
        Err(_) => 1,
    };
    rayon::ThreadPoolBuilder::new().num_threads(threads).build_global()?;
    Ok(())
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train { config, data, out, val, metrics, checkpoint_dir, inject_blowup } => {
            cmd_train(&config, &data, &out, val.as_deref(), metrics, checkpoint_dir.as_deref(), inject_blowup)
        }
        Command::Eval { ckpt, data, batch } => {
            let model = load(&ckpt)?;
            let ds = load_dataset(&data, Some(model.config.num_classes))
                .with_context(|| format!("loading dataset {}", data.display()))?;
            let (loss, acc) = evaluate(&model, &ds, batch)?;
            println!("samples: {}", ds.len());
            println!("loss: {loss:.6}");
            println!("accuracy: {:.4}", acc);
            Ok(())
        }
        Command::CountParams { config, expect, tol_pct } => {
            let cfg = RunConfig::read(&config).with_context(|| format!("reading {}", config.display()))?;
            let count = count_parameters(&Model::zeroed(cfg.network)?);
            println!("{count}");
            if let Some(e) = expect {
                let pct = (count as f64 - e as f64).abs() / e as f64 * 100.0;
                if pct > tol_pct {
                    bail!(VerificationFailed(format!("{count} differs from {e} by {pct:.3}% (> {tol_pct}%)")));
                }
                eprintln!("within {pct:.3}% of {e}");
            }
            Ok(())
        }
        Command::Transform { ckpt, kind, seed, out } => {
            let model = load(&ckpt)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let radial = model.config.activation.kind.is_radial();
            let identity = model.config.activation.kind == ActivationKind::Identity;
            let ts: Vec<ChannelTransform> = model
                .config
                .stage_channels
                .iter()
                .map(|&n| match kind {
                    KindArg::Perm => Ok(ChannelTransform::random_permutation(n, &mut rng)),
                    // Radial activations only admit unit scalings; relu only positive ones.
                    KindArg::Diag if radial => {
                        let d = ChannelTransform::random_diagonal(n, true, &mut rng);
                        let signs: Vec<f64> = d.as_diagonal().expect("diagonal").iter().map(|v| v.signum()).collect();
                        ChannelTransform::diagonal(&signs)
                    }
                    KindArg::Diag => Ok(ChannelTransform::random_diagonal(n, identity, &mut rng)),
                    KindArg::Orth => Ok(ChannelTransform::random_orthogonal(n, &mut rng)),
                    KindArg::Gl => Ok(ChannelTransform::random_general(n, &mut rng)),
                })
                .collect::<hyperconv::Result<_>>()?;
            let moved = transform_network(&model, &ts).context("transforming the network")?;
            save_checkpoint(&moved, &out)?;
            println!("applied {} transforms of kind {}", ts.len(), ts[0].kind().name());
            Ok(())
        }
        Command::Verify { ckpt_a, ckpt_b, probes, report, seed, tol } => {
            let a = load(&ckpt_a)?;
            let b = load(&ckpt_b)?;
            if probes == 0 {
                bail!("--probes must be positive");
            }
            let c = &a.config;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::randn(&[probes, c.in_channels, c.image_size, c.image_size], 1.0, &mut rng);
            let r = verify_invariance(&a, &b, &x)?;
            if let Some(path) = report {
                let mut w = BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?);
                r.write_csv(&mut w)?;
                w.flush()?;
            }
            print!("{}", r.summary());
            if r.max_deviation > tol || r.max_deviation.is_nan() {
                bail!(VerificationFailed(format!("max deviation {:e} exceeds {tol:e}", r.max_deviation)));
            }
            Ok(())
        }
        Command::Sparsify { ckpt, steps, lambda, out, kind, seed } => {
            let model = load(&ckpt)?;
            let kind = match kind {
                SparsifyKind::Perm => TransformKind::Permutation,
                SparsifyKind::Diag => TransformKind::Diagonal,
                SparsifyKind::Orth => TransformKind::Orthogonal,
                // The largest group the network admits; radial activations on
                // factored blocks leave only permutations.
                SparsifyKind::Auto => {
                    let widths = &model.config.stage_channels;
                    let rng = &mut ChaCha8Rng::seed_from_u64(0);
                    let orth: Vec<_> = widths.iter().map(|&n| ChannelTransform::random_orthogonal(n, rng)).collect();
                    let diag = widths.iter().map(|&n| ChannelTransform::diagonal(&vec![2.0; n])).collect::<hyperconv::Result<Vec<_>>>()?;
                    if transform_network(&model, &orth).is_ok() {
                        TransformKind::Orthogonal
                    } else if transform_network(&model, &diag).is_ok() {
                        TransformKind::Diagonal
                    } else {
                        TransformKind::Permutation
                    }
                }
            };
            let o = sparsify_search(&model, kind, steps, lambda, seed)?;
            save_checkpoint(&o.model, &out)?;
            println!("kind: {}", kind.name());
            println!("l1: {:.6e} -> {:.6e}", o.l1_before, o.l1_after);
            println!("near-zero pointwise weights: {} -> {} of {}", o.near_zero_before, o.near_zero_after, o.total);
            Ok(())
        }
        Command::PdeDemo { problem, grid, steps, time, out_prefix } => pde_demo(problem, grid, steps, time, &out_prefix),
        Command::GenData { kind, count, channels, size, seed, out } => {
            let ds = match kind {
                DataKind::Separable => separable_two_class(count, channels, size, seed)?,
                DataKind::Texture => texture_four_class(count, channels, size, seed)?,
            };
            ds.save(&out, Dtype::F64)?;
            println!("wrote {} samples of {:?} in {} classes to {}", ds.len(), ds.image_shape(), ds.class_count, out.display());
            Ok(())
        }
    }
}

fn load(path: &Path) -> Result<Model> {
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn cmd_train(
    config: &Path,
    data: &Path,
    out: &Path,
    val: Option<&Path>,
    metrics: Option<PathBuf>,
    checkpoint_dir: Option<&Path>,
    inject_blowup: Option<usize>,
) -> Result<()> {
    let run = RunConfig::read(config).with_context(|| format!("reading {}", config.display()))?;
    let classes = Some(run.network.num_classes);
    let train_set = load_dataset(data, classes).with_context(|| format!("loading dataset {}", data.display()))?;
    let val_set = val
        .map(|v| load_dataset(v, classes).with_context(|| format!("loading dataset {}", v.display())))
        .transpose()?;
    let model = Model::new(run.network.clone(), run.train.seed)?;
    let mut blast = inject_blowup.map(|e| WeightExplosion::new(e, 0, 1e300));
    let mut hook = |e: usize, b: usize, m: &mut Model| {
        if let Some(x) = blast.as_mut() {
            x.apply(e, b, m);
        }
    };
    let mut report = |m: &hyperconv::training::EpochMetrics| {
        eprintln!(
            "epoch {:>3}  lr {:.4e}  loss {:.5}  acc {:.4}{}",
            m.epoch,
            m.lr,
            m.train_loss,
            m.train_acc,
            m.val_acc.map(|a| format!("  val acc {a:.4}")).unwrap_or_default()
        );
    };
    let hooks = TrainHooks { before_batch: Some(&mut hook), checkpoint_dir, after_epoch: Some(&mut report) };
    let outcome = train_with(model, &train_set, val_set.as_ref(), &run.train, hooks)?;
    for b in &outcome.backoffs {
        eprintln!("backoff at epoch {} batch {}: {} (lr scale now {})", b.epoch, b.batch, b.reason, b.lr_scale);
    }
    save_checkpoint(&outcome.model, out)?;
    let metrics = metrics.unwrap_or_else(|| {
        let mut p = out.as_os_str().to_owned();
        p.push(".metrics.csv");
        PathBuf::from(p)
    });
    let mut w = BufWriter::new(File::create(&metrics).with_context(|| format!("creating {}", metrics.display()))?);
    write_metrics_csv(&outcome.metrics, &mut w)?;
    w.flush()?;
    let last = outcome.metrics.last().expect("at least one epoch");
    println!("final train accuracy: {:.4}", last.train_acc);
    println!("checkpoint: {}", out.display());
    println!("metrics: {}", metrics.display());
    Ok(())
}

fn bump(cx: f64, cy: f64, s: f64) -> impl Fn(f64, f64) -> f64 {
    move |x, y| (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * s * s)).exp()
}

fn pde_demo(problem: Problem, grid: usize, steps: usize, time: Option<f64>, prefix: &Path) -> Result<()> {
    if grid < 3 {
        bail!("--grid must be at least 3");
    }
    if time.is_some() && !matches!(problem, Problem::Rotate) {
        bail!("--time applies to the rotate demo only");
    }
    let n = grid;
    let mut trace = Vec::new();
    let final_grid = match problem {
        Problem::Heat => {
            // Interior of the unit square, zero boundary.
            let h = 1.0 / (n + 1) as f64;
            let g = PdeGrid::new(Tensor::zeros(&[1, n, n]), h, 0.2 * h * h, Boundary::ZeroDirichlet)?.with_origin(h, h);
            let mut g = g.with_field(g.sample(bump(0.5, 0.5, 0.1)));
            trace.push(StepRecord::of(0, &g));
            for s in 1..=steps {
                g = heat_step(&g)?;
                trace.push(StepRecord::of(s, &g));
            }
            g
        }
        Problem::Wave => {
            let h = 1.0 / (n + 1) as f64;
            let g = PdeGrid::new(Tensor::zeros(&[1, n, n]), h, 0.5 * h, Boundary::ZeroDirichlet)?.with_origin(h, h);
            let g = g.with_field(g.sample(bump(0.5, 0.5, 0.08)));
            let mut s = WaveSolver::new(&g, &Tensor::zeros(&[1, n, n]))?;
            let e0 = s.energy();
            trace.push(StepRecord::of(0, &g));
            trace.push(StepRecord::of(1, s.current()));
            while s.steps() < steps {
                s.step();
                trace.push(StepRecord::of(s.steps(), s.current()));
            }
            println!("energy drift: {:.3e}", ((s.energy() - e0) / e0).abs());
            s.current().clone()
        }
        Problem::Rotate => {
            // [-1, 1]^2 with Courant number 1/2 at the corners.
            let h = 2.0 / (n - 1) as f64;
            let g = PdeGrid::centered(Tensor::zeros(&[1, n, n]), h, h / 4.0, Boundary::ZeroDirichlet)?;
            let f = bump(0.2, 0.0, 0.2);
            let mut g = g.with_field(g.sample(&f));
            let u0 = g.u.clone();
            let steps = match time {
                Some(t) if t.is_finite() && t >= 0.0 => {
                    let k = (t / g.tau - 1e-9).ceil().max(0.0) as usize;
                    if k > 0 {
                        g.tau = t / k as f64;
                    }
                    k
                }
                Some(t) => bail!("--time must be finite and >= 0, got {t}"),
                None => steps,
            };
            let spec = LinearOperatorSpec::rotation();
            trace.push(StepRecord::of(0, &g));
            for s in 1..=steps {
                g = linear_advect(&g, &spec, 1)?;
                trace.push(StepRecord::of(s, &g));
            }
            let t = steps as f64 * g.tau;
            let (c, s) = (t.cos(), t.sin());
            let exact = g.sample(|x, y| f(x * c - y * s, x * s + y * c));
            let l2 = |a: &Tensor, b: &Tensor| hyperconv::pde::discrete_l2(&a.zip_with(b, |x, y| x - y).unwrap(), h);
            println!("time: {t:.6}");
            println!("l2 error vs exact rotation: {:.6e}", l2(&g.u, &exact));
            println!("l2 error vs initial data: {:.6e}", l2(&g.u, &u0));
            g
        }
        Problem::Quasilinear => {
            // Scalar u_t = u (u_x + u_y) from a smoothed step; steepens until it blows up.
            let h = 2.0 / (n - 1) as f64;
            let g = PdeGrid::centered(Tensor::zeros(&[1, n, n]), h, 0.25 * h, Boundary::ZeroDirichlet)?;
            let mut g = g.with_field(g.sample(|x, y| 0.5 * ((x + y) / 0.2).tanh()));
            let one = Tensor::ones(&[1, 1]);
            let w = QuasiWeights::Factored { a: one.clone(), b: one.clone(), c: one.clone(), d: one };
            let monitor = BlowupMonitor::new(&g);
            trace.push(StepRecord::of(0, &g));
            for s in 1..=steps {
                g = quasilinear_step(&g, &w, BlockVariant::Eq3)?;
                trace.push(StepRecord::of(s, &g));
                if let Some(b) = monitor.check(s, &g) {
                    println!(
                        "blow-up at step {}: max |u| {:.3e}, max gradient {:.3e}, non-finite {}",
                        b.step, b.max_abs, b.max_grad, b.non_finite
                    );
                    break;
                }
            }
            g
        }
    };
    let base = prefix.as_os_str().to_owned();
    let with = |suffix: &str| {
        let mut p = base.clone();
        p.push(suffix);
        PathBuf::from(p)
    };
    let trace_path = with("_trace.csv");
    let mut w = BufWriter::new(File::create(&trace_path).with_context(|| format!("creating {}", trace_path.display()))?);
    write_trace_csv(&mut w, &trace)?;
    w.flush()?;
    write_tensor(with("_final.tnsr"), &final_grid.u, Dtype::F64)?;
    let last = trace.last().expect("initial record");
    println!("steps: {}", last.step);
    println!("final max |u|: {:.6e}", last.max_abs);
    println!("trace: {}", trace_path.display());
    Ok(())
}
