//! Command-line interface. [`run`] returns the process exit code: 0 on
//! success, 1 when validation fails or an operation errors, 2 on usage errors.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::bench::{bench_report, dim_pairs, BenchSettings};
use super::checkpoint::{load_checkpoint, save_checkpoint};
use super::config_file::load_config;
use super::fewshot_run::{run_fewshot, summarize, FewShotOptions};
use super::manifest::{load_dataset, MANIFEST_NAME};
use super::points::{load_points_file, write_atomic};
use super::synth::{sample_shape, synth_clouds, synth_dataset, Shape};
use crate::blocks::{percentile_flags, sensitivity_scores, Ablation, Backend, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::geometry::centroid_normalize;
use crate::params::Params;
use crate::training::{
    evaluate, gradcheck_suite, train, Augment, Dataset, GradCheckOptions, OptimizerKind, TrainConfig,
};

#[derive(Debug, Parser)]
#[command(name = "pointkan", version, about = "Point-cloud classification with KAN layers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic shape dataset with a manifest.
    Synth(SynthArgs),
    /// Train a model and optionally save a checkpoint.
    Train(TrainArgs),
    /// Report accuracy of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Print parameter and FLOP tables.
    Bench(BenchArgs),
    /// Score per-point feature sensitivity of the first local block.
    Sensitivity(SensitivityArgs),
    /// Run n-way m-shot episodes.
    Fewshot(FewshotArgs),
}

#[derive(Debug, Args)]
struct ModelArgs {
    /// Model configuration file (`key = value`); defaults to the toy network.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Layer family for every stage (bspline, rational or mlp).
    #[arg(long)]
    backend: Option<Backend>,
    #[arg(long)]
    no_affine: bool,
    #[arg(long)]
    no_spool: bool,
    #[arg(long)]
    no_lfp: bool,
    #[arg(long)]
    no_gfp: bool,
    #[arg(long)]
    no_dwconv: bool,
}

impl ModelArgs {
    /// The configured model for `classes` classes of `points`-point clouds.
    /// A config file fixes its own sizes; otherwise the toy network is sized
    /// to the data.
    fn config(&self, classes: usize, points: usize) -> Result<ModelConfig> {
        let mut cfg = match &self.config {
            Some(p) => load_config(p)?,
            None => {
                let mut c = ModelConfig::toy(classes, Backend::BSpline);
                c.points = points;
                c
            }
        };
        if let Some(b) = self.backend {
            cfg = cfg.with_backend(b);
        }
        let Ablation {
            affine,
            s_pool,
            lfp,
            gfp,
            dwconv,
        } = cfg.ablation;
        cfg.ablation = Ablation {
            affine: affine && !self.no_affine,
            s_pool: s_pool && !self.no_spool,
            lfp: lfp && !self.no_lfp,
            gfp: gfp && !self.no_gfp,
            dwconv: dwconv && !self.no_dwconv,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Output directory; receives `manifest.txt` and one folder per shape.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "sphere,cube,cylinder")]
    shapes: Vec<Shape>,
    #[arg(long, default_value_t = 100)]
    per_class: usize,
    #[arg(long, default_value_t = 256)]
    points: usize,
    /// Standard deviation of the Gaussian jitter.
    #[arg(long, default_value_t = 0.02)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct OptimArgs {
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    /// `adam` or `sgd` (momentum 0.9).
    #[arg(long, default_value = "adam")]
    optimizer: OptimizerKind,
    /// Initial learning rate; defaults to the optimiser's usual value.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, default_value_t = 1e-4)]
    lr_min: f64,
    /// Disable the random rotation of training clouds about the z axis.
    #[arg(long)]
    no_rotate: bool,
    /// Random isotropic scaling of training clouds in [1 - s, 1 + s].
    #[arg(long, default_value_t = 0.0)]
    scale_jitter: f64,
}

impl OptimArgs {
    fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            optimizer: self.optimizer,
            lr0: self.lr.unwrap_or(self.optimizer.default_lr()),
            lr_min: self.lr_min,
            seed,
            target_test_acc: None,
            augment: Augment {
                rotate_z: !self.no_rotate,
                scale_jitter: self.scale_jitter,
            },
        }
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Training manifest, or a dataset directory containing one.
    #[arg(long)]
    data: PathBuf,
    /// Optional test manifest, evaluated after every epoch.
    #[arg(long)]
    test: Option<PathBuf>,
    /// Checkpoint path to write after training.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Stop once the test accuracy reaches this value.
    #[arg(long)]
    target: Option<f64>,
    #[command(flatten)]
    optim: OptimArgs,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Manifest or dataset directory to evaluate on.
    #[arg(long)]
    data: PathBuf,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Maximum relative error.
    #[arg(long, default_value_t = 1e-5)]
    tol: f64,
    /// Seeded cases per checked component.
    #[arg(long, default_value_t = 13)]
    cases: usize,
    /// Print one line per parameter block.
    #[arg(long)]
    verbose: bool,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "16,64,256")]
    dims: Vec<usize>,
    /// Use every (d_in, d_out) pair instead of square layers.
    #[arg(long)]
    cross: bool,
    /// Rational group counts.
    #[arg(long, value_delimiter = ',', default_value = "4")]
    groups: Vec<usize>,
}

#[derive(Debug, Args)]
struct SensitivityArgs {
    /// Points file; a synthetic cube is used when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Trained model; a freshly initialised toy model is used when absent.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output file of `x y z score flag` lines; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Points above this percentile of the scores are flagged.
    #[arg(long, default_value_t = 80.0)]
    percentile: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Points in the synthetic cube.
    #[arg(long, default_value_t = 256)]
    points: usize,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Debug, Args)]
struct FewshotArgs {
    /// Source manifest or dataset directory; a synthetic five-shape dataset is used when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    way: usize,
    #[arg(long, default_value_t = 10)]
    shot: usize,
    #[arg(long, default_value_t = 10)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "bspline")]
    backend: Backend,
    /// Instances per class in the synthetic source set.
    #[arg(long, default_value_t = 40)]
    per_class: usize,
    #[arg(long, default_value_t = 128)]
    points: usize,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value = "adam")]
    optimizer: OptimizerKind,
    #[arg(long)]
    lr: Option<f64>,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let text = e.render().to_string();
            if code == 0 {
                let _ = write!(out, "{text}");
            } else {
                let _ = write!(err, "{text}");
            }
            return code;
        }
    };
    match execute(cli.command, out, err) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            match e {
                Error::Usage(_) => 2,
                _ => 1,
            }
        }
    }
}

/// Loads a dataset and centers each cloud on its centroid at unit radius.
fn load_normalized(path: &Path) -> Result<Dataset> {
    let data = load_dataset(path)?;
    let clouds = data.clouds.iter().map(centroid_normalize).collect::<Result<Vec<_>>>()?;
    Dataset::new(clouds, data.class_names)
}

fn io_err(e: std::io::Error) -> Error {
    Error::io("<output>", e)
}

/// Returns `Ok(false)` when the command ran but its check failed.
fn execute(cmd: Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<bool> {
    match cmd {
        Command::Synth(a) => {
            let m = synth_dataset(&a.out, &a.shapes, a.per_class, a.points, a.sigma, a.seed)?;
            writeln!(
                out,
                "wrote {} clouds of {} classes to {}",
                m.entries.len(),
                m.class_names.len(),
                a.out.join(MANIFEST_NAME).display()
            )
            .map_err(io_err)?;
            Ok(true)
        }
        Command::Train(a) => {
            let data = load_normalized(&a.data)?;
            let test = a.test.as_deref().map(load_normalized).transpose()?;
            let points = data.clouds.iter().map(|c| c.len()).min().unwrap_or(0);
            let cfg = a.model.config(data.class_names.len(), points)?;
            let mut model = Model::new(cfg, &mut ChaCha8Rng::seed_from_u64(a.seed))?;
            writeln!(out, "parameters {}", model.param_count()).map_err(io_err)?;
            let mut tc = a.optim.train_config(a.seed);
            tc.target_test_acc = a.target;
            let mut write_err = None;
            train(&mut model, &data, test.as_ref(), &tc, |log| {
                if let Err(e) = writeln!(out, "{log}") {
                    write_err.get_or_insert(e);
                }
            })?;
            if let Some(e) = write_err {
                return Err(io_err(e));
            }
            let acc = evaluate(&model, &data)?;
            writeln!(out, "train overall {:.4} mean_class {:.4}", acc.overall, acc.mean_class).map_err(io_err)?;
            if let Some(t) = &test {
                let acc = evaluate(&model, t)?;
                writeln!(out, "test overall {:.4} mean_class {:.4}", acc.overall, acc.mean_class).map_err(io_err)?;
            }
            if let Some(p) = &a.out {
                save_checkpoint(p, &model)?;
                writeln!(out, "saved {}", p.display()).map_err(io_err)?;
            }
            Ok(true)
        }
        Command::Eval(a) => {
            let model = load_checkpoint(&a.checkpoint)?;
            let data = load_normalized(&a.data)?;
            let acc = evaluate(&model, &data)?;
            writeln!(out, "overall {:.4} mean_class {:.4}", acc.overall, acc.mean_class).map_err(io_err)?;
            Ok(true)
        }
        Command::Gradcheck(a) => {
            let opts = GradCheckOptions {
                tol: a.tol,
                seed: a.seed,
                ..GradCheckOptions::default()
            };
            let cases = gradcheck_suite(a.seed, a.cases, &opts)?;
            let mut failed = 0;
            let mut worst = 0.0f64;
            for c in &cases {
                let status = if c.report.passed() { "PASS" } else { "FAIL" };
                failed += usize::from(!c.report.passed());
                worst = worst.max(c.report.max_rel_err());
                writeln!(
                    out,
                    "{status} {:<10} seed {:<4} max_rel_err {:.3e} checked {:<4} {}",
                    c.kind.name(),
                    c.seed,
                    c.report.max_rel_err(),
                    c.report.checked(),
                    c.description
                )
                .map_err(io_err)?;
                if a.verbose || !c.report.passed() {
                    writeln!(out, "{}", c.report).map_err(io_err)?;
                }
            }
            writeln!(
                out,
                "{} configurations, {failed} failed, max_rel_err {worst:.3e}, tol {:.1e}",
                cases.len(),
                a.tol
            )
            .map_err(io_err)?;
            if failed > 0 {
                writeln!(err, "gradient check failed for {failed} configurations").map_err(io_err)?;
            }
            Ok(failed == 0)
        }
        Command::Bench(a) => {
            let settings = BenchSettings {
                groups: a.groups,
                ..BenchSettings::default()
            };
            let models = [
                ("toy", ModelConfig::toy(3, Backend::BSpline)),
                ("full", ModelConfig::full(40, Backend::BSpline)),
            ];
            let report = bench_report(&dim_pairs(&a.dims, a.cross), &settings, &models)?;
            write!(out, "{report}").map_err(io_err)?;
            Ok(true)
        }
        Command::Sensitivity(a) => {
            let cloud = match &a.data {
                Some(p) => centroid_normalize(&load_points_file(p)?)?,
                None => sample_shape(Shape::Cube, a.points, 0.0, &mut ChaCha8Rng::seed_from_u64(a.seed))?,
            };
            let model = match &a.checkpoint {
                Some(p) => load_checkpoint(p)?,
                None => {
                    let cfg = a.model.config(3, cloud.len())?;
                    Model::new(cfg, &mut ChaCha8Rng::seed_from_u64(a.seed))?
                }
            };
            let scores = sensitivity_scores(&model, &cloud)?;
            let flags = percentile_flags(&scores, a.percentile)?;
            let mut text = String::with_capacity(cloud.len() * 80);
            for ((p, s), f) in cloud.points().iter().zip(&scores).zip(&flags) {
                text.push_str(&format!(
                    "{:.16e} {:.16e} {:.16e} {:.16e} {}\n",
                    p[0],
                    p[1],
                    p[2],
                    s,
                    u8::from(*f)
                ));
            }
            let flagged = flags.iter().filter(|&&f| f).count();
            match &a.out {
                Some(p) => {
                    write_atomic(p, text.as_bytes())?;
                    writeln!(
                        out,
                        "flagged {flagged} of {} points; wrote {}",
                        cloud.len(),
                        p.display()
                    )
                    .map_err(io_err)?;
                }
                None => write!(out, "{text}").map_err(io_err)?,
            }
            Ok(true)
        }
        Command::Fewshot(a) => {
            let data = match &a.data {
                Some(p) => load_normalized(p)?,
                None => synth_clouds(&Shape::ALL, a.per_class, a.points, 0.02, a.seed)?,
            };
            let train = TrainConfig {
                epochs: a.epochs,
                batch_size: a.batch_size,
                optimizer: a.optimizer,
                lr0: a.lr.unwrap_or(a.optimizer.default_lr()),
                lr_min: a.lr.unwrap_or(a.optimizer.default_lr()) * 0.01,
                ..TrainConfig::default()
            };
            let opts = FewShotOptions {
                way: a.way,
                shot: a.shot,
                trials: a.trials,
                seed: a.seed,
                backend: a.backend,
                train,
            };
            let results = run_fewshot(&data, &opts)?;
            for (i, r) in results.iter().enumerate() {
                let names: Vec<&str> = r
                    .episode
                    .classes
                    .iter()
                    .map(|&c| data.class_names[c].as_str())
                    .collect();
                writeln!(
                    out,
                    "trial {i} classes {} train {} test {} overlap {} acc {:.4}",
                    names.join(","),
                    r.episode.train.len(),
                    r.episode.test.len(),
                    r.episode.overlaps(),
                    r.accuracy
                )
                .map_err(io_err)?;
            }
            let (mean, std) = summarize(&results);
            writeln!(
                out,
                "{}-way {}-shot accuracy {:.2} ± {:.2} (%)",
                a.way,
                a.shot,
                100.0 * mean,
                100.0 * std
            )
            .map_err(io_err)?;
            Ok(true)
        }
    }
}
