//! Command-line front end: synthesize or ingest datasets, degrade them,
//! train, fit the Laplace posterior, predict and evaluate.

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context as _, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use mivio::dataset::{load_sequence, read_poses, synthesize, write_poses, DatasetConfig, RigidTransform, SequenceDataset, SynthConfig};
use mivio::degrade::{build_degraded_suite, Suite};
use mivio::eval::{evaluate, summarize_uncertainty, write_bins_csv, write_json, write_metrics_csv, write_trajectory_csv, MetricReport, TrajectoryEstimate, DEFAULT_BINS};
use mivio::fusion::FusionKind;
use mivio::laplace::{fit_fisher, predict_bayesian, tune_hyperparams, OdometryLaplace, PosteriorApprox, PredictiveResult, DEFAULT_SAMPLES};
use mivio::model::{train, training_segments, ModelConfig, OdometryModel, TrainConfig};

const POSTERIOR_FORMAT: &str = "mivio-posterior";
const POSE_COLUMNS: [&str; 6] = ["tx", "ty", "tz", "yaw", "pitch", "roll"];

/// Bad configuration or flags; maps to exit code 2.
#[derive(Debug)]
struct ConfigError(String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn config_err(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

#[derive(Parser, Debug)]
#[command(name = "mivio", version, about = "Visual-inertial odometry with attention fusion and Laplace uncertainty")]
struct Cli {
    /// JSON file with per-command settings; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Import a KITTI-style sequence (PNG directory, IMU CSV, pose file).
    Ingest(IngestArgs),
    /// Apply a degradation suite to a dataset.
    Degrade(DegradeArgs),
    /// Train an odometry model.
    Train(TrainArgs),
    /// Fit the diagonal Laplace posterior around a trained model.
    FitLaplace(FitLaplaceArgs),
    /// Predict relative poses and the composed trajectory.
    Predict(PredictArgs),
    /// Compute trajectory metrics against ground truth.
    Eval(EvalArgs),
    /// Collect metrics from several evaluation directories.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// line, arc or figure-eight.
    #[arg(long)]
    shape: Option<String>,
    #[arg(long)]
    windows: Option<usize>,
}

#[derive(Args, Debug)]
struct IngestArgs {
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    imu: PathBuf,
    #[arg(long)]
    poses: PathBuf,
    /// Provenance label stored in the manifest.
    #[arg(long, default_value = "kitti")]
    source: String,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
}

#[derive(Args, Debug)]
struct DegradeArgs {
    #[arg(long)]
    data: PathBuf,
    /// nominal, inertial, vision or all.
    #[arg(long)]
    suite: String,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, required = true)]
    data: Vec<PathBuf>,
    /// mha, concat or soft.
    #[arg(long)]
    fusion: Option<String>,
    /// toy or full; ignored when the config file has a model section.
    #[arg(long, default_value = "toy")]
    scale: String,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Stop early once an epoch's mean loss reaches this value.
    #[arg(long)]
    target_loss: Option<f64>,
}

#[derive(Args, Debug)]
struct FitLaplaceArgs {
    /// Training output directory (model.json + checkpoint.json).
    #[arg(long)]
    model: PathBuf,
    #[arg(long, required = true)]
    data: Vec<PathBuf>,
    #[arg(long)]
    tau: Option<f64>,
    /// Fisher multiplier; defaults to the number of Fisher segments.
    #[arg(long)]
    fisher_multiplier: Option<f64>,
    /// Restrict sampling to parameters with these name prefixes.
    #[arg(long)]
    stochastic: Vec<String>,
    /// Validation dataset for tuning (multiplier, tau) over the grids.
    #[arg(long)]
    validation: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    tau_grid: Vec<f64>,
    /// Multiplier grid as factors of the default multiplier.
    #[arg(long, value_delimiter = ',')]
    n_grid: Vec<f64>,
    #[arg(long)]
    samples: Option<usize>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Monte Carlo predictive under the Laplace posterior.
    #[arg(long)]
    bayesian: bool,
    /// Defaults to posterior.json in the model directory.
    #[arg(long)]
    posterior: Option<PathBuf>,
    #[arg(long)]
    samples: Option<usize>,
    /// Windows per forward chunk; the hidden state carries across chunks.
    #[arg(long)]
    chunk: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Prediction directory or pose file.
    #[arg(long)]
    pred: PathBuf,
    /// Dataset directory or pose file.
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    bins: usize,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Evaluation directories.
    #[arg(long, required = true)]
    runs: Vec<PathBuf>,
}

/// Optional sections of the `--config` file.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    seed: Option<u64>,
    synth: Option<SynthConfig>,
    dataset: Option<DatasetConfig>,
    model: Option<ModelConfig>,
    train: Option<TrainConfig>,
    laplace: Option<LaplaceSettings>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct LaplaceSettings {
    tau: f64,
    fisher_multiplier: Option<f64>,
    stochastic: Vec<String>,
    samples: usize,
    tau_grid: Vec<f64>,
    n_grid: Vec<f64>,
}

impl Default for LaplaceSettings {
    fn default() -> Self {
        LaplaceSettings {
            tau: 1.0,
            fisher_multiplier: None,
            stochastic: Vec::new(),
            samples: DEFAULT_SAMPLES,
            tau_grid: vec![0.1, 1.0, 10.0, 100.0],
            n_grid: vec![0.25, 1.0, 4.0],
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct PosteriorFile {
    format: String,
    version: u32,
    checkpoint: PathBuf,
    checkpoint_sha256: String,
    beta: f64,
    fisher_multiplier: f64,
    tau: f64,
    stochastic: Vec<String>,
    fisher_diag: Vec<f64>,
}

struct Runner {
    file: FileConfig,
    seed: u64,
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    let validation = e.chain().any(|c| {
        c.downcast_ref::<ConfigError>().is_some() || c.downcast_ref::<mivio::Error>().is_some_and(mivio::Error::is_validation)
    });
    if validation {
        2
    } else {
        1
    }
}

fn run(cli: Cli) -> Result<()> {
    let file = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_str(&text).map_err(|e| config_err(format!("config {}: {e}", p.display())))?
        }
        None => FileConfig::default(),
    };
    let seed = cli.seed.or(file.seed).unwrap_or(0);
    let runner = Runner { file, seed, out: cli.out };
    match cli.command {
        Command::Synth(a) => runner.synth(a),
        Command::Ingest(a) => runner.ingest(a),
        Command::Degrade(a) => runner.degrade(a),
        Command::Train(a) => runner.train(a),
        Command::FitLaplace(a) => runner.fit_laplace(a),
        Command::Predict(a) => runner.predict(a),
        Command::Eval(a) => runner.eval(a),
        Command::Report(a) => runner.report(a),
    }
}

/// Parses a lowercase/kebab-case name through the type's serde form.
fn parse_name<T: DeserializeOwned>(what: &str, s: &str) -> Result<T> {
    serde_json::from_value(Value::String(s.to_string())).map_err(|_| config_err(format!("unknown {what} {s:?}")))
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn load_dataset(dir: &Path) -> Result<SequenceDataset> {
    let (ds, _) = SequenceDataset::load(dir).with_context(|| format!("loading dataset {}", dir.display()))?;
    Ok(ds)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Creates `final_dir` by filling a sibling temporary directory and
/// renaming it into place, so a failure leaves nothing behind.
fn atomic_dir(final_dir: &Path, fill: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    if final_dir.exists() {
        return Err(config_err(format!("output {} already exists", final_dir.display())));
    }
    let name = final_dir.file_name().ok_or_else(|| config_err("output path has no final component"))?;
    let parent = final_dir.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    let tmp = parent.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    let _ = fs::remove_dir_all(&tmp);
    fs::create_dir_all(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
    match fill(&tmp) {
        Ok(()) => fs::rename(&tmp, final_dir).with_context(|| format!("moving output into {}", final_dir.display())),
        Err(e) => {
            let _ = fs::remove_dir_all(&tmp);
            Err(e)
        }
    }
}

impl Runner {
    fn out(&self) -> Result<&Path> {
        self.out.as_deref().ok_or_else(|| config_err("--out is required for this command"))
    }

    fn out_dir(&self) -> Result<&Path> {
        let out = self.out()?;
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        Ok(out)
    }

    /// Resolved settings written next to every artifact.
    fn write_run(&self, dir: &Path, command: &str, settings: Value) -> Result<()> {
        let run = json!({
            "command": command,
            "seed": self.seed,
            "version": env!("CARGO_PKG_VERSION"),
            "settings": settings,
        });
        write_text(&dir.join("run.json"), &serde_json::to_string_pretty(&run)?)
    }

    fn synth(&self, a: SynthArgs) -> Result<()> {
        let mut cfg = self.file.synth.clone().unwrap_or_default();
        if let Some(s) = &a.shape {
            cfg.shape = parse_name("path shape", s)?;
        }
        if let Some(n) = a.windows {
            cfg.num_windows = n;
        }
        let ds = synthesize(&cfg, self.seed)?;
        let settings = json!({ "synth": cfg, "seed": self.seed });
        atomic_dir(self.out()?, |dir| {
            ds.save(dir, &ds.manifest("synthetic", None, settings.clone()))?;
            self.write_run(dir, "synth", settings.clone())
        })?;
        println!("windows: {}, path length: {:.3} m", ds.len(), ds.path_length());
        Ok(())
    }

    fn ingest(&self, a: IngestArgs) -> Result<()> {
        let mut cfg = self.file.dataset.clone().unwrap_or_default();
        if let Some(h) = a.height {
            cfg.image_height = h;
        }
        if let Some(w) = a.width {
            cfg.image_width = w;
        }
        let ds = load_sequence(&a.images, &a.imu, &a.poses, &cfg)?;
        let settings = json!({
            "dataset": cfg,
            "images": a.images,
            "imu": a.imu,
            "poses": a.poses,
        });
        atomic_dir(self.out()?, |dir| {
            ds.save(dir, &ds.manifest(&a.source, None, settings.clone()))?;
            self.write_run(dir, "ingest", settings.clone())
        })?;
        println!("windows: {}, path length: {:.3} m", ds.len(), ds.path_length());
        Ok(())
    }

    fn degrade(&self, a: DegradeArgs) -> Result<()> {
        let suite: Suite = a.suite.parse()?;
        let settings = json!({ "suite": suite, "source": a.data, "seed": self.seed });
        if suite == Suite::Nominal {
            // Verify it loads, then copy byte for byte.
            let ds = load_dataset(&a.data)?;
            atomic_dir(self.out()?, |dir| {
                for name in ["manifest.json", "frames.bin", "imu.csv", "poses.txt"] {
                    fs::copy(a.data.join(name), dir.join(name)).with_context(|| format!("copying {name}"))?;
                }
                self.write_run(dir, "degrade", settings.clone())
            })?;
            println!("suite nominal: copied {} windows unchanged", ds.len());
            return Ok(());
        }
        let (src, manifest) = SequenceDataset::load(&a.data).with_context(|| format!("loading dataset {}", a.data.display()))?;
        let (ds, specs) = build_degraded_suite(&src, suite, self.seed)?;
        let degradation = json!({ "suite": suite, "seed": self.seed, "specs": specs });
        atomic_dir(self.out()?, |dir| {
            ds.save(dir, &ds.manifest(&manifest.source, Some(degradation.clone()), manifest.config.clone()))?;
            self.write_run(dir, "degrade", settings.clone())
        })?;
        println!("suite {}: {} injectors, {} windows", a.suite, specs.len(), ds.len());
        Ok(())
    }

    fn model_config(&self, a: &TrainArgs, shape: [usize; 3]) -> Result<ModelConfig> {
        if let Some(m) = &self.file.model {
            let mut m = m.clone();
            if let Some(f) = &a.fusion {
                m.fusion.kind = f.parse::<FusionKind>()?;
            }
            return Ok(m);
        }
        let kind = match &a.fusion {
            Some(f) => f.parse::<FusionKind>()?,
            None => FusionKind::Mha,
        };
        let mut m = match a.scale.as_str() {
            "toy" => ModelConfig::toy(kind),
            "full" => ModelConfig::full_scale(kind),
            other => return Err(config_err(format!("unknown model scale {other:?}; expected toy or full"))),
        };
        m.vision.frame_channels = shape[0];
        m.vision.input_height = shape[1];
        m.vision.input_width = shape[2];
        Ok(m)
    }

    fn train(&self, a: TrainArgs) -> Result<()> {
        let datasets = a.data.iter().map(|d| load_dataset(d)).collect::<Result<Vec<_>>>()?;
        let shape = datasets[0].image_shape();
        if datasets.iter().any(|d| d.image_shape() != shape) {
            return Err(config_err("all training datasets must share one image shape"));
        }
        let model_cfg = self.model_config(&a, shape)?;
        let out = self.out_dir()?;
        let mut cfg = self.file.train.clone().unwrap_or_default();
        cfg.seed = self.seed;
        if let Some(v) = a.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = a.lr {
            cfg.learning_rate = v;
        }
        if let Some(v) = a.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = a.beta {
            cfg.beta = v;
        }
        if let Some(v) = a.checkpoint_every {
            cfg.checkpoint_every = Some(v);
            cfg.checkpoint_dir = Some(out.join("checkpoints"));
        }
        if a.target_loss.is_some() {
            cfg.target_loss = a.target_loss;
        }
        cfg.validate()?;
        let mut model = OdometryModel::new(model_cfg.clone(), self.seed)?;
        let segments = training_segments(&datasets, &cfg)?;
        let initial: Vec<f64> = datasets
            .iter()
            .zip(&segments)
            .filter(|(_, s)| !s.is_empty())
            .map(|(d, s)| model.evaluate_loss(d, s, cfg.beta))
            .collect::<mivio::Result<_>>()?;
        let initial_loss = initial.iter().sum::<f64>() / initial.len().max(1) as f64;
        let log_path = out.join("train_log.jsonl");
        let mut sink = BufWriter::new(fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?);
        let log = train(&mut model, &datasets, &cfg, Some(&mut sink))?;
        sink.flush()?;
        model.store.save_checkpoint(&out.join("checkpoint.json"))?;
        write_text(&out.join("model.json"), &serde_json::to_string_pretty(&model_cfg)?)?;
        self.write_run(
            out,
            "train",
            json!({
                "model": model_cfg,
                "train": cfg,
                "data": a.data,
                "initial_loss": initial_loss,
                "final_loss": log.final_loss(),
            }),
        )?;
        println!(
            "trained {} parameters for {} epochs: loss {initial_loss:.6} -> {:.6}",
            model.num_params(),
            log.epochs.len(),
            log.final_loss().unwrap_or(f64::NAN)
        );
        Ok(())
    }

    fn load_model(&self, dir: &Path) -> Result<(OdometryModel, PathBuf)> {
        let cfg_path = dir.join("model.json");
        let text = fs::read_to_string(&cfg_path).with_context(|| format!("reading {}", cfg_path.display()))?;
        let cfg: ModelConfig = serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", cfg_path.display())))?;
        let mut model = OdometryModel::new(cfg, 0)?;
        let ckpt = dir.join("checkpoint.json");
        model.store.load_checkpoint(&ckpt)?;
        Ok((model, ckpt))
    }

    fn fit_laplace(&self, a: FitLaplaceArgs) -> Result<()> {
        let (model, ckpt) = self.load_model(&a.model)?;
        let datasets = a.data.iter().map(|d| load_dataset(d)).collect::<Result<Vec<_>>>()?;
        let mut settings = self.file.laplace.clone().unwrap_or_default();
        if let Some(t) = a.tau {
            settings.tau = t;
        }
        if a.fisher_multiplier.is_some() {
            settings.fisher_multiplier = a.fisher_multiplier;
        }
        if !a.stochastic.is_empty() {
            settings.stochastic = a.stochastic.clone();
        }
        if !a.tau_grid.is_empty() {
            settings.tau_grid = a.tau_grid.clone();
        }
        if !a.n_grid.is_empty() {
            settings.n_grid = a.n_grid.clone();
        }
        if let Some(s) = a.samples {
            settings.samples = s;
        }
        let mut train_cfg = self.file.train.clone().unwrap_or_default();
        train_cfg.seed = self.seed;
        let lap = OdometryLaplace {
            model: &model,
            beta: train_cfg.beta,
            chunk: None,
        };
        let segments = training_segments(&datasets, &train_cfg)?;
        let data: Vec<_> = datasets
            .iter()
            .zip(&segments)
            .flat_map(|(d, s)| s.iter().map(move |r| (d, r.clone())))
            .collect();
        if data.is_empty() {
            return Err(config_err("no dataset is long enough for a Fisher segment"));
        }
        let fisher = fit_fisher(&lap, &data)?;
        let default_n = data.len() as f64;
        let mut post = PosteriorApprox::new(
            model.store.flat_trainable(),
            fisher,
            settings.fisher_multiplier.unwrap_or(default_n),
            settings.tau,
        )?;
        if !settings.stochastic.is_empty() {
            let prefixes: Vec<&str> = settings.stochastic.iter().map(String::as_str).collect();
            post = post.with_stochastic(lap.stochastic_mask(&prefixes))?;
        }
        let mut tuning = Value::Null;
        if let Some(v) = &a.validation {
            let val = load_dataset(v)?;
            let targets: Vec<Vec<f64>> = val.targets().iter().map(|t| t.to_array().to_vec()).collect();
            let grid: Vec<(f64, f64)> = settings
                .n_grid
                .iter()
                .flat_map(|n| settings.tau_grid.iter().map(move |t| (n * default_n, *t)))
                .collect();
            let r = tune_hyperparams(&lap, &post, &[(&val, targets)], &grid, settings.samples, self.seed)?;
            post = post.with_hyper(r.fisher_multiplier, r.tau)?;
            tuning = json!({ "validation": v, "grid": grid, "scores": r.scores });
        }
        let out = self.out_dir()?;
        let file = PosteriorFile {
            format: POSTERIOR_FORMAT.into(),
            version: 1,
            checkpoint: fs::canonicalize(&ckpt).unwrap_or(ckpt.clone()),
            checkpoint_sha256: sha256_file(&ckpt)?,
            beta: train_cfg.beta,
            fisher_multiplier: post.fisher_multiplier,
            tau: post.tau,
            stochastic: settings.stochastic.clone(),
            fisher_diag: post.fisher_diag.clone(),
        };
        write_text(&out.join("posterior.json"), &serde_json::to_string(&file)?)?;
        self.write_run(
            out,
            "fit-laplace",
            json!({ "model": a.model, "data": a.data, "laplace": settings, "segments": data.len(), "tuning": tuning }),
        )?;
        let mean_var = post.variance().iter().sum::<f64>() / post.theta_map.len().max(1) as f64;
        println!(
            "posterior over {} parameters: multiplier {}, tau {}, mean weight variance {mean_var:.3e}",
            post.theta_map.len(),
            post.fisher_multiplier,
            post.tau
        );
        Ok(())
    }

    fn load_posterior(&self, model: &OdometryModel, ckpt: &Path, path: &Path) -> Result<(PosteriorApprox, PosteriorFile)> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let file: PosteriorFile = serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        if file.format != POSTERIOR_FORMAT {
            return Err(config_err(format!("{} is not a posterior file", path.display())));
        }
        if sha256_file(ckpt)? != file.checkpoint_sha256 {
            return Err(config_err(format!(
                "posterior {} was fitted to a different checkpoint than {}",
                path.display(),
                ckpt.display()
            )));
        }
        let mut post = PosteriorApprox::new(model.store.flat_trainable(), file.fisher_diag.clone(), file.fisher_multiplier, file.tau)?;
        if !file.stochastic.is_empty() {
            let lap = OdometryLaplace {
                model,
                beta: file.beta,
                chunk: None,
            };
            let prefixes: Vec<&str> = file.stochastic.iter().map(String::as_str).collect();
            post = post.with_stochastic(lap.stochastic_mask(&prefixes))?;
        }
        Ok((post, file))
    }

    fn predict(&self, a: PredictArgs) -> Result<()> {
        let (model, ckpt) = self.load_model(&a.model)?;
        let ds = load_dataset(&a.data)?;
        let samples = a.samples.or(self.file.laplace.as_ref().map(|l| l.samples)).unwrap_or(DEFAULT_SAMPLES);
        let (relative, variance) = if a.bayesian {
            let path = a.posterior.clone().unwrap_or_else(|| a.model.join("posterior.json"));
            let (post, file) = self.load_posterior(&model, &ckpt, &path)?;
            let lap = OdometryLaplace {
                model: &model,
                beta: file.beta,
                chunk: a.chunk,
            };
            let pred = predict_bayesian(&lap, &post, &ds, samples, self.seed)?;
            (pred.mean_poses(), Some(pred))
        } else {
            (model.predict_trajectory(&ds, a.chunk)?.relative, None)
        };
        let out = self.out_dir()?;
        let est = TrajectoryEstimate::from_relative(&ds.absolute[0], &relative, variance.as_ref().map(PredictiveResult::variance_poses))?;
        write_poses(&out.join("poses.txt"), &est.poses)?;
        let mut header = vec!["step".to_string()];
        header.extend(POSE_COLUMNS.iter().map(|c| c.to_string()));
        if variance.is_some() {
            header.extend(POSE_COLUMNS.iter().map(|c| format!("var_{c}")));
        }
        let mut csv = header.join(",") + "\n";
        for (k, p) in relative.iter().enumerate() {
            let mut row: Vec<String> = vec![k.to_string()];
            row.extend(p.to_array().iter().map(f64::to_string));
            if let Some(v) = &variance {
                row.extend(v.variance[k].iter().map(f64::to_string));
            }
            csv += &(row.join(",") + "\n");
        }
        write_text(&out.join("predictions.csv"), &csv)?;
        if let Some(v) = &variance {
            write_text(&out.join("predictive.json"), &serde_json::to_string(v)?)?;
        }
        self.write_run(
            out,
            "predict",
            json!({ "model": a.model, "data": a.data, "bayesian": a.bayesian, "samples": samples, "chunk": a.chunk }),
        )?;
        match &variance {
            Some(v) => println!("predicted {} steps with {} samples, mean variance {:.4e}", relative.len(), v.samples, v.mean_variance()),
            None => println!("predicted {} steps", relative.len()),
        }
        Ok(())
    }

    fn eval(&self, a: EvalArgs) -> Result<()> {
        let pose_file = |p: &Path| if p.is_dir() { p.join("poses.txt") } else { p.to_path_buf() };
        let pred_poses = read_poses(&pose_file(&a.pred))?;
        let gt_poses: Vec<RigidTransform> = read_poses(&pose_file(&a.gt))?;
        let mut pred = TrajectoryEstimate::new(pred_poses);
        let gt = TrajectoryEstimate::new(gt_poses);
        let predictive = a.pred.join("predictive.json");
        if a.pred.is_dir() && predictive.is_file() {
            let text = fs::read_to_string(&predictive)?;
            let p: PredictiveResult = serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", predictive.display())))?;
            pred.variance = Some(p.variance_poses());
            pred.validate()?;
        }
        let report = evaluate(&pred, &gt)?;
        let out = self.out_dir()?;
        write_json(&out.join("metrics.json"), &report)?;
        write_metrics_csv(&out.join("metrics.csv"), &report)?;
        write_trajectory_csv(&out.join("trajectory.csv"), &pred, &gt)?;
        let mut uncertainty = false;
        if pred.variance.is_some() {
            let u = summarize_uncertainty(&pred, &gt, a.bins)?;
            write_json(&out.join("uncertainty.json"), &u)?;
            write_bins_csv(&out.join("bins.csv"), &u)?;
            uncertainty = true;
        }
        self.write_run(out, "eval", json!({ "pred": a.pred, "gt": a.gt, "bins": a.bins, "uncertainty": uncertainty }))?;
        if report.is_empty() {
            println!("ground truth shorter than 100 m: no sub-sequences evaluated");
        } else {
            println!("t_rel {:.4} %, r_rel {:.4} deg/100m", report.t_rel, report.r_rel);
        }
        Ok(())
    }

    fn report(&self, a: ReportArgs) -> Result<()> {
        let mut csv = String::from("run,t_rel,r_rel,lengths\n");
        println!("{:<40} {:>10} {:>12}", "run", "t_rel %", "r_rel deg/100m");
        for dir in &a.runs {
            let path = dir.join("metrics.json");
            let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
            let m: MetricReport = serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
            let name = dir.display().to_string();
            if name.contains(',') {
                bail!("run path {name} contains a comma");
            }
            csv += &format!("{name},{},{},{}\n", m.t_rel, m.r_rel, m.per_length.len());
            if m.is_empty() {
                println!("{name:<40} {:>10} {:>12}", "n/a", "n/a");
            } else {
                println!("{name:<40} {:>10.4} {:>12.4}", m.t_rel, m.r_rel);
            }
        }
        let out = self.out_dir()?;
        write_text(&out.join("report.csv"), &csv)?;
        self.write_run(out, "report", json!({ "runs": a.runs }))
    }
}
