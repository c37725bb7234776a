//! Command-line front end: dataset generation, training, aliasing analysis,
//! adversarial sweeps and architecture sweeps.

pub mod output;
pub mod report;

use std::path::{Path, PathBuf};
use std::time::Instant;

use aliascope::adversarial::{adversarial_sweep, AttackConfig};
use aliascope::aliasing::ThresholdRule;
use aliascope::instrumentation::analyze_dataset;
use aliascope::nn::{build_model, evaluate, train_with_progress, Checkpoint, Family, ModelSpec, TrainConfig};
use aliascope::oscillations::{generate_dataset, load_dataset, Dataset, DatasetSpec};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::output::{create_dir, display, sidecar, write_atomic, Csv, Manifest};
use crate::report::{points_csv, samples_csv, sweep_csv, ReportFile};

pub const THREADS_ENV: &str = "ALIASCOPE_THREADS";

#[derive(Debug)]
pub enum CliError {
    /// Bad flags or flag combinations (exit code 2).
    Usage(String),
    /// Anything that went wrong while doing the work (exit code 1).
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<aliascope::Error> for CliError {
    fn from(e: aliascope::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

#[derive(Debug, Parser)]
#[command(
    name = "aliascope",
    version,
    about = "Measure aliasing inside convolutional networks"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic oscillation dataset.
    Gen(GenArgs),
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Classify frequency components at every downsampling point.
    Analyze(AnalyzeArgs),
    /// PGD accuracy and aliasing as a function of epsilon.
    Attack(AttackArgs),
    /// Train a grid of architectures and report accuracy vs parameter count.
    SweepArch(SweepArchArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Frequencies per axis (N); the dataset has N^2 classes.
    #[arg(long, default_value_t = 20)]
    pub n_freqs: u32,
    /// Image side length.
    #[arg(long, default_value_t = 32)]
    pub size: u32,
    /// Number of samples, a multiple of N^2.
    #[arg(long)]
    pub count: u32,
    /// Noise amplitude A.
    #[arg(long, default_value_t = 1.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Clone)]
pub struct ScheduleArgs {
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, default_value_t = 128)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// 0-based epoch from which the learning rate is divided by the drop
    /// factor [default: 35, or the epoch count if smaller].
    #[arg(long)]
    pub lr_drop_epoch: Option<usize>,
    #[arg(long, default_value_t = 10.0)]
    pub lr_drop_factor: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub weight_decay: f64,
    /// Seeds both initialization and shuffling.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl ScheduleArgs {
    fn config(&self) -> Result<TrainConfig, CliError> {
        let config = TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.lr,
            lr_drop_epoch: self.lr_drop_epoch.unwrap_or(self.epochs.min(35)),
            lr_drop_factor: self.lr_drop_factor,
            weight_decay: self.weight_decay,
            seed: self.seed,
            ..TrainConfig::default()
        };
        config.validate().map_err(usage)?;
        Ok(config)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_parser = parse_family)]
    pub arch: Family,
    /// Stage-1 channels (residual families) or hidden units (fc families).
    #[arg(long, visible_alias = "hidden", default_value_t = 16)]
    pub width: usize,
    /// Residual blocks per stage.
    #[arg(long, default_value_t = 3)]
    pub depth: usize,
    /// Expected class count; checked against the dataset.
    #[arg(long)]
    pub n_classes: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub stem_stride: usize,
    #[arg(long)]
    pub stem_pool: bool,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Per-epoch history CSV (default: `<out>.history.csv`).
    #[arg(long)]
    pub history: Option<PathBuf>,
    #[command(flatten)]
    pub schedule: ScheduleArgs,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Threshold divisor: T = max|X'| / divisor.
    #[arg(long, default_value_t = 10.0, allow_negative_numbers = true)]
    pub divisor: f64,
    /// Analyze only the first N samples.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AttackArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated radii; must include 0.
    #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
    pub eps: Vec<f64>,
    #[arg(long, default_value_t = 100)]
    pub steps: usize,
    /// Default 2.5 * eps / steps.
    #[arg(long)]
    pub step_size: Option<f64>,
    /// Clamp inputs to `lo,hi` after every step.
    #[arg(long, value_parser = parse_range, allow_hyphen_values = true)]
    pub clip: Option<(f64, f64)>,
    #[arg(long)]
    pub random_start: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 10.0, allow_negative_numbers = true)]
    pub divisor: f64,
    #[arg(long)]
    pub limit: Option<usize>,
    /// Sweep CSV path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArchArgs {
    #[arg(long, value_delimiter = ',', value_parser = parse_family, default_value = "fc-1h,fc-2h,resnet-c,resnet-w,resnet-d")]
    pub families: Vec<Family>,
    /// Stage-1 widths for resnet-c and resnet-w.
    #[arg(long, value_delimiter = ',', default_value = "4,8,16")]
    pub widths: Vec<usize>,
    /// Blocks per stage for resnet-d.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    pub depths: Vec<usize>,
    /// Block count used by resnet-c and resnet-w.
    #[arg(long, default_value_t = 3)]
    pub depth: usize,
    /// Width used by resnet-d.
    #[arg(long, default_value_t = 8)]
    pub base_width: usize,
    /// Hidden units for the fc families.
    #[arg(long, value_delimiter = ',', default_value = "16,64,256")]
    pub hidden: Vec<usize>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub schedule: ScheduleArgs,
    #[arg(long)]
    pub quiet: bool,
}

/// `lo,hi`.
fn parse_range(s: &str) -> Result<(f64, f64), String> {
    let (lo, hi) = s.split_once(',').ok_or("expected `lo,hi`")?;
    let num = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("`{v}`: {e}"));
    Ok((num(lo)?, num(hi)?))
}

fn parse_family(s: &str) -> Result<Family, String> {
    s.parse().map_err(|e: aliascope::Error| e.to_string())
}

/// Sizes the worker pool from `ALIASCOPE_THREADS` when set.
pub fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let threads: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::Runtime(format!("cannot size the thread pool: {e}")))
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Gen(a) => cmd_gen(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Analyze(a) => cmd_analyze(&a),
        Command::Attack(a) => cmd_attack(&a),
        Command::SweepArch(a) => cmd_sweep_arch(&a),
    }
}

fn finish(mut manifest: Manifest, started: Instant, path: &Path) -> Result<(), CliError> {
    manifest.duration_seconds = started.elapsed().as_secs_f64();
    manifest.write(path)
}

fn read_dataset(path: &Path) -> Result<Dataset, CliError> {
    Ok(load_dataset(path)?)
}

fn file_label(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| display(path))
}

pub fn cmd_gen(a: &GenArgs) -> Result<(), CliError> {
    let started = Instant::now();
    let spec = DatasetSpec {
        n_freqs: a.n_freqs,
        size: a.size,
        count: a.count,
        noise_amplitude: a.noise,
        seed: a.seed,
    };
    spec.validate().map_err(usage)?;
    let dataset = generate_dataset(&spec)?;
    write_atomic(&a.out, &dataset.to_bytes())?;
    let mut manifest = Manifest::new("gen", json!({ "dataset": spec }));
    manifest.outputs.push(display(&a.out));
    finish(manifest, started, &sidecar(&a.out))
}

fn model_spec(family: Family, width: usize, depth: usize, n_classes: usize, size: usize) -> ModelSpec {
    if family.is_resnet() {
        ModelSpec::resnet(family, width, depth, n_classes, size)
    } else {
        ModelSpec::fc(family, width, n_classes, size)
    }
}

pub fn cmd_train(a: &TrainArgs) -> Result<(), CliError> {
    let started = Instant::now();
    let config = a.schedule.config()?;
    let dataset = read_dataset(&a.data)?;
    let n_classes = dataset.n_classes();
    if let Some(expected) = a.n_classes {
        if expected != n_classes {
            return Err(CliError::Usage(format!(
                "--n-classes {expected} does not match the dataset's {n_classes} classes"
            )));
        }
    }
    let spec = ModelSpec {
        stem_stride: a.stem_stride,
        stem_pool: a.stem_pool,
        ..model_spec(a.arch, a.width, a.depth, n_classes, dataset.spec.size as usize)
    };
    spec.validate().map_err(usage)?;
    let data = dataset.to_image_set();
    let model = build_model(&spec, config.seed)?;
    let quiet = a.quiet;
    let epochs = config.epochs;
    let checkpoint = train_with_progress(model, &data, &config, |r| {
        if !quiet {
            eprintln!(
                "epoch {}/{epochs}  lr {}  loss {:.4}  train acc {:.4}",
                r.epoch + 1,
                r.learning_rate,
                r.loss,
                r.accuracy
            );
        }
    })?;
    write_atomic(&a.out, &checkpoint.to_bytes()?)?;

    let history_path = a.history.clone().unwrap_or_else(|| {
        let mut name = a.out.file_name().unwrap_or_default().to_os_string();
        name.push(".history.csv");
        a.out.with_file_name(name)
    });
    let mut csv = Csv::default();
    csv.row(["epoch", "learning_rate", "loss", "accuracy"]);
    for r in &checkpoint.history {
        csv.row([
            r.epoch.to_string(),
            r.learning_rate.to_string(),
            r.loss.to_string(),
            r.accuracy.to_string(),
        ]);
    }
    write_atomic(&history_path, &csv.into_bytes())?;

    let mut manifest = Manifest::new(
        "train",
        json!({
            "model": spec,
            "train": config,
            "param_count": spec.param_count(),
            "downsample_points": checkpoint.model.network.downsample_points().iter().map(|p| p.name.clone()).collect::<Vec<_>>(),
        }),
    );
    manifest.inputs.push(display(&a.data));
    manifest.outputs.extend([display(&a.out), display(&history_path)]);
    finish(manifest, started, &sidecar(&a.out))
}

fn load_pair(model: &Path, data: &Path) -> Result<(Checkpoint, Dataset), CliError> {
    let checkpoint = Checkpoint::load(model)?;
    let dataset = read_dataset(data)?;
    let spec = &checkpoint.model.spec;
    if dataset.n_classes() != spec.n_classes || dataset.spec.size as usize != spec.input_size {
        return Err(CliError::Runtime(format!(
            "dataset ({} classes, size {}) does not fit the model ({} classes, size {})",
            dataset.n_classes(),
            dataset.spec.size,
            spec.n_classes,
            spec.input_size
        )));
    }
    Ok((checkpoint, dataset))
}

fn model_label(path: &Path, spec: &ModelSpec) -> String {
    format!(
        "{} ({} width {} depth {})",
        file_label(path),
        spec.family,
        spec.base_width,
        spec.depth
    )
}

fn dataset_label(path: &Path, dataset: &Dataset) -> String {
    let s = &dataset.spec;
    format!(
        "{} (N {} size {} count {} noise {} seed {})",
        file_label(path),
        s.n_freqs,
        s.size,
        s.count,
        s.noise_amplitude,
        s.seed
    )
}

pub fn cmd_analyze(a: &AnalyzeArgs) -> Result<(), CliError> {
    let started = Instant::now();
    let rule = ThresholdRule::new(a.divisor).map_err(usage)?;
    if a.limit == Some(0) {
        return Err(CliError::Usage("--limit must be positive".into()));
    }
    let (checkpoint, dataset) = load_pair(&a.model, &a.data)?;
    let data = dataset.to_image_set();
    let report = analyze_dataset(
        &checkpoint.model.network,
        &data,
        &rule,
        a.limit,
        &model_label(&a.model, &checkpoint.model.spec),
        &dataset_label(&a.data, &dataset),
    )?;
    create_dir(&a.out)?;
    let json_path = a.out.join("report.json");
    let points_path = a.out.join("points.csv");
    let samples_path = a.out.join("samples.csv");
    write_atomic(&points_path, &points_csv(&report))?;
    write_atomic(&samples_path, &samples_csv(&report))?;
    write_atomic(&json_path, &ReportFile::new(report).to_bytes()?)?;

    let mut manifest = Manifest::new("analyze", json!({ "divisor": a.divisor, "limit": a.limit }));
    manifest.inputs.extend([display(&a.model), display(&a.data)]);
    manifest
        .outputs
        .extend([display(&json_path), display(&points_path), display(&samples_path)]);
    finish(manifest, started, &a.out.join("manifest.json"))
}

pub fn cmd_attack(a: &AttackArgs) -> Result<(), CliError> {
    let started = Instant::now();
    let rule = ThresholdRule::new(a.divisor).map_err(usage)?;
    if a.eps.is_empty() {
        return Err(CliError::Usage("--eps needs at least one value".into()));
    }
    if !a.eps.contains(&0.0) {
        return Err(CliError::Usage("--eps must include 0 as the clean reference".into()));
    }
    if a.limit == Some(0) {
        return Err(CliError::Usage("--limit must be positive".into()));
    }
    let base = AttackConfig {
        epsilon: 0.0,
        steps: a.steps,
        step_size: a.step_size,
        clip_range: a.clip,
        random_start: a.random_start,
        seed: a.seed,
    };
    for &eps in &a.eps {
        base.with_epsilon(eps).validate().map_err(usage)?;
    }
    let (checkpoint, dataset) = load_pair(&a.model, &a.data)?;
    let data = dataset.to_image_set();
    let table = adversarial_sweep(&checkpoint.model.network, &data, &a.eps, &rule, &base, a.limit)?;
    write_atomic(&a.out, &sweep_csv(&table))?;

    let mut manifest = Manifest::new(
        "attack",
        json!({ "epsilons": a.eps, "attack": base, "divisor": a.divisor, "limit": a.limit, "samples": table.samples }),
    );
    manifest.inputs.extend([display(&a.model), display(&a.data)]);
    manifest.outputs.push(display(&a.out));
    finish(manifest, started, &sidecar(&a.out))
}

pub fn cmd_sweep_arch(a: &SweepArchArgs) -> Result<(), CliError> {
    let started = Instant::now();
    let config = a.schedule.config()?;
    if a.families.is_empty() {
        return Err(CliError::Usage("--families is empty".into()));
    }
    let train_set = read_dataset(&a.data)?;
    let test_set = read_dataset(&a.test)?;
    if train_set.n_classes() != test_set.n_classes() || train_set.spec.size != test_set.spec.size {
        return Err(CliError::Runtime(
            "training and test datasets disagree on classes or size".into(),
        ));
    }
    let (n_classes, size) = (train_set.n_classes(), train_set.spec.size as usize);

    let mut grid = Vec::new();
    for &family in &a.families {
        match family {
            Family::Fc1h | Family::Fc2h => grid.extend(a.hidden.iter().map(|&h| (family, h, 1))),
            Family::ResnetC | Family::ResnetW => grid.extend(a.widths.iter().map(|&w| (family, w, a.depth))),
            Family::ResnetD => grid.extend(a.depths.iter().map(|&d| (family, a.base_width, d))),
        }
    }
    let specs = grid
        .iter()
        .map(|&(f, w, d)| {
            let spec = model_spec(f, w, d, n_classes, size);
            spec.validate().map_err(usage)?;
            Ok(spec)
        })
        .collect::<Result<Vec<_>, CliError>>()?;

    let train_data = train_set.to_image_set();
    let test_data = test_set.to_image_set();
    let mut csv = Csv::default();
    csv.row(["family", "width", "depth", "param_count", "test_top1", "test_top5"]);
    let k5 = n_classes.min(5);
    for spec in &specs {
        if !a.quiet {
            eprintln!(
                "training {} width {} depth {}",
                spec.family, spec.base_width, spec.depth
            );
        }
        let model = build_model(spec, config.seed)?;
        let checkpoint = train_with_progress(model, &train_data, &config, |_| {})?;
        let acc = evaluate(&checkpoint.model.network, &test_data, &[1, k5])?;
        csv.row([
            spec.family.to_string(),
            spec.base_width.to_string(),
            spec.depth.to_string(),
            spec.param_count().to_string(),
            acc[0].to_string(),
            acc[1].to_string(),
        ]);
    }
    write_atomic(&a.out, &csv.into_bytes())?;

    let mut manifest = Manifest::new("sweep-arch", json!({ "models": specs, "train": config }));
    manifest.inputs.extend([display(&a.data), display(&a.test)]);
    manifest.outputs.push(display(&a.out));
    finish(manifest, started, &sidecar(&a.out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::Parser;

    fn parse(line: &str) -> Result<Cli, clap::Error> {
        Cli::try_parse_from(std::iter::once("aliascope").chain(line.split_whitespace()))
    }

    #[test]
    fn schedule_defaults() {
        let Command::Train(a) = parse("train --arch resnet-c --data d --out o").unwrap().command else {
            panic!("train expected");
        };
        let c = a.schedule.config().unwrap();
        assert_eq!((c.epochs, c.batch_size, c.lr_drop_epoch), (50, 128, 35));
        assert_eq!((c.learning_rate, c.weight_decay, c.lr_drop_factor), (1e-3, 1e-4, 10.0));
        assert_eq!((a.width, a.depth), (16, 3));
    }

    #[test]
    fn short_runs_clamp_the_drop_epoch() {
        let Command::Train(a) = parse("train --arch fc-1h --epochs 5 --data d --out o").unwrap().command else {
            panic!("train expected");
        };
        assert_eq!(a.schedule.config().unwrap().lr_drop_epoch, 5);
    }

    #[test]
    fn list_flags() {
        let Command::Attack(a) = parse("attack --model m --data d --eps 0,0.01,0.05 --clip -1,1 --out o")
            .unwrap()
            .command
        else {
            panic!("attack expected");
        };
        assert_eq!(a.eps, [0.0, 0.01, 0.05]);
        assert_eq!(a.clip, Some((-1.0, 1.0)));
        assert!(parse("attack --model m --data d --eps 0 --clip 1 --out o").is_err());
        assert!(parse("train --arch resnet-x --data d --out o").is_err());
        assert!(parse("gen --out o").is_err());
    }

    #[test]
    fn error_exit_codes() {
        assert_eq!(CliError::Usage("x".into()).exit_code(), 2);
        assert_eq!(CliError::Runtime("x".into()).exit_code(), 1);
        let e: CliError = aliascope::Error::NoRunningStats.into();
        assert_eq!(e.exit_code(), 1);
    }
}
