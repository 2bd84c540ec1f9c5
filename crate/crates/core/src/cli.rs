//! Batch command-line entry points: `prep`, `synth`, `train`, `eval`,
//! `predict` and `gradcheck`.
//!
//! Every flag has an equivalent key in the TOML config file (sections
//! `[model]`, `[train]`, `[data]`, `[eval]`, `[synth]`, `[prep]`); flags win.
//! Relative `--run` directories are resolved under `$DSAN_RUN_ROOT` when set.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::datapipe::{
    aggregate_events, build_samples, history_offsets, AggregationSpec, DataError, GridSeries, NormStats, SampleSpec,
    SynthSpec,
};
use crate::gradcheck::run_gradcheck;
use crate::model::{read_checkpoint, write_checkpoint, CheckpointError, ConfigError, Dsan, ModelConfig};
use crate::tensor::{OpKind, TensorError};
use crate::training::{
    compare_strategies, evaluate, rollout_consecutive, rollout_multi_step, split_validation, train, write_history,
    Feedback, RolloutError, Strategy, TrainConfig, TrainError,
};

pub const RUN_ROOT_ENV: &str = "DSAN_RUN_ROOT";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const HISTORY_FILE: &str = "history.csv";
pub const NORM_FILE: &str = "norm.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CURVES_FILE: &str = "curves.csv";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    /// 1 usage or config, 2 data, 3 numeric failure.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        CliError::Numeric(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(c) => CliError::Config(c),
            other => CliError::Numeric(other.to_string()),
        }
    }
}

impl From<RolloutError> for CliError {
    fn from(e: RolloutError) -> Self {
        match e {
            RolloutError::Tensor(t) => t.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "dsan",
    version,
    about = "Long-horizon grid flow prediction with switch attention"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Bin event records into a grid series and fit normalization bounds.
    Prep(PrepArgs),
    /// Generate a synthetic grid series.
    Synth(SynthArgs),
    /// Train a model on a grid series into a run directory.
    Train(TrainArgs),
    /// Score a trained model over the held-out span.
    Eval(EvalArgs),
    /// Forecast every grid from one start step.
    Predict(PredictArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    MultiStep,
    Consecutive,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::MultiStep => Strategy::MultiStep,
            StrategyArg::Consecutive => Strategy::Consecutive,
        }
    }
}

#[derive(Debug, Args)]
pub struct PrepArgs {
    /// CSV event records.
    #[arg(long)]
    pub records: PathBuf,
    /// Output grid series file.
    #[arg(long)]
    pub out: PathBuf,
    /// Output normalization bounds (JSON); defaults to the series path with a `.norm.json` suffix.
    #[arg(long)]
    pub stats: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub rows: Option<usize>,
    #[arg(long)]
    pub cols: Option<usize>,
    #[arg(long)]
    pub interval: Option<u32>,
    /// Leading share of steps the bounds are fitted on.
    #[arg(long)]
    pub train_fraction: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub rows: Option<usize>,
    #[arg(long)]
    pub cols: Option<usize>,
    #[arg(long)]
    pub days: Option<usize>,
    #[arg(long)]
    pub steps_per_day: Option<usize>,
    #[arg(long)]
    pub features: Option<usize>,
    #[arg(long)]
    pub bumps: Option<usize>,
    #[arg(long)]
    pub amplitude: Option<f64>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub drift: Option<f64>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub floor: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Grid series file; taken from the manifest when rerunning one.
    #[arg(long)]
    pub series: Option<PathBuf>,
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long, conflicts_with = "manifest")]
    pub config: Option<PathBuf>,
    /// Rerun the configuration recorded in an earlier run's manifest.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub d_ff: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub proj_layers: Option<usize>,
    #[arg(long)]
    pub local_radius: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub weeks: Option<usize>,
    #[arg(long)]
    pub days: Option<usize>,
    #[arg(long)]
    pub recent: Option<usize>,
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub weights: Option<Vec<f64>>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub warmup: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub val_fraction: Option<f64>,
    #[arg(long)]
    pub train_fraction: Option<f64>,
    #[arg(long, value_enum)]
    pub strategy: Option<StrategyArg>,
    /// Suppress per-epoch progress lines.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub series: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub strategy: Option<StrategyArg>,
    /// Steps predicted from each start; defaults to the model's horizon.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Per-feature minimum ground truth counted in the metrics.
    #[arg(long, value_delimiter = ',')]
    pub thresholds: Option<Vec<f64>>,
    #[arg(long)]
    pub stride: Option<usize>,
    /// Compare strategies: this run drives multi-step rollouts and `--run` the consecutive ones.
    #[arg(long)]
    pub multi_step_run: Option<PathBuf>,
    /// Metrics output; defaults to the run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub series: PathBuf,
    /// First predicted step; only steps before it are read.
    #[arg(long)]
    pub t1: usize,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, value_enum)]
    pub strategy: Option<StrategyArg>,
    /// Forecast output; defaults to `forecast_<t1>.csv` in the run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Corrupt one op's backward rule to confirm the check catches it.
    #[arg(long)]
    pub inject_fault: Option<String>,
}

/// Split of the series between training and held-out evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Leading share of steps used for training and normalization.
    pub train_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { train_fraction: 0.8 }
    }
}

impl DataConfig {
    pub fn train_end(&self, steps: usize) -> usize {
        (steps as f64 * self.train_fraction).floor() as usize
    }

    fn violations(&self) -> Vec<String> {
        if self.train_fraction > 0.0 && self.train_fraction <= 1.0 {
            Vec::new()
        } else {
            vec![format!("train_fraction ({}) must lie in (0, 1]", self.train_fraction)]
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub steps: Option<usize>,
    pub strategy: Option<Strategy>,
    /// Empty means zero for every feature.
    pub thresholds: Vec<f64>,
    /// Spacing between evaluated start steps; zero is read as one.
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub synth: SynthSpec,
    pub prep: AggregationSpec,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: PathBuf,
    pub sha256: String,
}

/// Everything needed to reproduce a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub artifact_version: String,
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub inputs: BTreeMap<String, InputDigest>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// `path` under `$DSAN_RUN_ROOT` when it is relative and the variable is set.
pub fn resolve_run_dir(path: &Path) -> PathBuf {
    match std::env::var_os(RUN_ROOT_ENV) {
        Some(root) if path.is_relative() && !root.is_empty() => Path::new(&root).join(path),
        _ => path.to_path_buf(),
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn load_series(path: &Path) -> Result<(GridSeries, String)> {
    let bytes = read_bytes(path)?;
    let series =
        GridSeries::read_from(&mut bytes.as_slice()).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok((series, sha256_hex(&bytes)))
}

fn series_bytes(series: &GridSeries) -> Vec<u8> {
    let mut buf = Vec::new();
    series.write_to(&mut buf).expect("writing to memory");
    buf
}

fn json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s.into_bytes()
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

pub fn run(cli: &Cli, out: &mut impl Write) -> Result<()> {
    match &cli.command {
        Command::Prep(a) => cmd_prep(a, out),
        Command::Synth(a) => cmd_synth(a, out),
        Command::Train(a) => cmd_train(a, out),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Predict(a) => cmd_predict(a, out),
        Command::Gradcheck(a) => cmd_gradcheck(a, out),
    }
}

fn say(out: &mut impl Write, line: std::fmt::Arguments<'_>) -> Result<()> {
    writeln!(out, "{line}").map_err(|e| CliError::Data(format!("stdout: {e}")))
}

fn cmd_prep(a: &PrepArgs, out: &mut impl Write) -> Result<()> {
    let file = FileConfig::load(a.config.as_deref())?;
    let mut spec = file.prep;
    set(&mut spec.rows, a.rows);
    set(&mut spec.cols, a.cols);
    set(&mut spec.interval_minutes, a.interval);
    let mut data = file.data;
    set(&mut data.train_fraction, a.train_fraction);
    ConfigError::check(data.violations())?;

    let bytes = read_bytes(&a.records)?;
    let empty = bytes.iter().all(u8::is_ascii_whitespace);
    let input: &[u8] = if empty { b"timestamp,row,col,kind\n" } else { &bytes };
    if empty {
        eprintln!("warning: {} holds no records", a.records.display());
    }
    let (series, report) = aggregate_events(input, &spec)?;
    if report.dropped() > 0 {
        eprintln!(
            "warning: dropped {} of {} records ({} malformed, {} out of bounds, {} unknown kind)",
            report.dropped(),
            report.records,
            report.malformed,
            report.out_of_bounds,
            report.unknown_kind
        );
    }
    write_bytes(&a.out, &series_bytes(&series))?;
    let fit_steps = data.train_end(series.steps());
    if fit_steps > 0 {
        let stats = NormStats::fit(&series, fit_steps)?;
        let path = a.stats.clone().unwrap_or_else(|| a.out.with_extension("norm.json"));
        write_bytes(&path, &json_bytes(&stats))?;
    } else {
        eprintln!("warning: no steps to fit normalization bounds on");
    }
    say(
        out,
        format_args!(
            "{} steps, {}x{} grids, {} features, total mass {}, {} records accepted",
            series.steps(),
            series.rows,
            series.cols,
            series.features,
            series.total_mass(),
            report.accepted
        ),
    )
}

fn cmd_synth(a: &SynthArgs, out: &mut impl Write) -> Result<()> {
    let mut spec = FileConfig::load(a.config.as_deref())?.synth;
    set(&mut spec.seed, a.seed);
    set(&mut spec.rows, a.rows);
    set(&mut spec.cols, a.cols);
    set(&mut spec.days, a.days);
    set(&mut spec.steps_per_day, a.steps_per_day);
    set(&mut spec.features, a.features);
    set(&mut spec.bumps, a.bumps);
    set(&mut spec.amplitude, a.amplitude);
    set(&mut spec.sigma, a.sigma);
    set(&mut spec.drift, a.drift);
    set(&mut spec.noise, a.noise);
    set(&mut spec.floor, a.floor);
    let mut bad = Vec::new();
    if spec.rows == 0 || spec.cols == 0 || spec.features == 0 {
        bad.push("synthetic grid needs positive rows, cols and features".to_string());
    }
    if spec.steps_per_day == 0 || 1440 % spec.steps_per_day != 0 {
        bad.push(format!("steps_per_day ({}) must divide 1440", spec.steps_per_day));
    }
    if !(spec.noise >= 0.0 && spec.sigma > 0.0 && spec.amplitude >= 0.0 && spec.floor >= 0.0) {
        bad.push("noise, amplitude and floor must be non-negative and sigma positive".to_string());
    }
    ConfigError::check(bad)?;
    let (series, _) = crate::datapipe::synth_generate(&spec);
    let bytes = series_bytes(&series);
    write_bytes(&a.out, &bytes)?;
    say(
        out,
        format_args!("{} steps, sha256 {}", series.steps(), sha256_hex(&bytes)),
    )
}

fn model_overrides(cfg: &mut ModelConfig, a: &TrainArgs) {
    set(&mut cfg.layers, a.layers);
    set(&mut cfg.d_model, a.d_model);
    set(&mut cfg.d_ff, a.d_ff);
    set(&mut cfg.heads, a.heads);
    set(&mut cfg.proj_layers, a.proj_layers);
    set(&mut cfg.local_radius, a.local_radius);
    set(&mut cfg.dropout, a.dropout);
    set(&mut cfg.weeks, a.weeks);
    set(&mut cfg.days, a.days);
    set(&mut cfg.recent, a.recent);
    set(&mut cfg.horizon, a.horizon);
}

fn train_overrides(cfg: &mut TrainConfig, a: &TrainArgs) {
    set(&mut cfg.weights, a.weights.clone());
    set(&mut cfg.batch_size, a.batch_size);
    set(&mut cfg.max_epochs, a.epochs);
    set(&mut cfg.patience, a.patience);
    set(&mut cfg.warmup, a.warmup);
    set(&mut cfg.seed, a.seed);
    set(&mut cfg.val_fraction, a.val_fraction);
    set(&mut cfg.strategy, a.strategy.map(Strategy::from));
}

/// Copies the series' map size, feature counts and step rate into `cfg`.
fn fit_to_series(cfg: &mut ModelConfig, series: &GridSeries) -> Result<()> {
    cfg.rows = series.rows;
    cfg.cols = series.cols;
    cfg.features = series.features;
    cfg.externals = series.externals;
    cfg.steps_per_day = series.steps_per_day().map_err(|e| CliError::Data(e.to_string()))?;
    Ok(())
}

fn cmd_train(a: &TrainArgs, out: &mut impl Write) -> Result<()> {
    let (mut model_cfg, mut train_cfg, mut data_cfg, recorded) = match &a.manifest {
        Some(path) => {
            let m: RunManifest = serde_json::from_slice(&read_bytes(path)?)
                .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            (m.model, m.train, m.data, m.inputs.get("series").cloned())
        }
        None => {
            let f = FileConfig::load(a.config.as_deref())?;
            (f.model, f.train, f.data, None)
        }
    };
    model_overrides(&mut model_cfg, a);
    train_overrides(&mut train_cfg, a);
    set(&mut data_cfg.train_fraction, a.train_fraction);

    let series_path = match (&a.series, &recorded) {
        (Some(p), _) => p.clone(),
        (None, Some(r)) => r.path.clone(),
        (None, None) => return Err(CliError::Usage("--series is required".into())),
    };
    let (series, digest) = load_series(&series_path)?;
    if let Some(r) = recorded.filter(|r| r.sha256 != digest) {
        return Err(CliError::Data(format!(
            "{} has digest {digest}, manifest recorded {}",
            series_path.display(),
            r.sha256
        )));
    }
    fit_to_series(&mut model_cfg, &series)?;
    let mut violations = model_cfg.violations();
    violations.extend(train_cfg.violations(model_cfg.horizon));
    violations.extend(data_cfg.violations());
    ConfigError::check(violations)?;

    let train_end = data_cfg.train_end(series.steps());
    if train_end == 0 {
        return Err(CliError::Data("series has no training steps".into()));
    }
    let stats = NormStats::fit(&series, train_end)?;
    let span = stats.normalized(&series).truncated(train_end);
    let spec = SampleSpec::from(&model_cfg);
    let (samples, skipped) = build_samples(&span, &spec, 0..train_end)?;
    if samples.is_empty() {
        return Err(CliError::Data(format!(
            "no training samples fit in {train_end} steps (history reaches back {} steps, horizon {})",
            history_offsets(&spec, model_cfg.steps_per_day)
                .into_iter()
                .max()
                .unwrap_or(0),
            model_cfg.horizon
        )));
    }
    let (train_set, val_set) = split_validation(samples, train_cfg.val_fraction);
    let mut model = Dsan::new(model_cfg.clone(), train_cfg.seed)?;
    let quiet = a.quiet;
    let outcome = train(&mut model, &train_set, &val_set, &train_cfg, |r| {
        if !quiet {
            let val = r.val_loss.map_or_else(|| "-".to_string(), |v| format!("{v:.6e}"));
            eprintln!(
                "epoch {:>4}  train {:.6e}  val {val}  lr {:.3e}",
                r.epoch, r.train_loss, r.lr
            );
        }
    })?;

    let dir = resolve_run_dir(&a.run);
    let manifest = RunManifest {
        artifact_version: env!("CARGO_PKG_VERSION").to_string(),
        seed: train_cfg.seed,
        model: model_cfg,
        train: train_cfg,
        data: data_cfg,
        inputs: BTreeMap::from([(
            "series".to_string(),
            InputDigest {
                path: series_path,
                sha256: digest,
            },
        )]),
    };
    let mut history = Vec::new();
    write_history(&mut history, &outcome.history).expect("writing to memory");
    let mut ckpt = Vec::new();
    write_checkpoint(&mut ckpt, &model).map_err(|e| CliError::Data(e.to_string()))?;
    write_bytes(&dir.join(MANIFEST_FILE), &json_bytes(&manifest))?;
    write_bytes(&dir.join(HISTORY_FILE), &history)?;
    write_bytes(&dir.join(CHECKPOINT_FILE), &ckpt)?;
    write_bytes(&dir.join(NORM_FILE), &json_bytes(&stats))?;
    say(
        out,
        format_args!(
            "{} train / {} val samples ({} skipped for history, {} for horizon), {} epochs, best {}{}, history sha256 {}",
            train_set.len(),
            val_set.len(),
            skipped.history,
            skipped.future,
            outcome.history.len(),
            outcome.best_epoch.map_or_else(|| "-".to_string(), |e| e.to_string()),
            if outcome.stopped_early { " (stopped early)" } else { "" },
            sha256_hex(&history)
        ),
    )
}

struct LoadedRun {
    model: Dsan,
    stats: NormStats,
    manifest: Option<RunManifest>,
}

fn load_run(dir: &Path) -> Result<LoadedRun> {
    let ckpt_path = dir.join(CHECKPOINT_FILE);
    let bytes = read_bytes(&ckpt_path)?;
    let model = read_checkpoint(&mut bytes.as_slice())
        .map_err(|e: CheckpointError| CliError::Data(format!("{}: {e}", ckpt_path.display())))?;
    let norm_path = dir.join(NORM_FILE);
    let stats: NormStats = serde_json::from_slice(&read_bytes(&norm_path)?)
        .map_err(|e| CliError::Data(format!("{}: {e}", norm_path.display())))?;
    let manifest = fs::read(dir.join(MANIFEST_FILE))
        .ok()
        .and_then(|b| serde_json::from_slice(&b).ok());
    Ok(LoadedRun { model, stats, manifest })
}

fn check_series_matches(model: &Dsan, series: &GridSeries) -> Result<()> {
    let c = model.config();
    if (c.rows, c.cols, c.features, c.externals) != (series.rows, series.cols, series.features, series.externals) {
        return Err(CliError::Data(format!(
            "model expects {}x{} grids with {} features and {} externals, series has {}x{} with {} and {}",
            c.rows, c.cols, c.features, c.externals, series.rows, series.cols, series.features, series.externals
        )));
    }
    Ok(())
}

fn reach(model: &Dsan) -> usize {
    let c = model.config();
    history_offsets(&SampleSpec::from(c), c.steps_per_day)
        .into_iter()
        .max()
        .unwrap_or(0)
        .max(1)
}

fn cmd_eval(a: &EvalArgs, out: &mut impl Write) -> Result<()> {
    let ecfg = FileConfig::load(a.config.as_deref())?.eval;
    let run = load_run(&resolve_run_dir(&a.run))?;
    let (series, _) = load_series(&a.series)?;
    check_series_matches(&run.model, &series)?;
    let steps = a.steps.or(ecfg.steps).unwrap_or(run.model.config().horizon);
    let strategy = a
        .strategy
        .map(Strategy::from)
        .or(ecfg.strategy)
        .or(run.manifest.as_ref().map(|m| m.train.strategy))
        .unwrap_or_default();
    let thresholds = a.thresholds.clone().unwrap_or(ecfg.thresholds);
    let thresholds = if thresholds.is_empty() {
        vec![0.0; series.features]
    } else {
        thresholds
    };
    if steps == 0 {
        return Err(CliError::Usage("steps must be at least 1".into()));
    }
    if thresholds.len() != series.features {
        return Err(CliError::Usage(format!(
            "{} thresholds given for {} features",
            thresholds.len(),
            series.features
        )));
    }
    let stride = a.stride.unwrap_or(ecfg.stride).max(1);
    let train_end = run.manifest.as_ref().map_or(0, |m| m.data.train_end(series.steps()));
    let first = train_end.max(reach(&run.model));
    if first + steps > series.steps() {
        return Err(CliError::Data(format!(
            "{steps} steps from step {first} exceed the {} steps of ground truth",
            series.steps()
        )));
    }
    let starts: Vec<usize> = (first..=series.steps() - steps).step_by(stride).collect();

    let (file, table) = match &a.multi_step_run {
        Some(dir) => {
            let one = load_run(&resolve_run_dir(dir))?;
            check_series_matches(&one.model, &series)?;
            if one.stats != run.stats {
                return Err(CliError::Usage("both runs must share normalization bounds".into()));
            }
            let first = first.max(reach(&one.model));
            let starts: Vec<usize> = starts.into_iter().filter(|&s| s >= first).collect();
            let curves = compare_strategies(&one.model, &run.model, &series, &run.stats, &starts, steps, &thresholds)?;
            let mut buf = Vec::new();
            curves.write_csv(&mut buf).expect("writing to memory");
            let wins: Vec<String> = (0..series.features)
                .map(|k| {
                    format!(
                        "feature {k}: multi-step lower at {}/{steps} steps",
                        curves.multi_step_wins(k)
                    )
                })
                .collect();
            eprintln!("{}", wins.join("; "));
            (CURVES_FILE, buf)
        }
        None => {
            let acc = evaluate(&run.model, &series, &run.stats, &starts, steps, strategy, &thresholds)?;
            let mut buf = Vec::new();
            acc.write_table(&mut buf).expect("writing to memory");
            (METRICS_FILE, buf)
        }
    };
    let path = a.out.clone().unwrap_or_else(|| resolve_run_dir(&a.run).join(file));
    write_bytes(&path, &table)?;
    out.write_all(&table)
        .map_err(|e| CliError::Data(format!("stdout: {e}")))
}

fn cmd_predict(a: &PredictArgs, out: &mut impl Write) -> Result<()> {
    let dir = resolve_run_dir(&a.run);
    let run = load_run(&dir)?;
    let (series, _) = load_series(&a.series)?;
    check_series_matches(&run.model, &series)?;
    let steps = a.steps.unwrap_or(run.model.config().horizon);
    if a.t1 < reach(&run.model) {
        return Err(CliError::Data(format!(
            "t1 = {} leaves too little history; the model reaches back {} steps",
            a.t1,
            reach(&run.model)
        )));
    }
    let strategy = a
        .strategy
        .map(Strategy::from)
        .or(run.manifest.as_ref().map(|m| m.train.strategy))
        .unwrap_or_default();
    let forecast = match strategy {
        Strategy::Consecutive => rollout_consecutive(&run.model, &series, &run.stats, a.t1, steps)?,
        Strategy::MultiStep => rollout_multi_step(&run.model, &series, &run.stats, a.t1, steps, Feedback::Prediction)?,
    };
    let mut buf = Vec::new();
    writeln!(buf, "step,timestamp,row,col,feature,value").expect("writing to memory");
    for s in 0..steps {
        let ts = series.timestamp(a.t1 + s).format("%Y-%m-%d %H:%M:%S");
        for grid in 0..series.grids() {
            for k in 0..series.features {
                writeln!(
                    buf,
                    "{},{ts},{},{},{k},{}",
                    a.t1 + s,
                    grid / series.cols,
                    grid % series.cols,
                    forecast.at(&[s, grid, k])
                )
                .expect("writing to memory");
            }
        }
    }
    let path = a
        .out
        .clone()
        .unwrap_or_else(|| dir.join(format!("forecast_{}.csv", a.t1)));
    write_bytes(&path, &buf)?;
    say(
        out,
        format_args!(
            "{steps}x{}x{} forecast written to {}",
            series.grids(),
            series.features,
            path.display()
        ),
    )
}

fn cmd_gradcheck(a: &GradcheckArgs, out: &mut impl Write) -> Result<()> {
    let fault = match &a.inject_fault {
        Some(name) => Some(OpKind::from_name(name).ok_or_else(|| {
            let names: Vec<&str> = OpKind::ALL.iter().map(|k| k.name()).collect();
            CliError::Usage(format!("unknown op {name:?}; expected one of {}", names.join(", ")))
        })?),
        None => None,
    };
    let reports = run_gradcheck(a.seed, fault)?;
    let mut failed = Vec::new();
    for r in &reports {
        let status = if r.passed() { "ok" } else { "FAIL" };
        say(
            out,
            format_args!(
                "{status:<4} {:<18} rel_error {:.3e}  tolerance {:.0e}",
                r.name, r.rel_error, r.tolerance
            ),
        )?;
        if !r.passed() {
            failed.push(r.name.as_str());
        }
    }
    if failed.is_empty() {
        say(out, format_args!("all {} suites passed", reports.len()))
    } else {
        Err(CliError::Numeric(format!(
            "gradient check failed in: {}",
            failed.join(", ")
        )))
    }
}

/// Parses process arguments and runs the chosen command, returning the exit code.
pub fn main_with_args(args: impl IntoIterator<Item = std::ffi::OsString>) -> u8 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli, &mut io::stdout().lock()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
