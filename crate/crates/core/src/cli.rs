//! Command-line interface.
//!
//! Every subcommand accepts `--config FILE` holding `key = value` lines whose
//! keys are the long flag names with `_` for `-`. Values from the file sit
//! between the defaults and the flags given on the command line. Each command
//! writes the merged settings next to its outputs in the same grammar, so a
//! snapshot can be fed back through `--config`.
//!
//! Exit codes: 0 success, 2 usage or invalid settings, 3 I/O, data or
//! checkpoint errors, 4 numeric failure, 5 verification failure.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::inject_backward_fault;
use crate::data::{generate_synthetic, load_dataset, mix_seed, DataError, DomainConfig, LabeledSample, Manifest};
use crate::eval::{evaluate, EvalConfig, EvalError, MetricsReport, DEFAULT_CONF_THRESHOLD, DEFAULT_NMS_IOU};
use crate::gradcheck::{run_suite, CheckResult, TOLERANCE};
use crate::model::ModelError;
use crate::trainer::{train_on, Mode, TrainConfig, TrainError, TrainState, BEST_CKPT};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;
pub const EXIT_VERIFY: i32 = 5;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{0}")]
    Verification(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Io { .. } | CliError::Data(_) => EXIT_IO,
            CliError::Verification(_) => EXIT_VERIFY,
            CliError::Eval(_) => EXIT_NUMERIC,
            CliError::Train(e) => match e {
                TrainError::InvalidConfig(_) | TrainError::Model(ModelError::InvalidImageSize(..)) => EXIT_USAGE,
                TrainError::Model(ModelError::InvalidClassCount) => EXIT_USAGE,
                TrainError::Io { .. } | TrainError::Data(_) | TrainError::Checkpoint(_) => EXIT_IO,
                TrainError::Model(ModelError::ArchMismatch) => EXIT_IO,
                _ => EXIT_NUMERIC,
            },
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Parser)]
#[command(name = "consisaug", version, about = "Flip-consistency student-teacher detector training")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset with train, val and test splits.
    GenData(GenDataArgs),
    /// Train one model.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Train and test the four ablation modes over several seeds.
    Ablate(AblateArgs),
    /// Evaluate ablation checkpoints on a second domain.
    CrossDomain(CrossDomainArgs),
    /// Compare every backward rule and loss gradient with finite differences.
    GradCheck(GradCheckArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
#[command(args_override_self = true)]
pub struct GenDataArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// `a` or `b`.
    #[arg(long, default_value = "a")]
    pub domain: String,
    #[arg(long, default_value_t = 500)]
    pub n_train: usize,
    #[arg(long, default_value_t = 50)]
    pub n_val: usize,
    #[arg(long, default_value_t = 50)]
    pub n_test: usize,
    #[arg(long, default_value_t = 64)]
    pub image_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Hyperparameters shared by `train` and `ablate`. Unset values keep the
/// trainer defaults.
#[derive(Debug, Clone, Default, Args, Serialize)]
pub struct HyperArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub warmup_epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub consistency_weight: Option<f64>,
    #[arg(long)]
    pub consistency_rampup_epochs: Option<usize>,
    #[arg(long)]
    pub confidence_mask_threshold: Option<f64>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub num_classes: Option<usize>,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub pos_threshold: Option<f64>,
    #[arg(long)]
    pub neg_threshold: Option<f64>,
    #[arg(long)]
    pub conf_threshold: Option<f64>,
    #[arg(long)]
    pub nms_iou: Option<f64>,
}

#[derive(Debug, Clone, Args, Serialize)]
#[command(args_override_self = true)]
pub struct TrainArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Dataset root holding `train/` and optionally `val/`.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// vanilla | flipaug | consis | consis_flipaug
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub init_seed: Option<u64>,
    #[command(flatten)]
    #[serde(flatten)]
    pub hyper: HyperArgs,
    #[arg(long)]
    pub halt_after_epochs: Option<usize>,
    /// Continue from `out_dir/last.ckpt` when it exists.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Clone, Args, Serialize)]
#[command(args_override_self = true)]
pub struct EvalArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// A split directory holding `images/` and `labels/`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Evaluate the EMA teacher instead of the student.
    #[arg(long)]
    pub use_teacher: bool,
    #[arg(long, default_value_t = DEFAULT_CONF_THRESHOLD)]
    pub conf_threshold: f64,
    #[arg(long, default_value_t = DEFAULT_NMS_IOU)]
    pub nms_iou: f64,
    /// Directory for `eval.json` and the settings snapshot.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
#[command(args_override_self = true)]
pub struct AblateArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Dataset root holding `train/`, `val/` and `test/`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    pub seeds: Vec<u64>,
    /// Cells trained concurrently.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Reuse finished or partial cells whose stored settings match.
    #[arg(long)]
    pub resume: bool,
    #[command(flatten)]
    #[serde(flatten)]
    pub hyper: HyperArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
#[command(args_override_self = true)]
pub struct CrossDomainArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Output directory of a finished `ablate` run.
    #[arg(long)]
    pub runs: PathBuf,
    /// Dataset root of the training domain.
    #[arg(long)]
    pub data_a: PathBuf,
    /// Dataset root of the unseen domain.
    #[arg(long)]
    pub data_b: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    pub seeds: Vec<u64>,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, default_value_t = DEFAULT_CONF_THRESHOLD)]
    pub conf_threshold: f64,
    #[arg(long, default_value_t = DEFAULT_NMS_IOU)]
    pub nms_iou: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
#[command(args_override_self = true)]
pub struct GradCheckArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// First seed; probe points are drawn from `seed .. seed + seeds`.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Scales the backward rule of the named op, to exercise the checker.
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
}

/// Renders serializable settings as `key = value` lines. Unset options are
/// skipped and lists are comma-joined.
pub fn snapshot_text<T: Serialize>(args: &T) -> String {
    let value = serde_json::to_value(args).expect("settings serialize");
    let mut s = String::new();
    if let serde_json::Value::Object(map) = value {
        for (k, v) in map {
            if let Some(text) = value_text(&v) {
                let _ = writeln!(s, "{k} = {text}");
            }
        }
    }
    s
}

fn value_text(v: &serde_json::Value) -> Option<String> {
    use serde_json::Value;
    match v {
        Value::Null => None,
        Value::String(s) => Some(s.clone()),
        Value::Array(items) => Some(items.iter().filter_map(value_text).collect::<Vec<_>>().join(",")),
        other => Some(other.to_string()),
    }
}

/// Turns `key = value` lines into flags. `true` becomes a bare switch and
/// `false` is dropped.
fn config_flags(text: &str, path: &Path) -> Result<Vec<OsString>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            CliError::Usage(format!("{}:{}: expected `key = value`", path.display(), i + 1))
        })?;
        let (k, v) = (k.trim(), v.trim());
        if k == "config" {
            continue;
        }
        let flag = format!("--{}", k.replace('_', "-"));
        match v {
            "true" => out.push(flag.into()),
            "false" => {}
            _ => {
                out.push(flag.into());
                out.push(v.into());
            }
        }
    }
    Ok(out)
}

/// The `--config` value following the subcommand, if any.
fn config_arg(argv: &[OsString]) -> Option<PathBuf> {
    let mut it = argv.iter().skip(2);
    while let Some(a) = it.next() {
        let a = a.to_string_lossy();
        if a == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(v) = a.strip_prefix("--config=") {
            return Some(PathBuf::from(v));
        }
    }
    None
}

/// Parses the command line, folding in the `--config` file if one is given.
pub fn parse_args(argv: &[OsString]) -> std::result::Result<Cli, clap::Error> {
    let Some(path) = config_arg(argv) else {
        return Cli::try_parse_from(argv);
    };
    let text = fs::read_to_string(&path).map_err(|e| {
        clap::Error::raw(clap::error::ErrorKind::Io, format!("cannot read config {}: {e}\n", path.display()))
    })?;
    let extra = config_flags(&text, &path)
        .map_err(|e| clap::Error::raw(clap::error::ErrorKind::InvalidValue, format!("{e}\n")))?;
    let mut merged: Vec<OsString> = argv[..2].to_vec();
    merged.extend(extra);
    merged.extend_from_slice(&argv[2..]);
    Cli::try_parse_from(merged)
}

/// Entry point of the binary. Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let argv: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match parse_args(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                clap::error::ErrorKind::Io => EXIT_IO,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenData(a) => {
            let manifest = run_gen_data(&a)?;
            println!("wrote {} files under {}", manifest.entries.len(), a.out.display());
        }
        Command::Train(a) => {
            let cfg = train_config(&a)?;
            let outcome = crate::trainer::train(&cfg)?;
            let best = outcome.state.best.map_or("none".to_string(), |(m, e)| format!("{m:.4} at epoch {e}"));
            println!(
                "trained {} epochs into {}; best val mAP50 {best}",
                outcome.state.epoch,
                cfg.out_dir.display()
            );
        }
        Command::Eval(a) => {
            let report = run_eval(&a)?;
            println!("{}", serde_json::to_string_pretty(&report).expect("serializable"));
        }
        Command::Ablate(a) => {
            let report = run_ablate(&a)?;
            print!("{}", report.to_text());
        }
        Command::CrossDomain(a) => {
            let report = run_cross_domain(&a)?;
            print!("{}", report.to_text());
        }
        Command::GradCheck(a) => {
            let results = run_grad_check(&a)?;
            print!("{}", grad_check_text(&results));
            let failed: Vec<&str> = {
                let mut names: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
                names.dedup();
                names
            };
            if !failed.is_empty() {
                return Err(CliError::Verification(format!("gradient check failed for: {}", failed.join(", "))));
            }
        }
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, text).map_err(io_err(path))
}

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

/// Writes `out/{train,val,test}`, a top-level `manifest.txt` covering every
/// split, and `gen_config.txt`.
pub fn run_gen_data(a: &GenDataArgs) -> Result<Manifest> {
    let cfg = DomainConfig::by_name(&a.domain, a.image_size)
        .ok_or_else(|| CliError::Usage(format!("unknown domain {:?} (expected a or b)", a.domain)))?;
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    if a.n_train == 0 {
        return Err(CliError::Usage("--n-train must be at least 1".into()));
    }
    let mut all = Manifest::default();
    for (i, (split, n)) in SPLITS.iter().zip([a.n_train, a.n_val, a.n_test]).enumerate() {
        let m = generate_synthetic(&cfg, n, mix_seed(a.seed, &[i as u64]), &a.out.join(split))?;
        all.entries.extend(m.nested(split).entries);
    }
    write_text(&a.out.join("manifest.txt"), &all.render())?;
    write_text(&a.out.join("gen_config.txt"), &snapshot_text(a))?;
    Ok(all)
}

fn hyper_into(cfg: &mut TrainConfig, h: &HyperArgs) -> Result<()> {
    let value = serde_json::to_value(h).expect("settings serialize");
    if let serde_json::Value::Object(map) = value {
        for (k, v) in map {
            if let Some(text) = value_text(&v) {
                cfg.set(&k, &text)?;
            }
        }
    }
    Ok(())
}

/// Merges the `train` flags over the trainer defaults.
pub fn train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    let value = serde_json::to_value(a).expect("settings serialize");
    if let serde_json::Value::Object(map) = value {
        for (k, v) in map {
            if let Some(text) = value_text(&v) {
                cfg.set(&k, &text)?;
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_split(dir: &Path) -> Result<Vec<LabeledSample>> {
    let samples = load_dataset(dir)?;
    if samples.is_empty() {
        return Err(CliError::Data(DataError::Io {
            path: dir.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "no images in split"),
        }));
    }
    Ok(samples)
}

fn check_sizes(samples: &[LabeledSample], image_size: usize, dir: &Path) -> Result<()> {
    match samples.iter().find(|s| s.height() != image_size || s.width() != image_size) {
        Some(s) => Err(CliError::Data(DataError::CorruptImage {
            path: dir.join("images").join(format!("{}.ppm", s.id)),
            reason: format!("expected {image_size}x{image_size}, found {}x{}", s.height(), s.width()),
        })),
        None => Ok(()),
    }
}

fn evaluate_checkpoint(path: &Path, samples: &[LabeledSample], dir: &Path, teacher: bool, cfg: &EvalConfig) -> Result<MetricsReport> {
    let state = TrainState::load(path, None)?;
    let params = if teacher { &state.st.teacher } else { &state.st.student };
    check_sizes(samples, params.arch.image_size, dir)?;
    Ok(evaluate(params, samples, cfg)?)
}

/// Evaluates one checkpoint. Writes `eval.json` and `eval_config.txt` when
/// `--out` is given.
pub fn run_eval(a: &EvalArgs) -> Result<MetricsReport> {
    if !(0.0..=1.0).contains(&a.conf_threshold) || !(a.nms_iou > 0.0 && a.nms_iou <= 1.0) {
        return Err(CliError::Usage("--conf-threshold must lie in [0, 1] and --nms-iou in (0, 1]".into()));
    }
    let samples = load_split(&a.data)?;
    let cfg = EvalConfig {
        conf_threshold: a.conf_threshold,
        nms_iou: a.nms_iou,
    };
    let report = evaluate_checkpoint(&a.checkpoint, &samples, &a.data, a.use_teacher, &cfg)?;
    if let Some(out) = &a.out {
        write_text(&out.join("eval.json"), &(serde_json::to_string_pretty(&report).expect("serializable") + "\n"))?;
        write_text(&out.join("eval_config.txt"), &snapshot_text(a))?;
    }
    Ok(report)
}

/// Mean and sample standard deviation; the deviation is 0 for one value.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self { mean, std }
    }
}

impl std::fmt::Display for Stat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.4}±{:.4}", self.mean, self.std)
    }
}

/// Per-metric statistics over seeds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryStats {
    pub precision: Stat,
    pub recall: Stat,
    pub map50: Stat,
    pub f1: Stat,
    pub f2: Stat,
}

impl SummaryStats {
    pub fn of(reports: &[MetricsReport]) -> Self {
        let pick = |f: fn(&MetricsReport) -> f64| Stat::of(&reports.iter().map(f).collect::<Vec<_>>());
        Self {
            precision: pick(|r| r.precision),
            recall: pick(|r| r.recall),
            map50: pick(|r| r.map50),
            f1: pick(|r| r.f1),
            f2: pick(|r| r.f2),
        }
    }

    fn row(&self) -> [String; 5] {
        [self.precision, self.recall, self.map50, self.f1, self.f2].map(|s| s.to_string())
    }
}

const METRIC_HEADERS: [&str; 5] = ["precision", "recall", "mAP50", "F1", "F2"];

fn aligned_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.chars().count());
        }
    }
    let mut s = String::new();
    let mut line = |cells: Vec<String>| {
        let parts: Vec<String> = cells.iter().zip(&widths).map(|(c, &w)| format!("{c:<w$}")).collect();
        let _ = writeln!(s, "{}", parts.join("  ").trim_end());
    };
    line(header.iter().map(|h| h.to_string()).collect());
    for r in rows {
        line(r.clone());
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub mode: Mode,
    pub seed: u64,
    pub run_dir: PathBuf,
    /// Epoch of the checkpoint that was tested (best validation mAP50).
    pub best_epoch: usize,
    pub report: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub mode: Mode,
    pub seeds: usize,
    pub stats: SummaryStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub split: String,
    pub seeds: Vec<u64>,
    pub cells: Vec<AblationCell>,
    pub summary: Vec<ModeSummary>,
}

impl AblationReport {
    pub fn mode(&self, mode: Mode) -> Option<&ModeSummary> {
        self.summary.iter().find(|m| m.mode == mode)
    }

    pub fn to_text(&self) -> String {
        let mut header = vec!["mode"];
        header.extend(METRIC_HEADERS);
        let rows: Vec<Vec<String>> = self
            .summary
            .iter()
            .map(|m| {
                let mut r = vec![m.mode.name().to_string()];
                r.extend(m.stats.row());
                r
            })
            .collect();
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        format!(
            "{} split, mean±std over seeds {}\n{}",
            self.split,
            seeds.join(","),
            aligned_table(&header, &rows)
        )
    }
}

pub const ABLATION_JSON: &str = "ablation.json";
pub const ABLATION_TEXT: &str = "ablation.txt";

/// Run directory of one ablation cell.
pub fn cell_dir(root: &Path, mode: Mode, seed: u64) -> PathBuf {
    root.join(mode.name()).join(format!("seed{seed}"))
}

/// Trains every (mode, seed) cell on `data/train` with `data/val` for model
/// selection, then tests each best checkpoint on `data/test`. All four
/// modes of one seed start from the same initialization.
pub fn run_ablate(a: &AblateArgs) -> Result<AblationReport> {
    if a.seeds.is_empty() {
        return Err(CliError::Usage("--seeds needs at least one seed".into()));
    }
    if a.jobs == 0 {
        return Err(CliError::Usage("--jobs must be at least 1".into()));
    }
    let mut base = TrainConfig::default();
    hyper_into(&mut base, &a.hyper)?;
    base.data_dir = a.data.clone();
    base.resume = a.resume;
    base.validate()?;

    let train_set = load_split(&a.data.join("train"))?;
    let val_dir = a.data.join("val");
    let val_set = if val_dir.exists() { load_dataset(&val_dir)? } else { Vec::new() };
    let test_dir = a.data.join("test");
    let test_set = load_split(&test_dir)?;
    for (set, dir) in [(&train_set, a.data.join("train")), (&val_set, val_dir), (&test_set, test_dir.clone())] {
        check_sizes(set, base.image_size, &dir)?;
    }
    fs::create_dir_all(&a.out).map_err(io_err(&a.out))?;
    write_text(&a.out.join("ablate_config.txt"), &snapshot_text(a))?;

    let cells: Vec<(Mode, u64)> = a.seeds.iter().flat_map(|&s| Mode::ALL.map(|m| (m, s))).collect();
    let configs: Vec<TrainConfig> = cells
        .iter()
        .map(|&(mode, seed)| TrainConfig {
            mode,
            seed,
            init_seed: Some(seed),
            out_dir: cell_dir(&a.out, mode, seed),
            ..base.clone()
        })
        .collect();

    let eval_cfg = base.eval_config();
    let results: Mutex<Vec<Option<Result<AblationCell>>>> = Mutex::new((0..cells.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        if i >= configs.len() {
            break;
        }
        let cfg = &configs[i];
        info!("ablation cell {} seed {}", cfg.mode, cfg.seed);
        let cell = train_on(cfg, &train_set, &val_set)
            .map_err(CliError::from)
            .and_then(|outcome| {
                let best_epoch = outcome.state.best.map_or(outcome.state.epoch, |(_, e)| e);
                let report = evaluate_checkpoint(&cfg.out_dir.join(BEST_CKPT), &test_set, &test_dir, false, &eval_cfg)?;
                Ok(AblationCell {
                    mode: cfg.mode,
                    seed: cfg.seed,
                    run_dir: cfg.out_dir.clone(),
                    best_epoch,
                    report,
                })
            });
        results.lock().expect("no poisoned workers")[i] = Some(cell);
    };
    std::thread::scope(|scope| {
        for _ in 0..a.jobs.min(configs.len()) {
            scope.spawn(worker);
        }
    });
    let mut done = Vec::with_capacity(cells.len());
    for r in results.into_inner().expect("no poisoned workers") {
        done.push(r.expect("every cell ran")?);
    }

    let summary = Mode::ALL
        .iter()
        .map(|&mode| {
            let reports: Vec<MetricsReport> = done.iter().filter(|c| c.mode == mode).map(|c| c.report).collect();
            ModeSummary {
                mode,
                seeds: reports.len(),
                stats: SummaryStats::of(&reports),
            }
        })
        .collect();
    let report = AblationReport {
        split: "test".into(),
        seeds: a.seeds.clone(),
        cells: done,
        summary,
    };
    write_text(&a.out.join(ABLATION_JSON), &(serde_json::to_string_pretty(&report).expect("serializable") + "\n"))?;
    write_text(&a.out.join(ABLATION_TEXT), &report.to_text())?;
    Ok(report)
}

/// The two models compared across domains.
pub const CROSS_DOMAIN_MODES: [Mode; 2] = [Mode::Vanilla, Mode::ConsisFlipaug];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossDomainEntry {
    pub model: Mode,
    /// `a` for the training domain, `b` for the unseen one.
    pub domain: String,
    pub per_seed: Vec<(u64, MetricsReport)>,
    pub stats: SummaryStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossDomainReport {
    pub split: String,
    pub seeds: Vec<u64>,
    pub entries: Vec<CrossDomainEntry>,
}

impl CrossDomainReport {
    pub fn entry(&self, model: Mode, domain: &str) -> Option<&CrossDomainEntry> {
        self.entries.iter().find(|e| e.model == model && e.domain == domain)
    }

    pub fn to_text(&self) -> String {
        let mut header = vec!["model", "domain"];
        header.extend(METRIC_HEADERS);
        let rows: Vec<Vec<String>> = self
            .entries
            .iter()
            .map(|e| {
                let mut r = vec![e.model.name().to_string(), e.domain.clone()];
                r.extend(e.stats.row());
                r
            })
            .collect();
        format!("{} split, best checkpoints trained on domain a\n{}", self.split, aligned_table(&header, &rows))
    }
}

pub const CROSS_DOMAIN_JSON: &str = "cross_domain.json";
pub const CROSS_DOMAIN_TEXT: &str = "cross_domain.txt";

/// Evaluates the vanilla and consis_flipaug checkpoints of an ablation run
/// on both domains.
pub fn run_cross_domain(a: &CrossDomainArgs) -> Result<CrossDomainReport> {
    if a.seeds.is_empty() {
        return Err(CliError::Usage("--seeds needs at least one seed".into()));
    }
    let cfg = EvalConfig {
        conf_threshold: a.conf_threshold,
        nms_iou: a.nms_iou,
    };
    let domains = [("a", a.data_a.join(&a.split)), ("b", a.data_b.join(&a.split))];
    let sets: Vec<Vec<LabeledSample>> = domains.iter().map(|(_, d)| load_split(d)).collect::<Result<_>>()?;
    let mut entries = Vec::new();
    for model in CROSS_DOMAIN_MODES {
        for ((domain, dir), samples) in domains.iter().zip(&sets) {
            let mut per_seed = Vec::new();
            for &seed in &a.seeds {
                let ckpt = cell_dir(&a.runs, model, seed).join(BEST_CKPT);
                per_seed.push((seed, evaluate_checkpoint(&ckpt, samples, dir, false, &cfg)?));
            }
            let reports: Vec<MetricsReport> = per_seed.iter().map(|(_, r)| *r).collect();
            entries.push(CrossDomainEntry {
                model,
                domain: domain.to_string(),
                stats: SummaryStats::of(&reports),
                per_seed,
            });
        }
    }
    let report = CrossDomainReport {
        split: a.split.clone(),
        seeds: a.seeds.clone(),
        entries,
    };
    write_text(&a.out.join(CROSS_DOMAIN_JSON), &(serde_json::to_string_pretty(&report).expect("serializable") + "\n"))?;
    write_text(&a.out.join(CROSS_DOMAIN_TEXT), &report.to_text())?;
    write_text(&a.out.join("cross_domain_config.txt"), &snapshot_text(a))?;
    Ok(report)
}

const FAULT_OPS: [&str; 21] = [
    "add", "sub", "mul", "div", "neg", "exp", "log", "relu", "sigmoid", "square", "smooth_l1", "matmul", "conv2d",
    "channel_bias", "softmax", "log_softmax", "sum", "mean", "max", "reshape", "gather",
];

/// Runs the gradient-check suite for each seed. Failing checks are reported
/// in the results, not as an error.
pub fn run_grad_check(a: &GradCheckArgs) -> Result<Vec<CheckResult>> {
    if a.seeds == 0 {
        return Err(CliError::Usage("--seeds must be at least 1".into()));
    }
    let fault = match a.inject_fault.as_deref() {
        None => None,
        Some(op) => Some(
            *FAULT_OPS
                .iter()
                .find(|&&o| o == op)
                .ok_or_else(|| CliError::Usage(format!("unknown op {op:?}")))?,
        ),
    };
    inject_backward_fault(fault);
    let mut results = Vec::new();
    for seed in a.seed..a.seed + a.seeds {
        results.extend(run_suite(seed));
    }
    inject_backward_fault(None);
    if let Some(out) = &a.out {
        write_text(&out.join("grad_check.json"), &(serde_json::to_string_pretty(&results).expect("serializable") + "\n"))?;
        write_text(&out.join("grad_check_config.txt"), &snapshot_text(a))?;
    }
    Ok(results)
}

/// One row per check: the worst relative error over all seeds.
pub fn grad_check_text(results: &[CheckResult]) -> String {
    let mut names: Vec<&str> = Vec::new();
    for r in results {
        if !names.contains(&r.name.as_str()) {
            names.push(&r.name);
        }
    }
    let rows: Vec<Vec<String>> = names
        .iter()
        .map(|&n| {
            let rs: Vec<&CheckResult> = results.iter().filter(|r| r.name == n).collect();
            let worst = rs.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
            let ok = rs.iter().all(|r| r.passed);
            vec![
                n.to_string(),
                rs.len().to_string(),
                format!("{worst:.3e}"),
                if ok { "ok".into() } else { "FAIL".into() },
            ]
        })
        .collect();
    format!(
        "tolerance {TOLERANCE:e}\n{}",
        aligned_table(&["check", "seeds", "max_rel_error", "status"], &rows)
    )
}
