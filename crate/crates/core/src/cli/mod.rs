//! The `mopro` command line: `generate`, `train`, `eval` and `plot`.
//!
//! Every command is non-interactive. Failures map to fixed exit codes:
//!
//! | code | meaning                                                        |
//! |------|----------------------------------------------------------------|
//! | 0    | success (also `--help` / `--version`)                          |
//! | 2    | bad command-line usage                                         |
//! | 3    | invalid configuration (bad value, unknown key, syntax error)   |
//! | 4    | file could not be read or written                              |
//! | 5    | malformed dataset, checkpoint or metrics file                  |
//! | 6    | shape mismatch between model, checkpoint and dataset           |
//! | 7    | training or evaluation failed (non-finite loss, bad state)     |
//!
//! Logging goes to stderr and is controlled by `MOPRO_LOG`
//! (`error`, `info`, `debug`; default `info`).

pub mod plot;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use crate::datagen::{generate, DatasetConfig, NoisyDataset};
use crate::error::{MoproError, Result};
use crate::evalkit::{emit_metrics, read_metrics, MetricsFormat};
use crate::settings::{Settings, SettingsWriter};
use crate::trainer::{load_checkpoint, rebalance_finetune, save_checkpoint, Ablation, TrainConfig, TrainState};

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_CONFIG: u8 = 3;
pub const EXIT_IO: u8 = 4;
pub const EXIT_FORMAT: u8 = 5;
pub const EXIT_MISMATCH: u8 = 6;
pub const EXIT_RUNTIME: u8 = 7;

pub const DATASET_FILE: &str = "dataset.mpds";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const CONFIG_ECHO_FILE: &str = "config.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.mpck";
pub const METRICS_CSV_FILE: &str = "metrics.csv";
pub const METRICS_JSON_FILE: &str = "metrics.json";
pub const FINETUNE_FILE: &str = "finetune.json";
pub const EVAL_JSON_FILE: &str = "eval.json";
pub const EVAL_CSV_FILE: &str = "eval.csv";

/// Exit code for an error, per the table in the module docs.
pub fn exit_code(e: &MoproError) -> u8 {
    match e {
        MoproError::Config { .. } | MoproError::Syntax { .. } => EXIT_CONFIG,
        MoproError::File { .. } | MoproError::Io(_) => EXIT_IO,
        MoproError::Parse { .. } => EXIT_FORMAT,
        MoproError::Structural(_) => EXIT_MISMATCH,
        MoproError::Dimension { .. }
        | MoproError::Degenerate(_)
        | MoproError::Numeric(_)
        | MoproError::Contract(_)
        | MoproError::State(_)
        | MoproError::Init(_) => EXIT_RUNTIME,
    }
}

#[derive(Debug, Parser)]
#[command(name = "mopro", version, about = "Momentum prototypes on synthetic noisy data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic noisy dataset.
    Generate(GenerateArgs),
    /// Train (or resume) a model on a dataset file.
    Train(TrainArgs),
    /// Score a checkpoint against a dataset's ground truth.
    Eval(EvalArgs),
    /// Render metric curves from a metrics CSV as SVG files.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Config file; only the `[dataset]` section is used.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Overrides the configured training seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from a checkpoint; its stored configuration is used.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long, value_name = "wo_pro|wo_ins|wo_s|ce_only")]
    pub ablate: Option<Ablation>,
    #[arg(long, value_name = "N|auto")]
    pub threads: Option<Threads>,
    /// Stop once this many epochs are complete, leaving a resumable checkpoint.
    #[arg(long)]
    pub stop_after: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    #[arg(long, value_name = "N|auto")]
    pub threads: Option<Threads>,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// Metrics CSV (or `.json`) written by `train`.
    #[arg(long)]
    pub metrics: PathBuf,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

/// Worker threads for the probes; `auto` uses the available parallelism.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Threads {
    Fixed(usize),
    Auto,
}

impl Threads {
    pub fn resolve(self) -> usize {
        match self {
            Threads::Fixed(n) => n,
            Threads::Auto => std::thread::available_parallelism().map_or(1, |n| n.get()),
        }
    }
}

impl FromStr for Threads {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "auto" {
            return Ok(Threads::Auto);
        }
        match s.parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Threads::Fixed(n)),
            _ => Err(format!("`{s}` is not a positive integer or `auto`")),
        }
    }
}

/// Dataset and training configuration as read from one config file.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    /// Parses `[dataset]` plus the training sections. A `[run]` section
    /// (manifest metadata) is skipped so manifests can be fed back in.
    pub fn from_settings_text(text: &str) -> Result<Self> {
        let settings = Settings::parse(text)?;
        let mut config = RunConfig::default();
        for e in &settings.entries {
            if e.section == "run" {
                continue;
            }
            if !config.dataset.apply_entry(e)? && !config.train.apply_entry(e)? {
                return Err(e.unknown());
            }
        }
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| MoproError::file(path, e))?;
        Self::from_settings_text(&text)
    }

    pub fn write_settings(&self, w: &mut SettingsWriter) {
        self.dataset.write_settings(w);
        self.train.write_settings(w);
    }

    pub fn to_settings_text(&self) -> String {
        let mut w = SettingsWriter::default();
        self.write_settings(&mut w);
        w.finish()
    }
}

/// Build identifier recorded in manifests. `MOPRO_BUILD_ID` at compile
/// time (e.g. a git revision) is appended when set.
pub fn build_id() -> String {
    let base = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));
    match option_env!("MOPRO_BUILD_ID") {
        Some(id) => format!("{base} ({id})"),
        None => base.to_string(),
    }
}

/// Hex SHA-256 of a file's bytes.
pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| MoproError::file(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Everything needed to reproduce a run, written before any work starts.
/// The text form is itself a valid config file.
#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub build: String,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub dataset_path: Option<PathBuf>,
    pub dataset_sha256: Option<String>,
    pub ablation: Option<Ablation>,
    pub resumed_from: Option<PathBuf>,
    pub config: RunConfig,
}

impl RunManifest {
    pub fn to_text(&self) -> String {
        let mut w = SettingsWriter::default();
        w.section("run")
            .kv("command", &self.command)
            .kv("build", &self.build)
            .kv("seed", self.seed)
            .kv("out_dir", self.out_dir.display());
        if let Some(p) = &self.dataset_path {
            w.kv("dataset", p.display());
        }
        if let Some(h) = &self.dataset_sha256 {
            w.kv("dataset_sha256", h);
        }
        if let Some(a) = self.ablation {
            w.kv("ablation", a);
        }
        if let Some(p) = &self.resumed_from {
            w.kv("resumed_from", p.display());
        }
        self.config.write_settings(&mut w);
        w.finish()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let settings = Settings::parse(text)?;
        let mut m = RunManifest {
            command: String::new(),
            build: String::new(),
            seed: 0,
            out_dir: PathBuf::new(),
            dataset_path: None,
            dataset_sha256: None,
            ablation: None,
            resumed_from: None,
            config: RunConfig::from_settings_text(text)?,
        };
        for e in settings.section("run") {
            match e.key.as_str() {
                "command" => m.command = e.value.clone(),
                "build" => m.build = e.value.clone(),
                "seed" => m.seed = e.parse()?,
                "out_dir" => m.out_dir = PathBuf::from(&e.value),
                "dataset" => m.dataset_path = Some(PathBuf::from(&e.value)),
                "dataset_sha256" => m.dataset_sha256 = Some(e.value.clone()),
                "ablation" => m.ablation = Some(e.parse()?),
                "resumed_from" => m.resumed_from = Some(PathBuf::from(&e.value)),
                _ => return Err(e.unknown()),
            }
        }
        Ok(m)
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        write_file(&dir.join(MANIFEST_FILE), self.to_text().as_bytes())
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<PathBuf> {
    fs::write(path, bytes).map_err(|e| MoproError::file(path, e))?;
    Ok(path.to_path_buf())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| MoproError::file(dir, e))
}

/// Write to a sibling temp file, then rename, so an interrupted write
/// never leaves a truncated checkpoint behind.
fn save_checkpoint_atomic(state: &TrainState, path: &Path) -> Result<()> {
    let tmp = path.with_extension("mpck.tmp");
    save_checkpoint(state, &tmp)?;
    fs::rename(&tmp, path).map_err(|e| MoproError::file(path, e))
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
}

/// Files written by `generate`.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerateOutcome {
    pub dataset: PathBuf,
    pub manifest: PathBuf,
    pub sha256: String,
}

pub fn cmd_generate(args: &GenerateArgs) -> Result<GenerateOutcome> {
    let mut config = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        config.dataset.seed = seed;
    }
    config.dataset.validate()?;
    let ds = generate(&config.dataset)?;
    create_dir(&args.out)?;
    let path = args.out.join(DATASET_FILE);
    ds.save(&path)?;
    let sha256 = file_digest(&path)?;
    let manifest = RunManifest {
        command: "generate".into(),
        build: build_id(),
        seed: config.dataset.seed,
        out_dir: args.out.clone(),
        dataset_path: Some(path.clone()),
        dataset_sha256: Some(sha256.clone()),
        ablation: None,
        resumed_from: None,
        config,
    };
    let manifest_path = manifest.write(&args.out)?;
    log::info!(
        "generated {} samples ({} corrupted, {} OOD) -> {}",
        ds.len(),
        ds.corrupted_count(),
        ds.ood_count(),
        path.display()
    );
    Ok(GenerateOutcome {
        dataset: path,
        manifest: manifest_path,
        sha256,
    })
}

/// Files written by `train` and where the run stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub metrics_csv: PathBuf,
    pub metrics_json: PathBuf,
    pub manifest: PathBuf,
    pub finetune: Option<PathBuf>,
    pub epochs_completed: usize,
}

pub fn cmd_train(args: &TrainArgs) -> Result<TrainOutcome> {
    let ds = NoisyDataset::load(&args.dataset)?;
    let dataset_sha256 = file_digest(&args.dataset)?;

    let (mut state, mut config) = match &args.resume {
        Some(path) => {
            if args.config.is_some() || args.seed.is_some() || args.ablate.is_some() {
                return Err(MoproError::config(
                    "resume",
                    "--resume takes its configuration from the checkpoint; \
                     drop --config, --seed and --ablate",
                ));
            }
            let state = load_checkpoint(path)?;
            let config = RunConfig {
                train: state.config.clone(),
                ..RunConfig::default()
            };
            (Some(state), config)
        }
        None => (None, load_config(args.config.as_deref())?),
    };
    if let Some(seed) = args.seed {
        config.train.seed = seed;
    }
    if let Some(a) = args.ablate {
        config.train = config.train.clone().with_ablation(a);
    }
    if let Some(t) = args.threads {
        config.train.threads = t.resolve();
    }
    let mut state = match state.take() {
        Some(mut s) => {
            s.config.threads = config.train.threads;
            s.check_dataset(&ds)?;
            s
        }
        None => TrainState::new(config.train.clone(), &ds)?,
    };

    create_dir(&args.out)?;
    let manifest = RunManifest {
        command: "train".into(),
        build: build_id(),
        seed: config.train.seed,
        out_dir: args.out.clone(),
        dataset_path: Some(args.dataset.clone()),
        dataset_sha256: Some(dataset_sha256),
        ablation: args.ablate,
        resumed_from: args.resume.clone(),
        config: config.clone(),
    };
    let manifest_path = manifest.write(&args.out)?;
    write_file(&args.out.join(CONFIG_ECHO_FILE), config.to_settings_text().as_bytes())?;

    let checkpoint = args.out.join(CHECKPOINT_FILE);
    let stop = args.stop_after.unwrap_or(usize::MAX).min(state.config.epochs);
    let completes_schedule = stop == state.config.epochs && !state.is_finished();
    if state.epoch == 0 && state.config.warmup_epochs == 0 && !state.bank.all_initialized() {
        state.init_prototypes(&ds)?;
    }
    while state.epoch < stop {
        state.run_epoch(&ds)?;
        save_checkpoint_atomic(&state, &checkpoint)?;
    }
    if !checkpoint.exists() {
        save_checkpoint_atomic(&state, &checkpoint)?;
    }

    let mut finetune = None;
    if completes_schedule && state.config.finetune {
        let report = rebalance_finetune(&mut state, &ds)?;
        log::info!(
            "finetune: {} cleaned samples, {} steps, final loss {:.4}",
            report.cleaned,
            report.steps,
            report.final_loss
        );
        let json = serde_json::to_string_pretty(&report).expect("report serialises");
        finetune = Some(write_file(&args.out.join(FINETUNE_FILE), json.as_bytes())?);
        save_checkpoint_atomic(&state, &checkpoint)?;
    }

    let records = state.records();
    let metrics_csv = args.out.join(METRICS_CSV_FILE);
    let metrics_json = args.out.join(METRICS_JSON_FILE);
    emit_metrics(&records, &metrics_csv, MetricsFormat::Csv)?;
    emit_metrics(&records, &metrics_json, MetricsFormat::Json)?;
    Ok(TrainOutcome {
        checkpoint,
        metrics_csv,
        metrics_json,
        manifest: manifest_path,
        finetune,
        epochs_completed: state.epoch,
    })
}

/// Files written by `eval`.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    pub json: PathBuf,
    pub csv: PathBuf,
}

pub fn cmd_eval(args: &EvalArgs) -> Result<EvalOutcome> {
    let mut state = load_checkpoint(&args.checkpoint)?;
    if let Some(t) = args.threads {
        state.config.threads = t.resolve();
    }
    let ds = NoisyDataset::load(&args.dataset)?;
    state.check_dataset(&ds)?;
    let report = state.evaluate(&ds)?;

    create_dir(&args.out)?;
    let json = serde_json::to_string_pretty(&report).expect("report serialises");
    let c = &report.correction;
    let rows: [(&str, f64); 16] = [
        ("epoch", report.epoch as f64),
        ("samples", c.samples as f64),
        ("in_distribution", c.in_distribution as f64),
        ("corrupted", c.corrupted as f64),
        ("pseudo_acc", c.pseudo_acc),
        ("in_dist_acc", c.in_dist_acc),
        ("correction_precision", c.correction_precision),
        ("correction_recall", c.correction_recall),
        ("ood_precision", c.ood_precision),
        ("ood_recall", c.ood_recall),
        ("rule_argmax", c.rules.argmax as f64),
        ("rule_kept", c.rules.kept as f64),
        ("rule_ood", c.rules.ood as f64),
        ("knn_acc", report.knn_acc),
        ("linear_acc", report.linear_acc),
        ("calib_err", report.calibration.error),
    ];
    let mut csv = String::from("metric,value\n");
    for (name, v) in rows {
        csv.push_str(&format!("{name},{}\n", crate::evalkit::format_number(v)));
    }
    log::info!(
        "eval: pseudo_acc {:.4} ood_recall {:.4} ood_precision {:.4} knn {:.4} linear {:.4} calib {:.4}",
        c.pseudo_acc,
        c.ood_recall,
        c.ood_precision,
        report.knn_acc,
        report.linear_acc,
        report.calibration.error
    );
    Ok(EvalOutcome {
        json: write_file(&args.out.join(EVAL_JSON_FILE), json.as_bytes())?,
        csv: write_file(&args.out.join(EVAL_CSV_FILE), csv.as_bytes())?,
    })
}

/// Writes one SVG per chart in [`plot::CHARTS`]; returns their paths.
pub fn cmd_plot(args: &PlotArgs) -> Result<Vec<PathBuf>> {
    let records = read_metrics(&args.metrics)?;
    create_dir(&args.out)?;
    plot::CHARTS
        .iter()
        .map(|spec| {
            let svg = plot::render_chart(spec, &records);
            write_file(&args.out.join(format!("{}.svg", spec.file_stem)), svg.as_bytes())
        })
        .collect()
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Generate(a) => cmd_generate(a).map(|o| println!("{}", o.dataset.display())),
        Command::Train(a) => cmd_train(a).map(|o| println!("{}", o.checkpoint.display())),
        Command::Eval(a) => cmd_eval(a).map(|o| println!("{}", o.json.display())),
        Command::Plot(a) => cmd_plot(a).map(|paths| paths.iter().for_each(|p| println!("{}", p.display()))),
    }
}

/// Installs the stderr logger configured by `MOPRO_LOG`. Safe to call twice.
pub fn init_logging() {
    let env = env_logger::Env::new().filter_or("MOPRO_LOG", "info");
    let _ = env_logger::Builder::from_env(env)
        .format_timestamp(None)
        .format_target(false)
        .try_init();
}

/// Parse arguments, run, and map the outcome to an exit code.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_error_kind_has_a_documented_code() {
        let cases = [
            (MoproError::config("x", "y"), EXIT_CONFIG),
            (MoproError::Syntax { line: 1, msg: "m".into() }, EXIT_CONFIG),
            (MoproError::file("p", std::io::Error::other("e")), EXIT_IO),
            (MoproError::Parse { offset: 0, msg: "m".into() }, EXIT_FORMAT),
            (MoproError::Structural("m".into()), EXIT_MISMATCH),
            (MoproError::Numeric("m".into()), EXIT_RUNTIME),
            (MoproError::Degenerate("m".into()), EXIT_RUNTIME),
        ];
        for (e, code) in cases {
            assert_eq!(exit_code(&e), code, "{e}");
        }
    }

    #[test]
    fn threads_flag_accepts_counts_and_auto() {
        assert_eq!("3".parse::<Threads>().unwrap(), Threads::Fixed(3));
        assert_eq!("auto".parse::<Threads>().unwrap(), Threads::Auto);
        assert!("0".parse::<Threads>().is_err());
        assert!(Threads::Auto.resolve() >= 1);
    }

    #[test]
    fn run_config_round_trips_through_text() {
        let mut c = RunConfig::default();
        c.dataset.noise_rate = 0.25;
        c.dataset.seed = 9;
        c.train.epochs = 17;
        c.train.lr = 0.0123;
        let back = RunConfig::from_settings_text(&c.to_settings_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_are_rejected_with_line_numbers() {
        let err = RunConfig::from_settings_text("[dataset]\nclasses = 3\nbogus = 1\n").unwrap_err();
        assert!(matches!(err, MoproError::Syntax { line: 3, .. }), "{err}");
    }

    #[test]
    fn manifest_is_a_valid_config_and_round_trips() {
        let m = RunManifest {
            command: "train".into(),
            build: build_id(),
            seed: 4,
            out_dir: "runs/a".into(),
            dataset_path: Some("data/d.mpds".into()),
            dataset_sha256: Some("ab".repeat(32)),
            ablation: Some(Ablation::WoIns),
            resumed_from: None,
            config: RunConfig::default(),
        };
        let text = m.to_text();
        assert_eq!(RunManifest::parse(&text).unwrap(), m);
        assert_eq!(RunConfig::from_settings_text(&text).unwrap(), m.config);
    }
}
