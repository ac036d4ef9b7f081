use std::io::Write;
use std::path::{Path, PathBuf};

use avcl_core::audio;
use avcl_core::data::{generate, load_corpus, PreparedData, SpectrogramCache};
use avcl_core::fsutil::write_atomic;
use avcl_core::gradsuite::{self, TOLERANCE};
use avcl_core::train::{self, AblationAxis, Checkpoint, MetricsWriter};
use clap::{Args, Parser, Subcommand};

use crate::{CliError, RunConfig, EXIT_FAILURE};

#[derive(Debug, Parser)]
#[command(name = "avcl", version, about = "Audio-visual contrastive pretraining and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pretrain the encoders; writes checkpoint/, metrics.csv and config.json.
    Train(TrainArgs),
    /// Fit a classifier on frozen embeddings and report test accuracy.
    Probe(ProbeArgs),
    /// Compute the mel spectrogram of a WAV file.
    Spectrogram(SpectrogramArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Train and probe every ablation variant over paired seeds.
    Ablate(AblateArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// JSON run configuration; built-in defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides both the data seed and the training seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Output directory (overrides paths.out_dir).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct ProbeArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Checkpoint directory (overrides paths.checkpoint).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Probe epochs (overrides train.probe.epochs).
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct SpectrogramArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    pub input: PathBuf,
    /// Tensor file to write; parameters go to `<out>.json`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    /// Random instances per check.
    #[arg(long, default_value_t = gradsuite::DEFAULT_SEEDS)]
    pub seeds: u64,
    /// Adds a deliberately wrong gradient to the suite.
    #[arg(long, hide = true)]
    pub inject_fault: bool,
}

impl Default for GradcheckArgs {
    fn default() -> Self {
        Self {
            seeds: gradsuite::DEFAULT_SEEDS,
            inject_fault: false,
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Comma-separated axes: amfm, cgra, selfcl, lambda_sweep (overrides ablation.axes).
    #[arg(long, value_delimiter = ',', value_parser = parse_axis)]
    pub axes: Option<Vec<AblationAxis>>,
    /// Paired seeds per variant (overrides ablation.seeds).
    #[arg(long)]
    pub seeds: Option<u64>,
}

fn parse_axis(s: &str) -> Result<AblationAxis, String> {
    serde_json::from_value(serde_json::Value::String(s.trim().to_string()))
        .map_err(|_| format!("unknown ablation axis {s:?} (expected amfm, cgra, selfcl or lambda_sweep)"))
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    match cli.command {
        Command::Train(a) => train(&a, out),
        Command::Probe(a) => probe(&a, out),
        Command::Spectrogram(a) => spectrogram(&a, out),
        Command::Gradcheck(a) => gradcheck(&a, out),
        Command::Ablate(a) => ablate(&a, out),
    }
}

fn load_config(common: &CommonArgs) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    Ok(cfg)
}

/// Generates or loads the dataset described by `cfg` and extracts features.
pub fn load_data(cfg: &RunConfig) -> Result<PreparedData, CliError> {
    let split = match &cfg.corpus {
        Some(c) => load_corpus(&c.dir, &c.manifest)?,
        None => generate(&cfg.data)?,
    };
    let cache = SpectrogramCache::new(cfg.stft.clone())?;
    Ok(PreparedData::new(&split, &cache, cfg.train.model.audio_input)?)
}

fn emit(out: &mut dyn Write, line: impl AsRef<str>) -> Result<(), CliError> {
    writeln!(out, "{}", line.as_ref()).map_err(|e| CliError::new(EXIT_FAILURE, format!("writing output: {e}")))
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::config(format!("output directory {} is not writable: {e}", dir.display())))
}

pub fn train(args: &TrainArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let mut cfg = load_config(&args.common)?;
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    cfg.validate()?;
    let out_dir = args.out.clone().unwrap_or_else(|| cfg.paths.out_dir.clone());
    let data = load_data(&cfg)?;
    emit(out, format!("train={} val={} test={} visual_dim={} audio_dim={}", data.train.len(), data.val.len(), data.test.len(), data.visual_dim(), data.audio_dim()))?;

    ensure_dir(&out_dir)?;
    let mut writer = MetricsWriter::create(&out_dir.join("metrics.csv"))?;
    let result = train::pretrain_with(&cfg.train, &data, |rec| {
        log::info!("epoch {} total {:.6} grad_norm {:.4}", rec.epoch, rec.total_loss, rec.grad_norm);
        writer.append(rec)
    })?;
    writer.finish()?;

    let ckpt_dir = out_dir.join("checkpoint");
    result.best.save(&ckpt_dir)?;
    write_atomic(&out_dir.join("config.json"), format!("{}\n", cfg.to_json()).as_bytes())?;
    let last = result.metrics.last().expect("at least one epoch");
    emit(out, format!("final_loss={:.6} best_epoch={}", last.total_loss, result.best.epoch))?;
    emit(out, format!("checkpoint={}", ckpt_dir.display()))
}

pub fn probe(args: &ProbeArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let mut cfg = load_config(&args.common)?;
    if let Some(e) = args.epochs {
        cfg.train.probe.epochs = e;
    }
    cfg.validate()?;
    let dir = args
        .checkpoint
        .clone()
        .or_else(|| cfg.paths.checkpoint.clone())
        .ok_or_else(|| CliError::config("no checkpoint given (use --checkpoint or paths.checkpoint)"))?;
    let ckpt = Checkpoint::load(&dir)?;
    let data = load_data(&cfg)?;
    let report = train::linear_probe(&ckpt, &data, &cfg.train.probe)?;
    emit(out, format!("train_accuracy={:.6} best_epoch={}", report.train_accuracy, report.best_epoch))?;
    if let Some(v) = report.val_accuracy {
        emit(out, format!("val_accuracy={v:.6}"))?;
    }
    emit(out, format!("test_accuracy={:.6}", report.test_accuracy))
}

pub fn spectrogram(args: &SpectrogramArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let common = CommonArgs {
        config: args.config.clone(),
        seed: None,
    };
    let cfg = load_config(&common)?;
    cfg.stft.validate()?;
    let mel = audio::process_file(&args.input, &cfg.stft)?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    mel.save(&args.out)?;
    emit(out, format!("bands={} frames={} source_rate={}", mel.bands(), mel.frames(), mel.source_rate))?;
    emit(out, format!("spectrogram={}", args.out.display()))
}

pub fn gradcheck(args: &GradcheckArgs, out: &mut dyn Write) -> Result<(), CliError> {
    if args.seeds == 0 {
        return Err(CliError::config("--seeds must be at least 1"));
    }
    let results = gradsuite::run_suite(args.seeds, args.inject_fault)?;
    let mut failed = Vec::new();
    for r in &results {
        let verdict = if r.passed() { "ok" } else { "FAIL" };
        emit(out, format!("{:<36} max_rel_error={:.3e} {verdict}", r.name, r.max_rel_error))?;
        if !r.passed() {
            failed.push(r.name);
        }
    }
    if failed.is_empty() {
        emit(out, format!("gradcheck=pass checks={} tolerance={TOLERANCE:e}", results.len()))
    } else {
        emit(out, format!("gradcheck=fail failed={}", failed.join(",")))?;
        Err(CliError::new(EXIT_FAILURE, format!("gradient check failed: {}", failed.join(", "))))
    }
}

pub fn ablate(args: &AblateArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let mut cfg = load_config(&args.common)?;
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    if let Some(axes) = &args.axes {
        cfg.ablation.axes = axes.clone();
    }
    if let Some(s) = args.seeds {
        cfg.ablation.seeds = s;
    }
    cfg.validate()?;
    let out_dir = args.out.clone().unwrap_or_else(|| cfg.paths.out_dir.clone());
    ensure_dir(&out_dir)?;
    let data = load_data(&cfg)?;
    let table = train::ablate(&cfg.train, &cfg.ablation.axes, &data, cfg.ablation.seeds)?;
    let rows_path = out_dir.join("ablation.csv");
    write_atomic(&rows_path, table.rows_csv().as_bytes())?;
    write_atomic(&out_dir.join("ablation_summary.csv"), table.summary_csv().as_bytes())?;
    for s in &table.summary {
        emit(out, format!("{} mean={:.4} sd={:.4}", s.variant, s.mean, s.sd))?;
    }
    emit(out, format!("ablation={}", rows_path.display()))
}
