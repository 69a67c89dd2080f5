//! Command-line front end: corpus simulation, training, restoration,
//! evaluation, and spectrogram figures.
//!
//! All relative paths resolve against `--workdir`; every run leaves a
//! resolved-config snapshot next to its outputs so it can be reproduced
//! exactly. The `DUALMAG_DETERMINISTIC` environment variable (default on)
//! is recorded in each snapshot; all computation is float64 and
//! deterministic for a fixed seed either way.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use dualmag::metrics::{self, MetricsError};
use dualmag::model::{load_checkpoint, Model, ModelConfig, ModelError, Variant};
use dualmag::signal::{stft_complex, StftConfig, Waveform, WindowKind};
use dualmag::sim::{
    build_corpus, read_manifest, verify_degradation, CorpusConfig, SimError,
};
use dualmag::train::{train, LossWeights, TrainConfig, TrainError, TrainItem};
use dualmag::wav::{read_wav, write_wav, WavError};

const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

#[derive(Debug)]
enum CliError {
    Config(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Data(_) => EXIT_DATA,
            CliError::Numeric(_) => EXIT_NUMERIC,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Numeric(m) => write!(f, "numeric error: {m}"),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Geometry(_) | SimError::Argument(_) | SimError::Filter(_) => {
                CliError::Config(e.to_string())
            }
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Numeric(m) => CliError::Numeric(m),
            TrainError::Model(m) => m.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<WavError> for CliError {
    fn from(e: WavError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

#[derive(Parser)]
#[command(
    name = "dualmag",
    version,
    about = "Speech restoration: simulate degradations, train dual-path \
             magnitude models, restore and evaluate audio"
)]
struct Cli {
    /// Base directory; every relative path resolves against it.
    #[arg(long, global = true, default_value = ".")]
    workdir: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a degraded/clean corpus from a distortion config.
    Simulate(SimulateArgs),
    /// Train a model variant on a simulated corpus.
    Train(TrainArgs),
    /// Run a checkpoint over a WAV file or directory.
    Restore(RestoreArgs),
    /// Score restored audio against a corpus manifest.
    Evaluate(EvaluateArgs),
    /// Render a dB-magnitude spectrogram image for one or two WAVs.
    Plot(PlotArgs),
}

fn deterministic_mode() -> bool {
    std::env::var("DUALMAG_DETERMINISTIC").map(|v| v != "0").unwrap_or(true)
}

fn write_snapshot<T: Serialize>(dir: &Path, command: &str, resolved: &T) -> Result<(), CliError> {
    #[derive(Serialize)]
    struct Snapshot<'a, T> {
        command: &'a str,
        deterministic: bool,
        #[serde(flatten)]
        resolved: &'a T,
    }
    let snap = Snapshot {
        command,
        deterministic: deterministic_mode(),
        resolved,
    };
    let text = toml::to_string_pretty(&snap)
        .map_err(|e| CliError::Config(format!("cannot serialize resolved config: {e}")))?;
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(format!("{command}-resolved.toml")), text)?;
    Ok(())
}

fn read_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(e) = std::env::set_current_dir(&cli.workdir) {
        eprintln!("config error: cannot enter workdir {}: {e}", cli.workdir.display());
        return ExitCode::from(EXIT_CONFIG);
    }
    let result = match cli.cmd {
        Cmd::Simulate(a) => cmd_simulate(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Restore(a) => cmd_restore(a),
        Cmd::Evaluate(a) => cmd_evaluate(a),
        Cmd::Plot(a) => cmd_plot(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.code())
        }
    }
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

#[derive(Args)]
struct SimulateArgs {
    /// Corpus config (TOML; unknown keys rejected).
    #[arg(long)]
    config: PathBuf,
    /// Override the corpus seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the number of pairs to generate.
    #[arg(long)]
    count: Option<usize>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Re-run the degradation pipeline on every generated pair and gate
    /// on the SNR / RT60 / bandwidth tolerances.
    #[arg(long)]
    verify: bool,
}

fn cmd_simulate(args: SimulateArgs) -> Result<(), CliError> {
    let mut cfg: CorpusConfig = read_toml(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(count) = args.count {
        cfg.count = count;
    }
    if let Some(out) = args.out {
        cfg.out_dir = out;
    }
    let manifest_path = cfg.out_dir.join("manifest.jsonl");
    let entries = if cfg.count == 0 && manifest_path.exists() {
        // Verify-only invocation over a previously generated corpus.
        read_manifest(&manifest_path)?
    } else {
        let entries = build_corpus(&cfg)?;
        write_snapshot(&cfg.out_dir, "simulate", &cfg)?;
        println!(
            "wrote {} pairs to {} (manifest.jsonl)",
            entries.len(),
            cfg.out_dir.display()
        );
        entries
    };
    if args.verify {
        let mut failures = Vec::new();
        for entry in &entries {
            let clean = read_wav(&entry.clean_path)?;
            let degraded = read_wav(&entry.degraded_path)?;
            let noise = match &entry.noise_path {
                Some(p) => Some(read_wav(p)?),
                None => None,
            };
            let report = verify_degradation(&clean, &degraded, noise.as_ref(), &entry.spec)?;
            let name = Path::new(&entry.degraded_path)
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            let verdict = if report.pass() { "PASS" } else { "FAIL" };
            let snr = report
                .snr
                .as_ref()
                .map(|c| format!("snr {:.2}/{:.2} dB", c.measured, c.expected))
                .unwrap_or_else(|| "snr n/a".into());
            let rt60 = report
                .rt60
                .as_ref()
                .map(|c| format!("rt60 {:.3}/{:.3} s", c.measured, c.expected))
                .unwrap_or_else(|| "rt60 n/a".into());
            println!(
                "verify {name}: {verdict} ({snr}, {rt60}, bw {:.0}/{:.0} Hz)",
                report.bandwidth.measured, report.bandwidth.expected
            );
            if !report.pass() {
                failures.push(name);
            }
        }
        if !failures.is_empty() {
            return Err(CliError::Data(format!(
                "verification failed for: {}",
                failures.join(", ")
            )));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct ModelOverrides {
    /// "default" (desk-scale) or "tiny".
    preset: Option<String>,
    channels: Option<usize>,
    n_conformers: Option<usize>,
    n_heads: Option<usize>,
    n_fft: Option<usize>,
    hop: Option<usize>,
    win_length: Option<usize>,
    compress_exponent: Option<f64>,
    omega: Option<f64>,
    alpha_init: Option<f64>,
}

impl ModelOverrides {
    fn resolve(&self, variant: Variant) -> Result<ModelConfig, CliError> {
        let mut cfg = match self.preset.as_deref() {
            None | Some("default") => ModelConfig::default_for(variant),
            Some("tiny") => ModelConfig::tiny(variant),
            Some(other) => {
                return Err(CliError::Config(format!(
                    "unknown model preset {other:?} (expected \"default\" or \"tiny\")"
                )))
            }
        };
        macro_rules! apply {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field { cfg.$field = v; })*
            };
        }
        apply!(
            channels,
            n_conformers,
            n_heads,
            n_fft,
            hop,
            win_length,
            compress_exponent,
            omega,
            alpha_init
        );
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct TrainOverrides {
    steps: Option<u64>,
    lr: Option<f64>,
    batch_size: Option<usize>,
    segment_seconds: Option<f64>,
    seed: Option<u64>,
    checkpoint_every: Option<u64>,
    weight_decay: Option<f64>,
    grad_clip: Option<f64>,
    warmup_steps: Option<u64>,
    lr_final: Option<f64>,
    weights: Option<LossWeights>,
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct TrainDoc {
    manifest: Option<PathBuf>,
    variant: Option<String>,
    /// Manifest split to train on: "train" (default), "validation", "all".
    split: Option<String>,
    model: ModelOverrides,
    train: TrainOverrides,
}

#[derive(Args)]
struct TrainArgs {
    /// Training config (TOML; unknown keys rejected). Flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Corpus manifest (JSONL) to train on.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Model variant: s1, s2, u1, dm1, dm2.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from the checkpoint in the run directory.
    #[arg(long)]
    resume: bool,
    /// Run directory for checkpoints, logs, and the config snapshot.
    #[arg(long, default_value = "run")]
    out: PathBuf,
}

#[derive(Serialize)]
struct TrainResolved {
    manifest: PathBuf,
    split: String,
    model: ModelConfig,
    train: TrainConfig,
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let doc: TrainDoc = match &args.config {
        Some(path) => read_toml(path)?,
        None => TrainDoc::default(),
    };
    let variant_str = args
        .variant
        .or(doc.variant)
        .ok_or_else(|| CliError::Config("a variant is required (--variant or config)".into()))?;
    let variant = Variant::parse(&variant_str).map_err(|e| CliError::Config(e.to_string()))?;
    let model_cfg = doc.model.resolve(variant)?;
    let steps = args
        .steps
        .or(doc.train.steps)
        .ok_or_else(|| CliError::Config("a step count is required (--steps or config)".into()))?;
    let mut train_cfg = TrainConfig::quick(steps);
    let t = &doc.train;
    if let Some(v) = t.lr {
        train_cfg.lr = v;
    }
    if let Some(v) = t.batch_size {
        train_cfg.batch_size = v;
    }
    if let Some(v) = t.segment_seconds {
        train_cfg.segment_seconds = v;
    }
    if let Some(v) = t.checkpoint_every {
        train_cfg.checkpoint_every = v;
    }
    if let Some(v) = t.weight_decay {
        train_cfg.weight_decay = v;
    }
    if let Some(v) = t.grad_clip {
        train_cfg.grad_clip = v;
    }
    if let Some(v) = t.warmup_steps {
        train_cfg.warmup_steps = v;
    }
    if t.lr_final.is_some() {
        train_cfg.lr_final = t.lr_final;
    }
    if let Some(v) = t.weights {
        train_cfg.weights = v;
    }
    train_cfg.seed = args.seed.or(t.seed).unwrap_or(0);

    let manifest_path = args
        .manifest
        .or(doc.manifest)
        .ok_or_else(|| CliError::Config("a manifest is required (--manifest or config)".into()))?;
    let split = doc.split.unwrap_or_else(|| "train".to_string());
    let entries = read_manifest(&manifest_path)?;
    let mut items = Vec::new();
    for e in &entries {
        if split != "all" && e.split != split {
            continue;
        }
        items.push(TrainItem {
            degraded: read_wav(&e.degraded_path)?,
            clean: read_wav(&e.clean_path)?,
        });
    }
    if items.is_empty() {
        return Err(CliError::Data(format!(
            "manifest {} has no pairs in split {split:?}",
            manifest_path.display()
        )));
    }

    let mut model = Model::init(model_cfg.clone(), train_cfg.seed)?;
    println!(
        "{} parameters: {}",
        variant,
        model.params.count_parameters()
    );
    write_snapshot(
        &args.out,
        "train",
        &TrainResolved {
            manifest: manifest_path,
            split,
            model: model_cfg,
            train: train_cfg.clone(),
        },
    )?;
    let summary = train(&mut model, &items, &train_cfg, &args.out, args.resume)?;
    match summary.final_loss {
        Some(loss) => println!(
            "ran {} steps, final loss {loss:.6}, checkpoint {}",
            summary.steps_run,
            summary.checkpoint.display()
        ),
        None => println!(
            "ran {} steps, checkpoint {}",
            summary.steps_run,
            summary.checkpoint.display()
        ),
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// restore
// ---------------------------------------------------------------------------

#[derive(Args)]
struct RestoreArgs {
    /// WAV file or directory of WAV files to restore.
    input: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output WAV path (file input) or directory (directory input).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Serialize)]
struct RestoreResolved {
    checkpoint: PathBuf,
    input: PathBuf,
    model: ModelConfig,
    step: u64,
}

fn cmd_restore(args: RestoreArgs) -> Result<(), CliError> {
    let ck = load_checkpoint(&args.checkpoint, None)?;
    let model = ck.model;
    let resolved = RestoreResolved {
        checkpoint: args.checkpoint.clone(),
        input: args.input.clone(),
        model: model.cfg.clone(),
        step: ck.step,
    };
    if args.input.is_dir() {
        std::fs::create_dir_all(&args.out)?;
        let mut names: Vec<PathBuf> = std::fs::read_dir(&args.input)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().map(|e| e == "wav").unwrap_or(false))
            .collect();
        names.sort();
        if names.is_empty() {
            return Err(CliError::Data(format!(
                "no .wav files in {}",
                args.input.display()
            )));
        }
        for path in &names {
            let input = read_wav(path)?;
            let restored = model.restore(&input)?;
            let name = path.file_name().expect("file path has a name");
            write_wav(args.out.join(name), &restored)?;
        }
        write_snapshot(&args.out, "restore", &resolved)?;
        println!("restored {} files into {}", names.len(), args.out.display());
    } else {
        let input = read_wav(&args.input)?;
        let restored = model.restore(&input)?;
        if let Some(parent) = args.out.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        write_wav(&args.out, &restored)?;
        let dir = args
            .out
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or_else(|| Path::new("."))
            .to_path_buf();
        write_snapshot(&dir, "restore", &resolved)?;
        println!("restored {} -> {}", args.input.display(), args.out.display());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

#[derive(Args)]
struct EvaluateArgs {
    /// Corpus manifest (JSONL).
    #[arg(long)]
    manifest: PathBuf,
    /// Directory of restored WAVs, matched by degraded file name.
    #[arg(long)]
    restored: PathBuf,
    /// Optional JSON sidecar of externally computed metric columns,
    /// keyed by utterance id then metric name.
    #[arg(long)]
    external: Option<PathBuf>,
    /// Report path (JSON).
    #[arg(long, default_value = "eval-report.json")]
    out: PathBuf,
}

#[derive(Serialize)]
struct EvaluateResolved {
    manifest: PathBuf,
    restored: PathBuf,
    external: Option<PathBuf>,
    report: PathBuf,
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<(), CliError> {
    let entries = read_manifest(&args.manifest)?;
    let external = match &args.external {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            let map: BTreeMap<String, BTreeMap<String, f64>> = serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            Some(map)
        }
        None => None,
    };
    let report = metrics::evaluate(&entries, &args.restored, external.as_ref())?;
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| CliError::Data(format!("cannot serialize report: {e}")))?;
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(&args.out, json)?;
    let dir = args
        .out
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or_else(|| Path::new("."))
        .to_path_buf();
    write_snapshot(
        &dir,
        "evaluate",
        &EvaluateResolved {
            manifest: args.manifest.clone(),
            restored: args.restored.clone(),
            external: args.external.clone(),
            report: args.out.clone(),
        },
    )?;
    print!("{}", report.summary_text());
    Ok(())
}

// ---------------------------------------------------------------------------
// plot
// ---------------------------------------------------------------------------

const PLOT_NFFT: usize = 2048;
const PLOT_HOP: usize = 512;
const PLOT_FLOOR_DB: f64 = -80.0;
const PLOT_SEPARATOR_PX: u32 = 2;

#[derive(Args)]
struct PlotArgs {
    /// One WAV for a single panel, or two for side-by-side panels on a
    /// shared dB scale.
    #[arg(num_args = 1..=2, required = true)]
    wavs: Vec<PathBuf>,
    /// Output image (PNG).
    #[arg(long)]
    out: PathBuf,
}

/// Uncompressed dB magnitude, frames by bins, on the same 2048/512 Hann
/// STFT the LSD metric uses.
fn spectrogram_db(w: &Waveform) -> Result<ndarray::Array2<f64>, CliError> {
    let cfg = StftConfig::new(PLOT_NFFT, PLOT_HOP, PLOT_NFFT, WindowKind::Hann, 1.0)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let spec = stft_complex(&w.samples, &cfg).map_err(|e| CliError::Data(e.to_string()))?;
    Ok(spec.mapv(|c| 20.0 * (c.norm() + 1e-12).log10()))
}

fn render_panel(
    img: &mut image::GrayImage,
    x0: u32,
    db: &ndarray::Array2<f64>,
    max_db: f64,
) {
    let (frames, bins) = db.dim();
    for t in 0..frames {
        for f in 0..bins {
            let v = (db[[t, f]] - max_db).clamp(PLOT_FLOOR_DB, 0.0);
            let level = ((v - PLOT_FLOOR_DB) / -PLOT_FLOOR_DB * 255.0).round() as u8;
            // Low frequencies at the bottom of the image.
            img.put_pixel(x0 + t as u32, (bins - 1 - f) as u32, image::Luma([level]));
        }
    }
}

fn cmd_plot(args: PlotArgs) -> Result<(), CliError> {
    let panels: Vec<ndarray::Array2<f64>> = args
        .wavs
        .iter()
        .map(|p| spectrogram_db(&read_wav(p)?))
        .collect::<Result<_, _>>()?;
    let max_db = panels
        .iter()
        .flat_map(|p| p.iter())
        .fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    if !max_db.is_finite() {
        return Err(CliError::Numeric("all-silent input, no dB reference".into()));
    }
    let bins = panels[0].ncols() as u32;
    let width: u32 = panels.iter().map(|p| p.nrows() as u32).sum::<u32>()
        + if panels.len() == 2 { PLOT_SEPARATOR_PX } else { 0 };
    let mut img = image::GrayImage::from_pixel(width, bins, image::Luma([255]));
    let mut x0 = 0;
    for p in &panels {
        render_panel(&mut img, x0, p, max_db);
        x0 += p.nrows() as u32 + PLOT_SEPARATOR_PX;
    }
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    img.save(&args.out)
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", args.out.display())))?;
    println!("wrote {} ({}x{})", args.out.display(), width, bins);
    Ok(())
}
