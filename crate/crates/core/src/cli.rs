//! Command-line surface: corpus generation, reinforcement, training,
//! evaluation, benchmarking, store inspection and reparameterized export.
//!
//! Every command prints a short human summary on stderr and a JSON report to
//! `--report PATH` (or stdout when absent). Exit codes: 0 ok, 2 validation
//! error, 3 I/O error, 4 numeric failure.

use std::ffi::OsString;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::augment::{AugmentError, AugmentPolicy};
use crate::corpus::{self, CorpusConfig, PaletteTeacher, TemplateCaptioner};
use crate::drstore::{
    load_pairs, reinforce, save_png, CaptionProvider, JsonlCaptions, MmebTeacher,
    RandomProjectionTeacher, ReinforceConfig, SkippedSample, Store, StoreError, StoreManifest,
    StoreStats, StoreWriter, TeacherProvider, DEFAULT_GZIP_LEVEL, RECOMMENDED_VIEWS,
};
use crate::losses::DEFAULT_TEACHER_TEMP;
use crate::models::{load_checkpoint, save_checkpoint, ClipConfig, ClipModel, ModelError, Module};
use crate::numerics::Matrix;
use crate::trainer::{
    bench_step, evaluate, BenchMode, BenchReport, TrainError, Trainer, TrainerConfig, ZeroShot,
};
use crate::util::mix_seed;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::Io(_) => EXIT_IO,
            CliError::Numeric(_) => EXIT_NUMERIC,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<StoreError> for CliError {
    fn from(e: StoreError) -> Self {
        let msg = e.to_string();
        match e {
            StoreError::Io(_) | StoreError::Corrupt(_) => CliError::Io(msg),
            _ => CliError::Validation(msg),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        let msg = e.to_string();
        match e {
            ModelError::Io(_) | ModelError::Checkpoint(_) => CliError::Io(msg),
            ModelError::Numerics(_) | ModelError::NonUnitInput { .. } => CliError::Numeric(msg),
            _ => CliError::Validation(msg),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Store(s) => s.into(),
            TrainError::Model(m) => m.into(),
            TrainError::Io(io) => io.into(),
            TrainError::NonFiniteLoss { .. } | TrainError::Numerics(_) | TrainError::Loss(_) => {
                CliError::Numeric(e.to_string())
            }
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<AugmentError> for CliError {
    fn from(e: AugmentError) -> Self {
        CliError::Validation(e.to_string())
    }
}

/// Outcome of one command.
#[derive(Debug)]
pub struct CommandResult {
    pub exit_code: i32,
    pub summary: String,
    pub report_path: Option<PathBuf>,
}

#[derive(Parser, Debug)]
#[command(
    name = "drclip",
    version,
    about = "Reinforced image-text datasets and distillation training at desk scale"
)]
#[command(args_override_self = true)]
pub struct Cli {
    /// key=value file with default flag values; explicit flags win.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Write the JSON report here instead of stdout.
    #[arg(long, global = true, value_name = "PATH")]
    pub report: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a seeded palette-grid corpus as NAME.png + NAME.txt pairs.
    Generate(GenerateArgs),
    /// Reinforce image-text pairs into a store.
    Reinforce(ReinforceArgs),
    /// Train a student on a store.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a held-out store.
    Eval(EvalArgs),
    /// Time training steps in the reinforced, plain-CLIP and online-teacher modes.
    Bench(BenchArgs),
    /// Print store statistics.
    Inspect(InspectArgs),
    /// Fold the text encoder's train-time branches and save the fused checkpoint.
    ExportReparam(ExportArgs),
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 32)]
    pub image_size: u32,
    #[arg(long, default_value_t = 0.15)]
    pub caption_error: f64,
    #[arg(long, default_value_t = 0.2)]
    pub caption_drop: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PolicyPreset {
    Strong,
    Moderate,
    Identity,
}

#[derive(Args, Debug)]
pub struct ReinforceArgs {
    /// Directory of NAME.{png,ppm} + NAME.txt pairs, or a JSONL index.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub store: PathBuf,
    /// Stored augmentations per image (J).
    #[arg(long, default_value_t = RECOMMENDED_VIEWS)]
    pub aug_count: usize,
    /// Synthetic captions per image (S).
    #[arg(long, default_value_t = RECOMMENDED_VIEWS)]
    pub caption_count: usize,
    /// Comma-separated teachers: palette:D, random:D or mmeb:PATH:D.
    #[arg(long, default_value = "palette:64,palette:64")]
    pub teachers: String,
    /// Temperature recorded for every teacher.
    #[arg(long, default_value_t = DEFAULT_TEACHER_TEMP)]
    pub teacher_temp: f64,
    /// Cosine drop per mismatched cell for palette teachers.
    #[arg(long, default_value_t = corpus::DEFAULT_TEACHER_MARGIN)]
    pub teacher_margin: f64,
    /// Synthetic caption source: "template" or a JSONL file of {id, captions}.
    #[arg(long, default_value = "template")]
    pub captions: String,
    #[arg(long, value_enum, default_value_t = PolicyPreset::Strong)]
    pub policy: PolicyPreset,
    /// Side of the square augmented views.
    #[arg(long, default_value_t = 32)]
    pub view_size: u16,
    #[arg(long, default_value_t = DEFAULT_GZIP_LEVEL)]
    pub gzip_level: u32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModelPreset {
    /// Embed 64, 2 conv + 4 attention text blocks, 77 tokens.
    Desk,
    /// Embed 32, one block each, 24 tokens.
    Small,
}

impl ModelPreset {
    pub fn config(self) -> ClipConfig {
        match self {
            ModelPreset::Desk => ClipConfig::default(),
            ModelPreset::Small => ClipConfig::small(),
        }
    }
}

#[derive(Args, Debug)]
pub struct TrainOpts {
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 2000)]
    pub iterations: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 1e-6)]
    pub min_lr: f64,
    #[arg(long, default_value_t = 100)]
    pub warmup: usize,
    #[arg(long, default_value_t = 0.2)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = crate::losses::DEFAULT_LAMBDA)]
    pub lambda: f64,
    #[arg(long, default_value_t = 1.0)]
    pub real_weight: f64,
    #[arg(long, default_value_t = 1.0)]
    pub syn_weight: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = ModelPreset::Desk)]
    pub model: ModelPreset,
    /// Image encoder input side; must match the store's view size.
    #[arg(long, default_value_t = 32)]
    pub image_size: u32,
}

impl TrainOpts {
    fn clip_config(&self) -> ClipConfig {
        let mut c = self.model.config();
        c.image.image_size = self.image_size;
        c
    }

    fn trainer_config(&self) -> TrainerConfig {
        TrainerConfig {
            batch_size: self.batch_size,
            iterations: self.iterations,
            lr: self.lr,
            min_lr: self.min_lr,
            warmup: self.warmup,
            weight_decay: self.weight_decay,
            lambda: self.lambda,
            real_weight: self.real_weight,
            syn_weight: self.syn_weight,
            seed: self.seed,
            ..Default::default()
        }
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub store: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    /// JSONL training log.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Start from this checkpoint instead of a fresh model.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[command(flatten)]
    pub opts: TrainOpts,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ZeroShotTask {
    /// Top-left cell color of palette-grid images.
    Palette,
    None,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value_t = ZeroShotTask::Palette)]
    pub zero_shot: ZeroShotTask,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BenchSelect {
    All,
    Reinforced,
    PlainClip,
    OnlineTeacherStub,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long, value_enum, default_value_t = BenchSelect::All)]
    pub mode: BenchSelect,
    /// Timed steps per mode.
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
    #[command(flatten)]
    pub opts: TrainOpts,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    #[arg(long)]
    pub store: PathBuf,
    /// Also check the index against a full frame scan.
    #[arg(long)]
    pub verify: bool,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Splices `--config` file entries in front of the explicit flags.
fn expand_config(args: Vec<OsString>) -> Result<Vec<OsString>, CliError> {
    let pos = args
        .iter()
        .position(|a| a == "--config" || a.to_string_lossy().starts_with("--config="));
    let Some(pos) = pos else { return Ok(args) };
    let arg = args[pos].to_string_lossy().into_owned();
    let path = match arg.strip_prefix("--config=") {
        Some(p) => p.to_string(),
        None => args
            .get(pos + 1)
            .ok_or_else(|| CliError::Validation("--config needs a file".into()))?
            .to_string_lossy()
            .into_owned(),
    };
    let text = fs::read_to_string(&path).map_err(|e| CliError::Io(format!("{path}: {e}")))?;
    let mut injected = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            CliError::Validation(format!("{path}:{}: expected key = value", n + 1))
        })?;
        let key = k.trim().replace('_', "-");
        let value = v.trim().trim_matches('"');
        match value {
            "true" => injected.push(OsString::from(format!("--{key}"))),
            "false" => {}
            _ => {
                injected.push(OsString::from(format!("--{key}")));
                injected.push(OsString::from(value));
            }
        }
    }
    let sub = args
        .iter()
        .enumerate()
        .skip(1)
        .position(|(i, a)| {
            !a.to_string_lossy().starts_with('-') && (i == 1 || !is_value_of_global(&args, i))
        })
        .map(|p| p + 1);
    let mut out = args.clone();
    if let Some(sub) = sub {
        out.splice(sub + 1..sub + 1, injected);
    }
    Ok(out)
}

fn is_value_of_global(args: &[OsString], i: usize) -> bool {
    matches!(args[i - 1].to_str(), Some("--config") | Some("--report"))
}

fn open_store(path: &Path) -> Result<Store, CliError> {
    Store::open(path).map_err(|e| match CliError::from(e) {
        CliError::Io(m) => CliError::Io(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn write_report<R: Serialize>(report: &R, path: Option<&Path>) -> Result<(), CliError> {
    let json =
        serde_json::to_string_pretty(report).map_err(|e| CliError::Numeric(e.to_string()))?;
    match path {
        Some(p) => {
            fs::write(p, json + "\n").map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?
        }
        None => println!("{json}"),
    }
    Ok(())
}

fn check_out_parent(path: &Path) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        if !parent.is_dir() {
            return Err(CliError::Io(format!(
                "{}: directory does not exist",
                parent.display()
            )));
        }
    }
    Ok(())
}

fn validate_unit_interval(name: &str, v: f64) -> Result<(), CliError> {
    if !(0.0..=1.0).contains(&v) {
        return Err(CliError::Validation(format!("--{name} {v} outside [0, 1]")));
    }
    Ok(())
}

#[derive(Serialize)]
struct GenerateReport {
    out: PathBuf,
    count: usize,
    seed: u64,
    image_size: u32,
}

fn cmd_generate(a: &GenerateArgs, report: Option<&Path>) -> Result<String, CliError> {
    validate_unit_interval("caption-error", a.caption_error)?;
    validate_unit_interval("caption-drop", a.caption_drop)?;
    if a.image_size < 2 || a.image_size > u16::MAX as u32 {
        return Err(CliError::Validation(format!(
            "--image-size {} outside [2, 65535]",
            a.image_size
        )));
    }
    let cfg = CorpusConfig {
        count: a.count,
        image_size: a.image_size,
        caption_error: a.caption_error,
        caption_drop: a.caption_drop,
        seed: a.seed,
        ..Default::default()
    };
    fs::create_dir_all(&a.out)?;
    for (pair, _) in corpus::generate(&cfg) {
        let stem = a.out.join(format!("{:06}", pair.id));
        save_png(&pair.image, &stem.with_extension("png"))?;
        fs::write(stem.with_extension("txt"), format!("{}\n", pair.caption))?;
    }
    write_report(
        &GenerateReport {
            out: a.out.clone(),
            count: a.count,
            seed: a.seed,
            image_size: a.image_size,
        },
        report,
    )?;
    Ok(format!("wrote {} pairs to {}", a.count, a.out.display()))
}

enum TeacherSpec {
    Palette(usize),
    Random(usize),
    Mmeb(PathBuf, usize),
}

fn parse_teachers(spec: &str) -> Result<Vec<TeacherSpec>, CliError> {
    let bad = |s: &str| {
        CliError::Validation(format!(
            "bad teacher spec {s:?}: expected palette:D, random:D or mmeb:PATH:D"
        ))
    };
    let dim = |s: &str, d: &str| -> Result<usize, CliError> {
        match d.parse::<usize>() {
            Ok(d) if d > 0 => Ok(d),
            _ => Err(bad(s)),
        }
    };
    let out = spec
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            let (kind, rest) = s.split_once(':').ok_or_else(|| bad(s))?;
            match kind {
                "palette" => Ok(TeacherSpec::Palette(dim(s, rest)?)),
                "random" => Ok(TeacherSpec::Random(dim(s, rest)?)),
                "mmeb" => {
                    let (path, d) = rest.rsplit_once(':').ok_or_else(|| bad(s))?;
                    Ok(TeacherSpec::Mmeb(PathBuf::from(path), dim(s, d)?))
                }
                _ => Err(bad(s)),
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    if out.is_empty() {
        return Err(CliError::Validation(
            "at least one teacher is required".into(),
        ));
    }
    Ok(out)
}

#[derive(Serialize)]
struct ReinforceReport {
    store: PathBuf,
    written: u64,
    skipped: Vec<SkippedSample>,
    manifest: StoreManifest,
    stats: StoreStats,
}

fn cmd_reinforce(a: &ReinforceArgs, report: Option<&Path>) -> Result<String, CliError> {
    if a.aug_count == 0 {
        return Err(CliError::Validation(
            "--aug-count must be at least 1".into(),
        ));
    }
    if a.view_size < 2 {
        return Err(CliError::Validation(format!(
            "--view-size {} too small",
            a.view_size
        )));
    }
    if !(a.teacher_temp > 0.0 && a.teacher_temp.is_finite()) {
        return Err(CliError::Validation(format!(
            "--teacher-temp {} must be positive",
            a.teacher_temp
        )));
    }
    if !(a.teacher_margin > 0.0 && a.teacher_margin <= 1.0) {
        return Err(CliError::Validation(format!(
            "--teacher-margin {} outside (0, 1]",
            a.teacher_margin
        )));
    }
    if a.gzip_level > 9 {
        return Err(CliError::Validation(format!(
            "--gzip-level {} outside [0, 9]",
            a.gzip_level
        )));
    }
    let out = (a.view_size, a.view_size);
    let policy = match a.policy {
        PolicyPreset::Strong => AugmentPolicy::strong(out),
        PolicyPreset::Moderate => AugmentPolicy::moderate(out),
        PolicyPreset::Identity => AugmentPolicy::identity(out),
    };
    policy.validate()?;
    let specs = parse_teachers(&a.teachers)?;
    let mut teachers: Vec<Box<dyn TeacherProvider>> = Vec::new();
    for (k, spec) in specs.iter().enumerate() {
        teachers.push(match spec {
            TeacherSpec::Palette(d) => Box::new(
                PaletteTeacher::new(*d, corpus::palette_teacher_seed(k))
                    .with_margin(a.teacher_margin)
                    .with_temperature(a.teacher_temp),
            ),
            TeacherSpec::Random(d) => Box::new(
                RandomProjectionTeacher::new(*d, mix_seed(a.seed, &[0x7e, k as u64]))
                    .with_temperature(a.teacher_temp),
            ),
            TeacherSpec::Mmeb(path, d) => Box::new(
                MmebTeacher::open(path, Some(*d), a.teacher_temp).map_err(|e| match e {
                    StoreError::Io(io) => CliError::Io(format!("{}: {io}", path.display())),
                    e => e.into(),
                })?,
            ),
        });
    }
    let captioner: Option<Box<dyn CaptionProvider>> = match (a.caption_count, a.captions.as_str()) {
        (0, _) => None,
        (_, "template") => Some(Box::new(TemplateCaptioner)),
        (_, path) => Some(Box::new(JsonlCaptions::open(path)?)),
    };
    let mut manifest = StoreManifest::new(
        teachers.iter().map(|t| t.dim()).collect(),
        a.aug_count,
        a.caption_count,
    );
    manifest.teacher_temps = teachers.iter().map(|t| t.temperature()).collect();
    manifest.teacher_names = teachers.iter().map(|t| t.name()).collect();
    manifest.gzip_level = a.gzip_level;
    manifest.validate()?;
    let pairs = load_pairs(&a.input)?;
    check_out_parent(&a.store)?;

    let mut writer = StoreWriter::create(&a.store, manifest)?;
    let refs: Vec<&dyn TeacherProvider> = teachers.iter().map(|t| t.as_ref()).collect();
    let summary = reinforce(
        pairs,
        captioner.as_deref(),
        &refs,
        &ReinforceConfig {
            policy,
            seed: a.seed,
        },
        &mut writer,
    )?;
    writer.finish()?;
    let store = open_store(&a.store)?;
    let stats = store.stats()?;
    let text = format!(
        "wrote {} records to {} ({} skipped); raw embedding bytes {}, file bytes {}",
        summary.written,
        a.store.display(),
        summary.skipped.len(),
        stats.raw_embedding_bytes(),
        stats.file_bytes
    );
    write_report(
        &ReinforceReport {
            store: a.store.clone(),
            written: summary.written,
            skipped: summary.skipped,
            manifest: store.manifest().clone(),
            stats,
        },
        report,
    )?;
    Ok(text)
}

#[derive(Serialize)]
struct TrainReport {
    store: PathBuf,
    checkpoint: PathBuf,
    log: Option<PathBuf>,
    config: TrainerConfig,
    steps: usize,
    final_loss: Option<f64>,
    final_temperature: f64,
    seconds: f64,
}

fn cmd_train(a: &TrainArgs, report: Option<&Path>) -> Result<String, CliError> {
    let cfg = a.opts.trainer_config();
    cfg.validate()?;
    let model = match &a.init {
        Some(p) => load_checkpoint(p)?,
        None => ClipModel::new(a.opts.clip_config(), a.opts.seed)?,
    };
    if model.is_reparameterized() {
        return Err(CliError::Validation(
            "cannot train a reparameterized checkpoint".into(),
        ));
    }
    let store = open_store(&a.store)?;
    check_out_parent(&a.out)?;
    let mut trainer = Trainer::new(&store, model, cfg.clone())?;
    let summary = match &a.log {
        Some(p) => {
            check_out_parent(p)?;
            let mut w = BufWriter::new(fs::File::create(p)?);
            let s = trainer.run(Some(&mut w))?;
            w.flush()?;
            s
        }
        None => trainer.run(None)?,
    };
    save_checkpoint(&trainer.model, &a.out)?;
    let text = format!(
        "trained {} steps in {:.1}s, final loss {:?}, checkpoint {}",
        summary.steps,
        summary.seconds,
        summary.final_loss,
        a.out.display()
    );
    write_report(
        &TrainReport {
            store: a.store.clone(),
            checkpoint: a.out.clone(),
            log: a.log.clone(),
            config: cfg,
            steps: summary.steps,
            final_loss: summary.final_loss,
            final_temperature: summary.final_temperature,
            seconds: summary.seconds,
        },
        report,
    )?;
    Ok(text)
}

fn cmd_eval(a: &EvalArgs, report: Option<&Path>) -> Result<String, CliError> {
    if a.batch_size < 2 {
        return Err(CliError::Validation(
            "--batch-size must be at least 2".into(),
        ));
    }
    let model = load_checkpoint(&a.checkpoint)?;
    let store = open_store(&a.store)?;
    let label =
        |r: &crate::drstore::ReinforcedRecord| corpus::zero_shot_label(&corpus::analyze(&r.image));
    let task = ZeroShot {
        prompts: corpus::zero_shot_prompts(),
        label: &label,
    };
    let zs = (a.zero_shot == ZeroShotTask::Palette).then_some(&task);
    let r = evaluate(&store, &model, zs, a.batch_size)?;
    let text = format!(
        "{} pairs: recall@1 i2t {:.3} t2i {:.3}, teacher KL {:.4}",
        r.count, r.recall.i2t_at1, r.recall.t2i_at1, r.teacher_kl
    );
    write_report(&r, report)?;
    Ok(text)
}

#[derive(Serialize)]
struct BenchSummary {
    store: PathBuf,
    reports: Vec<BenchReport>,
    /// Median reinforced step time over median plain-CLIP step time.
    reinforced_over_plain: Option<f64>,
    /// Median reinforced step time over median online-teacher step time.
    reinforced_over_online: Option<f64>,
}

fn cmd_bench(a: &BenchArgs, report: Option<&Path>) -> Result<String, CliError> {
    let cfg = a.opts.trainer_config();
    cfg.validate()?;
    let model: ClipModel<f32> = ClipModel::new(a.opts.clip_config(), a.opts.seed)?;
    let store = open_store(&a.store)?;
    let modes: Vec<BenchMode> = match a.mode {
        BenchSelect::All => vec![
            BenchMode::Reinforced,
            BenchMode::PlainClip,
            BenchMode::OnlineTeacherStub,
        ],
        BenchSelect::Reinforced => vec![BenchMode::Reinforced],
        BenchSelect::PlainClip => vec![BenchMode::PlainClip],
        BenchSelect::OnlineTeacherStub => vec![BenchMode::OnlineTeacherStub],
    };
    let reports = modes
        .iter()
        .map(|&m| bench_step(&store, &model, &cfg, m, a.steps))
        .collect::<Result<Vec<_>, _>>()?;
    let median = |m: BenchMode| {
        reports
            .iter()
            .find(|r| r.mode == m)
            .and_then(|r| r.median_step_seconds)
    };
    let ratio = |other: BenchMode| Some(median(BenchMode::Reinforced)? / median(other)?);
    let summary = BenchSummary {
        store: a.store.clone(),
        reinforced_over_plain: ratio(BenchMode::PlainClip),
        reinforced_over_online: ratio(BenchMode::OnlineTeacherStub),
        reports,
    };
    let text = summary
        .reports
        .iter()
        .map(|r| match r.median_step_seconds {
            Some(s) => format!("{:?}: {:.2} ms/step", r.mode, s * 1e3),
            None => format!("{:?}: no steps", r.mode),
        })
        .collect::<Vec<_>>()
        .join("; ");
    write_report(&summary, report)?;
    Ok(text)
}

fn cmd_inspect(a: &InspectArgs, report: Option<&Path>) -> Result<String, CliError> {
    let store = open_store(&a.store)?;
    if a.verify {
        store.verify_index()?;
    }
    let stats = store.stats()?;
    let m = store.manifest();
    let text = format!(
        "{} records, K={} dims {:?}, J={}, S={}; raw embedding bytes {}, file bytes {}",
        stats.sample_count,
        m.teacher_count(),
        m.teacher_dims,
        m.num_augmentations,
        m.num_syn_captions,
        stats.raw_embedding_bytes(),
        stats.file_bytes
    );
    write_report(&stats, report)?;
    Ok(text)
}

#[derive(Serialize)]
struct ExportReport {
    checkpoint: PathBuf,
    out: PathBuf,
    params_before: usize,
    params_after: usize,
    /// Largest output difference between the two checkpoints on probe captions.
    max_abs_diff: f64,
}

const EXPORT_TOL: f64 = 1e-5;

fn cmd_export(a: &ExportArgs, report: Option<&Path>) -> Result<String, CliError> {
    let model = load_checkpoint(&a.checkpoint)?;
    check_out_parent(&a.out)?;
    let fused = model.reparameterize()?;
    save_checkpoint(&fused, &a.out)?;
    let reloaded = load_checkpoint(&a.out)?;
    let probes: Vec<String> = (0..8)
        .map(|t| corpus::clean_caption(&[t % 8, (t + 3) % 8, (t + 5) % 8, 7 - t % 8], t))
        .collect();
    let refs: Vec<&str> = probes.iter().map(String::as_str).collect();
    let before: Matrix<f32> = model.text.encode_texts(&refs)?;
    let after: Matrix<f32> = reloaded.text.encode_texts(&refs)?;
    let diff = before.max_abs_diff(&after) as f64;
    if !(diff <= EXPORT_TOL) {
        return Err(CliError::Numeric(format!(
            "fused text encoder differs by {diff}"
        )));
    }
    let r = ExportReport {
        checkpoint: a.checkpoint.clone(),
        out: a.out.clone(),
        params_before: model.param_count(),
        params_after: fused.param_count(),
        max_abs_diff: diff,
    };
    let text = format!(
        "fused checkpoint {} ({} -> {} parameters, max diff {:.2e})",
        a.out.display(),
        r.params_before,
        r.params_after,
        diff
    );
    write_report(&r, report)?;
    Ok(text)
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, S>(args: I) -> CommandResult
where
    I: IntoIterator<Item = S>,
    S: Into<OsString>,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let fail = |e: CliError, report: Option<&Path>| {
        if let Some(p) = report {
            let body = serde_json::json!({"error": e.to_string(), "exit_code": e.exit_code()});
            let _ = fs::write(p, body.to_string() + "\n");
        }
        CommandResult {
            exit_code: e.exit_code(),
            summary: format!("error: {e}"),
            report_path: report.map(Path::to_path_buf),
        }
    };
    let args = match expand_config(args) {
        Ok(a) => a,
        Err(e) => return fail(e, None),
    };
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() {
                EXIT_VALIDATION
            } else {
                EXIT_OK
            };
            return CommandResult {
                exit_code: code,
                summary: e.render().to_string(),
                report_path: None,
            };
        }
    };
    let report = cli.report.as_deref();
    let outcome = match &cli.command {
        Command::Generate(a) => cmd_generate(a, report),
        Command::Reinforce(a) => cmd_reinforce(a, report),
        Command::Train(a) => cmd_train(a, report),
        Command::Eval(a) => cmd_eval(a, report),
        Command::Bench(a) => cmd_bench(a, report),
        Command::Inspect(a) => cmd_inspect(a, report),
        Command::ExportReparam(a) => cmd_export(a, report),
    };
    match outcome {
        Ok(summary) => CommandResult {
            exit_code: EXIT_OK,
            summary,
            report_path: cli.report.clone(),
        },
        Err(e) => fail(e, report),
    }
}
