//! The `sbat` command line: argument parsing, config resolution, run
//! manifests and dispatch to the library.
//!
//! Settings resolve as built-in defaults, then the `--config` file, then
//! flags. Every run that writes artifacts first writes `run_manifest.toml`
//! with the fully resolved settings; the manifest is itself a valid
//! `--config` file.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};

use crate::analysis::{sweep_alpha, verify_inequalities};
use crate::error::Error;
use crate::inference::{beam_search, export_attention, CaptionScorer};
use crate::model::{load_checkpoint, Checkpoint, ModelConfig, SbatModel, Variant, BOS, EOS, PAD};
use crate::synthdata::{gen_dataset, load_dataset, load_split, vocab_path, CaptionRecord, DatasetConfig, Vocab, SPLITS};
use crate::training::{bleu4, evaluate, train, Artifacts, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

pub const MANIFEST_NAME: &str = "run_manifest.toml";

const COMMANDS: &str = "generate-data, train, caption, eval, export-attention, analyze-weights, sweep-alpha";

#[derive(Debug)]
enum CliError {
    Usage(String),
    Run(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Run(e)
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(CliError::Usage(msg.into()))
}

#[derive(Parser, Debug)]
#[command(name = "sbat", version, about = "Sparse boundary-aware transformer on synthetic scenario videos")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write train/val/test JSONL splits and a vocabulary.
    GenerateData(GenerateArgs),
    /// Train a model and keep the best checkpoint.
    Train(TrainArgs),
    /// Beam-search captions for records.
    Caption(CaptionArgs),
    /// Token accuracy and BLEU-4 of a checkpoint on a split.
    Eval(CaptionArgs),
    /// Dump encoder self-attention maps of one record.
    ExportAttention(ExportArgs),
    /// Check the scenario-weight inequalities on sampled configurations.
    AnalyzeWeights(AnalyzeArgs),
    /// Train one model per encoder alpha and tabulate the results.
    SweepAlpha(SweepArgs),
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long = "T")]
    t: Option<usize>,
    #[arg(long)]
    k_min: Option<usize>,
    #[arg(long)]
    k_max: Option<usize>,
    #[arg(long)]
    d_feat: Option<usize>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    scenes: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct ModelFlags {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    alpha_enc: Option<f64>,
    #[arg(long)]
    n_enc: Option<usize>,
    #[arg(long)]
    n_dec: Option<usize>,
    #[arg(long)]
    r: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_epochs: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    flags: ModelFlags,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CaptionArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// A JSONL file or a dataset directory (its test split, or every split
    /// with --record-id); defaults to the checkpoint's training data directory.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    beam_width: usize,
    #[arg(long)]
    max_len: Option<usize>,
    /// Only this record.
    #[arg(long)]
    record_id: Option<String>,
    /// Accepted for uniformity; decoding is deterministic.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    record_id: String,
    /// Defaults to every split of the checkpoint's data directory.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    #[arg(long, default_value_t = 10_000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    flags: ModelFlags,
    #[arg(long, value_delimiter = ',', default_value = "0,0.2,0.4,0.6,0.8,1.0")]
    alphas: Vec<f64>,
    #[arg(long)]
    out: PathBuf,
}

/// Resolved settings of a run. Every section is optional so that a partial
/// file works as `--config`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunManifest {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub command: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub version: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub paths: Option<ManifestPaths>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<DatasetConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ManifestPaths {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

impl RunManifest {
    pub fn load(path: &Path) -> crate::Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.span().map_or(0, |s| text[..s.start].lines().count().max(1)),
            msg: e.message().to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> crate::Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Config(format!("cannot encode manifest: {e}")))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

fn load_config(path: Option<&Path>) -> CliResult<RunManifest> {
    match path {
        Some(p) => Ok(RunManifest::load(p)?),
        None => Ok(RunManifest::default()),
    }
}

fn version() -> String {
    env!("CARGO_PKG_VERSION").to_string()
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(())
}

/// Runs the command line and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            if e.kind() == ErrorKind::InvalidSubcommand {
                eprintln!("valid commands: {COMMANDS}");
            }
            return code;
        }
    };
    if let Err(msg) = configure_threads() {
        eprintln!("error: {msg}");
        return EXIT_USAGE;
    }
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(CliError::Run(e)) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

/// Caps the worker pool from `SBAT_THREADS`.
fn configure_threads() -> std::result::Result<(), String> {
    let Ok(v) = std::env::var("SBAT_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("SBAT_THREADS must be a positive integer, got {v:?}"))?;
    // A second call in the same process keeps the first pool.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn dispatch(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::GenerateData(a) => generate(a),
        Command::Train(a) => train_cmd(a),
        Command::Caption(a) => caption_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::ExportAttention(a) => export_cmd(a),
        Command::AnalyzeWeights(a) => analyze_cmd(a),
        Command::SweepAlpha(a) => sweep_cmd(a),
    }
}

fn generate(a: GenerateArgs) -> CliResult<()> {
    let file = load_config(a.config.as_deref())?;
    let mut cfg = file.data.clone().unwrap_or_default();
    if let Some(s) = file.seed {
        cfg.seed = s;
    }
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => { $(if let Some(v) = a.$flag { cfg.$field = v; })* };
    }
    set!(count => count, t => t, k_min => k_min, k_max => k_max, d_feat => d_feat, sigma => sigma, scenes => num_scenes, seed => seed);
    let Some(out_dir) = a.out_dir.or_else(|| file.paths.and_then(|p| p.out_dir)) else {
        return usage("--out-dir is required");
    };
    cfg.split_counts().map_err(|e| CliError::Usage(e.to_string()))?;
    create_dir(&out_dir)?;
    RunManifest {
        command: Some("generate-data".into()),
        version: Some(version()),
        seed: Some(cfg.seed),
        paths: Some(ManifestPaths {
            out_dir: Some(out_dir.clone()),
            ..ManifestPaths::default()
        }),
        data: Some(cfg.clone()),
        ..RunManifest::default()
    }
    .save(&out_dir.join(MANIFEST_NAME))?;
    let vocab = gen_dataset(&cfg, &out_dir)?;
    let counts = cfg.split_counts()?;
    for (s, c) in SPLITS.iter().zip(counts) {
        println!("{s}={c}");
    }
    println!("vocab_size={}", vocab.size());
    Ok(())
}

/// Data shared by `train` and `sweep-alpha`.
struct Resolved {
    file: RunManifest,
    model: ModelConfig,
    train: TrainConfig,
    data_dir: PathBuf,
    train_set: Vec<CaptionRecord>,
    val_set: Vec<CaptionRecord>,
}

fn resolve_training(flags: &ModelFlags) -> CliResult<Resolved> {
    let file = load_config(flags.config.as_deref())?;
    let mut model = file.model.clone().unwrap_or_default();
    let mut train = file.train.clone().unwrap_or_default();
    if let Some(s) = file.seed {
        train.seed = s;
    }
    if let Some(v) = flags.variant {
        model.variant = v;
    }
    if model.variant == Variant::Vanilla && flags.r.is_some() {
        return usage("--r conflicts with --variant vanilla: vanilla attention has no local band");
    }
    if let Some(a) = flags.alpha_enc {
        model.alpha_enc = a;
    }
    if let Some(n) = flags.n_enc {
        model.n_enc = Some(n);
    }
    if let Some(n) = flags.n_dec {
        model.n_dec = Some(n);
    }
    if let Some(r) = flags.r {
        model.r = Some(r);
    }
    if let Some(s) = flags.seed {
        train.seed = s;
    }
    if let Some(e) = flags.max_epochs {
        train.max_epochs = e;
    }
    let Some(data_dir) = flags
        .data_dir
        .clone()
        .or_else(|| file.paths.as_ref().and_then(|p| p.data_dir.clone()))
    else {
        return usage("--data-dir is required");
    };
    let train_set = load_split(&data_dir, "train")?;
    let val_set = load_split(&data_dir, "val")?;
    let vocab = Vocab::load(&vocab_path(&data_dir))?;
    model.vocab_size = vocab.size();
    if let Some(r) = train_set.first() {
        model.d_feat = r.image_features.first().map_or(0, Vec::len);
    }
    model.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    train.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(Resolved {
        file,
        model,
        train,
        data_dir,
        train_set,
        val_set,
    })
}

fn train_cmd(a: TrainArgs) -> CliResult<()> {
    let r = resolve_training(&a.flags)?;
    let Some(out_dir) = a
        .out_dir
        .or_else(|| r.file.paths.as_ref().and_then(|p| p.out_dir.clone()))
    else {
        return usage("--out-dir is required");
    };
    create_dir(&out_dir)?;
    RunManifest {
        command: Some("train".into()),
        version: Some(version()),
        seed: Some(r.train.seed),
        paths: Some(ManifestPaths {
            data_dir: Some(r.data_dir.clone()),
            out_dir: Some(out_dir.clone()),
            out: None,
        }),
        data: None,
        model: Some(r.model.clone()),
        train: Some(r.train.clone()),
    }
    .save(&out_dir.join(MANIFEST_NAME))?;
    info!("training {} on {} records", r.model.variant, r.train_set.len());
    let mut model = SbatModel::<f32>::new(r.model.clone(), r.train.seed)?;
    let mut artifacts = Artifacts::new(&out_dir);
    artifacts
        .meta
        .insert("data_dir".into(), r.data_dir.display().to_string());
    artifacts.meta.insert("variant".into(), r.model.variant.to_string());
    let report = train(&mut model, &r.train_set, &r.val_set, &r.train, Some(&artifacts))?;
    println!("epochs={}", report.epochs.len());
    println!("best_epoch={}", report.best_epoch);
    println!("best_val_token_accuracy={}", report.best_val_accuracy());
    println!("final_val_loss={}", report.last().val_loss);
    println!("checkpoint={}", artifacts.checkpoint_path().display());
    Ok(())
}

/// Records of `--data` (a file, or a directory's test split), defaulting to
/// the checkpoint's data directory, plus the vocabulary found beside them.
/// A directory is searched across every split when one record is wanted.
fn resolve_records(
    data: Option<&Path>,
    ck: &Checkpoint,
    record_id: Option<&str>,
) -> CliResult<(Vec<CaptionRecord>, Option<Vocab>)> {
    let path = match (data, ck.meta.get("data_dir")) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(d)) => PathBuf::from(d),
        (None, None) => return usage("--data is required: the checkpoint records no data directory"),
    };
    let (records, dir) = if path.is_dir() {
        let records = match record_id {
            Some(_) => all_splits(&path)?,
            None => load_split(&path, "test")?,
        };
        (records, path.clone())
    } else {
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        (load_dataset(&path)?, dir)
    };
    let vocab = Vocab::load(&vocab_path(&dir)).ok();
    Ok((records, vocab))
}

fn max_len(flag: Option<usize>, model: &SbatModel<f32>) -> CliResult<usize> {
    let limit = model.config().max_tgt_len;
    match flag {
        None => Ok(limit),
        Some(0) => usage("--max-len must be at least 1"),
        Some(n) if n > limit => usage(format!("--max-len {n} exceeds the model's max_tgt_len {limit}")),
        Some(n) => Ok(n),
    }
}

fn words(ids: &[u32]) -> Vec<u32> {
    ids.iter().copied().filter(|t| ![BOS, EOS, PAD].contains(t)).collect()
}

fn caption_cmd(a: CaptionArgs) -> CliResult<()> {
    if a.beam_width == 0 {
        return usage("--beam-width must be at least 1");
    }
    let ck = load_checkpoint(&a.checkpoint)?;
    let (mut records, vocab) = resolve_records(a.data.as_deref(), &ck, a.record_id.as_deref())?;
    if let Some(id) = &a.record_id {
        records.retain(|r| &r.id == id);
        if records.is_empty() {
            return Err(Error::Config(format!("no record with id {id:?}")).into());
        }
    }
    let len = max_len(a.max_len, &ck.model)?;
    for r in &records {
        let beam = beam_search(&CaptionScorer::new(&ck.model, r)?, a.beam_width, len)?;
        let text = match &vocab {
            Some(v) => v.render(&beam.tokens),
            None => format!("{:?}", beam.tokens.ids()),
        };
        println!("id={} log_prob={} caption={text}", r.id, beam.log_prob);
    }
    Ok(())
}

fn eval_cmd(a: CaptionArgs) -> CliResult<()> {
    if a.beam_width == 0 {
        return usage("--beam-width must be at least 1");
    }
    let ck = load_checkpoint(&a.checkpoint)?;
    let (mut records, _) = resolve_records(a.data.as_deref(), &ck, a.record_id.as_deref())?;
    if let Some(id) = &a.record_id {
        records.retain(|r| &r.id == id);
    }
    if records.is_empty() {
        return Err(Error::Config("no records to evaluate".into()).into());
    }
    let len = max_len(a.max_len, &ck.model)?;
    let metrics = evaluate(&ck.model, &records)?;
    let mut hyps = Vec::with_capacity(records.len());
    let mut refs = Vec::with_capacity(records.len());
    for r in &records {
        let beam = beam_search(&CaptionScorer::new(&ck.model, r)?, a.beam_width, len)?;
        hyps.push(words(beam.tokens.ids()));
        refs.push(r.captions.iter().map(|c| words(c.ids())).collect());
    }
    println!("records={}", records.len());
    println!("loss={}", metrics.loss());
    println!("token_accuracy={}", metrics.token_accuracy());
    println!("bleu4={}", bleu4(&hyps, &refs)?);
    Ok(())
}

fn export_cmd(a: ExportArgs) -> CliResult<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let records = match (&a.data, ck.meta.get("data_dir")) {
        (Some(p), _) if p.is_file() => load_dataset(p)?,
        (Some(p), _) => all_splits(p)?,
        (None, Some(d)) => all_splits(Path::new(d))?,
        (None, None) => return usage("--data is required: the checkpoint records no data directory"),
    };
    let Some(record) = records.iter().find(|r| r.id == a.record_id) else {
        return Err(Error::Config(format!("no record with id {:?}", a.record_id)).into());
    };
    let maps = export_attention(&ck.model, record, &a.out_dir)?;
    for m in maps {
        println!(
            "block={} head={} pgm={} weights={} mask={}",
            m.block,
            m.head,
            m.pgm.display(),
            m.dump.display(),
            m.mask_dump.display()
        );
    }
    Ok(())
}

fn all_splits(dir: &Path) -> CliResult<Vec<CaptionRecord>> {
    let mut out = Vec::new();
    for s in SPLITS {
        if crate::synthdata::split_path(dir, s).exists() {
            out.extend(load_split(dir, s)?);
        }
    }
    Ok(out)
}

fn analyze_cmd(a: AnalyzeArgs) -> CliResult<()> {
    if a.samples == 0 {
        return usage("--samples must be at least 1");
    }
    let start = std::time::Instant::now();
    let report = verify_inequalities(a.samples, a.seed)?;
    let text = format!("{report}\nseconds={:.3}\n", start.elapsed().as_secs_f64());
    print!("{text}");
    if let Some(out) = &a.out {
        fs::write(out, &text).map_err(|e| Error::io(out, e))?;
    }
    if report.failures() > 0 {
        return Err(Error::Contract(format!("{} inequality checks failed", report.failures())).into());
    }
    Ok(())
}

fn sweep_cmd(a: SweepArgs) -> CliResult<()> {
    if a.alphas.is_empty() {
        return usage("--alphas needs at least one value");
    }
    if let Some(x) = a.alphas.iter().find(|x| !(0.0..=1.0).contains(*x)) {
        return usage(format!("--alphas value {x} outside [0, 1]"));
    }
    let r = resolve_training(&a.flags)?;
    if r.model.variant == Variant::Vanilla {
        return usage("--variant vanilla has no encoder alpha to sweep");
    }
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    RunManifest {
        command: Some("sweep-alpha".into()),
        version: Some(version()),
        seed: Some(r.train.seed),
        paths: Some(ManifestPaths {
            data_dir: Some(r.data_dir.clone()),
            out_dir: None,
            out: Some(a.out.clone()),
        }),
        data: None,
        model: Some(r.model.clone()),
        train: Some(r.train.clone()),
    }
    .save(&a.out.with_extension("manifest.toml"))?;
    let rows = sweep_alpha(&r.model, &r.train, &r.train_set, &r.val_set, &a.alphas, Some(&a.out))?;
    for row in rows {
        println!("{row}");
    }
    Ok(())
}
