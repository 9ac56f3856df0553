//! Subcommand definitions and their implementations.
//!
//! Every option can also come from the `--config` JSON file, either at the
//! top level or inside an object named after the subcommand; flags win.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use super::embfile::{load_embeddings, save_embeddings};
use super::manifest::{parse_manifest, Manifest};
use super::modelfile::{config_digest, FloatWidth, FrontEnd, ModelFile, Provenance};
use super::pipeline::{read_tags, write_jsonl, ClipTag, FrontEndRuntime, Tagger};
use super::synth::{synthesize, SynthConfig};
use crate::embed::{EmbeddingModelConfig, EmbeddingSet, EmbeddingSource, train_embedding_model};
use crate::error::{Error, Result};
use crate::evalfuse::{confusion_matrix, fuse, metrics_report, validation_weights, write_confusion_csv, TagResult};
use crate::features::load_wav;
use crate::features::FeatureConfig;
use crate::mil::{train, Bag, Pooling, TrainConfig, TrainOutcome};
use crate::nn::{LayerSpec, Model, Standardizer, MIL_DNN_HIDDEN};

#[derive(Debug, Parser)]
#[command(name = "miltag", version, about = "Weakly supervised audio event tagging with multiple instance learning")]
pub struct Cli {
    /// JSON file supplying option values; command-line flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random choice.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compute log-mel instance features for a manifest.
    Features(FeaturesArgs),
    /// Generate a synthetic tone-burst corpus.
    GenSynth(GenSynthArgs),
    /// Train an embedding network frame-wise on weak labels.
    TrainEmbed(TrainEmbedArgs),
    /// Write penultimate-layer embeddings for a manifest.
    ExtractEmbed(ExtractEmbedArgs),
    /// Train a MIL instance classifier.
    TrainMil(TrainMilArgs),
    /// Tag clips, one JSON line per clip.
    Tag(TagArgs),
    /// Tag 16-bit mono PCM from standard input, one record per second.
    Stream(StreamArgs),
    /// Weighted-majority fusion of several `tag` outputs.
    Fuse(FuseArgs),
    /// Precision, recall and F1 of predictions against a manifest.
    Eval(EvalArgs),
    /// Print a model's parameter count.
    Params(ParamsArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Features(_) => "features",
            Command::GenSynth(_) => "gen-synth",
            Command::TrainEmbed(_) => "train-embed",
            Command::ExtractEmbed(_) => "extract-embed",
            Command::TrainMil(_) => "train-mil",
            Command::Tag(_) => "tag",
            Command::Stream(_) => "stream",
            Command::Fuse(_) => "fuse",
            Command::Eval(_) => "eval",
            Command::Params(_) => "params",
        }
    }
}

/// Log-mel options shared by several commands.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct FeatureArgs {
    /// Number of mel bins.
    #[arg(long)]
    pub n_mels: Option<usize>,
    /// Append a delta channel.
    #[arg(long)]
    pub delta: Option<bool>,
    /// Lower edge of the mel filterbank in Hz.
    #[arg(long)]
    pub f_lo: Option<f64>,
    /// Upper edge of the mel filterbank in Hz.
    #[arg(long)]
    pub f_hi: Option<f64>,
}

impl FeatureArgs {
    fn resolve(&self, base: FeatureConfig) -> FeatureConfig {
        FeatureConfig {
            n_mels: self.n_mels.unwrap_or(base.n_mels),
            with_delta: self.delta.unwrap_or(base.with_delta),
            f_lo: self.f_lo.unwrap_or(base.f_lo),
            f_hi: self.f_hi.unwrap_or(base.f_hi),
            ..base
        }
    }
}

/// Optimizer and selection options shared by the training commands.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Inverse-frequency class weighting.
    #[arg(long)]
    pub class_weighting: Option<bool>,
    #[arg(long)]
    pub weight_cap: Option<f64>,
    /// Decision threshold used for validation F1.
    #[arg(long)]
    pub val_threshold: Option<f64>,
    /// Standardize inputs with training-set statistics.
    #[arg(long)]
    pub standardize: Option<bool>,
    /// Width of stored parameters: 32 or 64.
    #[arg(long)]
    pub float_width: Option<u8>,
    /// Training log (JSON Lines), one record per epoch.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

impl TrainArgs {
    fn train_config(&self, seed: u64, pooling: Pooling) -> TrainConfig {
        let d = TrainConfig::default();
        TrainConfig {
            epochs: self.epochs.unwrap_or(d.epochs),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            lr: self.lr.unwrap_or(d.lr),
            seed,
            selection_pooling: pooling,
            threshold: self.val_threshold.unwrap_or(d.threshold),
            class_weighting: self.class_weighting.unwrap_or(d.class_weighting),
            weight_cap: self.weight_cap.unwrap_or(d.weight_cap),
        }
    }

    fn float_width(&self) -> Result<FloatWidth> {
        match self.float_width.unwrap_or(32) {
            32 => Ok(FloatWidth::F32),
            64 => Ok(FloatWidth::F64),
            w => Err(Error::InvalidConfig(format!("float width must be 32 or 64, got {w}"))),
        }
    }
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct FeaturesArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Output embedding-format file.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// `mil` (64 bins with delta) or `embedding` (128 bins).
    #[arg(long)]
    pub preset: Option<String>,
    #[command(flatten)]
    #[serde(flatten)]
    pub feature: FeatureArgs,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct GenSynthArgs {
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub n_clips: Option<usize>,
    #[arg(long)]
    pub n_classes: Option<usize>,
    /// Background noise level in dB relative to full scale.
    #[arg(long, allow_hyphen_values = true)]
    pub noise_db: Option<f64>,
    /// Comma-separated relative class frequencies, e.g. `1,10`.
    #[arg(long, value_delimiter = ',')]
    pub class_balance: Option<Vec<f64>>,
    #[arg(long)]
    pub empty_fraction: Option<f64>,
    #[arg(long)]
    pub extra_label_prob: Option<f64>,
    #[arg(long)]
    pub clip_seconds: Option<f64>,
    #[arg(long)]
    pub id_prefix: Option<String>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct TrainEmbedArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub val_manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated hidden widths before the embedding layer.
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[command(flatten)]
    #[serde(flatten)]
    pub feature: FeatureArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub train: TrainArgs,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct ExtractEmbedArgs {
    /// Embedding model file.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct TrainMilArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub val_manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Pre-computed instance vectors for the training clips.
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// Pre-computed vectors for the validation clips (default: `--features`).
    #[arg(long)]
    pub val_features: Option<PathBuf>,
    /// Embedding model producing the instance vectors.
    #[arg(long)]
    pub embed_model: Option<PathBuf>,
    /// Comma-separated hidden widths.
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    /// Clip pooling for checkpoint selection: `max` or `mean`.
    #[arg(long)]
    pub pooling: Option<String>,
    #[command(flatten)]
    #[serde(flatten)]
    pub feature: FeatureArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub train: TrainArgs,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct TagArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub embed_model: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// A single WAV file instead of a manifest.
    #[arg(long)]
    pub wav: Option<PathBuf>,
    /// Pre-computed vectors, for models with an external front end.
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// Output JSON Lines file (default: standard output).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// One threshold, or one per class, comma-separated.
    #[arg(long, value_delimiter = ',')]
    pub threshold: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct StreamArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub embed_model: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub threshold: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct FuseArgs {
    /// Comma-separated `tag` outputs, one per ensemble member.
    #[arg(long, value_delimiter = ',')]
    pub predictions: Option<Vec<PathBuf>>,
    /// Explicit voting weights.
    #[arg(long, value_delimiter = ',')]
    pub weights: Option<Vec<f64>>,
    /// Member model files; weights follow their validation scores.
    #[arg(long, value_delimiter = ',')]
    pub models: Option<Vec<PathBuf>>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Report path (default: standard output).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Confusion matrix CSV.
    #[arg(long)]
    pub confusion: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct ParamsArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Without `--model`: input width of a dense network.
    #[arg(long)]
    pub input_dim: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    #[arg(long)]
    pub n_classes: Option<usize>,
}

/// Fills options missing on the command line from the config file.
fn merge<T: Serialize + DeserializeOwned>(flags: &T, file: &Map<String, Value>, section: &str) -> Result<T> {
    let mut merged = Map::new();
    for (k, v) in file {
        if !v.is_object() {
            merged.insert(k.clone(), v.clone());
        }
    }
    if let Some(Value::Object(sec)) = file.get(section) {
        merged.extend(sec.clone());
    }
    if let Value::Object(given) = serde_json::to_value(flags)? {
        merged.extend(given.into_iter().filter(|(_, v)| !v.is_null()));
    }
    serde_json::from_value(Value::Object(merged))
        .map_err(|e| Error::InvalidConfig(format!("config: {e}")))
}

fn require<'a, T>(value: &'a Option<T>, flag: &str) -> Result<&'a T> {
    value
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig(format!("missing required option --{flag}")))
}

fn load_config(path: Option<&Path>) -> Result<Map<String, Value>> {
    let Some(path) = path else {
        return Ok(Map::new());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
    match serde_json::from_str(&text) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(_) => Err(Error::InvalidConfig(format!("{}: expected a JSON object", path.display()))),
        Err(e) => Err(Error::InvalidConfig(format!("{}: {e}", path.display()))),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn output(path: Option<&PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(create(p)?),
        None => Box::new(BufWriter::new(std::io::stdout().lock())),
    })
}

/// Runs a parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    let file = load_config(cli.config.as_deref())?;
    let seed = match cli.seed {
        Some(s) => s,
        None => match file.get("seed") {
            Some(v) => v
                .as_u64()
                .ok_or_else(|| Error::InvalidConfig("config: seed must be a non-negative integer".into()))?,
            None => 0,
        },
    };
    let section = cli.command.name();
    match &cli.command {
        Command::Features(a) => features(&merge(a, &file, section)?),
        Command::GenSynth(a) => gen_synth(&merge(a, &file, section)?, seed),
        Command::TrainEmbed(a) => train_embed(&merge(a, &file, section)?, seed),
        Command::ExtractEmbed(a) => extract_embed(&merge(a, &file, section)?),
        Command::TrainMil(a) => train_mil(&merge(a, &file, section)?, seed),
        Command::Tag(a) => tag(&merge(a, &file, section)?),
        Command::Stream(a) => stream(&merge(a, &file, section)?),
        Command::Fuse(a) => fuse_cmd(&merge(a, &file, section)?),
        Command::Eval(a) => eval(&merge(a, &file, section)?),
        Command::Params(a) => params(&merge(a, &file, section)?),
    }
}

fn features(a: &FeaturesArgs) -> Result<()> {
    let manifest = parse_manifest(require(&a.manifest, "manifest")?)?;
    let out = require(&a.out, "out")?;
    let base = match a.preset.as_deref().unwrap_or("mil") {
        "mil" => FeatureConfig::mil(),
        "embedding" => FeatureConfig::embedding(),
        other => return Err(Error::InvalidConfig(format!("unknown preset `{other}`"))),
    };
    let front = FrontEndRuntime::log_mel(a.feature.resolve(base))?;
    let bags = front.manifest_bags(&manifest)?;
    save_embeddings(&bags_to_set(&bags, front.dim(), EmbeddingSource::External)?, out)?;
    eprintln!("wrote {} clips of {}-value instances to {}", bags.len(), front.dim(), out.display());
    Ok(())
}

fn bags_to_set(bags: &[Bag], dim: usize, source: EmbeddingSource) -> Result<EmbeddingSet> {
    let mut set = EmbeddingSet::new(dim, source);
    for bag in bags {
        let rows = bag
            .instances
            .iter()
            .map(|x| x.iter().map(|&v| v as f32).collect())
            .collect();
        set.insert(bag.id.clone(), rows)?;
    }
    Ok(set)
}

fn gen_synth(a: &GenSynthArgs, seed: u64) -> Result<()> {
    let out = require(&a.out, "out")?;
    let d = SynthConfig::default();
    let cfg = SynthConfig {
        n_clips: a.n_clips.unwrap_or(d.n_clips),
        n_classes: a.n_classes.unwrap_or(d.n_classes),
        seed,
        noise_db: a.noise_db.unwrap_or(d.noise_db),
        class_balance: a.class_balance.clone().unwrap_or(d.class_balance),
        empty_fraction: a.empty_fraction.unwrap_or(d.empty_fraction),
        extra_label_prob: a.extra_label_prob.unwrap_or(d.extra_label_prob),
        clip_seconds: a.clip_seconds.unwrap_or(d.clip_seconds),
        id_prefix: a.id_prefix.clone().unwrap_or(d.id_prefix),
        ..d
    };
    let manifest = synthesize(&cfg)?.write(out)?;
    eprintln!("wrote {} clips to {}", manifest.records.len(), out.display());
    Ok(())
}

fn load_split(train: &Path, val: &Path) -> Result<(Manifest, Manifest)> {
    let t = parse_manifest(train)?;
    let v = parse_manifest(val)?;
    if t.class_list != v.class_list {
        return Err(Error::DimensionMismatch(
            "training and validation manifests have different class lists".into(),
        ));
    }
    Ok((t, v))
}

fn write_log(outcome: &TrainOutcome, path: Option<&PathBuf>) -> Result<()> {
    for r in &outcome.log {
        eprintln!(
            "epoch {:>3}  loss {:.5}  val f1 {:.4}{}",
            r.epoch,
            r.train_loss,
            r.val_metric,
            if r.selected { "  *" } else { "" }
        );
    }
    if let Some(p) = path {
        let mut w = create(p)?;
        outcome.write_log(&mut w).map_err(|e| Error::io(p, e))?;
        w.flush().map_err(|e| Error::io(p, e))?;
    }
    Ok(())
}

fn train_embed(a: &TrainEmbedArgs, seed: u64) -> Result<()> {
    let (tm, vm) = load_split(require(&a.manifest, "manifest")?, require(&a.val_manifest, "val-manifest")?)?;
    let out = require(&a.out, "out")?;
    let feature_cfg = a.feature.resolve(FeatureConfig::embedding());
    let front = FrontEndRuntime::log_mel(feature_cfg.clone())?;
    let train_bags = front.manifest_bags(&tm)?;
    let val_bags = front.manifest_bags(&vm)?;
    let hidden = a.hidden.clone().unwrap_or_else(|| vec![256]);
    let mut cfg = EmbeddingModelConfig::dense(
        &feature_cfg.instance_shape(),
        &hidden,
        a.embed_dim.unwrap_or(crate::embed::DEFAULT_EMBED_DIM),
        tm.n_classes(),
    );
    cfg.seed = seed;
    cfg.standardize = a.train.standardize.unwrap_or(true);
    let train_cfg = a.train.train_config(seed, Pooling::Max);
    let outcome = train_embedding_model(&train_bags, &val_bags, &cfg, &train_cfg)?;
    write_log(&outcome, a.train.log.as_ref())?;
    let digest = config_digest(&json!({
        "features": feature_cfg,
        "model": cfg,
        "train": train_cfg_json(&train_cfg),
    }));
    ModelFile {
        model: outcome.model,
        class_list: tm.class_list.clone(),
        front_end: FrontEnd::LogMel(feature_cfg),
        provenance: Provenance {
            seed,
            config_digest: digest,
            val_metric: outcome.best_val,
        },
    }
    .save(out, a.train.float_width()?)
}

fn train_cfg_json(cfg: &TrainConfig) -> Value {
    json!({
        "epochs": cfg.epochs,
        "batch_size": cfg.batch_size,
        "lr": cfg.lr,
        "seed": cfg.seed,
        "selection_pooling": cfg.selection_pooling,
        "threshold": cfg.threshold,
        "class_weighting": cfg.class_weighting,
        "weight_cap": cfg.weight_cap,
    })
}

fn extract_embed(a: &ExtractEmbedArgs) -> Result<()> {
    let model = ModelFile::load(require(&a.model, "model")?)?;
    let manifest = parse_manifest(require(&a.manifest, "manifest")?)?;
    let out = require(&a.out, "out")?;
    let front = FrontEndRuntime::embedding(&model)?;
    let bags = front.manifest_bags(&manifest)?;
    save_embeddings(&bags_to_set(&bags, front.dim(), EmbeddingSource::Trained)?, out)?;
    eprintln!("wrote {}-d embeddings of {} clips to {}", front.dim(), bags.len(), out.display());
    Ok(())
}

fn manifest_labels(m: &Manifest) -> impl Iterator<Item = (&str, Vec<bool>)> {
    m.records.iter().map(move |r| (r.id.as_str(), m.label_vector(r)))
}

fn train_mil(a: &TrainMilArgs, seed: u64) -> Result<()> {
    let (tm, vm) = load_split(require(&a.manifest, "manifest")?, require(&a.val_manifest, "val-manifest")?)?;
    let out = require(&a.out, "out")?;
    if tm.is_empty() || vm.is_empty() {
        return Err(Error::EmptyDataset("training and validation manifests need clips".into()));
    }
    let embed = a.embed_model.as_ref().map(ModelFile::load).transpose()?;
    let (train_bags, val_bags, front_end) = match (&a.features, &embed) {
        (Some(path), _) => {
            let set = load_embeddings(path, EmbeddingSource::External)?;
            let val_set = match &a.val_features {
                Some(p) => load_embeddings(p, EmbeddingSource::External)?,
                None => set.clone(),
            };
            let front_end = match &embed {
                Some(e) if e.model.penultimate_dim() != set.dim => {
                    return Err(Error::ShapeMismatch {
                        expected: format!("{}-d embeddings", e.model.penultimate_dim()),
                        got: format!("{}-d vectors in {}", set.dim, path.display()),
                    })
                }
                Some(_) => FrontEnd::Embedding { dim: set.dim },
                None => FrontEnd::External { dim: set.dim },
            };
            (set.bags(manifest_labels(&tm))?, val_set.bags(manifest_labels(&vm))?, front_end)
        }
        (None, Some(e)) => {
            let front = FrontEndRuntime::embedding(e)?;
            (
                front.manifest_bags(&tm)?,
                front.manifest_bags(&vm)?,
                FrontEnd::Embedding { dim: front.dim() },
            )
        }
        (None, None) => {
            let cfg = a.feature.resolve(FeatureConfig::mil());
            let front = FrontEndRuntime::log_mel(cfg.clone())?;
            (front.manifest_bags(&tm)?, front.manifest_bags(&vm)?, FrontEnd::LogMel(cfg))
        }
    };
    let dim = train_bags[0].instances[0].len();
    let hidden = a.hidden.clone().unwrap_or_else(|| MIL_DNN_HIDDEN.to_vec());
    let mut model = Model::build(&[dim], &LayerSpec::mlp(dim, &hidden, tm.n_classes()), seed)?;
    let standardize = a.train.standardize.unwrap_or(true);
    if standardize {
        let rows = train_bags.iter().flat_map(|b| b.instances.iter().map(Vec::as_slice));
        model.set_standardizer(Some(Standardizer::fit(rows)?))?;
    }
    let pooling: Pooling = a.pooling.as_deref().unwrap_or("max").parse()?;
    let train_cfg = a.train.train_config(seed, pooling);
    let outcome = train(model, &train_bags, &val_bags, &train_cfg)?;
    write_log(&outcome, a.train.log.as_ref())?;
    let digest = config_digest(&json!({
        "front_end": front_end,
        "hidden": hidden,
        "standardize": standardize,
        "train": train_cfg_json(&train_cfg),
    }));
    ModelFile {
        model: outcome.model,
        class_list: tm.class_list.clone(),
        front_end,
        provenance: Provenance {
            seed,
            config_digest: digest,
            val_metric: outcome.best_val,
        },
    }
    .save(out, a.train.float_width()?)
}

fn load_tagger(model: &Option<PathBuf>, embed: &Option<PathBuf>, threshold: Option<&[f64]>) -> Result<Tagger> {
    let model = ModelFile::load(require(model, "model")?)?;
    let embed = embed.as_ref().map(ModelFile::load).transpose()?;
    Tagger::new(model, embed.as_ref(), threshold)
}

fn tag(a: &TagArgs) -> Result<()> {
    let tagger = load_tagger(&a.model, &a.embed_model, a.threshold.as_deref())?;
    let tags = match (&a.manifest, &a.wav, &a.features) {
        (Some(m), None, features) => {
            let manifest = parse_manifest(m)?;
            if manifest.is_empty() {
                return Err(Error::EmptyDataset("manifest has no clips".into()));
            }
            match features {
                Some(f) => {
                    let set = load_embeddings(f, EmbeddingSource::External)?;
                    let bags = set.bags(manifest_labels(&manifest))?;
                    bags.into_iter()
                        .map(|b| tagger.tag_vectors(&b.id, b.instances))
                        .collect::<Result<Vec<_>>>()?
                }
                None => {
                    let clips = super::pipeline::load_clips(&manifest)?;
                    super::pipeline::par_map(&clips, |c| tagger.tag_clip(c))?
                }
            }
        }
        (None, Some(w), None) => vec![tagger.tag_clip(&load_wav(w)?)?],
        _ => {
            return Err(Error::InvalidConfig(
                "give --manifest (optionally with --features) or --wav".into(),
            ))
        }
    };
    write_jsonl(&tags, output(a.out.as_ref())?)
}

fn stream(a: &StreamArgs) -> Result<()> {
    let tagger = load_tagger(&a.model, &a.embed_model, a.threshold.as_deref())?;
    let stdin = std::io::stdin().lock();
    let stdout = std::io::stdout().lock();
    tagger.stream(stdin, stdout)?;
    Ok(())
}

fn fuse_cmd(a: &FuseArgs) -> Result<()> {
    let paths = require(&a.predictions, "predictions")?;
    if paths.is_empty() {
        return Err(Error::InvalidConfig("--predictions needs at least one file".into()));
    }
    let weights = match (&a.weights, &a.models) {
        (Some(_), Some(_)) => {
            return Err(Error::InvalidConfig("give either --weights or --models, not both".into()))
        }
        (Some(w), None) => w.clone(),
        (None, Some(models)) => {
            let scores = models
                .iter()
                .map(|p| {
                    ModelFile::load(p)?.provenance.val_metric.ok_or_else(|| {
                        Error::InvalidWeights(format!("{} carries no validation score", p.display()))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            validation_weights(&scores)?
        }
        (None, None) => vec![1.0; paths.len()],
    };
    if weights.len() != paths.len() {
        return Err(Error::InvalidConfig(format!(
            "{} weights for {} prediction files",
            weights.len(),
            paths.len()
        )));
    }
    let members = paths.iter().map(|p| read_tags(p)).collect::<Result<Vec<_>>>()?;
    let ids: Vec<&str> = members[0].iter().map(|t| t.id.as_str()).collect();
    let mut aligned = Vec::with_capacity(members.len());
    for m in &members {
        let by_id: std::collections::HashMap<&str, &ClipTag> = m.iter().map(|t| (t.id.as_str(), t)).collect();
        let missing: Vec<String> = ids.iter().filter(|id| !by_id.contains_key(*id)).map(|s| s.to_string()).collect();
        if !missing.is_empty() || by_id.len() != ids.len() {
            return Err(Error::MissingClip(missing));
        }
        aligned.push(ids.iter().map(|id| by_id[id].decisions.clone()).collect::<Vec<_>>());
    }
    let fused = fuse(&aligned, &weights)?;
    let total: f64 = weights.iter().sum();
    let tags: Vec<ClipTag> = ids
        .iter()
        .enumerate()
        .map(|(c, id)| ClipTag {
            id: id.to_string(),
            scores: (0..fused[c].len())
                .map(|n| {
                    aligned
                        .iter()
                        .zip(&weights)
                        .filter(|(d, _)| d[c][n])
                        .map(|(_, w)| w)
                        .sum::<f64>()
                        / total
                })
                .collect(),
            decisions: fused[c].clone(),
            instance_scores: Vec::new(),
        })
        .collect();
    write_jsonl(&tags, output(a.out.as_ref())?)
}

fn eval(a: &EvalArgs) -> Result<()> {
    let path = require(&a.predictions, "predictions")?;
    let manifest = parse_manifest(require(&a.manifest, "manifest")?)?;
    let tags = read_tags(path)?;
    let mut missing = Vec::new();
    let mut results = Vec::with_capacity(tags.len());
    for t in tags {
        match manifest.get(&t.id) {
            Some(rec) => {
                if t.decisions.len() != manifest.n_classes() {
                    return Err(Error::DimensionMismatch(format!(
                        "clip `{}` has {} decisions, manifest has {} classes",
                        t.id,
                        t.decisions.len(),
                        manifest.n_classes()
                    )));
                }
                results.push(TagResult {
                    id: t.id,
                    predicted: t.decisions,
                    reference: manifest.label_vector(rec),
                    scores: t.scores,
                })
            }
            None => missing.push(t.id),
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingClip(missing));
    }
    let report = metrics_report(&results, &manifest.class_list)?;
    let mut out = output(a.out.as_ref())?;
    serde_json::to_writer_pretty(&mut out, &report)?;
    out.write_all(b"\n").map_err(|e| Error::io("<output>", e))?;
    out.flush().map_err(|e| Error::io("<output>", e))?;
    if let Some(p) = &a.confusion {
        // Clips without any reference label have no row.
        let labelled: Vec<TagResult> = results.into_iter().filter(|r| r.reference.contains(&true)).collect();
        let matrix = confusion_matrix(&labelled)?;
        let mut w = create(p)?;
        write_confusion_csv(&matrix, &manifest.class_list, &mut w)?;
        w.flush().map_err(|e| Error::io(p, e))?;
    }
    Ok(())
}

fn params(a: &ParamsArgs) -> Result<()> {
    let count = match &a.model {
        Some(p) => ModelFile::load(p)?.model.count_parameters(),
        None => {
            let input = a.input_dim.unwrap_or(512);
            let hidden = a.hidden.clone().unwrap_or_else(|| MIL_DNN_HIDDEN.to_vec());
            let n = a.n_classes.unwrap_or(17);
            Model::build(&[input], &LayerSpec::mlp(input, &hidden, n), 0)?.count_parameters()
        }
    };
    println!("{count}");
    Ok(())
}
