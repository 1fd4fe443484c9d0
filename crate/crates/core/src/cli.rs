//! Command-line front end. Every subcommand reads the same JSON run
//! configuration; see [`crate::config::RunConfig`].

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;

use crate::checkpoint::{check_compatible, load_checkpoint, save_checkpoint, CheckpointMeta};
use crate::config::{apply_override, RunConfig};
use crate::data::{generate_synthetic, load_manifest, load_triplets, sample_triplets, save_manifest, save_png, AttributeSpace, DatasetSplit, PixelSource};
use crate::error::{AgmanError, Result};
use crate::eval::{attention_map, evaluate_map_with_pixels, evaluate_triplets, retrieve, write_attention, AttentionMeta};
use crate::model::AgmanModel;
use crate::train::{train_with_pixels, PixelCache};

#[derive(Debug, Parser)]
#[command(name = "agman", version, about = "Attribute-specific image embeddings and retrieval")]
pub struct Cli {
    /// Worker threads for embedding and training.
    #[arg(long, global = true, default_value_t = 1)]
    pub workers: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the top-level `seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Dotted-path override applied to the configuration, e.g. `train.epochs=3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write a checkpoint directory.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Retrieval MAP on the evaluation split.
    EvalMap {
        /// Checkpoint directory written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Triplet relation prediction accuracy on the evaluation split.
    EvalTriplet {
        /// Checkpoint directory written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Rank evaluation images against one query under one attribute.
    Retrieve {
        /// Checkpoint directory written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Record id of the query in the evaluation manifest.
        #[arg(long)]
        query: String,
        /// Attribute name as declared in the configuration.
        #[arg(long)]
        attribute: String,
        /// Number of ranked candidates to print.
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Write the attribute-aware spatial attention map of one image.
    ExportAttention {
        /// Checkpoint directory written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Record id in the evaluation or training manifest.
        #[arg(long)]
        image: String,
        /// Attribute name as declared in the configuration.
        #[arg(long)]
        attribute: String,
        #[command(flatten)]
        common: Common,
    },
    /// Generate synthetic training and evaluation splits.
    SynthData {
        #[command(flatten)]
        common: Common,
    },
}

/// Maps an outcome to the process exit code: 0, 1 for runtime failures, 2
/// for usage and configuration errors.
pub fn exit_code(result: &Result<()>) -> i32 {
    match result {
        Ok(()) => 0,
        Err(e) if e.is_usage() => 2,
        Err(_) => 1,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    if cli.workers == 0 {
        return Err(AgmanError::Usage("--workers must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.workers)
        .build()
        .map_err(|e| AgmanError::Usage(format!("cannot start {} workers: {e}", cli.workers)))?;
    pool.install(|| dispatch(cli.command))
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Train { common } => cmd_train(&common),
        Command::EvalMap { checkpoint, common } => cmd_eval_map(&checkpoint, &common),
        Command::EvalTriplet { checkpoint, common } => cmd_eval_triplet(&checkpoint, &common),
        Command::Retrieve {
            checkpoint,
            query,
            attribute,
            k,
            common,
        } => cmd_retrieve(&checkpoint, &query, &attribute, k, &common),
        Command::ExportAttention {
            checkpoint,
            image,
            attribute,
            common,
        } => cmd_export_attention(&checkpoint, &image, &attribute, &common),
        Command::SynthData { common } => cmd_synth_data(&common),
    }
}

fn seed_override(common: &Common) -> Vec<String> {
    let mut sets = common.set.clone();
    if let Some(seed) = common.seed {
        sets.push(format!("seed={seed}"));
    }
    sets
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let path = common
        .config
        .as_deref()
        .ok_or_else(|| AgmanError::Usage("--config is required".into()))?;
    RunConfig::load(path, &seed_override(common))
}

/// The checkpoint's own configuration, or `--config` after checking that it
/// describes the same model. `--set` applies in both cases.
fn eval_config(meta: &CheckpointMeta, common: &Common) -> Result<RunConfig> {
    if common.config.is_some() {
        let config = load_config(common)?;
        check_compatible(meta, &config)?;
        return Ok(config);
    }
    let mut value = meta.config.to_value();
    for o in seed_override(common) {
        apply_override(&mut value, &o)?;
    }
    let config = RunConfig::from_value(value)?;
    check_compatible(meta, &config)?;
    Ok(config)
}

fn eval_split(config: &RunConfig, space: &AttributeSpace) -> Result<DatasetSplit> {
    let path = config.require(&config.data.eval_manifest, "data.eval_manifest")?;
    load_manifest(path, space)?.with_query_partition(config.data.query_fraction, config.seed)
}

fn write_output(dir: Option<&Path>, name: &str, text: &str) -> Result<()> {
    if let Some(dir) = dir {
        std::fs::create_dir_all(dir).map_err(|e| AgmanError::io(dir, e))?;
        let path = dir.join(name);
        std::fs::write(&path, text).map_err(|e| AgmanError::io(&path, e))?;
    }
    Ok(())
}

fn print(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    out.write_all(text.as_bytes())
        .and_then(|_| out.flush())
        .map_err(|e| AgmanError::io("<stdout>", e))
}

pub fn cmd_train(common: &Common) -> Result<()> {
    let config = load_config(common)?;
    let space = config.space()?;
    let manifest = config.require(&config.data.train_manifest, "data.train_manifest")?;
    let out = common
        .out
        .as_deref()
        .ok_or_else(|| AgmanError::Usage("--out is required for train".into()))?;
    let split = load_manifest(manifest, &space)?;
    let mut model = AgmanModel::new(config.model_spec()?)?;
    if let Some(weights) = &config.backbone.weights {
        let loaded = model.load_safetensors(weights, false)?;
        info!("loaded {loaded} tensors from {}", weights.display());
    }
    let train_config = config.train_config();
    let pixels = PixelCache::load(&split, &space, model.spec().input_size)?;
    let history = train_with_pixels(&mut model, &split, &space, &train_config, &pixels, None)?;
    save_checkpoint(out, &model, &config, &history)?;
    info!("checkpoint written to {}", out.display());
    Ok(())
}

pub fn cmd_eval_map(checkpoint: &Path, common: &Common) -> Result<()> {
    let (model, meta) = load_checkpoint(checkpoint)?;
    let config = eval_config(&meta, common)?;
    let space = config.space()?;
    let split = eval_split(&config, &space)?;
    let pixels = PixelCache::load(&split, &space, model.spec().input_size)?;
    let report = evaluate_map_with_pixels(&model, &split, &space, &pixels)?;
    let json = report.to_json() + "\n";
    write_output(Some(common.out.as_deref().unwrap_or(checkpoint)), "eval_map.json", &json)?;
    print(&json)
}

pub fn cmd_eval_triplet(checkpoint: &Path, common: &Common) -> Result<()> {
    let (model, meta) = load_checkpoint(checkpoint)?;
    let config = eval_config(&meta, common)?;
    let space = config.space()?;
    let split = eval_split(&config, &space)?;
    let triplets = match &config.data.eval_triplets {
        Some(path) => load_triplets(path)?,
        None => {
            let mut all = Vec::new();
            for a in 0..space.n() {
                all.extend(sample_triplets(&split, a, config.data.eval_triplets_per_attribute, config.seed)?);
            }
            all
        }
    };
    for t in &triplets {
        crate::data::validate_triplet(t, &split)?;
    }
    let pixels = PixelCache::load(&split, &space, model.spec().input_size)?;
    let report = evaluate_triplets(&model, &pixels, &triplets, config.train.margin, config.train.triplet_mode)?;
    let json = report.to_json() + "\n";
    write_output(Some(common.out.as_deref().unwrap_or(checkpoint)), "eval_triplet.json", &json)?;
    print(&json)
}

pub fn cmd_retrieve(checkpoint: &Path, query: &str, attribute: &str, k: usize, common: &Common) -> Result<()> {
    let (model, meta) = load_checkpoint(checkpoint)?;
    let config = eval_config(&meta, common)?;
    let space = config.space()?;
    let attribute = space.index_of(attribute)?;
    let split = eval_split(&config, &space)?;
    let pixels = PixelCache::load(&split, &space, model.spec().input_size)?;
    let ranking = retrieve(&model, &split, &space, &pixels, query, attribute, k)?;
    if let Some(note) = &ranking.note {
        eprintln!("note: {note}");
    }
    let csv = ranking.to_csv()?;
    write_output(common.out.as_deref(), "ranking.csv", &csv)?;
    print(&csv)
}

pub fn cmd_export_attention(checkpoint: &Path, image: &str, attribute: &str, common: &Common) -> Result<()> {
    let (model, meta) = load_checkpoint(checkpoint)?;
    let config = eval_config(&meta, common)?;
    let space = config.space()?;
    let attribute_index = space.index_of(attribute)?;
    let out = common.out.as_deref().unwrap_or(checkpoint);
    let mut found = None;
    for path in [&config.data.eval_manifest, &config.data.train_manifest].into_iter().flatten() {
        let split = load_manifest(path, &space)?;
        if let Some(record) = split.get(image) {
            found = Some(split.pixels(record, &space, model.spec().input_size)?);
            break;
        }
    }
    let pixels = found.ok_or_else(|| AgmanError::Argument(format!("image `{image}` is in neither manifest")))?;
    let map = attention_map(&model, pixels.view(), attribute_index)?;
    std::fs::create_dir_all(out).map_err(|e| AgmanError::io(out, e))?;
    let (h, w) = map.dim();
    let meta = AttentionMeta {
        image_id: image.to_string(),
        attribute: attribute.to_string(),
        h,
        w,
    };
    let path = out.join("attention.csv");
    write_attention(&path, &map, &meta)?;
    print(&format!("{}\n", path.display()))
}

/// Writes `train.jsonl`, `eval.jsonl` and their PNG files under `--out`.
/// The evaluation split uses `seed + 1`.
pub fn cmd_synth_data(common: &Common) -> Result<()> {
    let config = load_config(common)?;
    let space = config.space()?;
    let out = common
        .out
        .as_deref()
        .ok_or_else(|| AgmanError::Usage("--out is required for synth-data".into()))?;
    let images = out.join("images");
    std::fs::create_dir_all(&images).map_err(|e| AgmanError::io(&images, e))?;
    for (name, seed) in [("train.jsonl", config.seed), ("eval.jsonl", config.seed.wrapping_add(1))] {
        let mut split = generate_synthetic(&space, config.synth.per_subclass, config.synth.image_size, seed)?;
        for record in &mut split.records {
            let pixels = split_pixels(record, &space)?;
            let file = PathBuf::from("images").join(format!("{}.png", record.id));
            save_png(&out.join(&file), &pixels)?;
            record.source = PixelSource::File(file);
        }
        save_manifest(&out.join(name), &split, &space)?;
        info!("{} records written to {}", split.len(), out.join(name).display());
    }
    Ok(())
}

fn split_pixels(record: &crate::data::ImageRecord, space: &AttributeSpace) -> Result<ndarray::Array3<f64>> {
    match record.source {
        PixelSource::Synthetic { seed, size } => Ok(crate::data::render_synthetic(space, &record.labels, seed, size)),
        PixelSource::File(_) => Err(AgmanError::Argument(format!("record `{}` is not synthetic", record.id))),
    }
}
