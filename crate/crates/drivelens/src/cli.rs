//! Command-line surface tying the pipeline together.
//!
//! Five subcommands cover the artifact lifecycle:
//!
//! * `gen-data` — synthesize a clip corpus into a dataset directory.
//! * `train-gen` — train the object-significance generator.
//! * `train-vlm` — train the explainer under a chosen attention source.
//! * `eval` — generate explanations over the validation split and score them.
//! * `visualize` — render one clip's attention overlay to a PNG.
//!
//! Configuration is a single flat JSON object of dotted keys, e.g.
//! `{"scene.seed": 7, "clips": 500}`. Precedence, lowest to highest:
//! built-in defaults, shape defaults derived from the dataset manifest,
//! `--config FILE`, repeated `--set KEY=VALUE` overrides, and dedicated
//! flags. Unknown keys are rejected. Every command echoes its resolved
//! configuration beside its outputs, so any artifact can be reproduced
//! from the files next to it.
//!
//! Exit codes: 0 success, 2 configuration/validation error, 3 runtime/data
//! error.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};

use crate::attn_gen::{self, GeneratorConfig, SelectionPolicy};
use crate::error::{Error, Result};
use crate::metrics::{EvalRecord, MetricReport};
use crate::nn::{self, CheckpointMeta, Params};
use crate::scene::{self, detokenize, DatasetManifest, LabeledClip, SceneSpec};
use crate::training::{
    self, AttentionProvider, AttentionSource, TrainConfig, TrainOutcome,
};
use crate::viz::{self, OverlaySpec};
use crate::vlm::{self, VlmConfig};

// ---------------------------------------------------------------------
// Flat dotted-key configuration.
// ---------------------------------------------------------------------

/// Flatten a JSON value into dotted keys. Only scalar leaves are allowed:
/// the configuration surface is deliberately flat.
fn flatten_into(prefix: &str, value: &Value, out: &mut BTreeMap<String, Value>) -> Result<()> {
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten_into(&key, v, out)?;
            }
            Ok(())
        }
        Value::Array(_) | Value::Null => Err(Error::config(format!(
            "config key {prefix:?} must be a scalar (number, string, or bool)"
        ))),
        _ => {
            out.insert(prefix.to_string(), value.clone());
            Ok(())
        }
    }
}

/// One subcommand's configuration space: every known dotted key with its
/// current value, resolved through the documented precedence chain.
struct ConfigSpace {
    values: BTreeMap<String, Value>,
    /// Keys set by the config file, `--set`, or a dedicated flag (as
    /// opposed to defaults and manifest-derived values).
    explicit: BTreeSet<String>,
}

impl ConfigSpace {
    fn new() -> Self {
        ConfigSpace {
            values: BTreeMap::new(),
            explicit: BTreeSet::new(),
        }
    }

    /// Register a struct's fields under `prefix.` with their default values.
    fn add_section(&mut self, prefix: &str, defaults: &impl Serialize) {
        let value = serde_json::to_value(defaults).expect("defaults serialize");
        flatten_into(prefix, &value, &mut self.values).expect("defaults are flat scalars");
    }

    /// Register a single top-level key with its default value.
    fn add_key(&mut self, key: &str, default: Value) {
        self.values.insert(key.to_string(), default);
    }

    /// Explicitly set one key, rejecting unknown keys and non-scalars.
    fn put(&mut self, key: &str, value: Value) -> Result<()> {
        if !self.values.contains_key(key) {
            return Err(Error::config(format!(
                "unknown config key {key:?} for this subcommand"
            )));
        }
        if value.is_object() || value.is_array() || value.is_null() {
            return Err(Error::config(format!(
                "config key {key:?} must be a scalar (number, string, or bool)"
            )));
        }
        self.values.insert(key.to_string(), value);
        self.explicit.insert(key.to_string());
        Ok(())
    }

    /// Merge a flat JSON config file.
    fn apply_file(&mut self, path: &Path) -> Result<()> {
        let ctx = |msg: String| Error::config(format!("config file {}: {msg}", path.display()));
        let raw = std::fs::read_to_string(path)
            .map_err(|e| ctx(format!("cannot read: {e}")))?;
        let value: Value =
            serde_json::from_str(&raw).map_err(|e| ctx(format!("invalid JSON: {e}")))?;
        let obj = value
            .as_object()
            .ok_or_else(|| ctx("expected a JSON object of dotted keys".to_string()))?;
        for (k, v) in obj {
            self.put(k, v.clone())
                .map_err(|e| ctx(e.to_string().replace("config error: ", "")))?;
        }
        Ok(())
    }

    /// Merge `--set KEY=VALUE` overrides. Values parse as JSON scalars when
    /// possible and fall back to plain strings (`--set out=runs/a` works
    /// without quoting).
    fn apply_sets(&mut self, sets: &[String]) -> Result<()> {
        for s in sets {
            let (key, raw) = s.split_once('=').ok_or_else(|| {
                Error::config(format!("--set {s:?}: expected KEY=VALUE"))
            })?;
            let value = match serde_json::from_str::<Value>(raw) {
                Ok(v) if !v.is_object() && !v.is_array() && !v.is_null() => v,
                _ => Value::String(raw.to_string()),
            };
            self.put(key, value)?;
        }
        Ok(())
    }

    /// Apply a dedicated flag; flag keys are registered by construction.
    fn set_flag(&mut self, key: &str, value: Value) {
        self.put(key, value).expect("flag keys are registered");
    }

    /// Fill a key from the dataset manifest unless the user set it.
    fn derive(&mut self, key: &str, value: Value) {
        assert!(self.values.contains_key(key), "derived keys are registered");
        if !self.explicit.contains(key) {
            self.values.insert(key.to_string(), value);
        }
    }

    fn value(&self, key: &str) -> Result<&Value> {
        self.values
            .get(key)
            .ok_or_else(|| Error::config(format!("unknown config key {key:?}")))
    }

    fn get_u64(&self, key: &str) -> Result<u64> {
        self.value(key)?
            .as_u64()
            .ok_or_else(|| Error::config(format!("config key {key:?} must be a non-negative integer")))
    }

    fn get_usize(&self, key: &str) -> Result<usize> {
        Ok(self.get_u64(key)? as usize)
    }

    fn get_f64(&self, key: &str) -> Result<f64> {
        self.value(key)?
            .as_f64()
            .ok_or_else(|| Error::config(format!("config key {key:?} must be a number")))
    }

    fn get_bool(&self, key: &str) -> Result<bool> {
        self.value(key)?
            .as_bool()
            .ok_or_else(|| Error::config(format!("config key {key:?} must be a bool")))
    }

    fn get_str(&self, key: &str) -> Result<String> {
        match self.value(key)? {
            Value::String(s) => Ok(s.clone()),
            _ => Err(Error::config(format!("config key {key:?} must be a string"))),
        }
    }

    /// Deserialize the keys under `prefix.` into a typed section.
    fn extract<T: DeserializeOwned>(&self, prefix: &str) -> Result<T> {
        extract_section(&self.values, prefix)
    }

    /// The resolved configuration as a flat JSON object (sorted keys), valid
    /// as a `--config` file for a rerun.
    fn echo(&self) -> Value {
        Value::Object(self.values.clone().into_iter().collect())
    }
}

/// Deserialize the `prefix.`-keyed entries of a flat map into a struct.
fn extract_section<T: DeserializeOwned>(
    flat: &BTreeMap<String, Value>,
    prefix: &str,
) -> Result<T> {
    let dot = format!("{prefix}.");
    let mut map = serde_json::Map::new();
    for (k, v) in flat {
        if let Some(rest) = k.strip_prefix(&dot) {
            map.insert(rest.to_string(), v.clone());
        }
    }
    serde_json::from_value(Value::Object(map))
        .map_err(|e| Error::config(format!("config section {prefix:?}: {e}")))
}

fn write_json_file<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text)?;
    Ok(())
}

// ---------------------------------------------------------------------
// Shared artifact plumbing.
// ---------------------------------------------------------------------

fn load_dataset_checked(dir: &Path) -> Result<(Vec<LabeledClip>, DatasetManifest)> {
    if !dir.join("manifest.json").is_file() {
        return Err(Error::data(format!(
            "no dataset at {} (expected manifest.json; create one with gen-data)",
            dir.display()
        )));
    }
    scene::load_dataset(dir)
}

/// Read a checkpoint's resolved-config echo back as a flat map.
fn read_checkpoint_config(dir: &Path) -> Result<BTreeMap<String, Value>> {
    let path = dir.join("config.json");
    let raw = std::fs::read_to_string(&path).map_err(|e| {
        Error::data(format!(
            "checkpoint {}: reading config.json: {e}",
            dir.display()
        ))
    })?;
    let value: Value = serde_json::from_str(&raw).map_err(|e| {
        Error::data(format!(
            "checkpoint {}: config.json is not valid JSON: {e}",
            dir.display()
        ))
    })?;
    let mut flat = BTreeMap::new();
    flatten_into("", &value, &mut flat)?;
    Ok(flat)
}

struct GeneratorArtifacts {
    params: Params<f32>,
    cfg: GeneratorConfig,
}

fn load_generator_checkpoint(dir: &Path) -> Result<GeneratorArtifacts> {
    let (params, manifest) = nn::load_checkpoint(dir)?;
    if manifest.model_kind != "generator" {
        return Err(Error::config(format!(
            "checkpoint {} holds a {:?} model where a generator is required",
            dir.display(),
            manifest.model_kind
        )));
    }
    let flat = read_checkpoint_config(dir)?;
    let cfg: GeneratorConfig = extract_section(&flat, "model")?;
    cfg.validate()?;
    Ok(GeneratorArtifacts { params, cfg })
}

fn load_vlm_checkpoint(dir: &Path) -> Result<(Params<f32>, VlmConfig, AttentionSource)> {
    let (params, manifest) = nn::load_checkpoint(dir)?;
    if manifest.model_kind != "vlm" {
        return Err(Error::config(format!(
            "checkpoint {} holds a {:?} model where an explainer is required",
            dir.display(),
            manifest.model_kind
        )));
    }
    let flat = read_checkpoint_config(dir)?;
    let cfg: VlmConfig = extract_section(&flat, "model")?;
    cfg.validate()?;
    let source = match flat.get("train.attention_source") {
        Some(Value::String(s)) => s.parse()?,
        _ => {
            return Err(Error::data(format!(
                "checkpoint {}: config.json lacks train.attention_source",
                dir.display()
            )))
        }
    };
    Ok((params, cfg, source))
}

/// Realize an attention source, requiring a generator for predicted maps.
fn make_provider<'a>(
    source: AttentionSource,
    generator: Option<&'a GeneratorArtifacts>,
    policy: SelectionPolicy,
) -> Result<AttentionProvider<'a>> {
    match source {
        AttentionSource::None => Ok(AttentionProvider::None),
        AttentionSource::OracleObject => Ok(AttentionProvider::OracleObject),
        AttentionSource::PredictedPatch => {
            let g = generator.ok_or_else(|| {
                Error::config(
                    "attention source predicted-patch needs a generator checkpoint \
                     (--generator-checkpoint)",
                )
            })?;
            Ok(AttentionProvider::PredictedPatch {
                params: &g.params,
                cfg: &g.cfg,
                policy,
            })
        }
    }
}

fn clip_significance(g: &GeneratorArtifacts, clip: &LabeledClip) -> Result<Vec<f64>> {
    let out = attn_gen::score_clip(&g.params, &g.cfg, clip)?;
    Ok(out.a_sig.iter().map(|&v| f64::from(v)).collect())
}

fn check_model_matches_dataset(cfg: &VlmConfig, spec: &SceneSpec) -> Result<()> {
    if cfg.frame_height != spec.frame_height
        || cfg.frame_width != spec.frame_width
        || cfg.n_frames != spec.n_frames
    {
        return Err(Error::config(format!(
            "model expects {}x{} frames, {} per clip, but the dataset provides {}x{}, {} per clip",
            cfg.frame_width,
            cfg.frame_height,
            cfg.n_frames,
            spec.frame_width,
            spec.frame_height,
            spec.n_frames
        )));
    }
    Ok(())
}

fn check_generator_matches_dataset(cfg: &GeneratorConfig, spec: &SceneSpec) -> Result<()> {
    if cfg.crop_size != spec.crop_size {
        return Err(Error::config(format!(
            "generator expects {0}x{0} detection crops but the dataset provides {1}x{1}",
            cfg.crop_size, spec.crop_size
        )));
    }
    Ok(())
}

/// The subset of [`TrainConfig`] exposed as `train.*` keys. Generator runs
/// hide the explainer-only knobs.
fn train_section(defaults: &TrainConfig, explainer: bool) -> Value {
    let mut m = serde_json::Map::new();
    m.insert("lr".into(), json!(defaults.lr));
    m.insert("batch_size".into(), json!(defaults.batch_size));
    m.insert("epochs".into(), json!(defaults.epochs));
    m.insert("step_size".into(), json!(defaults.step_size));
    m.insert("gamma".into(), json!(defaults.gamma));
    m.insert("seed".into(), json!(defaults.seed));
    m.insert("patience".into(), json!(defaults.patience));
    if explainer {
        m.insert(
            "attention_source".into(),
            json!(defaults.attention_source.as_str()),
        );
        m.insert(
            "encoder_warm_epochs".into(),
            json!(defaults.encoder_warm_epochs),
        );
    }
    Value::Object(m)
}

fn train_config_from(
    space: &ConfigSpace,
    mut base: TrainConfig,
    dataset_dir: &Path,
    out_dir: &Path,
    explainer: bool,
) -> Result<TrainConfig> {
    base.lr = space.get_f64("train.lr")?;
    base.batch_size = space.get_usize("train.batch_size")?;
    base.epochs = space.get_usize("train.epochs")?;
    base.step_size = space.get_usize("train.step_size")?;
    base.gamma = space.get_f64("train.gamma")?;
    base.seed = space.get_u64("train.seed")?;
    base.patience = space.get_usize("train.patience")?;
    if explainer {
        base.attention_source = space.get_str("train.attention_source")?.parse()?;
        base.encoder_warm_epochs = space.get_usize("train.encoder_warm_epochs")?;
    }
    base.dataset_dir = dataset_dir.to_path_buf();
    base.out_dir = out_dir.to_path_buf();
    Ok(base)
}

fn print_training_summary(kind: &str, outcome: &TrainOutcome, out_dir: &Path) {
    let h = &outcome.history;
    match h.best_epoch {
        None => println!("{kind}: initialization checkpoint (0 epochs)"),
        Some(best) => {
            println!(
                "{kind}: {} epochs, {} optimizer steps{}",
                h.entries.len(),
                outcome.step_count,
                if h.stopped_early { ", stopped early" } else { "" }
            );
            if let Some(e) = h.entries.iter().find(|e| e.epoch == best) {
                let extra = match (e.val_top1, e.val_top3) {
                    (Some(t1), Some(t3)) => format!("  top-1 {t1:.3}  top-3 {t3:.3}"),
                    _ => String::new(),
                };
                println!("  best epoch {best}: val loss {:.4}{extra}", e.val_loss);
            }
        }
    }
    println!("checkpoint written to {}", out_dir.display());
}

// ---------------------------------------------------------------------
// Argument surface.
// ---------------------------------------------------------------------

#[derive(Parser)]
#[command(
    name = "drivelens",
    version,
    about = "Attention-guided explanation generation for synthetic driving clips"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthesize a clip corpus into a dataset directory.
    GenData(GenDataArgs),
    /// Train the object-significance generator.
    TrainGen(TrainGenArgs),
    /// Train the explainer under a chosen attention source.
    TrainVlm(TrainVlmArgs),
    /// Generate explanations over the validation split and score them.
    Eval(EvalArgs),
    /// Render one clip's attention overlay to a PNG.
    Visualize(VisualizeArgs),
}

#[derive(Args)]
struct CommonOpts {
    /// Flat JSON config file of dotted keys.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one config key (repeatable), e.g. --set scene.seed=7.
    #[arg(long, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl CommonOpts {
    fn apply(&self, space: &mut ConfigSpace) -> Result<()> {
        if let Some(path) = &self.config {
            space.apply_file(path)?;
        }
        space.apply_sets(&self.set)
    }
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    common: CommonOpts,
    /// Number of clips to generate.
    #[arg(long)]
    clips: Option<u64>,
    /// Corpus seed (shorthand for --set scene.seed=N).
    #[arg(long)]
    seed: Option<u64>,
    /// Output dataset directory.
    #[arg(long, default_value = "data")]
    out: PathBuf,
    /// Replace an existing non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainGenArgs {
    #[command(flatten)]
    common: CommonOpts,
    /// Dataset directory (from gen-data).
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Checkpoint output directory.
    #[arg(long, default_value = "runs/generator")]
    out: PathBuf,
    /// Epoch cap (0 writes the initialization checkpoint).
    #[arg(long)]
    epochs: Option<u64>,
    /// Run seed (sets train.seed and model.seed together).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainVlmArgs {
    #[command(flatten)]
    common: CommonOpts,
    /// Dataset directory (from gen-data).
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Checkpoint output directory.
    #[arg(long, default_value = "runs/vlm")]
    out: PathBuf,
    /// Attention source: none | oracle-object | predicted-patch.
    #[arg(long)]
    attention: Option<String>,
    /// Generator checkpoint (required for --attention predicted-patch).
    #[arg(long, value_name = "DIR")]
    generator_checkpoint: Option<PathBuf>,
    /// Epoch cap (0 writes the initialization checkpoint).
    #[arg(long)]
    epochs: Option<u64>,
    /// Run seed (sets train.seed and model.seed together).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonOpts,
    /// Dataset directory (from gen-data).
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Explainer checkpoint to evaluate.
    #[arg(long, value_name = "DIR")]
    vlm_checkpoint: Option<PathBuf>,
    /// Generator checkpoint (enables top-k accuracy; required when the
    /// explainer was trained with predicted-patch attention).
    #[arg(long, value_name = "DIR")]
    generator_checkpoint: Option<PathBuf>,
    /// Report output directory.
    #[arg(long, default_value = "eval")]
    out: PathBuf,
    /// Score the references against themselves (metric sanity mode).
    #[arg(long)]
    self_check: bool,
}

#[derive(Args)]
struct VisualizeArgs {
    #[command(flatten)]
    common: CommonOpts,
    /// Dataset directory (from gen-data).
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Explainer checkpoint providing the generated sentence.
    #[arg(long, value_name = "DIR")]
    vlm_checkpoint: Option<PathBuf>,
    /// Generator checkpoint (adds per-box significance intensities).
    #[arg(long, value_name = "DIR")]
    generator_checkpoint: Option<PathBuf>,
    /// Clip to render.
    #[arg(long, value_name = "ID")]
    clip_id: Option<String>,
    /// Output PNG path.
    #[arg(long, default_value = "overlay.png")]
    out: PathBuf,
    /// Integer upscale factor.
    #[arg(long)]
    scale: Option<u64>,
}

// ---------------------------------------------------------------------
// Subcommands.
// ---------------------------------------------------------------------

/// Refuse to clobber a non-empty directory unless forced; forcing replaces
/// the directory wholesale so reruns cannot leave stale files behind.
fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.is_dir() && std::fs::read_dir(dir)?.next().is_some() {
        if !force {
            return Err(Error::config(format!(
                "output directory {} is not empty (pass --force to replace it)",
                dir.display()
            )));
        }
        std::fs::remove_dir_all(dir)?;
    }
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn run_gen_data(args: &GenDataArgs) -> Result<()> {
    let mut space = ConfigSpace::new();
    space.add_section("scene", &SceneSpec::default());
    space.add_key("clips", json!(2000));
    args.common.apply(&mut space)?;
    if let Some(n) = args.clips {
        space.set_flag("clips", json!(n));
    }
    if let Some(s) = args.seed {
        space.set_flag("scene.seed", json!(s));
    }

    let n_clips = space.get_usize("clips")?;
    if n_clips == 0 {
        return Err(Error::config("clips must be positive"));
    }
    let spec: SceneSpec = space.extract("scene")?;
    spec.validate()?;

    prepare_out_dir(&args.out, args.force)?;
    let corpus = scene::generate_corpus(&spec, n_clips)?;
    let manifest = scene::save_dataset(&corpus, &args.out, &spec)?;
    write_json_file(&args.out.join("config.json"), &space.echo())?;

    println!("generated {n_clips} clips into {}", args.out.display());
    println!("action marginals:");
    for (label, count) in &manifest.action_counts {
        println!(
            "  {label}: {count} ({:.1}%)",
            100.0 * *count as f64 / n_clips as f64
        );
    }
    Ok(())
}

fn run_train_gen(args: &TrainGenArgs) -> Result<()> {
    let mut space = ConfigSpace::new();
    space.add_section("train", &train_section(&TrainConfig::generator_defaults(), false));
    space.add_section("model", &GeneratorConfig::default());
    space.add_key("dataset_dir", json!("data"));
    args.common.apply(&mut space)?;
    if let Some(d) = &args.dataset {
        space.set_flag("dataset_dir", json!(d.display().to_string()));
    }
    if let Some(e) = args.epochs {
        space.set_flag("train.epochs", json!(e));
    }
    if let Some(s) = args.seed {
        space.set_flag("train.seed", json!(s));
        space.set_flag("model.seed", json!(s));
    }

    let dataset_dir = PathBuf::from(space.get_str("dataset_dir")?);
    let (clips, manifest) = load_dataset_checked(&dataset_dir)?;
    space.derive("model.crop_size", json!(manifest.spec.crop_size));

    let gen_cfg: GeneratorConfig = space.extract("model")?;
    gen_cfg.validate()?;
    check_generator_matches_dataset(&gen_cfg, &manifest.spec)?;
    let max_detections = clips.iter().map(|c| c.detections.len()).max().unwrap_or(0);
    if max_detections > gen_cfg.n_max {
        return Err(Error::config(format!(
            "dataset has clips with {max_detections} detections; raise model.n_max (currently {})",
            gen_cfg.n_max
        )));
    }
    let tc = train_config_from(
        &space,
        TrainConfig::generator_defaults(),
        &dataset_dir,
        &args.out,
        false,
    )?;

    let outcome = training::train_generator(&tc, &gen_cfg, &clips)?;
    let echo = space.echo();
    let meta = CheckpointMeta {
        model_kind: "generator".into(),
        seed: tc.seed,
        step_count: outcome.step_count,
        config_hash: nn::config_hash(&echo),
    };
    training::save_run(&args.out, &outcome, &meta, &echo)?;
    print_training_summary("generator", &outcome, &args.out);
    Ok(())
}

fn run_train_vlm(args: &TrainVlmArgs) -> Result<()> {
    let mut space = ConfigSpace::new();
    space.add_section("train", &train_section(&TrainConfig::vlm_defaults(), true));
    space.add_section("model", &VlmConfig::default());
    space.add_section("selection", &SelectionPolicy::default());
    space.add_key("dataset_dir", json!("data"));
    space.add_key("generator_checkpoint", json!(""));
    args.common.apply(&mut space)?;
    if let Some(d) = &args.dataset {
        space.set_flag("dataset_dir", json!(d.display().to_string()));
    }
    if let Some(a) = &args.attention {
        space.set_flag("train.attention_source", json!(a));
    }
    if let Some(g) = &args.generator_checkpoint {
        space.set_flag("generator_checkpoint", json!(g.display().to_string()));
    }
    if let Some(e) = args.epochs {
        space.set_flag("train.epochs", json!(e));
    }
    if let Some(s) = args.seed {
        space.set_flag("train.seed", json!(s));
        space.set_flag("model.seed", json!(s));
    }

    let dataset_dir = PathBuf::from(space.get_str("dataset_dir")?);
    let (clips, manifest) = load_dataset_checked(&dataset_dir)?;
    space.derive("model.frame_height", json!(manifest.spec.frame_height));
    space.derive("model.frame_width", json!(manifest.spec.frame_width));
    space.derive("model.n_frames", json!(manifest.spec.n_frames));
    space.derive("model.patch_size", json!(manifest.spec.patch_size));

    let vlm_cfg: VlmConfig = space.extract("model")?;
    vlm_cfg.validate()?;
    check_model_matches_dataset(&vlm_cfg, &manifest.spec)?;
    let policy: SelectionPolicy = space.extract("selection")?;
    let tc = train_config_from(
        &space,
        TrainConfig::vlm_defaults(),
        &dataset_dir,
        &args.out,
        true,
    )?;

    let gen_path = space.get_str("generator_checkpoint")?;
    let generator = if gen_path.is_empty() {
        None
    } else {
        let g = load_generator_checkpoint(Path::new(&gen_path))?;
        check_generator_matches_dataset(&g.cfg, &manifest.spec)?;
        Some(g)
    };
    let provider = make_provider(tc.attention_source, generator.as_ref(), policy)?;

    let outcome = training::train_vlm(&tc, &vlm_cfg, &clips, &provider)?;
    let echo = space.echo();
    let meta = CheckpointMeta {
        model_kind: "vlm".into(),
        seed: tc.seed,
        step_count: outcome.step_count,
        config_hash: nn::config_hash(&echo),
    };
    training::save_run(&args.out, &outcome, &meta, &echo)?;
    println!("attention source: {}", tc.attention_source);
    print_training_summary("explainer", &outcome, &args.out);
    Ok(())
}

/// One line of `generations.jsonl`.
#[derive(Serialize)]
struct GenerationLine<'a> {
    clip_id: &'a str,
    generated: &'a str,
    reference: &'a str,
    attention_source: &'a str,
}

fn run_eval(args: &EvalArgs) -> Result<()> {
    let mut space = ConfigSpace::new();
    space.add_section("selection", &SelectionPolicy::default());
    space.add_key("dataset_dir", json!("data"));
    space.add_key("vlm_checkpoint", json!(""));
    space.add_key("generator_checkpoint", json!(""));
    space.add_key("self_check", json!(false));
    args.common.apply(&mut space)?;
    if let Some(d) = &args.dataset {
        space.set_flag("dataset_dir", json!(d.display().to_string()));
    }
    if let Some(v) = &args.vlm_checkpoint {
        space.set_flag("vlm_checkpoint", json!(v.display().to_string()));
    }
    if let Some(g) = &args.generator_checkpoint {
        space.set_flag("generator_checkpoint", json!(g.display().to_string()));
    }
    if args.self_check {
        space.set_flag("self_check", json!(true));
    }

    let vlm_path = space.get_str("vlm_checkpoint")?;
    if vlm_path.is_empty() {
        return Err(Error::config(
            "an explainer checkpoint is required (--vlm-checkpoint)",
        ));
    }
    let (vparams, vcfg, source) = load_vlm_checkpoint(Path::new(&vlm_path))?;
    let dataset_dir = PathBuf::from(space.get_str("dataset_dir")?);
    let (clips, manifest) = load_dataset_checked(&dataset_dir)?;
    check_model_matches_dataset(&vcfg, &manifest.spec)?;

    let gen_path = space.get_str("generator_checkpoint")?;
    let generator = if gen_path.is_empty() {
        None
    } else {
        let g = load_generator_checkpoint(Path::new(&gen_path))?;
        check_generator_matches_dataset(&g.cfg, &manifest.spec)?;
        Some(g)
    };
    let policy: SelectionPolicy = space.extract("selection")?;
    let self_check = space.get_bool("self_check")?;

    let (_, val) = training::split_dataset(&clips);
    if val.is_empty() {
        return Err(Error::data(format!(
            "dataset of {} clips has no validation split",
            clips.len()
        )));
    }

    let records: Vec<EvalRecord> = if self_check {
        val.iter()
            .map(|clip| EvalRecord {
                clip_id: clip.clip_id.clone(),
                candidate: clip.gt_explanation.clone(),
                reference: clip.gt_explanation.clone(),
            })
            .collect()
    } else {
        let provider = make_provider(source, generator.as_ref(), policy)?;
        val.par_iter()
            .map(|clip| -> Result<EvalRecord> {
                let map = provider.map_for(clip, vcfg.patch_size)?;
                let ids = vlm::explain_clip(&vparams, &vcfg, &clip.frames, map.as_ref())?;
                Ok(EvalRecord {
                    clip_id: clip.clip_id.clone(),
                    candidate: detokenize(&ids)?,
                    reference: clip.gt_explanation.clone(),
                })
            })
            .collect::<Result<_>>()?
    };

    let cases: Option<Vec<(Vec<f64>, usize)>> = generator
        .as_ref()
        .map(|g| {
            val.iter()
                .map(|clip| Ok((clip_significance(g, clip)?, clip.gt_detection_index)))
                .collect::<Result<_>>()
        })
        .transpose()?;
    let report = MetricReport::compute(&records, cases.as_deref())?;

    std::fs::create_dir_all(&args.out)?;
    let mut jsonl = String::new();
    for rec in &records {
        let line = GenerationLine {
            clip_id: &rec.clip_id,
            generated: &rec.candidate,
            reference: &rec.reference,
            attention_source: source.as_str(),
        };
        jsonl.push_str(&serde_json::to_string(&line)?);
        jsonl.push('\n');
    }
    std::fs::write(args.out.join("generations.jsonl"), jsonl)?;
    write_json_file(&args.out.join("report.json"), &report)?;
    write_json_file(&args.out.join("config.json"), &space.echo())?;

    println!(
        "evaluated {} validation clips (attention: {source})",
        records.len()
    );
    if self_check {
        println!("self-check mode: candidates are the references");
    }
    println!(
        "  BLEU-4 {:.4}  ROUGE-L {:.4}  CIDEr {:.4}  SPICE-slot {:.4}",
        report.bleu4, report.rouge_l, report.cider, report.spice_slot
    );
    if let (Some(t1), Some(t3)) = (report.top1_accuracy, report.top3_accuracy) {
        println!("  top-1 {t1:.4}  top-3 {t3:.4}");
    }
    println!("report written to {}", args.out.join("report.json").display());
    Ok(())
}

fn run_visualize(args: &VisualizeArgs) -> Result<()> {
    let mut space = ConfigSpace::new();
    space.add_section("selection", &SelectionPolicy::default());
    space.add_key("dataset_dir", json!("data"));
    space.add_key("vlm_checkpoint", json!(""));
    space.add_key("generator_checkpoint", json!(""));
    space.add_key("clip_id", json!(""));
    space.add_key("scale", json!(viz::DEFAULT_SCALE));
    args.common.apply(&mut space)?;
    if let Some(d) = &args.dataset {
        space.set_flag("dataset_dir", json!(d.display().to_string()));
    }
    if let Some(v) = &args.vlm_checkpoint {
        space.set_flag("vlm_checkpoint", json!(v.display().to_string()));
    }
    if let Some(g) = &args.generator_checkpoint {
        space.set_flag("generator_checkpoint", json!(g.display().to_string()));
    }
    if let Some(id) = &args.clip_id {
        space.set_flag("clip_id", json!(id));
    }
    if let Some(s) = args.scale {
        space.set_flag("scale", json!(s));
    }

    let clip_id = space.get_str("clip_id")?;
    if clip_id.is_empty() {
        return Err(Error::config("a clip id is required (--clip-id)"));
    }
    let vlm_path = space.get_str("vlm_checkpoint")?;
    if vlm_path.is_empty() {
        return Err(Error::config(
            "an explainer checkpoint is required (--vlm-checkpoint)",
        ));
    }
    let (vparams, vcfg, source) = load_vlm_checkpoint(Path::new(&vlm_path))?;
    let dataset_dir = PathBuf::from(space.get_str("dataset_dir")?);
    let (clips, manifest) = load_dataset_checked(&dataset_dir)?;
    check_model_matches_dataset(&vcfg, &manifest.spec)?;
    let clip = clips
        .into_iter()
        .find(|c| c.clip_id == clip_id)
        .ok_or_else(|| {
            Error::data(format!(
                "clip {clip_id:?} not found in dataset {}",
                dataset_dir.display()
            ))
        })?;

    let gen_path = space.get_str("generator_checkpoint")?;
    let generator = if gen_path.is_empty() {
        None
    } else {
        let g = load_generator_checkpoint(Path::new(&gen_path))?;
        check_generator_matches_dataset(&g.cfg, &manifest.spec)?;
        Some(g)
    };
    let policy: SelectionPolicy = space.extract("selection")?;
    let provider = make_provider(source, generator.as_ref(), policy)?;

    let map = provider.map_for(&clip, vcfg.patch_size)?;
    let significance = generator
        .as_ref()
        .map(|g| clip_significance(g, &clip))
        .transpose()?;
    let ids = vlm::explain_clip(&vparams, &vcfg, &clip.frames, map.as_ref())?;
    let generated = detokenize(&ids)?;

    let img = viz::render_overlay(&OverlaySpec {
        clip: &clip,
        map: map.as_ref(),
        significance: significance.as_deref(),
        generated: &generated,
        scale: space.get_usize("scale")?,
    })?;
    viz::save_png(&img, &args.out)?;
    write_json_file(&args.out.with_extension("config.json"), &space.echo())?;

    println!("generated: {generated}");
    println!("reference: {}", clip.gt_explanation);
    println!(
        "overlay written to {} ({}x{} px)",
        args.out.display(),
        img.width(),
        img.height()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::GenData(a) => run_gen_data(a),
        Cmd::TrainGen(a) => run_train_gen(a),
        Cmd::TrainVlm(a) => run_train_vlm(a),
        Cmd::Eval(a) => run_eval(a),
        Cmd::Visualize(a) => run_visualize(a),
    }
}

/// Binary entry point: parse, dispatch, and map errors to exit codes.
pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(u8::try_from(err.exit_code()).unwrap_or(1))
        }
    }
}
