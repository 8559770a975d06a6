//! Training loops for both models: Adam with a step learning-rate decay,
//! a fixed hash-based validation split, early stopping with best-epoch
//! checkpointing, and the attention-map providers that realize the three
//! conditioning variants (no map, oracle object boxes, generator-predicted
//! patches).
//!
//! Determinism contract: every random choice derives from the run seed and
//! the epoch index, updates are strictly sequential, and nothing
//! time-dependent is serialized (per-epoch wall-clock goes to stderr only),
//! so a rerun with the same config writes byte-identical artifacts.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attn_gen::{self, GeneratorConfig, SelectionPolicy};
use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::geometry::{project_to_patch_map, PatchAttentionMap};
use crate::metrics::topk_accuracy;
use crate::nn::{self, Adam, CheckpointMeta, Params};
use crate::scene::{tokenize, LabeledClip, EOS};
use crate::seeding::{rng_from, stable_hash};
use crate::vlm::{self, FrameSource, MaskMode, VlmConfig};
use ndarray::Array2;
use rand::seq::SliceRandom;

/// Which attention maps condition the explainer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionSource {
    /// No maps: the Q-Former cross-attends to every patch.
    None,
    /// Maps projected from the ground-truth object box.
    OracleObject,
    /// Maps projected from the frozen generator's selected objects.
    PredictedPatch,
}

impl AttentionSource {
    pub fn as_str(&self) -> &'static str {
        match self {
            AttentionSource::None => "none",
            AttentionSource::OracleObject => "oracle-object",
            AttentionSource::PredictedPatch => "predicted-patch",
        }
    }
}

impl std::str::FromStr for AttentionSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(AttentionSource::None),
            "oracle-object" => Ok(AttentionSource::OracleObject),
            "predicted-patch" => Ok(AttentionSource::PredictedPatch),
            other => Err(Error::config(format!(
                "attention source {other:?} not one of none | oracle-object | predicted-patch"
            ))),
        }
    }
}

impl std::fmt::Display for AttentionSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Optimization settings shared by both training loops.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    /// Epoch cap; 0 returns the initialization unchanged.
    pub epochs: usize,
    /// Learning-rate decay interval, in epochs.
    pub step_size: usize,
    /// Learning-rate decay factor per interval.
    pub gamma: f64,
    pub seed: u64,
    pub attention_source: AttentionSource,
    /// Epochs the image encoder trains before being frozen (explainer only).
    pub encoder_warm_epochs: usize,
    /// Epochs without validation improvement before stopping early.
    pub patience: usize,
    /// Dataset directory (provenance; loops take loaded clips).
    pub dataset_dir: PathBuf,
    /// Output directory for checkpoint, history, and config echo.
    pub out_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::vlm_defaults()
    }
}

impl TrainConfig {
    /// Explainer defaults: Adam lr 1e-4, batch 32, 500-epoch cap with
    /// patience 25 on validation loss, step-50 decay-0.1 schedule.
    pub fn vlm_defaults() -> Self {
        TrainConfig {
            lr: 1e-4,
            batch_size: 32,
            epochs: 500,
            step_size: 50,
            gamma: 0.1,
            seed: 0,
            attention_source: AttentionSource::None,
            encoder_warm_epochs: 20,
            patience: 25,
            dataset_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs/vlm"),
        }
    }

    /// Generator defaults: batch 16, patience 20 on validation top-1.
    pub fn generator_defaults() -> Self {
        TrainConfig {
            batch_size: 16,
            patience: 20,
            out_dir: PathBuf::from("runs/generator"),
            ..Self::vlm_defaults()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("lr {} must be positive", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if self.step_size == 0 {
            return Err(Error::config("step_size must be positive"));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::config(format!("gamma {} must be in (0, 1]", self.gamma)));
        }
        if self.patience == 0 {
            return Err(Error::config("patience must be positive"));
        }
        Ok(())
    }
}

/// One completed epoch.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_top1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_top3: Option<f64>,
}

/// Per-epoch training record, serialized as `history.json` beside every
/// checkpoint. Wall-clock is deliberately not recorded here (stderr only):
/// seeded reruns must produce byte-identical files.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainHistory {
    pub model_kind: String,
    pub attention_source: Option<String>,
    pub entries: Vec<EpochRecord>,
    /// Epoch whose parameters the returned checkpoint holds.
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

/// Step decay: `base_lr · gamma^floor(epoch / step_size)`.
///
/// Written as a division by `(1/gamma)^k`: for the working-point schedule
/// (1e-4, step 50, decay 0.1) this yields the literal values 1e-4, 1e-5,
/// 1e-6 at epochs 0, 50, 100 — the multiplicative form drifts one ulp off
/// 1e-6 at the second decay.
pub fn lr_schedule(base_lr: f64, epoch: usize, step_size: usize, gamma: f64) -> f64 {
    assert!(step_size > 0, "step_size must be positive");
    let k = (epoch / step_size) as i32;
    base_lr / (1.0 / gamma).powi(k)
}

/// Whether a clip belongs to the validation split (a fixed 10% by stable
/// hash of the clip id, independent of corpus order and run seed).
pub fn is_validation(clip_id: &str) -> bool {
    stable_hash(clip_id).is_multiple_of(10)
}

/// Partition clips into (train, validation) by [`is_validation`].
pub fn split_dataset(clips: &[LabeledClip]) -> (Vec<&LabeledClip>, Vec<&LabeledClip>) {
    clips.iter().partition(|c| !is_validation(&c.clip_id))
}

fn split_nonempty(clips: &[LabeledClip]) -> Result<(Vec<&LabeledClip>, Vec<&LabeledClip>)> {
    let (train, val) = split_dataset(clips);
    if train.is_empty() || val.is_empty() {
        return Err(Error::data(format!(
            "dataset of {} clips splits into {} train / {} validation; both must be nonempty",
            clips.len(),
            train.len(),
            val.len()
        )));
    }
    Ok((train, val))
}

/// Everything a finished training run needs to be persisted.
#[derive(Debug)]
pub struct TrainOutcome {
    pub params: Params<f32>,
    pub history: TrainHistory,
    /// Optimizer steps behind `params` (the best epoch's count).
    pub step_count: u64,
}

/// Persist a training run: checkpoint files, `history.json`, and the
/// resolved `config.json`, all byte-deterministic.
pub fn save_run(
    dir: &Path,
    outcome: &TrainOutcome,
    meta: &CheckpointMeta,
    config_json: &serde_json::Value,
) -> Result<()> {
    nn::save_checkpoint(dir, &outcome.params, meta)?;
    let history = serde_json::to_string_pretty(&outcome.history)? + "\n";
    std::fs::write(dir.join("history.json"), history)?;
    let config = serde_json::to_string_pretty(config_json)? + "\n";
    std::fs::write(dir.join("config.json"), config)?;
    Ok(())
}

// ---------------------------------------------------------------------
// Generator training.
// ---------------------------------------------------------------------

/// Pure validation losses for one clip under the current generator.
fn generator_val_losses(
    params: &Params<f32>,
    cfg: &GeneratorConfig,
    clip: &LabeledClip,
) -> Result<(f64, f64, Vec<f64>)> {
    let out = attn_gen::score_clip(params, cfg, clip)?;
    let a_sig: Vec<f64> = out.a_sig.iter().map(|&v| f64::from(v)).collect();
    let logits: Vec<f64> = out.action_logits.iter().map(|&v| f64::from(v)).collect();
    let boxes: Vec<_> = clip.detections.iter().map(|d| d.bbox).collect();
    let sig = attn_gen::significance_loss(&boxes, &clip.gt_box, &a_sig)?;
    let act = attn_gen::action_loss(&logits, clip.gt_action.class_id())?;
    Ok((sig, act, a_sig))
}

/// Train the significance generator: Adam over [`attn_gen::generator_step`]
/// batches with the step schedule, early-stopped on validation top-1
/// accuracy, returning the best epoch's parameters.
pub fn train_generator(
    cfg: &TrainConfig,
    gen_cfg: &GeneratorConfig,
    clips: &[LabeledClip],
) -> Result<TrainOutcome> {
    cfg.validate()?;
    gen_cfg.validate()?;
    let mut params = attn_gen::init_params(gen_cfg);
    let mut history = TrainHistory {
        model_kind: "generator".into(),
        attention_source: None,
        entries: Vec::new(),
        best_epoch: None,
        stopped_early: false,
    };
    if cfg.epochs == 0 {
        return Ok(TrainOutcome { params, history, step_count: 0 });
    }
    let (train, val) = split_nonempty(clips)?;
    let mut opt = Adam::new();
    let mut best: Option<(Params<f32>, u64, usize, f64)> = None; // params, steps, epoch, top1
    let mut since_improvement = 0usize;

    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        let lr = lr_schedule(cfg.lr, epoch, cfg.step_size, cfg.gamma);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng_from(cfg.seed, &format!("generator/shuffle/{epoch}")));

        let mut train_loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&LabeledClip> = chunk.iter().map(|&i| train[i]).collect();
            let losses = attn_gen::generator_step(&mut params, &mut opt, gen_cfg, &batch, lr as f32)?;
            train_loss_sum += losses.total * batch.len() as f64;
        }
        let train_loss = train_loss_sum / train.len() as f64;

        let mut val_loss_sum = 0.0;
        let mut cases: Vec<(Vec<f64>, usize)> = Vec::with_capacity(val.len());
        for clip in &val {
            let (sig, act, a_sig) = generator_val_losses(&params, gen_cfg, clip)?;
            val_loss_sum += sig + act;
            cases.push((a_sig, clip.gt_detection_index));
        }
        let val_loss = val_loss_sum / val.len() as f64;
        let top1 = topk_accuracy(&cases, 1);
        let top3 = topk_accuracy(&cases, 3);

        history.entries.push(EpochRecord {
            epoch,
            lr,
            train_loss,
            val_loss,
            val_top1: Some(top1),
            val_top3: Some(top3),
        });
        eprintln!(
            "generator epoch {epoch}: lr {lr:.2e} train {train_loss:.4} val {val_loss:.4} \
             top1 {top1:.3} top3 {top3:.3} ({:.1}s)",
            t0.elapsed().as_secs_f64()
        );

        if best.as_ref().is_none_or(|(_, _, _, b)| top1 > *b) {
            best = Some((params.clone(), opt.step_count(), epoch, top1));
            since_improvement = 0;
        } else {
            since_improvement += 1;
            if since_improvement >= cfg.patience {
                history.stopped_early = true;
                break;
            }
        }
    }

    let (best_params, steps, best_epoch, _) = best.expect("at least one epoch ran");
    history.best_epoch = Some(best_epoch);
    Ok(TrainOutcome { params: best_params, history, step_count: steps })
}

// ---------------------------------------------------------------------
// Explainer training.
// ---------------------------------------------------------------------

/// Realizes an [`AttentionSource`] as per-clip maps.
#[derive(Debug)]
pub enum AttentionProvider<'a> {
    None,
    OracleObject,
    PredictedPatch {
        params: &'a Params<f32>,
        cfg: &'a GeneratorConfig,
        policy: SelectionPolicy,
    },
}

impl AttentionProvider<'_> {
    pub fn source(&self) -> AttentionSource {
        match self {
            AttentionProvider::None => AttentionSource::None,
            AttentionProvider::OracleObject => AttentionSource::OracleObject,
            AttentionProvider::PredictedPatch { .. } => AttentionSource::PredictedPatch,
        }
    }

    /// The map guiding `clip`'s cross-attention, if any.
    pub fn map_for(&self, clip: &LabeledClip, patch_size: usize) -> Result<Option<PatchAttentionMap>> {
        let key = clip.keyframe();
        let (h, w) = (key.height(), key.width());
        match self {
            AttentionProvider::None => Ok(None),
            AttentionProvider::OracleObject => {
                Ok(Some(project_to_patch_map(&[clip.gt_box], h, w, patch_size)?))
            }
            AttentionProvider::PredictedPatch { params, cfg, policy } => {
                let out = attn_gen::score_clip(params, cfg, clip)?;
                let a_sig: Vec<f64> = out.a_sig.iter().map(|&v| f64::from(v)).collect();
                let boxes = attn_gen::selected_boxes(&clip.detections, &a_sig, policy);
                Ok(Some(project_to_patch_map(&boxes, h, w, patch_size)?))
            }
        }
    }
}

/// Ground-truth token sequence of a clip: its explanation plus `<eos>`.
pub fn clip_tokens(clip: &LabeledClip) -> Result<Vec<usize>> {
    let mut t = tokenize(&clip.gt_explanation)?;
    t.push(EOS);
    Ok(t)
}

/// Mean teacher-forced loss of one clip, pure in `params` (inference
/// masking, so validation is deterministic).
fn vlm_val_loss(
    params: &Params<f32>,
    cfg: &VlmConfig,
    clip: &LabeledClip,
    map: Option<&PatchAttentionMap>,
    cache: Option<&[Array2<f32>]>,
) -> Result<f64> {
    let mut g = Graph::new();
    let b = nn::bind(&mut g, params);
    let mut rng = rng_from(0, "vlm/val"); // inference masking draws nothing
    let source = match cache {
        Some(encoded) => FrameSource::Encoded(encoded),
        None => FrameSource::Raw(&clip.frames),
    };
    let loss = vlm::clip_decode_loss_nodes(
        &mut g,
        &b,
        cfg,
        &source,
        &clip_tokens(clip)?,
        map,
        MaskMode::Infer,
        &mut rng,
    )?;
    Ok(f64::from(g.scalar(loss)))
}

/// Train the explainer: warm epochs with the image encoder learning, then
/// the encoder is frozen and per-frame embeddings are cached; Adam with the
/// step schedule throughout, early-stopped on validation loss, returning
/// the best epoch's parameters.
///
/// `provider` must realize `cfg.attention_source`.
pub fn train_vlm(
    cfg: &TrainConfig,
    vlm_cfg: &VlmConfig,
    clips: &[LabeledClip],
    provider: &AttentionProvider<'_>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    vlm_cfg.validate()?;
    if provider.source() != cfg.attention_source {
        return Err(Error::config(format!(
            "attention provider realizes {:?} but the config says {:?}",
            provider.source().as_str(),
            cfg.attention_source.as_str()
        )));
    }
    let mut params = vlm::init_params(vlm_cfg);
    let mut history = TrainHistory {
        model_kind: "vlm".into(),
        attention_source: Some(cfg.attention_source.as_str().to_owned()),
        entries: Vec::new(),
        best_epoch: None,
        stopped_early: false,
    };
    if cfg.epochs == 0 {
        return Ok(TrainOutcome { params, history, step_count: 0 });
    }
    let (train, val) = split_nonempty(clips)?;

    // Maps and token targets are fixed for the whole run (the generator is
    // already frozen): compute them once.
    let maps = |subset: &[&LabeledClip]| -> Result<Vec<Option<PatchAttentionMap>>> {
        subset.iter().map(|c| provider.map_for(c, vlm_cfg.patch_size)).collect()
    };
    let train_maps = maps(&train)?;
    let val_maps = maps(&val)?;
    let train_tokens: Vec<Vec<usize>> =
        train.iter().map(|c| clip_tokens(c)).collect::<Result<_>>()?;

    let mut opt = Adam::new();
    let mut best: Option<(Params<f32>, u64, usize, f64)> = None; // params, steps, epoch, val loss
    let mut since_improvement = 0usize;
    // Per-clip per-frame encoder outputs, built once the encoder freezes.
    let mut train_cache: Vec<Vec<Array2<f32>>> = Vec::new();
    let mut val_cache: Vec<Vec<Array2<f32>>> = Vec::new();

    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        let lr = lr_schedule(cfg.lr, epoch, cfg.step_size, cfg.gamma);
        let frozen = epoch >= cfg.encoder_warm_epochs;
        if frozen && train_cache.is_empty() {
            let encode_all = |subset: &[&LabeledClip]| -> Result<Vec<Vec<Array2<f32>>>> {
                subset
                    .iter()
                    .map(|clip| {
                        clip.frames
                            .iter()
                            .map(|f| vlm::encode_frame(&params, vlm_cfg, f))
                            .collect()
                    })
                    .collect()
            };
            train_cache = encode_all(&train)?;
            val_cache = encode_all(&val)?;
        }

        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng_from(cfg.seed, &format!("vlm/shuffle/{epoch}")));
        let mut mask_rng = rng_from(cfg.seed, &format!("vlm/mask/{epoch}"));

        let mut train_loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut g = Graph::new();
            let b = nn::bind(&mut g, &params);
            let mut clip_losses = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let source = if frozen {
                    FrameSource::Encoded(&train_cache[i])
                } else {
                    FrameSource::Raw(&train[i].frames)
                };
                let loss = vlm::clip_decode_loss_nodes(
                    &mut g,
                    &b,
                    vlm_cfg,
                    &source,
                    &train_tokens[i],
                    train_maps[i].as_ref(),
                    MaskMode::Train,
                    &mut mask_rng,
                )?;
                clip_losses.push(loss);
            }
            let mut sum = clip_losses[0];
            for &n in &clip_losses[1..] {
                sum = g.add(sum, n);
            }
            let batch_loss = g.scale(sum, 1.0 / chunk.len() as f32);
            let value = f64::from(g.scalar(batch_loss));
            if !value.is_finite() {
                return Err(Error::data(format!(
                    "non-finite explainer loss {value} at epoch {epoch}"
                )));
            }
            train_loss_sum += value * chunk.len() as f64;
            let grads = g.backward(batch_loss);
            opt.step(&mut params, &b.gradients(&grads), lr as f32);
        }
        let train_loss = train_loss_sum / train.len() as f64;

        let mut val_loss_sum = 0.0;
        for (i, clip) in val.iter().enumerate() {
            let cache = if frozen { Some(val_cache[i].as_slice()) } else { None };
            val_loss_sum += vlm_val_loss(&params, vlm_cfg, clip, val_maps[i].as_ref(), cache)?;
        }
        let val_loss = val_loss_sum / val.len() as f64;

        history.entries.push(EpochRecord {
            epoch,
            lr,
            train_loss,
            val_loss,
            val_top1: None,
            val_top3: None,
        });
        eprintln!(
            "vlm[{}] epoch {epoch}: lr {lr:.2e} train {train_loss:.4} val {val_loss:.4}{} ({:.1}s)",
            cfg.attention_source.as_str(),
            if frozen { " frozen" } else { "" },
            t0.elapsed().as_secs_f64()
        );

        if best.as_ref().is_none_or(|(_, _, _, b)| val_loss < *b) {
            best = Some((params.clone(), opt.step_count(), epoch, val_loss));
            since_improvement = 0;
        } else {
            since_improvement += 1;
            if since_improvement >= cfg.patience {
                history.stopped_early = true;
                break;
            }
        }
    }

    let (best_params, steps, best_epoch, _) = best.expect("at least one epoch ran");
    history.best_epoch = Some(best_epoch);
    Ok(TrainOutcome { params: best_params, history, step_count: steps })
}
