//! Object-significance scoring: per-detection feature vectors, a small
//! transformer that weighs each keyframe detection and predicts the ego
//! action, the combined IoU-weighted / cross-entropy training loss, and the
//! selection policy that turns significance weights into boxes for the
//! patch-level attention map.

use ndarray::{Array2, NdFloat};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::nn::{self, Adam, AttnMask, Binding, Params};
use crate::scene::{ActionClass, DetectedObject, LabeledClip};
use crate::seeding::rng_from;

/// Architecture of the significance scorer.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    /// Transformer width.
    pub d_model: usize,
    /// Attention heads per block.
    pub n_heads: usize,
    /// Encoder blocks.
    pub n_blocks: usize,
    /// Denominator of the index feature; also the detection-count ceiling.
    pub n_max: usize,
    /// Side length of the square detection crops the features embed.
    pub crop_size: usize,
    /// Parameter-initialization seed (recorded in checkpoints).
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            d_model: 64,
            n_heads: 4,
            n_blocks: 2,
            n_max: 10,
            crop_size: 8,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    /// Length of one object feature row: index + normalized box + crop.
    pub fn feature_len(&self) -> usize {
        1 + 4 + 3 * self.crop_size * self.crop_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.n_blocks == 0 {
            return Err(Error::config("generator dims must be positive"));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_max == 0 || self.crop_size == 0 {
            return Err(Error::config("n_max and crop_size must be positive"));
        }
        Ok(())
    }
}

/// Freshly initialized parameters for `cfg`, seeded from `cfg.seed`.
pub fn init_params(cfg: &GeneratorConfig) -> Params<f32> {
    let mut rng = rng_from(cfg.seed, "generator/init");
    let mut p = Params::new();
    nn::add_linear(&mut p, &mut rng, "embed", cfg.feature_len(), cfg.d_model);
    for i in 0..cfg.n_blocks {
        nn::add_encoder_block(&mut p, &mut rng, &format!("enc.{i}"), cfg.d_model, 4 * cfg.d_model);
    }
    nn::add_layer_norm(&mut p, "ln_f", cfg.d_model);
    nn::add_linear(&mut p, &mut rng, "sig_head", cfg.d_model, 1);
    nn::add_linear(&mut p, &mut rng, "action_head", cfg.d_model, 4);
    p
}

/// One feature row per detection: `[i/n_max, box/(W,H,W,H), crop]`,
/// in detection order. Rows have length [`GeneratorConfig::feature_len`].
pub fn build_object_features(
    objects: &[DetectedObject],
    height: usize,
    width: usize,
    n_max: usize,
    crop_size: usize,
) -> Result<Array2<f32>> {
    if objects.len() > n_max {
        return Err(Error::data(format!(
            "{} detections exceed the feature ceiling n_max = {n_max}",
            objects.len()
        )));
    }
    let len = 1 + 4 + 3 * crop_size * crop_size;
    let (w, h) = (width as f32, height as f32);
    let mut out = Array2::<f32>::zeros((objects.len(), len));
    for (i, obj) in objects.iter().enumerate() {
        if obj.crop.dim() != (crop_size, crop_size, 3) {
            return Err(Error::shape(format!(
                "detection {i}: crop is {:?}, expected ({crop_size}, {crop_size}, 3)",
                obj.crop.dim()
            )));
        }
        let mut row = out.row_mut(i);
        row[0] = i as f32 / n_max as f32;
        row[1] = obj.bbox.x_min as f32 / w;
        row[2] = obj.bbox.y_min as f32 / h;
        row[3] = obj.bbox.x_max as f32 / w;
        row[4] = obj.bbox.y_max as f32 / h;
        for (k, &v) in obj.crop.iter().enumerate() {
            row[5 + k] = v;
        }
    }
    Ok(out)
}

/// Graph output of one forward pass: pre-softmax significance scores
/// (`1 x n`) and action logits (`1 x 4`).
pub struct ForwardNodes {
    pub score_row: NodeId,
    pub action_logits: NodeId,
}

/// Run the scorer inside an existing graph. `features` is an `n x feature_len`
/// leaf with n ≥ 1.
pub fn forward_scores<T: NdFloat>(
    g: &mut Graph<T>,
    b: &Binding,
    cfg: &GeneratorConfig,
    features: NodeId,
) -> ForwardNodes {
    assert!(g.value(features).nrows() > 0, "forward over zero objects");
    let mut x = nn::linear(g, b, "embed", features);
    for i in 0..cfg.n_blocks {
        x = nn::encoder_block(g, b, &format!("enc.{i}"), x, cfg.n_heads, &AttnMask::Full);
    }
    let x = nn::layer_norm(g, b, "ln_f", x);
    let per_object = nn::linear(g, b, "sig_head", x); // n x 1
    let score_row = g.transpose(per_object); // 1 x n
    let pooled = g.mean_rows(x); // 1 x d
    let action_logits = nn::linear(g, b, "action_head", pooled); // 1 x 4
    ForwardNodes { score_row, action_logits }
}

/// Inference result for one keyframe.
#[derive(Debug, Clone)]
pub struct SignificanceOutput<T> {
    /// Softmax weight per detection, in detection order.
    pub a_sig: Vec<T>,
    /// Ego-action logits, class order `ActionClass::ALL`.
    pub action_logits: Vec<T>,
    /// Argmax of the logits; ties resolve to the lower class id.
    pub action_pred: ActionClass,
}

/// Score a keyframe's detections. Pure in `params`.
pub fn score_objects<T: NdFloat>(
    params: &Params<T>,
    cfg: &GeneratorConfig,
    features: &Array2<T>,
) -> Result<SignificanceOutput<T>> {
    if features.nrows() == 0 {
        return Err(Error::data("score_objects: no detections to score"));
    }
    assert_eq!(features.ncols(), cfg.feature_len(), "feature width");
    let mut g = Graph::new();
    let b = nn::bind(&mut g, params);
    let f = g.leaf(features.clone());
    let nodes = forward_scores(&mut g, &b, cfg, f);
    let a_sig_node = g.softmax_rows(nodes.score_row, None);
    let a_sig: Vec<T> = g.value(a_sig_node).row(0).to_vec();
    let action_logits: Vec<T> = g.value(nodes.action_logits).row(0).to_vec();
    let mut best = 0;
    for (j, &v) in action_logits.iter().enumerate() {
        if v > action_logits[best] {
            best = j;
        }
    }
    Ok(SignificanceOutput { a_sig, action_logits, action_pred: ActionClass::ALL[best] })
}

/// Convenience: features + scoring for a labeled clip's keyframe.
pub fn score_clip(
    params: &Params<f32>,
    cfg: &GeneratorConfig,
    clip: &LabeledClip,
) -> Result<SignificanceOutput<f32>> {
    let key = clip.keyframe();
    let features =
        build_object_features(&clip.detections, key.height(), key.width(), cfg.n_max, cfg.crop_size)?;
    score_objects(params, cfg, &features)
}

/// `−Σ_i iou(detections[i], gt_box) · ln A_sig[i]`.
///
/// `a_sig` must be a valid probability vector over the detections; entries
/// ≤ 0 are rejected (they cannot come out of a softmax).
pub fn significance_loss(detections: &[BBox], gt_box: &BBox, a_sig: &[f64]) -> Result<f64> {
    if detections.len() != a_sig.len() {
        return Err(Error::data(format!(
            "significance_loss: {} detections vs {} weights",
            detections.len(),
            a_sig.len()
        )));
    }
    let mut loss = 0.0;
    for (i, (det, &a)) in detections.iter().zip(a_sig).enumerate() {
        if a <= 0.0 {
            return Err(Error::data(format!("significance_loss: A_sig[{i}] = {a} is not positive")));
        }
        loss -= iou(det, gt_box)? * a.ln();
    }
    Ok(loss)
}

/// Cross-entropy of the true action class under the logits
/// (`−ln softmax(logits)[gt_class]`).
pub fn action_loss(logits: &[f64], gt_class: usize) -> Result<f64> {
    if logits.len() != 4 {
        return Err(Error::data(format!("action_loss: {} logits, expected 4", logits.len())));
    }
    if gt_class >= logits.len() {
        return Err(Error::data(format!("action_loss: class {gt_class} out of range")));
    }
    let max = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    Ok(lse - logits[gt_class])
}

/// The combined loss is the unweighted sum of its two terms.
pub fn total_loss(sig_loss: f64, act_loss: f64) -> f64 {
    sig_loss + act_loss
}

/// Relative-threshold top-K selection over significance weights.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SelectionPolicy {
    /// Keep detections scoring at least `tau · max(A_sig)`.
    pub tau: f64,
    /// Cap on how many detections survive.
    pub k: usize,
}

impl Default for SelectionPolicy {
    fn default() -> Self {
        SelectionPolicy { tau: 0.5, k: 3 }
    }
}

/// Indices of the selected significant detections, ascending.
///
/// Detections scoring strictly above `tau · max` qualify (a weight exactly
/// at the threshold — e.g. 0.2 against a 0.4 peak at tau = 0.5 — does not);
/// the argmax additionally always qualifies, so the result is nonempty. The
/// `k` highest qualifiers are kept, breaking score ties toward the lower
/// index.
pub fn select_significant(a_sig: &[f64], policy: &SelectionPolicy) -> Vec<usize> {
    assert!(!a_sig.is_empty(), "selection over zero detections");
    assert!(policy.tau > 0.0 && policy.tau <= 1.0, "tau in (0, 1]");
    assert!(policy.k >= 1, "k must be at least 1");
    let max = a_sig.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let argmax = (0..a_sig.len()).find(|&i| a_sig[i] == max).expect("nonempty");
    let threshold = policy.tau * max;
    let mut qualified: Vec<usize> =
        (0..a_sig.len()).filter(|&i| a_sig[i] > threshold || i == argmax).collect();
    // Highest score first, lower index winning ties; `qualified` is already
    // index-ascending, and the sort is stable.
    qualified.sort_by(|&i, &j| a_sig[j].partial_cmp(&a_sig[i]).expect("finite weights"));
    qualified.truncate(policy.k);
    qualified.sort_unstable();
    qualified
}

/// Boxes of the selected significant detections, for patch-map projection.
pub fn selected_boxes(
    detections: &[DetectedObject],
    a_sig: &[f64],
    policy: &SelectionPolicy,
) -> Vec<BBox> {
    select_significant(a_sig, policy)
        .into_iter()
        .map(|i| detections[i].bbox)
        .collect()
}

/// Mean batch losses from one training step.
#[derive(Debug, Clone, Copy)]
pub struct StepLosses {
    pub sig: f64,
    pub act: f64,
    pub total: f64,
}

/// Per-clip loss nodes inside a shared batch graph.
fn clip_loss_nodes(
    g: &mut Graph<f32>,
    b: &Binding,
    cfg: &GeneratorConfig,
    clip: &LabeledClip,
) -> Result<(NodeId, NodeId)> {
    let key = clip.keyframe();
    let features =
        build_object_features(&clip.detections, key.height(), key.width(), cfg.n_max, cfg.crop_size)?;
    let f = g.leaf(features);
    let nodes = forward_scores(g, b, cfg, f);
    let mut weights = Array2::<f32>::zeros((1, clip.detections.len()));
    for (i, det) in clip.detections.iter().enumerate() {
        weights[(0, i)] = iou(&det.bbox, &clip.gt_box)? as f32;
    }
    let sig = g.weighted_ce(nodes.score_row, weights);
    let act = g.ce_mean(nodes.action_logits, &[Some(clip.gt_action.class_id())]);
    Ok((sig, act))
}

/// One Adam update over a batch of clips; returns the mean losses.
pub fn generator_step(
    params: &mut Params<f32>,
    opt: &mut Adam,
    cfg: &GeneratorConfig,
    batch: &[&LabeledClip],
    lr: f32,
) -> Result<StepLosses> {
    assert!(!batch.is_empty(), "empty batch");
    let mut g = Graph::new();
    let b = nn::bind(&mut g, params);
    let mut sig_nodes = Vec::with_capacity(batch.len());
    let mut act_nodes = Vec::with_capacity(batch.len());
    for clip in batch {
        let (sig, act) = clip_loss_nodes(&mut g, &b, cfg, clip)?;
        sig_nodes.push(sig);
        act_nodes.push(act);
    }
    let inv = 1.0 / batch.len() as f32;
    let sum = |g: &mut Graph<f32>, nodes: &[NodeId]| {
        let mut acc = nodes[0];
        for &n in &nodes[1..] {
            acc = g.add(acc, n);
        }
        g.scale(acc, inv)
    };
    let sig_mean = sum(&mut g, &sig_nodes);
    let act_mean = sum(&mut g, &act_nodes);
    let total = g.add(sig_mean, act_mean);

    let losses = StepLosses {
        sig: f64::from(g.scalar(sig_mean)),
        act: f64::from(g.scalar(act_mean)),
        total: f64::from(g.scalar(total)),
    };
    if !losses.total.is_finite() {
        let ids: Vec<&str> = batch.iter().map(|c| c.clip_id.as_str()).collect();
        return Err(Error::data(format!(
            "non-finite generator loss {} on batch [{}]",
            losses.total,
            ids.join(", ")
        )));
    }
    let grads = g.backward(total);
    opt.step(params, &b.gradients(&grads), lr);
    Ok(losses)
}
