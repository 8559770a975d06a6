//! The miniature vision-language explainer: a patch encoder, a querying
//! transformer whose cross-attention is guided by binary patch attention
//! maps, temporal concatenation of the per-frame query tokens, and a causal
//! text decoder that treats the visual tokens as a prompt prefix.
//!
//! Masking contract (the load-bearing semantics):
//! - absent map → no patch masked;
//! - all-ones map → no patch masked, **bit-identical** to the absent case;
//! - train mode → each map-0 patch is masked independently with probability
//!   `p_mask`; map-1 patches are never masked;
//! - infer mode → every map-0 patch is masked, deterministically;
//! - all-zero map → no masking (fallback: cross-attention must not face an
//!   empty key set).
//!
//! Masked patches are excluded from the cross-attention softmax entirely
//! (probability exactly 0), so infer-mode outputs cannot depend on their
//! contents.

use ndarray::{Array2, NdFloat};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::geometry::PatchAttentionMap;
use crate::nn::{self, AttnMask, Binding, Params};
use crate::scene::{vocab_size, Frame, BOS, EOS, PAD};
use crate::seeding::rng_from;

/// Architecture and conditioning shape of the explainer.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct VlmConfig {
    /// Model width.
    pub d_model: usize,
    /// Attention heads in every block.
    pub n_heads: usize,
    /// Square patch side length in pixels.
    pub patch_size: usize,
    /// Learned query tokens extracted per frame.
    pub n_queries: usize,
    /// Image-encoder blocks.
    pub n_enc_blocks: usize,
    /// Query-transformer blocks.
    pub n_qf_blocks: usize,
    /// Decoder blocks.
    pub n_dec_blocks: usize,
    /// Expected frame height (pixels).
    pub frame_height: usize,
    /// Expected frame width (pixels).
    pub frame_width: usize,
    /// Frames per clip; the visual prefix holds `n_frames · n_queries` tokens.
    pub n_frames: usize,
    /// Train-mode probability of masking each map-0 patch.
    pub p_mask: f64,
    /// Generation cap and text positional-table size, in tokens.
    pub max_len: usize,
    /// Parameter-initialization seed (recorded in checkpoints).
    pub seed: u64,
}

impl Default for VlmConfig {
    fn default() -> Self {
        VlmConfig {
            d_model: 64,
            n_heads: 4,
            patch_size: 8,
            n_queries: 8,
            n_enc_blocks: 2,
            n_qf_blocks: 2,
            n_dec_blocks: 2,
            frame_height: 64,
            frame_width: 64,
            n_frames: 4,
            p_mask: 0.75,
            max_len: 12,
            seed: 0,
        }
    }
}

impl VlmConfig {
    pub fn patch_rows(&self) -> usize {
        self.frame_height / self.patch_size
    }

    pub fn patch_cols(&self) -> usize {
        self.frame_width / self.patch_size
    }

    /// Patches per frame.
    pub fn num_patches(&self) -> usize {
        self.patch_rows() * self.patch_cols()
    }

    /// Width of one flattened RGB patch.
    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    /// Rows of the visual prefix fed to the decoder.
    pub fn prefix_len(&self) -> usize {
        self.n_frames * self.n_queries
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0
            || self.n_heads == 0
            || self.patch_size == 0
            || self.n_queries == 0
            || self.n_enc_blocks == 0
            || self.n_qf_blocks == 0
            || self.n_dec_blocks == 0
            || self.n_frames == 0
        {
            return Err(Error::config("vlm dims must be positive"));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !self.frame_height.is_multiple_of(self.patch_size) || !self.frame_width.is_multiple_of(self.patch_size) {
            return Err(Error::config(format!(
                "frame {}x{} not divisible by patch size {}",
                self.frame_width, self.frame_height, self.patch_size
            )));
        }
        if !(0.0..=1.0).contains(&self.p_mask) {
            return Err(Error::config(format!("p_mask {} outside [0, 1]", self.p_mask)));
        }
        if self.max_len < 2 {
            return Err(Error::config("max_len must allow at least a word and <eos>"));
        }
        Ok(())
    }
}

/// Freshly initialized parameters for `cfg`, seeded from `cfg.seed`.
pub fn init_params(cfg: &VlmConfig) -> Params<f32> {
    let mut rng = rng_from(cfg.seed, "vlm/init");
    let d = cfg.d_model;
    let mut p = Params::new();
    nn::add_linear(&mut p, &mut rng, "patch_embed", cfg.patch_dim(), d);
    nn::add_table(&mut p, &mut rng, "pos_row", cfg.patch_rows(), d);
    nn::add_table(&mut p, &mut rng, "pos_col", cfg.patch_cols(), d);
    for i in 0..cfg.n_enc_blocks {
        nn::add_encoder_block(&mut p, &mut rng, &format!("enc.{i}"), d, 4 * d);
    }
    nn::add_table(&mut p, &mut rng, "queries", cfg.n_queries, d);
    for i in 0..cfg.n_qf_blocks {
        nn::add_layer_norm(&mut p, &format!("qf.{i}.ln1"), d);
        nn::add_attention(&mut p, &mut rng, &format!("qf.{i}.self"), d);
        nn::add_layer_norm(&mut p, &format!("qf.{i}.ln2"), d);
        nn::add_layer_norm(&mut p, &format!("qf.{i}.lnkv"), d);
        nn::add_attention(&mut p, &mut rng, &format!("qf.{i}.cross"), d);
        nn::add_layer_norm(&mut p, &format!("qf.{i}.ln3"), d);
        nn::add_linear(&mut p, &mut rng, &format!("qf.{i}.ffn.fc1"), d, 4 * d);
        nn::add_linear(&mut p, &mut rng, &format!("qf.{i}.ffn.fc2"), 4 * d, d);
    }
    nn::add_table(&mut p, &mut rng, "frame_pos", cfg.n_frames, d);
    nn::add_table(&mut p, &mut rng, "tok_embed", vocab_size(), d);
    nn::add_table(&mut p, &mut rng, "text_pos", cfg.max_len, d);
    for i in 0..cfg.n_dec_blocks {
        nn::add_encoder_block(&mut p, &mut rng, &format!("dec.{i}"), d, 4 * d);
    }
    nn::add_layer_norm(&mut p, "dec_ln_f", d);
    p
}

/// Flatten a frame into one row per patch (row-major patch order, matching
/// [`PatchAttentionMap::flat`]); within a patch, values run (y, x, channel).
pub fn frame_patch_matrix(frame: &Frame, patch_size: usize) -> Array2<f32> {
    let (h, w) = (frame.height(), frame.width());
    assert!(h % patch_size == 0 && w % patch_size == 0, "frame/patch mismatch");
    let (rows, cols) = (h / patch_size, w / patch_size);
    let dim = 3 * patch_size * patch_size;
    let mut out = Array2::<f32>::zeros((rows * cols, dim));
    for r in 0..rows {
        for c in 0..cols {
            let mut k = 0;
            for dy in 0..patch_size {
                for dx in 0..patch_size {
                    for ch in 0..3 {
                        out[(r * cols + c, k)] =
                            frame.value(r * patch_size + dy, c * patch_size + dx, ch);
                        k += 1;
                    }
                }
            }
        }
    }
    out
}

fn check_frame(cfg: &VlmConfig, frame: &Frame) -> Result<()> {
    if frame.height() != cfg.frame_height || frame.width() != cfg.frame_width {
        return Err(Error::shape(format!(
            "frame {} is {}x{}, config expects {}x{}",
            frame.index,
            frame.width(),
            frame.height(),
            cfg.frame_width,
            cfg.frame_height
        )));
    }
    Ok(())
}

/// In-graph image encoder: patch projection + factored 2-D positional
/// embeddings + the encoder blocks. `patches` is `P x patch_dim`.
pub fn encode_frame_nodes<T: NdFloat>(
    g: &mut Graph<T>,
    b: &Binding,
    cfg: &VlmConfig,
    patches: NodeId,
) -> NodeId {
    let p = cfg.num_patches();
    assert_eq!(g.value(patches).dim(), (p, cfg.patch_dim()), "patch matrix shape");
    let cols = cfg.patch_cols();
    let row_idx: Vec<usize> = (0..p).map(|k| k / cols).collect();
    let col_idx: Vec<usize> = (0..p).map(|k| k % cols).collect();
    let mut x = nn::linear(g, b, "patch_embed", patches);
    let pr = g.gather_rows(b.id("pos_row"), &row_idx);
    let pc = g.gather_rows(b.id("pos_col"), &col_idx);
    x = g.add(x, pr);
    x = g.add(x, pc);
    for i in 0..cfg.n_enc_blocks {
        x = nn::encoder_block(g, b, &format!("enc.{i}"), x, cfg.n_heads, &AttnMask::Full);
    }
    x
}

/// Per-frame patch embeddings (`P x d`), pure in `params`.
pub fn encode_frame(params: &Params<f32>, cfg: &VlmConfig, frame: &Frame) -> Result<Array2<f32>> {
    check_frame(cfg, frame)?;
    let mut g = Graph::new();
    let b = nn::bind(&mut g, params);
    let leaf = g.leaf(frame_patch_matrix(frame, cfg.patch_size));
    let out = encode_frame_nodes(&mut g, &b, cfg, leaf);
    Ok(g.value(out).clone())
}

/// Whether the Q-Former masks patches stochastically (training) or
/// deterministically (inference).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    Train,
    Infer,
}

/// Resolve an optional attention map to a per-patch masked flag
/// (`true` = excluded from cross-attention), applying the mode rules from
/// the module docs. Train mode draws one uniform sample per map-0 patch.
pub fn compute_mask(
    cfg: &VlmConfig,
    map: Option<&PatchAttentionMap>,
    mode: MaskMode,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<bool>> {
    let p = cfg.num_patches();
    let Some(map) = map else {
        return Ok(vec![false; p]);
    };
    if map.rows() != cfg.patch_rows()
        || map.cols() != cfg.patch_cols()
        || map.patch_size != cfg.patch_size
    {
        return Err(Error::shape(format!(
            "attention map {}x{} (patch {}) does not match config {}x{} (patch {})",
            map.rows(),
            map.cols(),
            map.patch_size,
            cfg.patch_rows(),
            cfg.patch_cols(),
            cfg.patch_size
        )));
    }
    if map.is_all_zeros() {
        return Ok(vec![false; p]);
    }
    let flat = map.flat();
    let masked = match mode {
        MaskMode::Train => flat
            .iter()
            .map(|&v| v == 0 && rng.gen::<f64>() < cfg.p_mask)
            .collect(),
        MaskMode::Infer => flat.iter().map(|&v| v == 0).collect(),
    };
    Ok(masked)
}

/// In-graph Q-Former: the learned queries self-attend, cross-attend to the
/// encoded patches (minus the masked ones), and pass through a feed-forward,
/// per block. Returns the `n_queries x d` frame tokens.
pub fn qformer_nodes<T: NdFloat>(
    g: &mut Graph<T>,
    b: &Binding,
    cfg: &VlmConfig,
    encoded_patches: NodeId,
    masked: &[bool],
) -> NodeId {
    assert_eq!(masked.len(), cfg.num_patches(), "mask length");
    // An all-false mask takes the structurally identical unmasked path, which
    // is what makes the all-ones-map ≡ absent-map identity bit-exact.
    let cross_mask = if masked.iter().any(|&m| m) {
        AttnMask::Columns(masked.iter().map(|&m| !m).collect())
    } else {
        AttnMask::Full
    };
    let mut x = b.id("queries");
    for i in 0..cfg.n_qf_blocks {
        let n1 = nn::layer_norm(g, b, &format!("qf.{i}.ln1"), x);
        let s = nn::multi_head_attention(
            g,
            b,
            &format!("qf.{i}.self"),
            n1,
            n1,
            cfg.n_heads,
            &AttnMask::Full,
        );
        x = g.add(x, s);
        let n2 = nn::layer_norm(g, b, &format!("qf.{i}.ln2"), x);
        let kv = nn::layer_norm(g, b, &format!("qf.{i}.lnkv"), encoded_patches);
        let c = nn::multi_head_attention(
            g,
            b,
            &format!("qf.{i}.cross"),
            n2,
            kv,
            cfg.n_heads,
            &cross_mask,
        );
        x = g.add(x, c);
        let n3 = nn::layer_norm(g, b, &format!("qf.{i}.ln3"), x);
        let f = nn::feed_forward(g, b, &format!("qf.{i}.ffn"), n3);
        x = g.add(x, f);
    }
    x
}

/// Extract one frame's query tokens from its encoded patches (`P x d`),
/// applying the masking rules. Pure in `params` for a fixed mask draw.
pub fn qformer_extract(
    params: &Params<f32>,
    cfg: &VlmConfig,
    encoded_patches: &Array2<f32>,
    map: Option<&PatchAttentionMap>,
    mode: MaskMode,
    rng: &mut ChaCha8Rng,
) -> Result<Array2<f32>> {
    if encoded_patches.dim() != (cfg.num_patches(), cfg.d_model) {
        return Err(Error::shape(format!(
            "encoded patches are {:?}, expected ({}, {})",
            encoded_patches.dim(),
            cfg.num_patches(),
            cfg.d_model
        )));
    }
    let masked = compute_mask(cfg, map, mode, rng)?;
    let mut g = Graph::new();
    let b = nn::bind(&mut g, params);
    let leaf = g.leaf(encoded_patches.clone());
    let out = qformer_nodes(&mut g, &b, cfg, leaf, &masked);
    Ok(g.value(out).clone())
}

/// Concatenate per-frame token blocks into `T_V`, preserving order. No
/// mixing, no re-normalization: block k of the output equals input k exactly.
pub fn concat_temporal<T: NdFloat>(blocks: &[Array2<T>]) -> Result<Array2<T>> {
    if blocks.is_empty() {
        return Err(Error::data("concat_temporal of zero frames"));
    }
    let dim = blocks[0].dim();
    for (k, b) in blocks.iter().enumerate() {
        if b.dim() != dim {
            return Err(Error::data(format!(
                "ragged token blocks: block 0 is {dim:?} but block {k} is {:?}",
                b.dim()
            )));
        }
    }
    let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
    Ok(ndarray::concatenate(ndarray::Axis(0), &views).expect("equal widths"))
}

fn check_tokens(cfg: &VlmConfig, gt_tokens: &[usize]) -> Result<()> {
    if gt_tokens.is_empty() {
        return Err(Error::data("empty target token sequence"));
    }
    if gt_tokens.len() > cfg.max_len {
        return Err(Error::data(format!(
            "target of {} tokens exceeds max_len {}",
            gt_tokens.len(),
            cfg.max_len
        )));
    }
    let v = vocab_size();
    if let Some(&bad) = gt_tokens.iter().find(|&&t| t >= v) {
        return Err(Error::data(format!("token id {bad} outside the {v}-word vocabulary")));
    }
    if *gt_tokens.last().expect("nonempty") != EOS {
        return Err(Error::data("target token sequence must end with <eos>"));
    }
    Ok(())
}

/// In-graph decoder forward: visual prefix + embedded input tokens through
/// the causal blocks, returning logits (`len(input_ids) x |V|`) for the text
/// positions only.
fn text_logits_nodes<T: NdFloat>(
    g: &mut Graph<T>,
    b: &Binding,
    cfg: &VlmConfig,
    t_v: NodeId,
    input_ids: &[usize],
) -> NodeId {
    let prefix_len = cfg.prefix_len();
    assert_eq!(
        g.value(t_v).dim(),
        (prefix_len, cfg.d_model),
        "T_V must hold n_frames · n_queries tokens"
    );
    assert!(!input_ids.is_empty() && input_ids.len() <= cfg.max_len, "input length");
    let frame_idx: Vec<usize> = (0..cfg.n_frames)
        .flat_map(|k| std::iter::repeat_n(k, cfg.n_queries))
        .collect();
    let fp = g.gather_rows(b.id("frame_pos"), &frame_idx);
    let prefix = g.add(t_v, fp);

    let te = g.gather_rows(b.id("tok_embed"), input_ids);
    let pos_idx: Vec<usize> = (0..input_ids.len()).collect();
    let tp = g.gather_rows(b.id("text_pos"), &pos_idx);
    let text = g.add(te, tp);

    let mut seq = g.concat_rows(&[prefix, text]);
    for i in 0..cfg.n_dec_blocks {
        seq = nn::encoder_block(g, b, &format!("dec.{i}"), seq, cfg.n_heads, &AttnMask::Causal);
    }
    let seq = nn::layer_norm(g, b, "dec_ln_f", seq);
    let text_rows = g.slice_rows(seq, prefix_len, prefix_len + input_ids.len());
    let tied = g.transpose(b.id("tok_embed"));
    g.matmul(text_rows, tied)
}

/// In-graph teacher-forced loss: mean cross-entropy of `gt_tokens` under the
/// decoder given the visual prefix. Prefix positions carry no loss; `<pad>`
/// targets are skipped.
pub fn decode_loss_nodes<T: NdFloat>(
    g: &mut Graph<T>,
    b: &Binding,
    cfg: &VlmConfig,
    t_v: NodeId,
    gt_tokens: &[usize],
) -> Result<NodeId> {
    check_tokens(cfg, gt_tokens)?;
    let mut input_ids = Vec::with_capacity(gt_tokens.len());
    input_ids.push(BOS);
    input_ids.extend_from_slice(&gt_tokens[..gt_tokens.len() - 1]);
    let logits = text_logits_nodes(g, b, cfg, t_v, &input_ids);
    let targets: Vec<Option<usize>> =
        gt_tokens.iter().map(|&t| if t == PAD { None } else { Some(t) }).collect();
    Ok(g.ce_mean(logits, &targets))
}

/// Teacher-forced mean cross-entropy, pure in `params`.
pub fn decode_loss(
    params: &Params<f32>,
    cfg: &VlmConfig,
    t_v: &Array2<f32>,
    gt_tokens: &[usize],
) -> Result<f64> {
    let mut g = Graph::new();
    let b = nn::bind(&mut g, params);
    let t_v = g.leaf(t_v.clone());
    let loss = decode_loss_nodes(&mut g, &b, cfg, t_v, gt_tokens)?;
    Ok(f64::from(g.scalar(loss)))
}

/// Greedy decode from `<bos>` until `<eos>` or `max_len` tokens; ties break
/// toward the lower token id. The terminating `<eos>`, when reached, is
/// included in the returned sequence.
pub fn generate(params: &Params<f32>, cfg: &VlmConfig, t_v: &Array2<f32>) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::new();
    let mut input = vec![BOS];
    while out.len() < cfg.max_len {
        let mut g = Graph::new();
        let b = nn::bind(&mut g, params);
        let t_v_node = g.leaf(t_v.clone());
        let logits = text_logits_nodes(&mut g, &b, cfg, t_v_node, &input);
        let row = g.value(logits).row(g.value(logits).nrows() - 1).to_owned();
        let mut best = 0;
        for (j, &z) in row.iter().enumerate() {
            if z > row[best] {
                best = j;
            }
        }
        out.push(best);
        if best == EOS || out.len() == cfg.max_len {
            break;
        }
        input.push(best);
    }
    out
}

/// Where a clip's frames enter the training graph: raw pixels (the encoder
/// runs in-graph and receives gradients) or precomputed encoder outputs
/// (the frozen-encoder fast path).
pub enum FrameSource<'a, T: NdFloat> {
    Raw(&'a [Frame]),
    Encoded(&'a [Array2<T>]),
}

/// Build one clip's `T_V` inside a shared graph: encode (or adopt) each
/// frame, extract query tokens under the masking rules, and concatenate.
/// The same map guides every frame; train mode draws fresh masks per frame.
pub fn clip_token_nodes<T: NdFloat>(
    g: &mut Graph<T>,
    b: &Binding,
    cfg: &VlmConfig,
    frames: &FrameSource<'_, T>,
    map: Option<&PatchAttentionMap>,
    mode: MaskMode,
    rng: &mut ChaCha8Rng,
) -> Result<NodeId> {
    let n = match frames {
        FrameSource::Raw(fs) => fs.len(),
        FrameSource::Encoded(es) => es.len(),
    };
    if n != cfg.n_frames {
        return Err(Error::data(format!(
            "clip has {n} frames, config expects {}",
            cfg.n_frames
        )));
    }
    let mut blocks = Vec::with_capacity(n);
    for k in 0..n {
        let encoded = match frames {
            FrameSource::Raw(fs) => {
                check_frame(cfg, &fs[k])?;
                let m = frame_patch_matrix(&fs[k], cfg.patch_size)
                    .mapv(|v| T::from(v).expect("pixel representable"));
                let leaf = g.leaf(m);
                encode_frame_nodes(g, b, cfg, leaf)
            }
            FrameSource::Encoded(es) => {
                if es[k].dim() != (cfg.num_patches(), cfg.d_model) {
                    return Err(Error::shape(format!(
                        "cached frame {k} embedding is {:?}, expected ({}, {})",
                        es[k].dim(),
                        cfg.num_patches(),
                        cfg.d_model
                    )));
                }
                g.leaf(es[k].clone())
            }
        };
        let masked = compute_mask(cfg, map, mode, rng)?;
        blocks.push(qformer_nodes(g, b, cfg, encoded, &masked));
    }
    Ok(g.concat_rows(&blocks))
}

/// Full training loss for one clip inside a shared graph.
#[allow(clippy::too_many_arguments)]
pub fn clip_decode_loss_nodes<T: NdFloat>(
    g: &mut Graph<T>,
    b: &Binding,
    cfg: &VlmConfig,
    frames: &FrameSource<'_, T>,
    gt_tokens: &[usize],
    map: Option<&PatchAttentionMap>,
    mode: MaskMode,
    rng: &mut ChaCha8Rng,
) -> Result<NodeId> {
    let t_v = clip_token_nodes(g, b, cfg, frames, map, mode, rng)?;
    decode_loss_nodes(g, b, cfg, t_v, gt_tokens)
}

/// Inference pipeline for one clip: encode frames, extract tokens with
/// deterministic masking, concatenate, and greedily decode token ids.
pub fn explain_clip(
    params: &Params<f32>,
    cfg: &VlmConfig,
    frames: &[Frame],
    map: Option<&PatchAttentionMap>,
) -> Result<Vec<usize>> {
    if frames.len() != cfg.n_frames {
        return Err(Error::data(format!(
            "clip has {} frames, config expects {}",
            frames.len(),
            cfg.n_frames
        )));
    }
    // Infer mode draws nothing from the rng; it exists to share the
    // extraction signature.
    let mut rng = rng_from(0, "vlm/infer");
    let mut blocks = Vec::with_capacity(frames.len());
    for frame in frames {
        let encoded = encode_frame(params, cfg, frame)?;
        blocks.push(qformer_extract(params, cfg, &encoded, map, MaskMode::Infer, &mut rng)?);
    }
    let t_v = concat_temporal(&blocks)?;
    Ok(generate(params, cfg, &t_v))
}
