//! Acceptance suite: one integration test per release criterion.
//!
//! Each test prints exactly one `ACCEPTANCE <name>: PASS|FAIL (details)`
//! line straight to the process stdout — bypassing libtest's capture so the
//! scoreboard is visible in a plain `cargo test` run — and then asserts, so
//! any miss still fails the build.
//!
//! Every oracle in this file (rasterized IoU, per-pixel patch projection,
//! n-gram metrics, finite differences, the simplex minimizer) is written
//! from the definitions alone and shares no code with the library.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;
use std::time::Instant;

use ndarray::{s, Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use drivelens::attn_gen::{self, action_loss, significance_loss, GeneratorConfig};
use drivelens::autodiff::Graph;
use drivelens::geometry::{iou, project_to_patch_map, BBox, PatchAttentionMap};
use drivelens::metrics::{
    bleu4, cider, cider_scores, rouge_l, spice_slot, topk_accuracy, EvalRecord, MetricReport,
};
use drivelens::nn::{self, Params};
use drivelens::scene::{
    detokenize, generate_corpus, make_explanation, tokenize, Frame, Kind, LabeledClip,
    SceneSpec, Status, EOS, POSITIONS,
};
use drivelens::training::{
    lr_schedule, split_dataset, train_generator, train_vlm, AttentionProvider, AttentionSource,
    TrainConfig, TrainOutcome,
};
use drivelens::vlm::{self, concat_temporal, FrameSource, MaskMode, VlmConfig};

// ---------------------------------------------------------------------------
// Scoreboard plumbing
// ---------------------------------------------------------------------------

/// Print one scoreboard line directly to the process stdout (libtest
/// captures `println!` from passing tests), then assert.
fn report(name: &str, pass: bool, details: &str) {
    let line = format!(
        "ACCEPTANCE {name}: {} ({details})\n",
        if pass { "PASS" } else { "FAIL" }
    );
    match fs::OpenOptions::new().append(true).open("/dev/stdout") {
        Ok(mut f) => {
            let _ = f.write_all(line.as_bytes());
        }
        Err(_) => print!("{line}"),
    }
    assert!(pass, "{line}");
}

fn rng(tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(tag)
}

fn bits_equal_f32(a: &Array2<f32>, b: &Array2<f32>) -> bool {
    a.dim() == b.dim() && a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
}

// ---------------------------------------------------------------------------
// Criterion: geometry oracles
// ---------------------------------------------------------------------------

/// Random box with corners on the lattice `{0, cell, 2·cell, …, extent}`.
/// On-lattice corners make the rasterized areas exact, so the oracle carries
/// no discretization error of its own.
fn lattice_box(r: &mut ChaCha8Rng, cells: usize, cell: f64) -> BBox {
    let x1 = r.gen_range(0..=cells) as f64 * cell;
    let x2 = r.gen_range(0..=cells) as f64 * cell;
    let y1 = r.gen_range(0..=cells) as f64 * cell;
    let y2 = r.gen_range(0..=cells) as f64 * cell;
    BBox::new(x1.min(x2), y1.min(y2), x1.max(x2), y1.max(y2))
}

/// Fine-grid rasterization: classify every sub-cell by its center point and
/// count cells in the intersection and the union.
fn raster_iou(a: &BBox, b: &BBox, cells: usize, cell: f64) -> f64 {
    let inside = |bx: &BBox, x: f64, y: f64| {
        x > bx.x_min && x < bx.x_max && y > bx.y_min && y < bx.y_max
    };
    let (mut inter, mut union) = (0u64, 0u64);
    for i in 0..cells {
        let x = (i as f64 + 0.5) * cell;
        for j in 0..cells {
            let y = (j as f64 + 0.5) * cell;
            let (ia, ib) = (inside(a, x, y), inside(b, x, y));
            inter += u64::from(ia && ib);
            union += u64::from(ia || ib);
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

#[test]
fn geometry_oracles() {
    let t0 = Instant::now();
    let mut r = rng(0xACC0_0001);

    // iou vs rasterization on 1000 random lattice pairs.
    const CELLS: usize = 128;
    const CELL: f64 = 0.125; // domain [0, 16]
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let a = lattice_box(&mut r, CELLS, CELL);
        let b = lattice_box(&mut r, CELLS, CELL);
        let got = iou(&a, &b).unwrap();
        let want = raster_iou(&a, &b, CELLS, CELL);
        worst = worst.max((got - want).abs());
    }

    // project_to_patch_map vs per-pixel brute force on 500 random instances.
    // A patch is lit iff some box overlaps it with positive area, which holds
    // iff some box overlaps one of the patch's unit pixel cells with positive
    // area — so a pixel sweep needs no special cases at all.
    let mut exact = 0usize;
    for _ in 0..500 {
        let p = *[4usize, 8, 16].choose(&mut r).unwrap();
        let rows = r.gen_range(1..=6);
        let cols = r.gen_range(1..=6);
        let (h, w) = (rows * p, cols * p);
        let n_boxes = r.gen_range(0..=5);
        let boxes: Vec<BBox> = (0..n_boxes)
            .map(|_| {
                let x1 = r.gen_range(-8.0..w as f64 + 8.0);
                let x2 = r.gen_range(-8.0..w as f64 + 8.0);
                let y1 = r.gen_range(-8.0..h as f64 + 8.0);
                let y2 = r.gen_range(-8.0..h as f64 + 8.0);
                let mut b = BBox::new(x1.min(x2), y1.min(y2), x1.max(x2), y1.max(y2));
                if r.gen_bool(0.1) {
                    b.x_max = b.x_min; // degenerate: zero area, must light nothing
                }
                b
            })
            .collect();
        let got = project_to_patch_map(&boxes, h, w, p).unwrap();
        let mut want = Array2::<u8>::zeros((rows, cols));
        for py in 0..h {
            for px in 0..w {
                let (x0, x1) = (px as f64, px as f64 + 1.0);
                let (y0, y1) = (py as f64, py as f64 + 1.0);
                for b in &boxes {
                    let ow = b.x_max.min(x1) - b.x_min.max(x0);
                    let oh = b.y_max.min(y1) - b.y_min.max(y0);
                    if ow > 0.0 && oh > 0.0 {
                        want[(py / p, px / p)] = 1;
                    }
                }
            }
        }
        exact += usize::from(got.grid == want);
    }

    let secs = t0.elapsed().as_secs_f64();
    report(
        "geometry-oracles",
        worst <= 1e-6 && exact == 500 && secs < 60.0,
        &format!(
            "max |iou − raster oracle| {worst:.2e} over 1000 lattice pairs; \
             {exact}/500 patch maps match the pixel sweep exactly; {secs:.1}s"
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion: loss gradients and the significance-loss minimizer
// ---------------------------------------------------------------------------

fn softmax_f64(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|&v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|&v| v / s).collect()
}

/// Central-difference check of every returned parameter gradient against a
/// scalar re-evaluation. Returns the worst relative error.
fn gradcheck<F>(params: &Params<f64>, grads: &BTreeMap<String, Array2<f64>>, eval: F) -> f64
where
    F: Fn(&Params<f64>) -> f64,
{
    let h = 1e-5;
    let mut worst = 0.0f64;
    for (name, analytic) in grads {
        let base = params.get(name);
        for i in 0..base.nrows() {
            for j in 0..base.ncols() {
                let mut up = params.clone();
                up.get_mut(name)[(i, j)] += h;
                let mut down = params.clone();
                down.get_mut(name)[(i, j)] -= h;
                let numeric = (eval(&up) - eval(&down)) / (2.0 * h);
                let a = analytic[(i, j)];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
                worst = worst.max(rel);
            }
        }
    }
    worst
}

#[test]
fn loss_gradients_and_minimizer() {
    let t0 = Instant::now();
    let mut r = rng(0xACC0_0002);

    // (a) Significance + action loss on a tiny scorer. The graph losses must
    // equal the scalar reference definitions, and every parameter gradient
    // must match central differences.
    let cfg = GeneratorConfig {
        d_model: 8,
        n_heads: 2,
        n_blocks: 1,
        n_max: 5,
        crop_size: 2,
        seed: 11,
    };
    let params = attn_gen::init_params(&cfg).to_f64();
    let gt = BBox::new(4.0, 4.0, 10.0, 9.0);
    let dets = [
        BBox::new(3.0, 4.5, 9.0, 10.0),
        BBox::new(8.0, 2.0, 12.0, 6.0),
        BBox::new(12.0, 11.0, 15.0, 14.0), // disjoint from gt: weight 0
    ];
    let weights: Vec<f64> = dets.iter().map(|d| iou(d, &gt).unwrap()).collect();
    let w_row = Array2::from_shape_vec((1, 3), weights.clone()).unwrap();
    let features =
        Array2::from_shape_fn((3, cfg.feature_len()), |_| r.gen_range(-0.8..0.8));
    let gt_class = 1usize;

    let forward = |p: &Params<f64>| {
        let mut g = Graph::new();
        let b = nn::bind(&mut g, p);
        let f = g.leaf(features.clone());
        let nodes = attn_gen::forward_scores(&mut g, &b, &cfg, f);
        let sig = g.weighted_ce(nodes.score_row, w_row.clone());
        let act = g.ce_mean(nodes.action_logits, &[Some(gt_class)]);
        let total = g.add(sig, act);
        (g, b, nodes, sig, act, total)
    };

    let (g, b, nodes, sig, act, total) = forward(&params);
    let scores: Vec<f64> = g.value(nodes.score_row).row(0).to_vec();
    let logits: Vec<f64> = g.value(nodes.action_logits).row(0).to_vec();
    let sig_ref = significance_loss(&dets, &gt, &softmax_f64(&scores)).unwrap();
    let act_ref = action_loss(&logits, gt_class).unwrap();
    let sig_dev = (g.scalar(sig) - sig_ref).abs();
    let act_dev = (g.scalar(act) - act_ref).abs();

    let grads = g.backward(total);
    let by_name = b.gradients(&grads);
    let scorer_coverage = by_name.len() == params.len();
    let scorer_worst = gradcheck(&params, &by_name, |p| {
        let (g, _, _, _, _, total) = forward(p);
        g.scalar(total)
    });

    // (b) Decode loss through the full clip pipeline (encoder, masked
    // query extraction, temporal concatenation, decoder) on a tiny model.
    let vcfg = VlmConfig {
        d_model: 8,
        n_heads: 2,
        patch_size: 8,
        n_queries: 2,
        n_enc_blocks: 1,
        n_qf_blocks: 1,
        n_dec_blocks: 1,
        frame_height: 16,
        frame_width: 16,
        n_frames: 2,
        p_mask: 0.75,
        max_len: 6,
        seed: 5,
    };
    let vparams = vlm::init_params(&vcfg).to_f64();
    let frames: Vec<Frame> = (0..2)
        .map(|i| Frame {
            pixels: Array3::from_shape_fn((16, 16, 3), |_| r.gen::<u8>()),
            index: i,
        })
        .collect();
    let mut tokens = tokenize("car stopped ahead").unwrap();
    tokens.push(EOS);
    // one lit patch out of four: the masked cross-attention path is active
    let map = project_to_patch_map(&[BBox::new(1.0, 1.0, 7.0, 7.0)], 16, 16, 8).unwrap();

    let decode_eval = |p: &Params<f64>| {
        let mut g = Graph::new();
        let b = nn::bind(&mut g, p);
        let mut mask_rng = rng(0); // Infer mode draws nothing
        let loss = vlm::clip_decode_loss_nodes(
            &mut g,
            &b,
            &vcfg,
            &FrameSource::Raw(&frames),
            &tokens,
            Some(&map),
            MaskMode::Infer,
            &mut mask_rng,
        )
        .unwrap();
        (g, b, loss)
    };
    let (g, b, loss) = decode_eval(&vparams);
    let decode_grads = b.gradients(&g.backward(loss));
    let decode_worst = gradcheck(&vparams, &decode_grads, |p| {
        let (g, _, loss) = decode_eval(p);
        g.scalar(loss)
    });

    // (c) The significance loss −Σ IoU_i · ln a_i over the probability
    // simplex is minimized at a_i ∝ IoU_i. Verify against gradient descent
    // on softmax logits (an unconstrained parameterization of the simplex).
    let mut minimizer_worst = 0.0f64;
    for _ in 0..20 {
        let gt = lattice_box(&mut r, 64, 0.25);
        if gt.area() <= 0.0 {
            continue;
        }
        let n = r.gen_range(2..=5);
        let boxes: Vec<BBox> = (0..n).map(|_| lattice_box(&mut r, 64, 0.25)).collect();
        let w: Vec<f64> = boxes.iter().map(|b| iou(b, &gt).unwrap()).collect();
        let total: f64 = w.iter().sum();
        if total < 0.05 {
            continue; // no overlap anywhere: minimizer degenerates
        }
        let lr = 1.0 / total;
        let mut z = vec![0.0f64; n];
        for _ in 0..50_000 {
            let a = softmax_f64(&z);
            for j in 0..n {
                z[j] -= lr * (a[j] * total - w[j]);
            }
        }
        let a = softmax_f64(&z);
        // descent sanity: the numeric optimum beats the uniform start under
        // the library's own loss definition
        let uniform = vec![1.0 / n as f64; n];
        assert!(
            significance_loss(&boxes, &gt, &a).unwrap()
                <= significance_loss(&boxes, &gt, &uniform).unwrap() + 1e-12
        );
        for j in 0..n {
            minimizer_worst = minimizer_worst.max((a[j] - w[j] / total).abs());
        }
    }

    let secs = t0.elapsed().as_secs_f64();
    report(
        "loss-gradients",
        sig_dev < 1e-12
            && act_dev < 1e-12
            && scorer_coverage
            && scorer_worst < 1e-3
            && decode_worst < 1e-3
            && minimizer_worst < 1e-4
            && secs < 120.0,
        &format!(
            "graph vs reference loss |Δ| {:.1e}/{:.1e}; FD rel err {:.1e} (scorer, all {} \
             params) and {:.1e} (decode); simplex minimizer off by {:.1e} (bound 1e-4); {secs:.0}s",
            sig_dev,
            act_dev,
            scorer_worst,
            by_name.len(),
            decode_worst,
            minimizer_worst
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion: masking semantics
// ---------------------------------------------------------------------------

#[test]
fn masking_semantics() {
    let mut r = rng(0xACC0_0003);
    let cfg = VlmConfig {
        d_model: 16,
        n_heads: 2,
        patch_size: 8,
        n_queries: 2,
        n_enc_blocks: 1,
        n_qf_blocks: 1,
        n_dec_blocks: 1,
        frame_height: 32,
        frame_width: 32,
        n_frames: 2,
        p_mask: 0.75,
        max_len: 12,
        seed: 7,
    };
    let params = vlm::init_params(&cfg);
    let frames: Vec<Frame> = (0..2)
        .map(|i| Frame {
            pixels: Array3::from_shape_fn((32, 32, 3), |_| r.gen::<u8>()),
            index: i,
        })
        .collect();
    let mut tokens = tokenize("pedestrian crossing on the left").unwrap();
    tokens.push(EOS);
    let ones = PatchAttentionMap::all_ones(32, 32, 8).unwrap();

    // (a) An all-ones map is the identity: bit-equal to no map at all, in
    // both masking modes, for extraction, the training loss, and generation.
    let encoded = vlm::encode_frame(&params, &cfg, &frames[0]).unwrap();
    let mut ones_identity = true;
    for mode in [MaskMode::Train, MaskMode::Infer] {
        let mut r1 = rng(9);
        let mut r2 = rng(9);
        let with_map =
            vlm::qformer_extract(&params, &cfg, &encoded, Some(&ones), mode, &mut r1).unwrap();
        let without =
            vlm::qformer_extract(&params, &cfg, &encoded, None, mode, &mut r2).unwrap();
        ones_identity &= bits_equal_f32(&with_map, &without);
        // identical randomness consumed on both paths
        ones_identity &= r1.gen::<u64>() == r2.gen::<u64>();
    }
    let train_loss = |map: Option<&PatchAttentionMap>| -> u32 {
        let mut g = Graph::<f32>::new();
        let b = nn::bind(&mut g, &params);
        let mut mask_rng = rng(13);
        let loss = vlm::clip_decode_loss_nodes(
            &mut g,
            &b,
            &cfg,
            &FrameSource::Raw(&frames),
            &tokens,
            map,
            MaskMode::Train,
            &mut mask_rng,
        )
        .unwrap();
        g.scalar(loss).to_bits()
    };
    ones_identity &= train_loss(Some(&ones)) == train_loss(None);
    let ids_ones = vlm::explain_clip(&params, &cfg, &frames, Some(&ones)).unwrap();
    let ids_none = vlm::explain_clip(&params, &cfg, &frames, None).unwrap();
    ones_identity &= ids_ones == ids_none;

    // (b) Inference masking excludes masked patches structurally: the
    // extracted tokens are invariant to arbitrary rewrites of the masked
    // rows of the Q-Former's patch input, over 100 random trials.
    let p = 32 / 8 * (32 / 8);
    let mut invariance_worst = 0.0f64;
    for _ in 0..100 {
        let base = Array2::<f32>::from_shape_fn((p, cfg.d_model), |_| r.gen_range(-2.0..2.0));
        let mut grid_vals = vec![0u8; p];
        loop {
            for v in grid_vals.iter_mut() {
                *v = u8::from(r.gen_bool(0.5));
            }
            let ones_count = grid_vals.iter().filter(|&&v| v == 1).count();
            if ones_count >= 1 && ones_count < p {
                break; // at least one kept patch and one masked patch
            }
        }
        let mut map = project_to_patch_map(&[], 32, 32, 8).unwrap();
        for (k, &v) in grid_vals.iter().enumerate() {
            map.grid[(k / 4, k % 4)] = v;
        }
        let mut perturbed = base.clone();
        for (k, &v) in grid_vals.iter().enumerate() {
            if v == 0 {
                for x in perturbed.row_mut(k) {
                    *x = r.gen_range(-50.0..50.0);
                }
            }
        }
        let mut r1 = rng(0);
        let mut r2 = rng(0);
        let a = vlm::qformer_extract(&params, &cfg, &base, Some(&map), MaskMode::Infer, &mut r1)
            .unwrap();
        let b =
            vlm::qformer_extract(&params, &cfg, &perturbed, Some(&map), MaskMode::Infer, &mut r2)
                .unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            invariance_worst = invariance_worst.max(f64::from((x - y).abs()));
        }
    }

    report(
        "masking-semantics",
        ones_identity && invariance_worst <= 1e-6,
        &format!(
            "all-ones map bit-identical to absent map (extract/loss/generate, both modes); \
             max |Δtokens| {invariance_worst:.1e} under masked-row rewrites over 100 trials"
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion: temporal concatenation
// ---------------------------------------------------------------------------

#[test]
fn temporal_concatenation() {
    let mut r = rng(0xACC0_0004);
    let mut recovered = true;
    let mut reversed_ok = true;
    for _ in 0..50 {
        let n = r.gen_range(1..=8);
        let q = r.gen_range(1..=4);
        let d = r.gen_range(1..=6);
        let blocks: Vec<Array2<f32>> = (0..n)
            .map(|_| Array2::from_shape_fn((q, d), |_| r.gen_range(-3.0f32..3.0)))
            .collect();

        let t_v = concat_temporal(&blocks).unwrap();
        recovered &= t_v.dim() == (n * q, d);
        for (k, block) in blocks.iter().enumerate() {
            let slice = t_v.slice(s![k * q..(k + 1) * q, ..]).to_owned();
            recovered &= bits_equal_f32(&slice, block);
        }

        let rev_blocks: Vec<Array2<f32>> = blocks.iter().rev().cloned().collect();
        let t_r = concat_temporal(&rev_blocks).unwrap();
        for (k, block) in blocks.iter().enumerate() {
            let slice = t_r
                .slice(s![(n - 1 - k) * q..(n - k) * q, ..])
                .to_owned();
            reversed_ok &= bits_equal_f32(&slice, block);
        }
    }
    report(
        "temporal-concatenation",
        recovered && reversed_ok,
        "block recovery and order reversal exact over 50 random trials, n ∈ [1,8]",
    );
}

// ---------------------------------------------------------------------------
// Criterion: metric oracles
// ---------------------------------------------------------------------------
// Brute-force metric implementations, built on sorted maps over owned
// n-gram vectors and a full DP table for the LCS.

fn bf_tokens(text: &str) -> Vec<String> {
    text.to_lowercase().split_whitespace().map(str::to_owned).collect()
}

fn bf_counts(tokens: &[String], n: usize) -> BTreeMap<Vec<String>, usize> {
    let mut out = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    out
}

fn bf_bleu4(records: &[EvalRecord]) -> f64 {
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let (mut matched, mut total) = (0usize, 0usize);
        for rec in records {
            let cm = bf_counts(&bf_tokens(&rec.candidate), n);
            let rm = bf_counts(&bf_tokens(&rec.reference), n);
            for (gram, &k) in &cm {
                matched += k.min(rm.get(gram).copied().unwrap_or(0));
                total += k;
            }
        }
        if matched == 0 || total == 0 {
            return 0.0;
        }
        log_sum += (matched as f64 / total as f64).ln();
    }
    let c: usize = records.iter().map(|r| bf_tokens(&r.candidate).len()).sum();
    let rl: usize = records.iter().map(|r| bf_tokens(&r.reference).len()).sum();
    let bp = if c > rl { 1.0 } else { (1.0 - rl as f64 / c as f64).exp() };
    bp * (log_sum / 4.0).exp()
}

fn bf_lcs(a: &[String], b: &[String]) -> usize {
    let mut table = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            table[i][j] = if a[i - 1] == b[j - 1] {
                table[i - 1][j - 1] + 1
            } else {
                table[i - 1][j].max(table[i][j - 1])
            };
        }
    }
    table[a.len()][b.len()]
}

fn bf_rouge_l(records: &[EvalRecord]) -> f64 {
    let beta2 = 1.2 * 1.2;
    let mut sum = 0.0;
    for rec in records {
        let c = bf_tokens(&rec.candidate);
        let r = bf_tokens(&rec.reference);
        let l = bf_lcs(&c, &r);
        if l > 0 {
            let p = l as f64 / c.len() as f64;
            let rc = l as f64 / r.len() as f64;
            sum += (1.0 + beta2) * p * rc / (rc + beta2 * p);
        }
    }
    sum / records.len() as f64
}

fn bf_tfidf(
    text: &str,
    n: usize,
    df: &BTreeMap<Vec<String>, usize>,
    n_docs: f64,
) -> BTreeMap<Vec<String>, f64> {
    bf_counts(&bf_tokens(text), n)
        .into_iter()
        .map(|(g, c)| {
            let d = df.get(&g).copied().unwrap_or(0).max(1);
            (g, c as f64 * (n_docs / d as f64).ln())
        })
        .collect()
}

fn bf_cider_scores(records: &[EvalRecord]) -> Vec<f64> {
    let n_docs = records.len() as f64;
    let mut df: Vec<BTreeMap<Vec<String>, usize>> = vec![BTreeMap::new(); 4];
    for rec in records {
        let toks = bf_tokens(&rec.reference);
        for n in 1..=4 {
            for gram in bf_counts(&toks, n).into_keys() {
                *df[n - 1].entry(gram).or_insert(0) += 1;
            }
        }
    }
    let norm = |v: &BTreeMap<Vec<String>, f64>| -> f64 {
        v.values().map(|w| w * w).sum::<f64>().sqrt()
    };
    records
        .iter()
        .map(|rec| {
            let mut sum = 0.0;
            let mut measurable = 0usize;
            for n in 1..=4 {
                let rv = bf_tfidf(&rec.reference, n, &df[n - 1], n_docs);
                let rn = norm(&rv);
                if rn == 0.0 {
                    continue; // reference has no weighted mass at this order
                }
                measurable += 1;
                let cv = bf_tfidf(&rec.candidate, n, &df[n - 1], n_docs);
                let cn = norm(&cv);
                if cn > 0.0 {
                    let dot: f64 = cv
                        .iter()
                        .map(|(g, w)| w * rv.get(g).copied().unwrap_or(0.0))
                        .sum();
                    sum += dot / (cn * rn);
                }
            }
            if measurable == 0 {
                0.0
            } else {
                10.0 * sum / measurable as f64
            }
        })
        .collect()
}

/// Slot scoring by exhaustive enumeration of the closed template grammar.
fn bf_spice_slot(records: &[EvalRecord]) -> f64 {
    let mut sentences: Vec<(String, (usize, usize, usize))> = Vec::new();
    for (i, k) in Kind::ALL.iter().enumerate() {
        for (j, st) in Status::ALL.iter().enumerate() {
            for (l, pos) in POSITIONS.iter().enumerate() {
                let text = make_explanation(k.name(), st.phrase(), pos).unwrap();
                sentences.push((text, (i, j, l)));
            }
        }
    }
    let find = |text: &str| -> Option<(usize, usize, usize)> {
        let normalized = bf_tokens(text).join(" ");
        sentences.iter().find(|(s, _)| *s == normalized).map(|(_, slots)| *slots)
    };
    let mut sum = 0.0;
    for rec in records {
        let r = find(&rec.reference).expect("references are template sentences");
        if let Some(c) = find(&rec.candidate) {
            let m = usize::from(c.0 == r.0) + usize::from(c.1 == r.1) + usize::from(c.2 == r.2);
            sum += m as f64 / 3.0;
        }
    }
    sum / records.len() as f64
}

fn template_sentence(r: &mut ChaCha8Rng) -> String {
    let k = *Kind::ALL.choose(r).unwrap();
    let s = *Status::ALL.choose(r).unwrap();
    let p = *POSITIONS.choose(r).unwrap();
    make_explanation(k.name(), s.phrase(), p).unwrap()
}

fn recs(pairs: &[(&str, &str)]) -> Vec<EvalRecord> {
    pairs
        .iter()
        .enumerate()
        .map(|(i, (c, r))| EvalRecord {
            clip_id: format!("clip_{i:04}"),
            candidate: (*c).to_owned(),
            reference: (*r).to_owned(),
        })
        .collect()
}

/// Candidates mix exact matches, other template sentences, truncations,
/// shuffles, and the occasional empty string.
fn random_corpus(seed: u64) -> Vec<EvalRecord> {
    let mut r = rng(0xACC0_0500 + seed);
    let size = r.gen_range(2..=12);
    (0..size)
        .map(|i| {
            let reference = template_sentence(&mut r);
            let candidate = match r.gen_range(0..8) {
                0 | 1 => reference.clone(),
                2 | 3 => template_sentence(&mut r),
                4 | 5 => {
                    let mut w: Vec<&str> = reference.split(' ').collect();
                    let keep = r.gen_range(1..=w.len());
                    w.truncate(keep);
                    w.join(" ")
                }
                6 => String::new(),
                _ => {
                    let mut w: Vec<&str> = reference.split(' ').collect();
                    w.shuffle(&mut r);
                    w.join(" ")
                }
            };
            EvalRecord {
                clip_id: format!("clip_{i:04}"),
                candidate,
                reference,
            }
        })
        .collect()
}

#[test]
fn metric_oracles() {
    // Library vs brute force on 50 random template corpora.
    let mut corpus_worst = 0.0f64;
    let track = |worst: &mut f64, got: f64, want: f64| {
        *worst = worst.max((got - want).abs());
    };
    for seed in 0..50 {
        let records = random_corpus(seed);
        track(&mut corpus_worst, bleu4(&records).unwrap(), bf_bleu4(&records));
        track(&mut corpus_worst, rouge_l(&records).unwrap(), bf_rouge_l(&records));
        track(&mut corpus_worst, spice_slot(&records).unwrap(), bf_spice_slot(&records));
        let got = cider_scores(&records).unwrap();
        let want = bf_cider_scores(&records);
        for (g, w) in got.iter().zip(&want) {
            track(&mut corpus_worst, *g, *w);
        }
        let mean_want = want.iter().sum::<f64>() / want.len() as f64;
        track(&mut corpus_worst, cider(&records).unwrap(), mean_want);
    }

    // Hand-computed examples, frozen values.
    let mut hand_worst = 0.0f64;
    let mut check = |got: f64, want: f64| {
        hand_worst = hand_worst.max((got - want).abs());
    };
    check(
        bleu4(&recs(&[
            ("car stopped ahead", "car stopped ahead"),
            ("pedestrian crossing on the left", "pedestrian crossing on the left"),
        ]))
        .unwrap(),
        1.0,
    );
    check(
        bleu4(&recs(&[("truck moving away ahead", "pedestrian crossing on the left")])).unwrap(),
        0.0,
    );
    // a dropped interior word leaves no matching 4-gram: unsmoothed corpus
    // BLEU collapses to 0
    check(
        bleu4(&recs(&[("the car stopped ahead", "the car stopped suddenly ahead")])).unwrap(),
        0.0,
    );
    // a 4-token prefix of a 5-token reference scores exactly the brevity
    // penalty exp(1 − 5/4)
    let prefix =
        bleu4(&recs(&[("the car stopped suddenly", "the car stopped suddenly ahead")])).unwrap();
    check(prefix, 0.778_800_783_071_404_9);
    check(prefix, (-0.25f64).exp());

    check(rouge_l(&recs(&[("car stopped ahead", "car stopped ahead")])).unwrap(), 1.0);
    check(rouge_l(&recs(&[("truck ahead", "pedestrian crossing")])).unwrap(), 0.0);
    check(rouge_l(&recs(&[("a b c", "a c d")])).unwrap(), 2.0 / 3.0);

    let toy = recs(&[
        ("car stopped ahead", "car stopped ahead"),
        ("truck crossing ahead", "truck stopped ahead"),
        ("pedestrian crossing on the left", "pedestrian approaching on the right"),
    ]);
    let toy_scores = cider_scores(&toy).unwrap();
    check(toy_scores[0], 10.0);
    check(toy_scores[1], 2.297_206_118_821_679_7);
    check(toy_scores[2], 2.124_999_999_999_999_6);
    check(cider(&toy).unwrap(), 4.807_402_039_607_227);

    check(spice_slot(&recs(&[("car stopped ahead", "car stopped ahead")])).unwrap(), 1.0);
    check(spice_slot(&recs(&[("car stopped", "car stopped ahead")])).unwrap(), 0.0);
    check(
        spice_slot(&recs(&[("car stopped ahead", "car approaching ahead")])).unwrap(),
        2.0 / 3.0,
    );

    check(topk_accuracy(&[(vec![0.1, 0.7, 0.2], 1)], 1), 1.0);
    let third = [(vec![0.5, 0.3, 0.09, 0.07, 0.04], 2)];
    check(topk_accuracy(&third, 1), 0.0);
    check(topk_accuracy(&third, 3), 1.0);
    check(topk_accuracy(&[(vec![0.5, 0.5], 1)], 1), 0.0);
    check(topk_accuracy(&[(vec![0.5, 0.5], 0)], 1), 1.0);
    let ten_cases = vec![
        (vec![0.9, 0.05, 0.05], 0),
        (vec![0.1, 0.2, 0.3, 0.4], 3),
        (vec![0.4, 0.3, 0.2, 0.1], 2),
        (vec![0.25, 0.25, 0.25, 0.25], 2),
        (vec![0.5, 0.2, 0.15, 0.1, 0.05], 4),
        (vec![0.3, 0.25, 0.2, 0.15, 0.1], 3),
        (vec![0.2, 0.2, 0.2, 0.2, 0.2], 4),
        (vec![0.05, 0.9, 0.05], 1),
        (vec![0.1, 0.1, 0.1, 0.7], 1),
        (vec![0.6, 0.1, 0.1, 0.1, 0.1], 4),
    ];
    check(topk_accuracy(&ten_cases, 3), 0.6);

    report(
        "metric-oracles",
        corpus_worst <= 1e-9 && hand_worst <= 1e-9,
        &format!(
            "max |library − brute force| {corpus_worst:.1e} over 50 random corpora \
             (bound 1e-9); hand examples reproduce within {hand_worst:.1e}"
        ),
    );
}

// ---------------------------------------------------------------------------
// Shared trained fixture for the two training criteria
// ---------------------------------------------------------------------------

struct TrainedFixture {
    clips: Vec<LabeledClip>,
    /// One trained scorer per seed 0, 1, 2.
    gens: Vec<(GeneratorConfig, TrainOutcome)>,
    corpus_secs: f64,
    generator_secs: f64,
}

static TRAINED: OnceLock<TrainedFixture> = OnceLock::new();

fn generator_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        lr: 1e-4,
        batch_size: 16,
        epochs: 40,
        step_size: 50,
        gamma: 0.1,
        seed,
        attention_source: AttentionSource::None,
        encoder_warm_epochs: 0,
        patience: 40,
        dataset_dir: PathBuf::new(),
        out_dir: PathBuf::new(),
    }
}

fn trained() -> &'static TrainedFixture {
    TRAINED.get_or_init(|| {
        let spec = SceneSpec {
            patch_size: 16,
            seed: 42,
            ..SceneSpec::default()
        };
        let t0 = Instant::now();
        let clips = generate_corpus(&spec, 2000).expect("corpus generates");
        let corpus_secs = t0.elapsed().as_secs_f64();
        let t0 = Instant::now();
        let gens = (0..3u64)
            .map(|seed| {
                let cfg = GeneratorConfig {
                    seed,
                    ..GeneratorConfig::default()
                };
                let out = train_generator(&generator_train_config(seed), &cfg, &clips)
                    .expect("generator trains");
                (cfg, out)
            })
            .collect();
        let generator_secs = t0.elapsed().as_secs_f64();
        TrainedFixture {
            clips,
            gens,
            corpus_secs,
            generator_secs,
        }
    })
}

// ---------------------------------------------------------------------------
// Criterion: generator training accuracy
// ---------------------------------------------------------------------------

#[test]
fn generator_training() {
    let f = trained();
    let mut passing = 0usize;
    let mut details = String::new();
    for (seed, (_, out)) in f.gens.iter().enumerate() {
        let best = out.history.best_epoch.expect("at least one epoch");
        let entry = &out.history.entries[best];
        let top1 = entry.val_top1.expect("scorer history has top-1");
        let top3 = entry.val_top3.expect("scorer history has top-3");
        if top1 >= 0.90 && top3 >= 0.98 {
            passing += 1;
        }
        details.push_str(&format!("seed {seed}: top-1 {top1:.3} top-3 {top3:.3}; "));
    }
    report(
        "generator-training",
        passing >= 2 && f.generator_secs <= 600.0,
        &format!(
            "{details}{passing}/3 seeds meet top-1 ≥ 0.90 and top-3 ≥ 0.98; \
             3×40 epochs on 2000 clips in {:.0}s (budget 600s, corpus {:.1}s)",
            f.generator_secs, f.corpus_secs
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion: attention-ablation ordering
// ---------------------------------------------------------------------------

const ABLATION_EPOCHS: usize = 40;
const ABLATION_LR: f64 = 3e-4;

fn ablation_vlm_config(seed: u64) -> VlmConfig {
    VlmConfig {
        d_model: 32,
        n_heads: 4,
        patch_size: 16,
        n_queries: 4,
        n_enc_blocks: 1,
        n_qf_blocks: 1,
        n_dec_blocks: 1,
        frame_height: 64,
        frame_width: 64,
        n_frames: 4,
        p_mask: 0.75,
        max_len: 12,
        seed,
    }
}

fn ablation_train_config(seed: u64, source: AttentionSource) -> TrainConfig {
    TrainConfig {
        lr: ABLATION_LR,
        batch_size: 32,
        epochs: ABLATION_EPOCHS,
        step_size: 50,
        gamma: 0.1,
        seed,
        attention_source: source,
        encoder_warm_epochs: 2,
        patience: ABLATION_EPOCHS,
        dataset_dir: PathBuf::new(),
        out_dir: PathBuf::new(),
    }
}

struct VariantResult {
    ce: f64,
    cider: f64,
    spice: f64,
}

fn run_variant(
    f: &TrainedFixture,
    seed: u64,
    source: AttentionSource,
    val: &[&LabeledClip],
) -> VariantResult {
    let (gen_cfg, gen_out) = &f.gens[seed as usize];
    let provider = match source {
        AttentionSource::None => AttentionProvider::None,
        AttentionSource::OracleObject => AttentionProvider::OracleObject,
        AttentionSource::PredictedPatch => AttentionProvider::PredictedPatch {
            params: &gen_out.params,
            cfg: gen_cfg,
            policy: Default::default(),
        },
    };
    let vcfg = ablation_vlm_config(seed);
    let out = train_vlm(&ablation_train_config(seed, source), &vcfg, &f.clips, &provider)
        .expect("explainer trains");
    let best = out.history.best_epoch.expect("at least one epoch");
    let ce = out.history.entries[best].val_loss;
    let records: Vec<EvalRecord> = val
        .iter()
        .map(|clip| {
            let map = provider.map_for(clip, vcfg.patch_size).expect("map projects");
            let ids = vlm::explain_clip(&out.params, &vcfg, &clip.frames, map.as_ref())
                .expect("generation succeeds");
            EvalRecord {
                clip_id: clip.clip_id.clone(),
                candidate: detokenize(&ids).expect("ids detokenize"),
                reference: clip.gt_explanation.clone(),
            }
        })
        .collect();
    let rep = MetricReport::compute(&records, None).expect("metrics compute");
    VariantResult {
        ce,
        cider: rep.cider,
        spice: rep.spice_slot,
    }
}

#[test]
fn attention_ablation_ordering() {
    let f = trained();
    let (_, val) = split_dataset(&f.clips);
    let t0 = Instant::now();

    let mut ordered_seeds = 0usize;
    let mut details = String::new();
    for seed in 0..3u64 {
        let none = run_variant(f, seed, AttentionSource::None, &val);
        let pred = run_variant(f, seed, AttentionSource::PredictedPatch, &val);
        let orac = run_variant(f, seed, AttentionSource::OracleObject, &val);
        let ce_ok = none.ce > pred.ce && pred.ce >= orac.ce - 0.02;
        let cider_ok = orac.cider >= pred.cider && pred.cider >= none.cider + 0.02;
        let spice_ok = orac.spice >= pred.spice && pred.spice >= none.spice + 0.02;
        let ok = ce_ok && cider_ok && spice_ok;
        ordered_seeds += usize::from(ok);
        details.push_str(&format!(
            "seed {seed} [none/predicted/oracle] CE {:.3}/{:.3}/{:.3} CIDEr {:.2}/{:.2}/{:.2} \
             SPICE {:.2}/{:.2}/{:.2} {}; ",
            none.ce,
            pred.ce,
            orac.ce,
            none.cider,
            pred.cider,
            orac.cider,
            none.spice,
            pred.spice,
            orac.spice,
            if ok { "ordered" } else { "NOT ordered" },
        ));
    }
    let secs = t0.elapsed().as_secs_f64();
    report(
        "attention-ablation-ordering",
        ordered_seeds >= 2 && secs <= 2700.0,
        &format!("{details}{ordered_seeds}/3 seeds ordered; 9 runs in {secs:.0}s (budget 2700s)"),
    );
}

// ---------------------------------------------------------------------------
// Criterion: learning-rate schedule
// ---------------------------------------------------------------------------

#[test]
fn lr_schedule_values() {
    let got = [
        lr_schedule(1e-4, 0, 50, 0.1),
        lr_schedule(1e-4, 50, 50, 0.1),
        lr_schedule(1e-4, 100, 50, 0.1),
    ];
    let want = [1e-4f64, 1e-5, 1e-6];
    let exact = got
        .iter()
        .zip(&want)
        .all(|(g, w)| g.to_bits() == w.to_bits());
    report(
        "lr-schedule",
        exact,
        &format!(
            "epochs 0/50/100 → {:e}/{:e}/{:e}, bitwise equal to 1e-4/1e-5/1e-6",
            got[0], got[1], got[2]
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion: seeded reruns are byte-identical
// ---------------------------------------------------------------------------

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_drivelens")
}

fn run_ok(args: &[&str]) -> Output {
    let out = Command::new(bin()).args(args).output().expect("binary runs");
    assert!(
        out.status.success(),
        "command {:?} failed\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn read_tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in fs::read_dir(dir).expect("readable dir") {
            let path = entry.expect("dir entry").path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).expect("under root");
                out.insert(
                    rel.to_str().expect("utf-8 path").to_string(),
                    fs::read(&path).expect("readable file"),
                );
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

/// One full seeded pipeline pass: dataset, both trainings, evaluation, and
/// a visualization, all under `root`.
fn seeded_chain(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::create_dir_all(root).expect("chain root");
    let p = |s: &str| root.join(s).to_str().unwrap().to_owned();
    let (data, gen, vlm, eval) = (p("data"), p("gen"), p("vlm"), p("eval"));
    run_ok(&[
        "gen-data",
        "--clips",
        "60",
        "--seed",
        "5",
        "--out",
        &data,
        "--set",
        "scene.frame_height=32",
        "--set",
        "scene.frame_width=32",
        "--set",
        "scene.n_frames=2",
    ]);
    run_ok(&[
        "train-gen",
        "--dataset",
        &data,
        "--out",
        &gen,
        "--epochs",
        "2",
        "--seed",
        "3",
    ]);
    run_ok(&[
        "train-vlm",
        "--dataset",
        &data,
        "--attention",
        "predicted-patch",
        "--generator-checkpoint",
        &gen,
        "--out",
        &vlm,
        "--epochs",
        "2",
        "--seed",
        "3",
        "--set",
        "model.d_model=16",
        "--set",
        "model.n_queries=2",
        "--set",
        "model.n_enc_blocks=1",
        "--set",
        "model.n_qf_blocks=1",
        "--set",
        "model.n_dec_blocks=1",
    ]);
    run_ok(&[
        "eval",
        "--dataset",
        &data,
        "--vlm-checkpoint",
        &vlm,
        "--generator-checkpoint",
        &gen,
        "--out",
        &eval,
    ]);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(root.join("data/manifest.json")).unwrap())
            .unwrap();
    let clip_id = manifest["clip_ids"][0].as_str().unwrap().to_owned();
    run_ok(&[
        "visualize",
        "--dataset",
        &data,
        "--vlm-checkpoint",
        &vlm,
        "--generator-checkpoint",
        &gen,
        "--clip-id",
        &clip_id,
        "--out",
        &p("overlay.png"),
    ]);
    read_tree(root)
}

#[test]
fn seeded_reruns_byte_identical() {
    // The chain runs twice with identical arguments — same directories, so
    // even config echoes that cite paths must come back byte-for-byte.
    let root = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance_rerun");
    if root.exists() {
        fs::remove_dir_all(&root).expect("stale rerun dir removed");
    }
    let first = seeded_chain(&root);
    fs::remove_dir_all(&root).expect("first tree removed");
    let second = seeded_chain(&root);

    let same_paths = first.len() == second.len()
        && first.keys().zip(second.keys()).all(|(a, b)| a == b);
    let mut diverging = Vec::new();
    if same_paths {
        for (path, bytes) in &first {
            if second[path] != *bytes {
                diverging.push(path.clone());
            }
        }
    }
    let total_bytes: usize = first.values().map(Vec::len).sum();
    report(
        "seeded-reruns",
        same_paths && diverging.is_empty(),
        &format!(
            "gen-data → train-gen → train-vlm → eval → visualize rerun: {} files \
             ({total_bytes} bytes) byte-identical{}",
            first.len(),
            if diverging.is_empty() {
                String::new()
            } else {
                format!("; diverging: {diverging:?}")
            }
        ),
    );
}
