//! Shared neural-network machinery: parameter store, seeded initialization,
//! Adam, checkpoint I/O, and graph builders for the layers both models use.
//!
//! Every tensor in this crate is a 2-D array; vectors are carried as `1 x d`
//! rows. Parameters live in a [`Params`] map keyed by dotted names
//! (`"enc.0.attn.q.w"`), which fixes a deterministic iteration order for
//! initialization, optimizer updates, and checkpoints.
//!
//! A checkpoint is a directory holding `manifest.json` — shapes, seed, step
//! count, and a config hash — plus one raw little-endian `f32` row-major
//! array file per named parameter (`<name>.f32`). Save → load round-trips
//! bit-identically.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, NdFloat};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Gradients, Graph, NodeId};
use crate::error::{Error, Result};

/// Ordered name → matrix parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T: NdFloat> {
    map: BTreeMap<String, Array2<T>>,
}

impl<T: NdFloat> Default for Params<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: NdFloat> Params<T> {
    pub fn new() -> Self {
        Params { map: BTreeMap::new() }
    }

    /// Register a parameter. Duplicate names are a programming error.
    pub fn insert(&mut self, name: impl Into<String>, value: Array2<T>) {
        let name = name.into();
        let prior = self.map.insert(name.clone(), value);
        assert!(prior.is_none(), "duplicate parameter {name}");
    }

    /// Borrow a parameter; missing names are a programming error.
    pub fn get(&self, name: &str) -> &Array2<T> {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Array2<T> {
        self.map
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total scalar count across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.map.values().map(|a| a.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array2<T>)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }
}

impl Params<f32> {
    /// Widen to `f64` (used by gradient-checking tests so the same model code
    /// runs at higher precision).
    pub fn to_f64(&self) -> Params<f64> {
        let map = self
            .map
            .iter()
            .map(|(k, v)| (k.clone(), v.mapv(f64::from)))
            .collect();
        Params { map }
    }
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

/// `rows x cols` matrix with entries drawn uniformly from `±bound`.
pub fn uniform<R: Rng>(rng: &mut R, rows: usize, cols: usize, bound: f32) -> Array2<f32> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound))
}

/// Linear layer `name.w` (`in_dim x out_dim`, uniform ±1/√in_dim) and
/// `name.b` (`1 x out_dim`, zeros).
pub fn add_linear<R: Rng>(
    params: &mut Params<f32>,
    rng: &mut R,
    name: &str,
    in_dim: usize,
    out_dim: usize,
) {
    let bound = 1.0 / (in_dim as f32).sqrt();
    params.insert(format!("{name}.w"), uniform(rng, in_dim, out_dim, bound));
    params.insert(format!("{name}.b"), Array2::zeros((1, out_dim)));
}

/// Embedding-style table (`rows x d`). Lookup tables have no fan-in in the
/// linear-layer sense, so they use a small fixed range: ±0.02 keeps initial
/// embedding contributions near zero. The tied output projection makes the
/// range load-bearing: the decoder's final layer norm fixes the hidden norm
/// at sqrt(d), so initial logit variance is d·bound²/3, and the bound must be
/// small enough that a fresh decoder's cross-entropy stays near the uniform
/// ln|V| baseline.
pub fn add_table<R: Rng>(
    params: &mut Params<f32>,
    rng: &mut R,
    name: &str,
    rows: usize,
    d: usize,
) {
    params.insert(name, uniform(rng, rows, d, 0.02));
}

/// Layer norm `name.g` (ones) and `name.b` (zeros), both `1 x d`.
pub fn add_layer_norm(params: &mut Params<f32>, name: &str, d: usize) {
    params.insert(format!("{name}.g"), Array2::ones((1, d)));
    params.insert(format!("{name}.b"), Array2::zeros((1, d)));
}

/// Multi-head attention parameters: four `d → d` linears `name.{q,k,v,o}`.
pub fn add_attention<R: Rng>(params: &mut Params<f32>, rng: &mut R, name: &str, d: usize) {
    for part in ["q", "k", "v", "o"] {
        add_linear(params, rng, &format!("{name}.{part}"), d, d);
    }
}

/// Pre-LN transformer block parameters: `name.ln1`, `name.attn.*`,
/// `name.ln2`, `name.ffn.fc1` (`d → hidden`), `name.ffn.fc2` (`hidden → d`).
pub fn add_encoder_block<R: Rng>(
    params: &mut Params<f32>,
    rng: &mut R,
    name: &str,
    d: usize,
    hidden: usize,
) {
    add_layer_norm(params, &format!("{name}.ln1"), d);
    add_attention(params, rng, &format!("{name}.attn"), d);
    add_layer_norm(params, &format!("{name}.ln2"), d);
    add_linear(params, rng, &format!("{name}.ffn.fc1"), d, hidden);
    add_linear(params, rng, &format!("{name}.ffn.fc2"), hidden, d);
}

// ---------------------------------------------------------------------------
// Graph binding
// ---------------------------------------------------------------------------

/// Name → graph-leaf map for one forward/backward pass.
pub struct Binding {
    ids: BTreeMap<String, NodeId>,
}

/// Insert every parameter as a leaf of `g`.
pub fn bind<T: NdFloat>(g: &mut Graph<T>, params: &Params<T>) -> Binding {
    let ids = params
        .iter()
        .map(|(name, value)| (name.clone(), g.leaf(value.clone())))
        .collect();
    Binding { ids }
}

impl Binding {
    /// Leaf id of a bound parameter; missing names are a programming error.
    pub fn id(&self, name: &str) -> NodeId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    /// Collect per-parameter gradients after a backward pass. Parameters the
    /// loss never reached (e.g. a frozen, bypassed encoder) are absent.
    pub fn gradients<T: NdFloat>(&self, grads: &Gradients<T>) -> BTreeMap<String, Array2<T>> {
        self.ids
            .iter()
            .filter_map(|(name, id)| grads.wrt(*id).map(|g| (name.clone(), g.clone())))
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

/// `x @ name.w + name.b`.
pub fn linear<T: NdFloat>(g: &mut Graph<T>, b: &Binding, name: &str, x: NodeId) -> NodeId {
    let mm = g.matmul(x, b.id(&format!("{name}.w")));
    g.add_row(mm, b.id(&format!("{name}.b")))
}

/// Layer norm with the learned `name.g` / `name.b` row parameters.
pub fn layer_norm<T: NdFloat>(g: &mut Graph<T>, b: &Binding, name: &str, x: NodeId) -> NodeId {
    let gain = b.id(&format!("{name}.g"));
    let bias = b.id(&format!("{name}.b"));
    g.layer_norm(x, gain, bias)
}

/// Attention pattern shared by every query row of a head.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AttnMask {
    /// Every query attends to every key.
    Full,
    /// Query i attends to keys 0..=i (requires nq == nk).
    Causal,
    /// Every query attends exactly to the keys flagged true.
    Columns(Vec<bool>),
}

impl AttnMask {
    /// Materialize as the boolean matrix [`Graph::softmax_rows`] expects,
    /// or `None` for the unmasked fast path.
    fn to_array(&self, nq: usize, nk: usize) -> Option<Array2<bool>> {
        match self {
            AttnMask::Full => None,
            AttnMask::Causal => {
                assert_eq!(nq, nk, "causal mask needs a square score matrix");
                Some(Array2::from_shape_fn((nq, nk), |(i, j)| j <= i))
            }
            AttnMask::Columns(cols) => {
                assert_eq!(cols.len(), nk, "column mask length");
                assert!(
                    cols.iter().any(|&c| c),
                    "column mask excludes every key"
                );
                Some(Array2::from_shape_fn((nq, nk), |(_, j)| cols[j]))
            }
        }
    }
}

/// Multi-head scaled dot-product attention.
///
/// `q_in` (`nq x d`) provides the queries; `kv_in` (`nk x d`) the keys and
/// values (pass the same node for self-attention). All heads share `mask`.
/// Returns the output projection, `nq x d`.
pub fn multi_head_attention<T: NdFloat>(
    g: &mut Graph<T>,
    b: &Binding,
    name: &str,
    q_in: NodeId,
    kv_in: NodeId,
    n_heads: usize,
    mask: &AttnMask,
) -> NodeId {
    let d = g.value(q_in).ncols();
    assert_eq!(g.value(kv_in).ncols(), d, "query/key widths differ");
    assert!(n_heads > 0 && d.is_multiple_of(n_heads), "heads must divide width");
    let dk = d / n_heads;
    let nq = g.value(q_in).nrows();
    let nk = g.value(kv_in).nrows();

    let q = linear(g, b, &format!("{name}.q"), q_in);
    let k = linear(g, b, &format!("{name}.k"), kv_in);
    let v = linear(g, b, &format!("{name}.v"), kv_in);
    let scale = T::from(1.0 / (dk as f64).sqrt()).expect("scale representable");
    let mask_arr = mask.to_array(nq, nk);

    let heads: Vec<NodeId> = (0..n_heads)
        .map(|h| {
            let (c0, c1) = (h * dk, (h + 1) * dk);
            let qh = g.slice_cols(q, c0, c1);
            let kh = g.slice_cols(k, c0, c1);
            let vh = g.slice_cols(v, c0, c1);
            let kt = g.transpose(kh);
            let scores = g.matmul(qh, kt);
            let scores = g.scale(scores, scale);
            let probs = g.softmax_rows(scores, mask_arr.as_ref());
            g.matmul(probs, vh)
        })
        .collect();
    let ctx = if heads.len() == 1 {
        heads[0]
    } else {
        g.concat_cols(&heads)
    };
    linear(g, b, &format!("{name}.o"), ctx)
}

/// Two-layer GELU feed-forward: `fc2(gelu(fc1(x)))`.
pub fn feed_forward<T: NdFloat>(g: &mut Graph<T>, b: &Binding, name: &str, x: NodeId) -> NodeId {
    let h = linear(g, b, &format!("{name}.fc1"), x);
    let h = g.gelu(h);
    linear(g, b, &format!("{name}.fc2"), h)
}

/// Pre-LN transformer block:
/// `x + attn(ln1(x))`, then `+ ffn(ln2(·))`.
pub fn encoder_block<T: NdFloat>(
    g: &mut Graph<T>,
    b: &Binding,
    name: &str,
    x: NodeId,
    n_heads: usize,
    mask: &AttnMask,
) -> NodeId {
    let n1 = layer_norm(g, b, &format!("{name}.ln1"), x);
    let attn = multi_head_attention(g, b, &format!("{name}.attn"), n1, n1, n_heads, mask);
    let x = g.add(x, attn);
    let n2 = layer_norm(g, b, &format!("{name}.ln2"), x);
    let ffn = feed_forward(g, b, &format!("{name}.ffn"), n2);
    g.add(x, ffn)
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

/// Adam optimizer (β₁ = 0.9, β₂ = 0.999, ε = 1e-8) over a [`Params<f32>`]
/// store. Parameters absent from a step's gradient map are left untouched,
/// which is how frozen submodules behave.
pub struct Adam {
    beta1: f32,
    beta2: f32,
    eps: f32,
    t: u64,
    m: BTreeMap<String, Array2<f32>>,
    v: BTreeMap<String, Array2<f32>>,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new()
    }
}

impl Adam {
    pub fn new() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Number of completed steps.
    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update over every parameter named in `grads`.
    pub fn step(
        &mut self,
        params: &mut Params<f32>,
        grads: &BTreeMap<String, Array2<f32>>,
        lr: f32,
    ) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, grad) in grads {
            let p = params.get_mut(name);
            assert_eq!(p.dim(), grad.dim(), "gradient shape for {name}");
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(grad.dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(grad.dim()));
            for ((pe, &ge), (me, ve)) in
                p.iter_mut().zip(grad.iter()).zip(m.iter_mut().zip(v.iter_mut()))
            {
                *me = self.beta1 * *me + (1.0 - self.beta1) * ge;
                *ve = self.beta2 * *ve + (1.0 - self.beta2) * ge * ge;
                let mhat = *me / bc1;
                let vhat = *ve / bc2;
                *pe -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// `manifest.json` of a checkpoint directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format_version: u32,
    /// Which model the parameters belong to (e.g. "generator", "vlm").
    pub model_kind: String,
    /// Seed the parameters were initialized from.
    pub seed: u64,
    /// Optimizer steps taken to reach these parameters.
    pub step_count: u64,
    /// SHA-256 of the resolved config JSON, hex-encoded.
    pub config_hash: String,
    /// Parameter name → [rows, cols].
    pub shapes: BTreeMap<String, [usize; 2]>,
}

/// Identity of a checkpoint, minus the shapes derived from the params.
#[derive(Debug, Clone)]
pub struct CheckpointMeta {
    pub model_kind: String,
    pub seed: u64,
    pub step_count: u64,
    pub config_hash: String,
}

/// Hex SHA-256 of a config value's compact JSON encoding.
pub fn config_hash(config: &serde_json::Value) -> String {
    let compact = serde_json::to_string(config).expect("config serializes");
    let digest = Sha256::digest(compact.as_bytes());
    let mut out = String::with_capacity(64);
    for byte in digest {
        use std::fmt::Write;
        write!(out, "{byte:02x}").expect("write to string");
    }
    out
}

fn param_file(dir: &Path, name: &str) -> std::path::PathBuf {
    dir.join(format!("{name}.f32"))
}

/// Write `manifest.json` plus one raw little-endian row-major `f32` file per
/// parameter into `dir` (created if needed).
pub fn save_checkpoint(dir: &Path, params: &Params<f32>, meta: &CheckpointMeta) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let shapes = params
        .iter()
        .map(|(name, a)| (name.clone(), [a.nrows(), a.ncols()]))
        .collect();
    let manifest = CheckpointManifest {
        format_version: CHECKPOINT_FORMAT_VERSION,
        model_kind: meta.model_kind.clone(),
        seed: meta.seed,
        step_count: meta.step_count,
        config_hash: meta.config_hash.clone(),
        shapes,
    };
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    std::fs::write(dir.join("manifest.json"), json)?;
    for (name, a) in params.iter() {
        let mut bytes = Vec::with_capacity(a.len() * 4);
        for &v in a.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(param_file(dir, name), bytes)?;
    }
    Ok(())
}

/// Load a checkpoint directory written by [`save_checkpoint`].
pub fn load_checkpoint(dir: &Path) -> Result<(Params<f32>, CheckpointManifest)> {
    let ctx = |msg: String| Error::data(format!("checkpoint {}: {msg}", dir.display()));
    let manifest_path = dir.join("manifest.json");
    let raw = std::fs::read_to_string(&manifest_path)
        .map_err(|e| ctx(format!("reading manifest.json: {e}")))?;
    let manifest: CheckpointManifest = serde_json::from_str(&raw)
        .map_err(|e| ctx(format!("parsing manifest.json: {e}")))?;
    if manifest.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(ctx(format!(
            "unsupported format version {}",
            manifest.format_version
        )));
    }
    let mut params = Params::new();
    for (name, &[rows, cols]) in &manifest.shapes {
        let path = param_file(dir, name);
        let bytes =
            std::fs::read(&path).map_err(|e| ctx(format!("reading parameter {name}: {e}")))?;
        let expected = rows * cols * 4;
        if bytes.len() != expected {
            return Err(ctx(format!(
                "parameter {name}: expected {expected} bytes for {rows}x{cols}, found {}",
                bytes.len()
            )));
        }
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let array = Array2::from_shape_vec((rows, cols), values)
            .map_err(|e| ctx(format!("parameter {name}: {e}")))?;
        params.insert(name.clone(), array);
    }
    Ok((params, manifest))
}
