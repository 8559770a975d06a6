//! Tape-based reverse-mode autodiff over 2-D arrays.
//!
//! A [`Graph`] is a define-by-run tape: every operation appends a node
//! holding its value and the ids of its inputs, and [`Graph::backward`]
//! walks the tape in reverse accumulating gradients. The op set is exactly
//! what the models in this crate need — dense matmul, row softmax with
//! exclusion masking, layer norm, GELU, concatenation/slicing, row
//! gathering, and the cross-entropy reductions.
//!
//! The graph is generic over the float type: training runs in `f32`
//! (matching the checkpoint wire format), while gradient-checking tests
//! instantiate the same code at `f64` against central finite differences.
//!
//! Shape agreement between operands is a programming error, not runtime
//! input, so violations panic with a message instead of returning `Result`.

use ndarray::{concatenate, Array2, ArrayView2, Axis, NdFloat};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op<T: NdFloat> {
    Leaf,
    /// C = A B
    MatMul(NodeId, NodeId),
    /// C = Aᵀ
    Transpose(NodeId),
    /// C = A + B (same shape)
    Add(NodeId, NodeId),
    /// C = A + row broadcast over A's rows (row is 1 x d)
    AddRow(NodeId, NodeId),
    /// C = c · A
    Scale(NodeId, T),
    /// C = gelu(A), tanh approximation
    Gelu(NodeId),
    /// Row-wise softmax; excluded entries have probability exactly 0.
    SoftmaxRows(NodeId),
    /// Row-wise layer norm with learned gain/bias (both 1 x d).
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, normed: Array2<T>, inv_std: Vec<T> },
    /// Stack inputs vertically.
    ConcatRows(Vec<NodeId>),
    /// Stack inputs horizontally.
    ConcatCols(Vec<NodeId>),
    /// C = A[r0..r1, :]
    SliceRows(NodeId, usize, usize),
    /// C = A[:, c0..c1]
    SliceCols(NodeId, usize, usize),
    /// C[k, :] = A[idx[k], :]; backward scatter-adds over duplicate indices.
    GatherRows(NodeId, Vec<usize>),
    /// C = column-wise mean over rows (1 x d).
    MeanRows(NodeId),
    /// Scalar Σᵢ wᵢ·(logsumexp(z) − zᵢ) for a 1 x n logit row.
    WeightedCe { logits: NodeId, weights: Array2<T> },
    /// Scalar mean over rows with a target of (logsumexp(row) − row[target]).
    CeMean { logits: NodeId, targets: Vec<Option<usize>> },
}

struct Node<T: NdFloat> {
    value: Array2<T>,
    op: Op<T>,
}

/// Define-by-run computation tape.
pub struct Graph<T: NdFloat> {
    nodes: Vec<Node<T>>,
}

impl<T: NdFloat> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: NdFloat> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: Array2<T>, op: Op<T>) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Value of a node.
    pub fn value(&self, id: NodeId) -> &Array2<T> {
        &self.nodes[id.0].value
    }

    /// The scalar held by a 1 x 1 node.
    pub fn scalar(&self, id: NodeId) -> T {
        let v = self.value(id);
        assert_eq!(v.dim(), (1, 1), "scalar() on a {:?} node", v.dim());
        v[(0, 0)]
    }

    /// Insert a constant / parameter binding.
    pub fn leaf(&mut self, value: Array2<T>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(av.ncols(), bv.nrows(), "matmul inner dims");
        let value = av.dot(bv);
        self.push(value, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a.0].value.t().to_owned();
        self.push(value, Op::Transpose(a))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(av.dim(), bv.dim(), "add shapes");
        let value = av + bv;
        self.push(value, Op::Add(a, b))
    }

    /// `a + row`, broadcasting the 1 x d row over every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (av, rv) = (&self.nodes[a.0].value, &self.nodes[row.0].value);
        assert_eq!(rv.nrows(), 1, "add_row expects a 1 x d row");
        assert_eq!(av.ncols(), rv.ncols(), "add_row widths");
        let value = av + &rv.row(0);
        self.push(value, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> NodeId {
        let value = self.nodes[a.0].value.mapv(|v| v * c);
        self.push(value, Op::Scale(a, c))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a.0].value.mapv(gelu);
        self.push(value, Op::Gelu(a))
    }

    /// Row-wise softmax. `mask[i][j] == false` excludes entry (i, j) before
    /// normalization: its probability is exactly 0 and no gradient flows to
    /// it. `mask: None` behaves identically to an all-true mask (the same
    /// arithmetic runs in the same order). Every row must keep at least one
    /// allowed entry.
    pub fn softmax_rows(&mut self, a: NodeId, mask: Option<&Array2<bool>>) -> NodeId {
        let av = &self.nodes[a.0].value;
        if let Some(m) = mask {
            assert_eq!(m.dim(), av.dim(), "softmax mask shape");
        }
        let allowed = |i: usize, j: usize| mask.is_none_or(|m| m[(i, j)]);
        let mut value = Array2::<T>::zeros(av.dim());
        for i in 0..av.nrows() {
            let mut max = T::neg_infinity();
            for j in 0..av.ncols() {
                if allowed(i, j) && av[(i, j)] > max {
                    max = av[(i, j)];
                }
            }
            assert!(
                max > T::neg_infinity(),
                "softmax row {i} has no allowed finite entry"
            );
            let mut sum = T::zero();
            for j in 0..av.ncols() {
                if allowed(i, j) {
                    let e = (av[(i, j)] - max).exp();
                    value[(i, j)] = e;
                    sum += e;
                }
            }
            for j in 0..av.ncols() {
                value[(i, j)] /= sum;
            }
        }
        self.push(value, Op::SoftmaxRows(a))
    }

    /// Row-wise layer normalization with learned 1 x d gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let (gv, bv) = (&self.nodes[gain.0].value, &self.nodes[bias.0].value);
        let d = xv.ncols();
        assert_eq!(gv.dim(), (1, d), "layer_norm gain shape");
        assert_eq!(bv.dim(), (1, d), "layer_norm bias shape");
        let eps = T::from(1e-5).expect("eps representable");
        let dn = T::from(d).expect("width representable");
        let mut normed = Array2::<T>::zeros(xv.dim());
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for i in 0..xv.nrows() {
            let row = xv.row(i);
            let mean = row.sum() / dn;
            let var = row.fold(T::zero(), |acc, &v| acc + (v - mean) * (v - mean)) / dn;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for j in 0..d {
                normed[(i, j)] = (xv[(i, j)] - mean) * is;
            }
        }
        let mut value = normed.clone();
        for i in 0..value.nrows() {
            for j in 0..d {
                value[(i, j)] = value[(i, j)] * gv[(0, j)] + bv[(0, j)];
            }
        }
        self.push(value, Op::LayerNorm { x, gain, bias, normed, inv_std })
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let views: Vec<ArrayView2<T>> =
            parts.iter().map(|id| self.nodes[id.0].value.view()).collect();
        let value = concatenate(Axis(0), &views).expect("concat_rows widths must agree");
        self.push(value, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let views: Vec<ArrayView2<T>> =
            parts.iter().map(|id| self.nodes[id.0].value.view()).collect();
        let value = concatenate(Axis(1), &views).expect("concat_cols heights must agree");
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: NodeId, r0: usize, r1: usize) -> NodeId {
        let av = &self.nodes[a.0].value;
        assert!(r0 < r1 && r1 <= av.nrows(), "slice_rows range");
        let value = av.slice(ndarray::s![r0..r1, ..]).to_owned();
        self.push(value, Op::SliceRows(a, r0, r1))
    }

    pub fn slice_cols(&mut self, a: NodeId, c0: usize, c1: usize) -> NodeId {
        let av = &self.nodes[a.0].value;
        assert!(c0 < c1 && c1 <= av.ncols(), "slice_cols range");
        let value = av.slice(ndarray::s![.., c0..c1]).to_owned();
        self.push(value, Op::SliceCols(a, c0, c1))
    }

    /// Gather rows of `a` by index (repeats allowed).
    pub fn gather_rows(&mut self, a: NodeId, indices: &[usize]) -> NodeId {
        let av = &self.nodes[a.0].value;
        assert!(
            indices.iter().all(|&i| i < av.nrows()),
            "gather_rows index out of range"
        );
        let value = av.select(Axis(0), indices);
        self.push(value, Op::GatherRows(a, indices.to_vec()))
    }

    /// Column-wise mean over rows, yielding 1 x d.
    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let av = &self.nodes[a.0].value;
        let n = T::from(av.nrows()).expect("row count representable");
        let value = av
            .sum_axis(Axis(0))
            .insert_axis(Axis(0))
            .mapv(|v| v / n);
        self.push(value, Op::MeanRows(a))
    }

    /// Scalar Σᵢ wᵢ·(logsumexp(z) − zᵢ) over a 1 x n logit row.
    ///
    /// With one-hot weights this is cross-entropy; with arbitrary
    /// non-negative weights it is the weighted negative log-softmax used by
    /// the significance loss.
    pub fn weighted_ce(&mut self, logits: NodeId, weights: Array2<T>) -> NodeId {
        let z = &self.nodes[logits.0].value;
        assert_eq!(z.nrows(), 1, "weighted_ce expects a 1 x n row");
        assert_eq!(weights.dim(), z.dim(), "weighted_ce weights shape");
        let lse = log_sum_exp(z.row(0));
        let mut loss = T::zero();
        for j in 0..z.ncols() {
            loss += weights[(0, j)] * (lse - z[(0, j)]);
        }
        let value = Array2::from_elem((1, 1), loss);
        self.push(value, Op::WeightedCe { logits, weights })
    }

    /// Mean cross-entropy over rows with `Some(target)`; rows with `None`
    /// contribute nothing (and receive zero gradient).
    pub fn ce_mean(&mut self, logits: NodeId, targets: &[Option<usize>]) -> NodeId {
        let z = &self.nodes[logits.0].value;
        assert_eq!(z.nrows(), targets.len(), "ce_mean targets length");
        let active = targets.iter().flatten().count();
        assert!(active > 0, "ce_mean needs at least one active row");
        for (i, t) in targets.iter().enumerate() {
            if let Some(t) = t {
                assert!(*t < z.ncols(), "ce_mean target {t} out of range at row {i}");
            }
        }
        let m = T::from(active).expect("active count representable");
        let mut loss = T::zero();
        for (i, t) in targets.iter().enumerate() {
            if let Some(t) = t {
                let lse = log_sum_exp(z.row(i));
                loss += (lse - z[(i, *t)]) / m;
            }
        }
        let value = Array2::from_elem((1, 1), loss);
        self.push(value, Op::CeMean { logits, targets: targets.to_vec() })
    }

    /// Reverse-mode gradients of a 1 x 1 loss node with respect to every
    /// node in the tape.
    pub fn backward(&self, loss: NodeId) -> Gradients<T> {
        assert_eq!(self.nodes[loss.0].value.dim(), (1, 1), "loss must be scalar");
        let mut grads: Vec<Option<Array2<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array2::from_elem((1, 1), T::one()));
        for id in (0..self.nodes.len()).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.accumulate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, id: usize, g: &Array2<T>, grads: &mut [Option<Array2<T>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                add_grad(grads, *a, &g.dot(&bv.t()));
                add_grad(grads, *b, &av.t().dot(g));
            }
            Op::Transpose(a) => add_grad(grads, *a, &g.t().to_owned()),
            Op::Add(a, b) => {
                add_grad(grads, *a, g);
                add_grad(grads, *b, g);
            }
            Op::AddRow(a, row) => {
                add_grad(grads, *a, g);
                let rsum = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                add_grad(grads, *row, &rsum);
            }
            Op::Scale(a, c) => add_grad(grads, *a, &g.mapv(|v| v * *c)),
            Op::Gelu(a) => {
                let av = &self.nodes[a.0].value;
                let mut dx = g.clone();
                dx.zip_mut_with(av, |d, &x| *d *= gelu_deriv(x));
                add_grad(grads, *a, &dx);
            }
            Op::SoftmaxRows(a) => {
                let p = &node.value;
                let mut dz = Array2::<T>::zeros(p.dim());
                for i in 0..p.nrows() {
                    let mut dot = T::zero();
                    for j in 0..p.ncols() {
                        dot += g[(i, j)] * p[(i, j)];
                    }
                    for j in 0..p.ncols() {
                        dz[(i, j)] = p[(i, j)] * (g[(i, j)] - dot);
                    }
                }
                add_grad(grads, *a, &dz);
            }
            Op::LayerNorm { x, gain, bias, normed, inv_std } => {
                let gv = &self.nodes[gain.0].value;
                let d = normed.ncols();
                let dn = T::from(d).expect("width representable");
                let mut dgain = Array2::<T>::zeros((1, d));
                let mut dbias = Array2::<T>::zeros((1, d));
                let mut dx = Array2::<T>::zeros(normed.dim());
                for i in 0..normed.nrows() {
                    // dy through the affine part
                    let mut mean_dh = T::zero();
                    let mut mean_dh_n = T::zero();
                    for j in 0..d {
                        let dy = g[(i, j)];
                        dgain[(0, j)] += dy * normed[(i, j)];
                        dbias[(0, j)] += dy;
                        let dh = dy * gv[(0, j)];
                        mean_dh += dh;
                        mean_dh_n += dh * normed[(i, j)];
                    }
                    mean_dh /= dn;
                    mean_dh_n /= dn;
                    for j in 0..d {
                        let dh = g[(i, j)] * gv[(0, j)];
                        dx[(i, j)] =
                            inv_std[i] * (dh - mean_dh - normed[(i, j)] * mean_dh_n);
                    }
                }
                add_grad(grads, *x, &dx);
                add_grad(grads, *gain, &dgain);
                add_grad(grads, *bias, &dbias);
            }
            Op::ConcatRows(parts) => {
                let mut r = 0;
                for part in parts {
                    let n = self.nodes[part.0].value.nrows();
                    let slice = g.slice(ndarray::s![r..r + n, ..]).to_owned();
                    add_grad(grads, *part, &slice);
                    r += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut c = 0;
                for part in parts {
                    let n = self.nodes[part.0].value.ncols();
                    let slice = g.slice(ndarray::s![.., c..c + n]).to_owned();
                    add_grad(grads, *part, &slice);
                    c += n;
                }
            }
            Op::SliceRows(a, r0, r1) => {
                let av = &self.nodes[a.0].value;
                let mut da = Array2::<T>::zeros(av.dim());
                da.slice_mut(ndarray::s![*r0..*r1, ..]).assign(g);
                add_grad(grads, *a, &da);
            }
            Op::SliceCols(a, c0, c1) => {
                let av = &self.nodes[a.0].value;
                let mut da = Array2::<T>::zeros(av.dim());
                da.slice_mut(ndarray::s![.., *c0..*c1]).assign(g);
                add_grad(grads, *a, &da);
            }
            Op::GatherRows(a, indices) => {
                let av = &self.nodes[a.0].value;
                let mut da = Array2::<T>::zeros(av.dim());
                for (k, &src) in indices.iter().enumerate() {
                    for j in 0..av.ncols() {
                        da[(src, j)] += g[(k, j)];
                    }
                }
                add_grad(grads, *a, &da);
            }
            Op::MeanRows(a) => {
                let av = &self.nodes[a.0].value;
                let n = T::from(av.nrows()).expect("row count representable");
                let mut da = Array2::<T>::zeros(av.dim());
                for i in 0..da.nrows() {
                    for j in 0..da.ncols() {
                        da[(i, j)] = g[(0, j)] / n;
                    }
                }
                add_grad(grads, *a, &da);
            }
            Op::WeightedCe { logits, weights } => {
                let z = &self.nodes[logits.0].value;
                let p = softmax_row(z.row(0));
                let wsum = weights.row(0).sum();
                let scale = g[(0, 0)];
                let mut dz = Array2::<T>::zeros(z.dim());
                for j in 0..z.ncols() {
                    dz[(0, j)] = scale * (wsum * p[j] - weights[(0, j)]);
                }
                add_grad(grads, *logits, &dz);
            }
            Op::CeMean { logits, targets } => {
                let z = &self.nodes[logits.0].value;
                let active = targets.iter().flatten().count();
                let m = T::from(active).expect("active count representable");
                let scale = g[(0, 0)] / m;
                let mut dz = Array2::<T>::zeros(z.dim());
                for (i, t) in targets.iter().enumerate() {
                    if let Some(t) = t {
                        let p = softmax_row(z.row(i));
                        for j in 0..z.ncols() {
                            let indicator = if j == *t { T::one() } else { T::zero() };
                            dz[(i, j)] = scale * (p[j] - indicator);
                        }
                    }
                }
                add_grad(grads, *logits, &dz);
            }
        }
    }
}

/// Gradients returned by [`Graph::backward`], indexed by [`NodeId`].
pub struct Gradients<T: NdFloat> {
    grads: Vec<Option<Array2<T>>>,
}

impl<T: NdFloat> Gradients<T> {
    /// Gradient with respect to a node, if any path reached it.
    pub fn wrt(&self, id: NodeId) -> Option<&Array2<T>> {
        self.grads[id.0].as_ref()
    }
}

fn add_grad<T: NdFloat>(grads: &mut [Option<Array2<T>>], id: NodeId, inc: &Array2<T>) {
    match &mut grads[id.0] {
        Some(existing) => *existing += inc,
        slot @ None => *slot = Some(inc.clone()),
    }
}

fn log_sum_exp<T: NdFloat>(row: ndarray::ArrayView1<T>) -> T {
    let max = row.fold(T::neg_infinity(), |a, &b| if b > a { b } else { a });
    let sum = row.fold(T::zero(), |acc, &v| acc + (v - max).exp());
    max + sum.ln()
}

fn softmax_row<T: NdFloat>(row: ndarray::ArrayView1<T>) -> Vec<T> {
    let max = row.fold(T::neg_infinity(), |a, &b| if b > a { b } else { a });
    let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
    let sum = exps.iter().fold(T::zero(), |a, &b| a + b);
    exps.into_iter().map(|e| e / sum).collect()
}

fn gelu<T: NdFloat>(x: T) -> T {
    let half = T::from(0.5).expect("constant");
    let c = T::from(0.7978845608028654).expect("sqrt(2/pi)"); // sqrt(2/pi)
    let k = T::from(0.044715).expect("constant");
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_deriv<T: NdFloat>(x: T) -> T {
    let half = T::from(0.5).expect("constant");
    let c = T::from(0.7978845608028654).expect("sqrt(2/pi)");
    let k = T::from(0.044715).expect("constant");
    let three = T::from(3.0).expect("constant");
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * k * x * x)
}
