//! Minimal reverse-mode automatic differentiation over `f64` matrices.
//!
//! Everything the models need is expressed as a handful of matrix ops on a
//! [`Tape`]: values are computed eagerly at graph-build time, and
//! [`Tape::backward`] walks the recorded nodes in reverse to accumulate
//! adjoints. Vectors are 1×n matrices, scalars are 1×1.
//!
//! The op set is deliberately small and fused where it pays off
//! (multi-head attention, cross-entropy, InfoNCE) so that a full
//! encoder/decoder training step stays cheap on a single core.

mod gradcheck;
mod params;

pub use gradcheck::{check_gradients, numerical_grad, relative_error, GradCheckReport};
pub use params::{clip_global_norm, AdamW, Binder, Params};

use ndarray::{Array2, Axis};
use std::sync::Arc;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Shared boolean attention mask; `true` means the (query, key) pair is visible.
pub type Mask = Arc<Array2<bool>>;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Linear { x: Var, w: Var, b: Var },
    Gelu(Var),
    Tanh(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Array2<f64>, inv_std: Vec<f64> },
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize, len: usize },
    MeanRows(Var),
    SumAll(Var),
    RowsSelect { table: Var, ids: Vec<usize> },
    Mha { q: Var, k: Var, v: Var, heads: usize, probs: Vec<Array2<f64>>, scale: f64 },
    CrossEntropyMean { logits: Var, targets: Vec<usize>, valid: Vec<bool>, probs: Array2<f64> },
    GatherLogProbs { logits: Var, targets: Vec<usize>, probs: Array2<f64> },
    CosineSim { a: Var, b: Var },
    InfoNce { sims: Vec<Var>, tau: f64, softmax: Vec<f64> },
}

struct Node {
    op: Op,
    value: Arc<Array2<f64>>,
}

/// Gradient-recording arena. One tape per forward graph.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::with_capacity(256) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value of a node. Valid for the lifetime of the tape.
    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let a = self.value(v);
        assert_eq!(a.dim(), (1, 1), "scalar() on non-scalar node");
        a[(0, 0)]
    }

    fn push(&mut self, op: Op, value: Array2<f64>) -> Var {
        self.nodes.push(Node { op, value: Arc::new(value) });
        Var(self.nodes.len() - 1)
    }

    /// Constant or parameter leaf. The array is shared, not copied.
    pub fn leaf(&mut self, value: Arc<Array2<f64>>) -> Var {
        self.nodes.push(Node { op: Op::Leaf, value });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf_owned(&mut self, value: Array2<f64>) -> Var {
        self.leaf(Arc::new(value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(Op::Sub(a, b), v)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(Op::Mul(a, b), v)
    }

    /// `a + b` with `b` a 1×n row broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let bv = self.value(b);
        assert_eq!(bv.nrows(), 1, "add_row expects a 1×n row");
        let v = self.value(a) + bv;
        self.push(Op::AddRow(a, b), v)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).mapv(|x| x * c);
        self.push(Op::Scale(a, c), v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(Op::MatMul(a, b), v)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(Op::MatMulNT(a, b), v)
    }

    /// Fused affine map `x·w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let mut v = self.value(x).dot(self.value(w));
        v += self.value(b);
        self.push(Op::Linear { x, w, b }, v)
    }

    /// GELU, tanh approximation (smooth, so finite differences stay honest).
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(gelu_scalar);
        self.push(Op::Gelu(a), v)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        self.push(Op::Tanh(a), v)
    }

    /// Row-wise layer norm with learned gain/bias (both 1×n).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let eps = 1e-5;
        let xv = self.value(x);
        let n = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / n;
            row.mapv_inplace(|t| t - mean);
            let var = row.iter().map(|t| t * t).sum::<f64>() / n;
            let is = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|t| t * is);
            inv_std.push(is);
        }
        let mut v = xhat.clone();
        v *= self.value(gain);
        v += self.value(bias);
        self.push(Op::LayerNorm { x, gain, bias, xhat, inv_std }, v)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let ncols = self.value(parts[0]).ncols();
        let nrows: usize = parts.iter().map(|p| self.value(*p).nrows()).sum();
        let mut v = Array2::zeros((nrows, ncols));
        let mut at = 0;
        for p in parts {
            let pv = self.value(*p);
            v.slice_mut(ndarray::s![at..at + pv.nrows(), ..]).assign(pv);
            at += pv.nrows();
        }
        self.push(Op::ConcatRows(parts.to_vec()), v)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x).slice(ndarray::s![start..start + len, ..]).to_owned();
        self.push(Op::SliceRows { x, start, len }, v)
    }

    /// Arithmetic mean over rows, 1×n result.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let m = xv.nrows() as f64;
        let v = (xv.sum_axis(Axis(0)) / m).insert_axis(Axis(0));
        self.push(Op::MeanRows(x), v)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Op::SumAll(x), Array2::from_elem((1, 1), s))
    }

    /// Gather rows of `table` by index; duplicates allowed (grads scatter-add).
    pub fn rows_select(&mut self, table: Var, ids: &[usize]) -> Var {
        let tv = self.value(table);
        let mut v = Array2::zeros((ids.len(), tv.ncols()));
        for (r, &id) in ids.iter().enumerate() {
            assert!(id < tv.nrows(), "row id {id} out of range");
            v.row_mut(r).assign(&tv.row(id));
        }
        self.push(Op::RowsSelect { table, ids: ids.to_vec() }, v)
    }

    /// Fused multi-head attention core over already-projected q/k/v (T×d).
    ///
    /// Columns are split into `heads` contiguous groups; each head computes
    /// softmax(QKᵀ/√dk)·V under the optional visibility mask, and the head
    /// outputs are re-concatenated. Softmax probabilities are retained on the
    /// node for backward and for inspection via [`Tape::attention_probs`].
    pub fn mha(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: Option<&Mask>) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.ncols();
        assert!(heads >= 1 && d % heads == 0, "head count must divide dim");
        let dk = d / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let (tq, tk) = (qv.nrows(), kv.nrows());
        if let Some(m) = mask {
            assert_eq!(m.dim(), (tq, tk), "mask shape");
        }
        let mut out = Array2::zeros((tq, d));
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = ndarray::s![.., h * dk..(h + 1) * dk];
            let qh = qv.slice(cols);
            let kh = kv.slice(cols);
            let vh = vv.slice(cols);
            let mut scores = qh.dot(&kh.t());
            scores *= scale;
            if let Some(m) = mask {
                for ((i, j), s) in scores.indexed_iter_mut() {
                    if !m[(i, j)] {
                        *s = f64::NEG_INFINITY;
                    }
                }
            }
            let a = softmax_rows(&scores);
            out.slice_mut(cols).assign(&a.dot(&vh));
            probs.push(a);
        }
        self.push(Op::Mha { q, k, v, heads, probs, scale }, out)
    }

    /// Per-head attention probability matrices of an [`Tape::mha`] node.
    pub fn attention_probs(&self, v: Var) -> Option<&[Array2<f64>]> {
        match &self.nodes[v.0].op {
            Op::Mha { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`, counting only rows with `valid[i]`.
    pub fn cross_entropy_mean(&mut self, logits: Var, targets: &[usize], valid: &[bool]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.nrows(), targets.len());
        assert_eq!(targets.len(), valid.len());
        let n_valid = valid.iter().filter(|b| **b).count();
        assert!(n_valid > 0, "cross_entropy_mean needs at least one scored position");
        let probs = softmax_rows(lv);
        let mut total = 0.0;
        for (i, (&t, &ok)) in targets.iter().zip(valid).enumerate() {
            if ok {
                total -= probs[(i, t)].max(f64::MIN_POSITIVE).ln();
            }
        }
        let value = Array2::from_elem((1, 1), total / n_valid as f64);
        self.push(
            Op::CrossEntropyMean { logits, targets: targets.to_vec(), valid: valid.to_vec(), probs },
            value,
        )
    }

    /// N×1 column of `log softmax(logits)[i, targets[i]]`.
    pub fn gather_log_probs(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.nrows(), targets.len());
        let probs = softmax_rows(lv);
        let mut v = Array2::zeros((targets.len(), 1));
        for (i, &t) in targets.iter().enumerate() {
            v[(i, 0)] = probs[(i, t)].max(f64::MIN_POSITIVE).ln();
        }
        self.push(Op::GatherLogProbs { logits, targets: targets.to_vec(), probs }, v)
    }

    /// Cosine similarity of two 1×d vectors. The caller is responsible for
    /// rejecting zero-norm inputs before building the node.
    pub fn cosine_sim(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.dim(), bv.dim());
        assert_eq!(av.nrows(), 1, "cosine_sim expects row vectors");
        let na = frob(av);
        let nb = frob(bv);
        assert!(na > 0.0 && nb > 0.0, "cosine_sim on zero vector");
        let dot: f64 = av.iter().zip(bv.iter()).map(|(x, y)| x * y).sum();
        self.push(Op::CosineSim { a, b }, Array2::from_elem((1, 1), dot / (na * nb)))
    }

    /// InfoNCE over scalar similarities: `sims[0]` is the positive, the rest
    /// negatives. Computes `logsumexp(s/τ) − s₀/τ` (max-subtracted).
    pub fn info_nce_from_sims(&mut self, sims: &[Var], tau: f64) -> Var {
        assert!(sims.len() >= 2, "need a positive and at least one negative");
        assert!(tau > 0.0);
        let z: Vec<f64> = sims.iter().map(|s| self.scalar(*s) / tau).collect();
        let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = z.iter().map(|t| (t - zmax).exp()).collect();
        let denom: f64 = exps.iter().sum();
        let softmax: Vec<f64> = exps.iter().map(|e| e / denom).collect();
        let loss = denom.ln() + zmax - z[0];
        self.push(
            Op::InfoNce { sims: sims.to_vec(), tau, softmax },
            Array2::from_elem((1, 1), loss),
        )
    }

    /// Reverse pass from a 1×1 loss node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).dim(), (1, 1), "backward needs a scalar loss");
        let mut adj: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(Array2::from_elem((1, 1), 1.0));
        for i in (0..=loss.0).rev() {
            let g = match adj[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(i, &g, &mut adj);
            adj[i] = Some(g);
        }
        Gradients { adj }
    }

    fn accumulate(&self, i: usize, g: &Array2<f64>, adj: &mut [Option<Array2<f64>>]) {
        let val = |v: Var| -> &Array2<f64> { &self.nodes[v.0].value };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                add_grad(adj, *a, g.clone());
                add_grad(adj, *b, g.clone());
            }
            Op::Sub(a, b) => {
                add_grad(adj, *a, g.clone());
                add_grad(adj, *b, -g);
            }
            Op::Mul(a, b) => {
                add_grad(adj, *a, g * val(*b));
                add_grad(adj, *b, g * val(*a));
            }
            Op::AddRow(a, b) => {
                add_grad(adj, *a, g.clone());
                add_grad(adj, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Scale(a, c) => add_grad(adj, *a, g.mapv(|x| x * c)),
            Op::MatMul(a, b) => {
                add_grad(adj, *a, g.dot(&val(*b).t()));
                add_grad(adj, *b, val(*a).t().dot(g));
            }
            Op::MatMulNT(a, b) => {
                add_grad(adj, *a, g.dot(val(*b)));
                add_grad(adj, *b, g.t().dot(val(*a)));
            }
            Op::Linear { x, w, b } => {
                add_grad(adj, *x, g.dot(&val(*w).t()));
                add_grad(adj, *w, val(*x).t().dot(g));
                add_grad(adj, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Gelu(a) => {
                let mut d = val(*a).clone();
                d.mapv_inplace(gelu_grad_scalar);
                d *= g;
                add_grad(adj, *a, d);
            }
            Op::Tanh(a) => {
                let y = &self.nodes[i].value;
                add_grad(adj, *a, g * &y.mapv(|t| 1.0 - t * t));
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let gainv = val(*gain);
                let n = xhat.ncols() as f64;
                add_grad(adj, *bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                add_grad(adj, *gain, (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                let mut dx = Array2::zeros(xhat.dim());
                for r in 0..xhat.nrows() {
                    let gr = g.row(r);
                    let xr = xhat.row(r);
                    // dxhat = g ⊙ gain; dx = inv_std (dxhat − mean(dxhat) − xhat·mean(dxhat⊙xhat))
                    let dxh: Vec<f64> =
                        gr.iter().zip(gainv.row(0).iter()).map(|(a, b)| a * b).collect();
                    let m1 = dxh.iter().sum::<f64>() / n;
                    let m2 = dxh.iter().zip(xr.iter()).map(|(a, b)| a * b).sum::<f64>() / n;
                    for c in 0..xhat.ncols() {
                        dx[(r, c)] = inv_std[r] * (dxh[c] - m1 - xr[c] * m2);
                    }
                }
                add_grad(adj, *x, dx);
            }
            Op::ConcatRows(parts) => {
                let mut at = 0;
                for p in parts {
                    let rows = val(*p).nrows();
                    add_grad(adj, *p, g.slice(ndarray::s![at..at + rows, ..]).to_owned());
                    at += rows;
                }
            }
            Op::SliceRows { x, start, len } => {
                let mut d = Array2::zeros(val(*x).dim());
                d.slice_mut(ndarray::s![*start..*start + *len, ..]).assign(g);
                add_grad(adj, *x, d);
            }
            Op::MeanRows(x) => {
                let rows = val(*x).nrows();
                let scaled = g.mapv(|t| t / rows as f64);
                let mut d = Array2::zeros(val(*x).dim());
                for mut row in d.rows_mut() {
                    row.assign(&scaled.row(0));
                }
                add_grad(adj, *x, d);
            }
            Op::SumAll(x) => {
                add_grad(adj, *x, Array2::from_elem(val(*x).dim(), g[(0, 0)]));
            }
            Op::RowsSelect { table, ids } => {
                let mut d = Array2::zeros(val(*table).dim());
                for (r, &id) in ids.iter().enumerate() {
                    let mut dst = d.row_mut(id);
                    dst += &g.row(r);
                }
                add_grad(adj, *table, d);
            }
            Op::Mha { q, k, v, heads, probs, scale } => {
                let (qv, kv, vv) = (val(*q), val(*k), val(*v));
                let dk = qv.ncols() / heads;
                let mut dq = Array2::zeros(qv.dim());
                let mut dkm = Array2::zeros(kv.dim());
                let mut dv = Array2::zeros(vv.dim());
                for h in 0..*heads {
                    let cols = ndarray::s![.., h * dk..(h + 1) * dk];
                    let a = &probs[h];
                    let gh = g.slice(cols);
                    let vh = vv.slice(cols);
                    let da = gh.dot(&vh.t());
                    dv.slice_mut(cols).assign(&a.t().dot(&gh));
                    // softmax backward per row: ds = a ⊙ (da − rowsum(da ⊙ a))
                    let mut ds = da.clone();
                    for r in 0..ds.nrows() {
                        let dot: f64 =
                            da.row(r).iter().zip(a.row(r).iter()).map(|(x, y)| x * y).sum();
                        for c in 0..ds.ncols() {
                            ds[(r, c)] = a[(r, c)] * (da[(r, c)] - dot);
                        }
                    }
                    ds *= *scale;
                    dq.slice_mut(cols).assign(&ds.dot(&kv.slice(cols)));
                    dkm.slice_mut(cols).assign(&ds.t().dot(&qv.slice(cols)));
                }
                add_grad(adj, *q, dq);
                add_grad(adj, *k, dkm);
                add_grad(adj, *v, dv);
            }
            Op::CrossEntropyMean { logits, targets, valid, probs } => {
                let n_valid = valid.iter().filter(|b| **b).count() as f64;
                let up = g[(0, 0)] / n_valid;
                let mut d = Array2::zeros(probs.dim());
                for (r, (&t, &ok)) in targets.iter().zip(valid).enumerate() {
                    if ok {
                        for c in 0..probs.ncols() {
                            d[(r, c)] = up * (probs[(r, c)] - if c == t { 1.0 } else { 0.0 });
                        }
                    }
                }
                add_grad(adj, *logits, d);
            }
            Op::GatherLogProbs { logits, targets, probs } => {
                let mut d = Array2::zeros(probs.dim());
                for (r, &t) in targets.iter().enumerate() {
                    let up = g[(r, 0)];
                    for c in 0..probs.ncols() {
                        d[(r, c)] = up * (if c == t { 1.0 } else { 0.0 } - probs[(r, c)]);
                    }
                }
                add_grad(adj, *logits, d);
            }
            Op::CosineSim { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                let na = frob(av);
                let nb = frob(bv);
                let cosv = self.nodes[i].value[(0, 0)];
                let up = g[(0, 0)];
                let da = bv.mapv(|t| t / (na * nb)) - av.mapv(|t| cosv * t / (na * na));
                let db = av.mapv(|t| t / (na * nb)) - bv.mapv(|t| cosv * t / (nb * nb));
                add_grad(adj, *a, da.mapv(|t| t * up));
                add_grad(adj, *b, db.mapv(|t| t * up));
            }
            Op::InfoNce { sims, tau, softmax } => {
                let up = g[(0, 0)];
                for (j, s) in sims.iter().enumerate() {
                    let ds = (softmax[j] - if j == 0 { 1.0 } else { 0.0 }) / tau;
                    add_grad(adj, *s, Array2::from_elem((1, 1), up * ds));
                }
            }
        }
    }
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    adj: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient w.r.t. a node, if any path reached it.
    pub fn wrt(&self, v: Var) -> Option<&Array2<f64>> {
        self.adj[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<f64>> {
        self.adj[v.0].take()
    }
}

fn add_grad(adj: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut adj[v.0] {
        Some(acc) => *acc += &g,
        slot => *slot = Some(g),
    }
}

fn frob(a: &Array2<f64>) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let inner = GELU_C * (x + GELU_A * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Row-wise softmax; `NEG_INFINITY` entries come out as exact zeros.
pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            row.fill(0.0);
            continue;
        }
        row.mapv_inplace(|t| (t - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|t| t / sum);
    }
    out
}

/// Causal visibility over `mem + steps` rows: memory rows see earlier memory
/// rows only; caption row `i` sees all memory plus caption rows `≤ i`.
pub fn causal_mask_with_memory(mem: usize, steps: usize) -> Mask {
    let t = mem + steps;
    let mut m = Array2::from_elem((t, t), false);
    for i in 0..t {
        for j in 0..=i {
            // memory rows never look at caption rows
            if i < mem && j >= mem {
                continue;
            }
            m[(i, j)] = true;
        }
    }
    Arc::new(m)
}

/// Mask letting every row attend only to itself (degenerate-layer test hook).
pub fn self_only_mask(t: usize) -> Mask {
    let mut m = Array2::from_elem((t, t), false);
    for i in 0..t {
        m[(i, i)] = true;
    }
    Arc::new(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn matmul_values_and_grads() {
        let mut t = Tape::new();
        let a = t.leaf_owned(array![[1.0, 2.0], [3.0, 4.0]]);
        let b = t.leaf_owned(array![[5.0, 6.0], [7.0, 8.0]]);
        let c = t.matmul(a, b);
        assert_eq!(t.value(c), &array![[19.0, 22.0], [43.0, 50.0]]);
        let loss = t.sum_all(c);
        let g = t.backward(loss);
        // d(sum AB)/dA = 1·Bᵀ
        assert_eq!(g.wrt(a).unwrap(), &array![[11.0, 15.0], [11.0, 15.0]]);
        assert_eq!(g.wrt(b).unwrap(), &array![[4.0, 4.0], [6.0, 6.0]]);
    }

    #[test]
    fn softmax_rows_masked_entries_are_zero() {
        let x = array![[0.0, f64::NEG_INFINITY, 1.0]];
        let s = softmax_rows(&x);
        assert_eq!(s[(0, 1)], 0.0);
        assert_close(s.row(0).sum(), 1.0, 1e-12);
    }

    #[test]
    fn cross_entropy_uniform_is_log_vocab() {
        let mut t = Tape::new();
        let logits = t.leaf_owned(Array2::zeros((3, 8)));
        let loss = t.cross_entropy_mean(logits, &[0, 5, 7], &[true, true, true]);
        assert_close(t.scalar(loss), (8.0f64).ln(), 1e-12);
    }

    #[test]
    fn cross_entropy_ignores_invalid_rows() {
        let mut t = Tape::new();
        let mut l = Array2::zeros((2, 4));
        l[(0, 1)] = 50.0; // row 0 ≈ one-hot correct
        let logits = t.leaf_owned(l);
        let loss = t.cross_entropy_mean(logits, &[1, 2], &[true, false]);
        assert_close(t.scalar(loss), 0.0, 1e-9);
        let g = t.backward(loss);
        let gl = g.wrt(logits).unwrap();
        assert_eq!(gl.row(1).iter().filter(|x| **x != 0.0).count(), 0);
    }

    #[test]
    fn info_nce_equal_sims_is_log_m_plus_one() {
        let mut t = Tape::new();
        let s: Vec<Var> =
            (0..5).map(|_| t.leaf_owned(Array2::from_elem((1, 1), 0.3))).collect();
        let loss = t.info_nce_from_sims(&s, 0.08);
        assert_close(t.scalar(loss), (5.0f64).ln(), 1e-12);
    }

    #[test]
    fn cosine_sim_basic_cases() {
        let mut t = Tape::new();
        let a = t.leaf_owned(array![[1.0, 0.0]]);
        let b = t.leaf_owned(array![[0.0, 1.0]]);
        let c = t.leaf_owned(array![[-2.0, 0.0]]);
        let aa = t.cosine_sim(a, a);
        let ab = t.cosine_sim(a, b);
        let ac = t.cosine_sim(a, c);
        assert_close(t.scalar(aa), 1.0, 1e-12);
        assert_close(t.scalar(ab), 0.0, 1e-12);
        assert_close(t.scalar(ac), -1.0, 1e-12);
    }

    #[test]
    fn mha_probs_rows_sum_to_one() {
        let mut t = Tape::new();
        let x = t.leaf_owned(Array2::from_shape_fn((4, 8), |(i, j)| (i * 7 + j) as f64 * 0.1));
        let out = t.mha(x, x, x, 2, None);
        assert_eq!(t.value(out).dim(), (4, 8));
        for a in t.attention_probs(out).unwrap() {
            for row in a.rows() {
                assert_close(row.sum(), 1.0, 1e-12);
            }
        }
    }

    #[test]
    fn causal_mask_memory_isolation() {
        let m = causal_mask_with_memory(2, 3);
        assert!(m[(0, 0)] && !m[(0, 1)]);
        assert!(m[(1, 0)] && m[(1, 1)] && !m[(1, 2)]);
        assert!(m[(2, 0)] && m[(2, 1)] && m[(2, 2)] && !m[(2, 3)]);
        assert!(m[(4, 4)]);
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let mut t = Tape::new();
        let x = t.leaf_owned(array![[1.0, 2.0, 3.0, 4.0], [0.0, 0.0, 5.0, 5.0]]);
        let g = t.leaf_owned(Array2::ones((1, 4)));
        let b = t.leaf_owned(Array2::zeros((1, 4)));
        let y = t.layer_norm(x, g, b);
        for row in t.value(y).rows() {
            assert_close(row.sum(), 0.0, 1e-9);
            let var = row.iter().map(|v| v * v).sum::<f64>() / 4.0;
            assert_close(var, 1.0, 1e-3);
        }
    }
}
