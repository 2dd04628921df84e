//! Reverse-mode differentiation over dense f64 matrices.
//!
//! A [`Tape`] records every intermediate value of a forward pass as a node;
//! [`Tape::backward`] walks the record once in reverse and accumulates
//! gradients with respect to the referenced parameters. The softmax family is
//! fused: attention softmax, gathered log-softmax (sequence scoring), and KL
//! against a frozen distribution each have closed-form backwards, which keeps
//! full-vocabulary intermediates off the tape.

use super::params::ParamStore;
use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use std::collections::HashMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

const GELU_SCALE: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_COEF: f64 = 0.044715;
pub const LN_EPS: f64 = 1e-5;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_SCALE * (x + GELU_COEF * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_SCALE * (x + GELU_COEF * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_SCALE * (1.0 + 3.0 * GELU_COEF * x * x)
}

enum Op {
    Constant,
    Param(usize),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Min(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    /// a · bᵀ
    MatMulNT(NodeId, NodeId),
    /// a + row-broadcast b, b of shape [1, m]
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Exp(NodeId),
    Gelu(NodeId),
    Clamp {
        a: NodeId,
        lo: f64,
        hi: f64,
    },
    SliceCols {
        a: NodeId,
        start: usize,
    },
    ConcatCols(Vec<NodeId>),
    GatherRows {
        a: NodeId,
        indices: Vec<usize>,
    },
    MeanRows(NodeId),
    SumAll(NodeId),
    Reshape(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Array2<f64>,
        inv_std: Array1<f64>,
    },
    /// Row-wise softmax. Masked-out entries have probability zero, so the
    /// standard backward needs no mask bookkeeping.
    SoftmaxRows(NodeId),
    /// Per row t: log softmax(logits[t])[targets[t]], with `masked` token
    /// ids excluded from the distribution. Saves the softmax for backward.
    GatherLogSoftmax {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Array2<f64>,
    },
    /// Mean over rows of KL(p_old || softmax(logits)), both sides masked.
    /// `p_old` is a fixed input; the new-policy softmax is saved for backward.
    KlVsConst {
        logits: NodeId,
        p_old: Array2<f64>,
        p_new: Array2<f64>,
    },
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Gradients with respect to the parameter store, aligned by index.
pub struct ParamGrads {
    grads: Vec<Option<Array2<f64>>>,
}

impl ParamGrads {
    pub fn get(&self, idx: usize) -> Option<&Array2<f64>> {
        self.grads.get(idx).and_then(|g| g.as_ref())
    }
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<usize, NodeId>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    pub fn store(&self) -> &ParamStore {
        self.params
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        debug_assert_eq!(v.dim(), (1, 1));
        v[[0, 0]]
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Constant)
    }

    pub fn scalar(&mut self, value: f64) -> NodeId {
        self.constant(Array2::from_elem((1, 1), value))
    }

    /// Node for a stored parameter; one node per parameter per tape.
    pub fn param(&mut self, idx: usize) -> NodeId {
        if let Some(&id) = self.param_nodes.get(&idx) {
            return id;
        }
        let value = self.params.value(idx).clone();
        let id = self.push(value, Op::Param(idx));
        self.param_nodes.insert(idx, id);
        id
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn min(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = ndarray::Zip::from(self.value(a))
            .and(self.value(b))
            .map_collect(|&x, &y| x.min(y));
        self.push(v, Op::Min(a, b))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// a · bᵀ
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulNT(a, b))
    }

    /// Adds a [1, m] row vector to every row of a.
    pub fn add_row(&mut self, a: NodeId, b: NodeId) -> NodeId {
        debug_assert_eq!(self.value(b).nrows(), 1);
        let v = self.value(a) + &self.value(b).row(0);
        self.push(v, Op::AddRow(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).mapv(|x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.scale(a, -1.0)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(gelu);
        self.push(v, Op::Gelu(a))
    }

    /// Clamp into [lo, hi]; the gradient passes only strictly inside the band.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let v = self.value(a).mapv(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp { a, lo, hi })
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, width: usize) -> NodeId {
        let v = self.value(a).slice(s![.., start..start + width]).to_owned();
        self.push(v, Op::SliceCols { a, start })
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("same row count");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn gather_rows(&mut self, a: NodeId, indices: &[usize]) -> NodeId {
        let src = self.value(a);
        let mut v = Array2::zeros((indices.len(), src.ncols()));
        for (out, &idx) in indices.iter().enumerate() {
            v.row_mut(out).assign(&src.row(idx));
        }
        self.push(
            v,
            Op::GatherRows {
                a,
                indices: indices.to_vec(),
            },
        )
    }

    /// Mean over rows, producing [1, m].
    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let src = self.value(a);
        let n = src.nrows() as f64;
        let v = (src.sum_axis(Axis(0)) / n).insert_axis(Axis(0));
        self.push(v, Op::MeanRows(a))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::SumAll(a))
    }

    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> NodeId {
        let v = self
            .value(a)
            .clone()
            .into_shape_with_order((rows, cols))
            .expect("element count preserved");
        self.push(v, Op::Reshape(a))
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let src = self.value(x);
        let g = self.value(gain).row(0).to_owned();
        let b = self.value(bias).row(0).to_owned();
        let (n, m) = src.dim();
        let mut xhat = Array2::zeros((n, m));
        let mut inv_std = Array1::zeros(n);
        let mut out = Array2::zeros((n, m));
        for i in 0..n {
            let row = src.row(i);
            let mean = row.sum() / m as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            inv_std[i] = inv;
            for j in 0..m {
                let h = (row[j] - mean) * inv;
                xhat[[i, j]] = h;
                out[[i, j]] = g[j] * h + b[j];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    pub fn softmax_rows(&mut self, a: NodeId, causal: bool) -> NodeId {
        let src = self.value(a);
        let (n, m) = src.dim();
        let mut out = Array2::zeros((n, m));
        for i in 0..n {
            let hi = if causal { (i + 1).min(m) } else { m };
            let row = src.row(i);
            let max = row
                .slice(s![..hi])
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..hi {
                let e = (row[j] - max).exp();
                out[[i, j]] = e;
                sum += e;
            }
            for j in 0..hi {
                out[[i, j]] /= sum;
            }
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    /// Per-row log-probability of a chosen token under the masked softmax of
    /// the logits row. Output shape [T, 1].
    pub fn gather_log_softmax(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        masked: &[usize],
    ) -> NodeId {
        let src = self.value(logits);
        let (n, m) = src.dim();
        assert_eq!(targets.len(), n, "one target per row");
        let mut probs = Array2::zeros((n, m));
        let mut out = Array2::zeros((n, 1));
        for i in 0..n {
            debug_assert!(!masked.contains(&targets[i]), "target token is masked");
            let row = src.row(i);
            let (e, sum, lse) = masked_exp_parts(row, masked);
            probs.row_mut(i).assign(&(e / sum));
            out[[i, 0]] = row[targets[i]] - lse;
        }
        self.push(
            out,
            Op::GatherLogSoftmax {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    /// Mean over rows of Σ_a p_old(a)·[ln p_old(a) − ln softmax(logits)(a)],
    /// the KL divergence from the new policy to a frozen reference, masked
    /// identically on both sides. `p_old` must have zeros at masked columns
    /// and `ln_p_old` must come from the same log-softmax as `p_old`, so that
    /// identical logits cancel term-by-term to an exact zero.
    pub fn kl_vs_const(
        &mut self,
        logits: NodeId,
        p_old: Array2<f64>,
        ln_p_old: &Array2<f64>,
        masked: &[usize],
    ) -> NodeId {
        let src = self.value(logits);
        let (n, m) = src.dim();
        assert_eq!(p_old.dim(), (n, m), "distribution shape mismatch");
        assert_eq!(ln_p_old.dim(), (n, m), "distribution shape mismatch");
        let mut p_new = Array2::zeros((n, m));
        let mut total = 0.0;
        for i in 0..n {
            let row = src.row(i);
            let (e, sum, lse) = masked_exp_parts(row, masked);
            let mut row_kl = 0.0;
            for j in 0..m {
                if masked.contains(&j) {
                    continue;
                }
                p_new[[i, j]] = e[j] / sum;
                let po = p_old[[i, j]];
                if po > 0.0 {
                    row_kl += po * (ln_p_old[[i, j]] - (row[j] - lse));
                }
            }
            total += row_kl;
        }
        let value = Array2::from_elem((1, 1), total / n as f64);
        self.push(
            value,
            Op::KlVsConst {
                logits,
                p_old,
                p_new,
            },
        )
    }

    /// Accumulates d(loss)/d(param) for every parameter reachable from
    /// `loss`, which must be a [1, 1] node.
    pub fn backward(&self, loss: NodeId) -> ParamGrads {
        assert_eq!(self.value(loss).dim(), (1, 1), "loss must be scalar");
        let mut grads: Vec<Option<Array2<f64>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        let mut by_param: Vec<Option<Array2<f64>>> = Vec::with_capacity(self.params.len());
        by_param.resize_with(self.params.len(), || None);
        grads[loss.0] = Some(Array2::from_elem((1, 1), 1.0));

        fn acc(slot: &mut Option<Array2<f64>>, delta: Array2<f64>) {
            match slot {
                Some(g) => *g += &delta,
                None => *slot = Some(delta),
            }
        }

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            match &self.nodes[id].op {
                Op::Constant => {}
                Op::Param(p) => acc(&mut by_param[*p], g),
                Op::Add(a, b) => {
                    acc(&mut grads[a.0], g.clone());
                    acc(&mut grads[b.0], g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads[a.0], g.clone());
                    acc(&mut grads[b.0], g.mapv(|v| -v));
                }
                Op::Mul(a, b) => {
                    acc(&mut grads[a.0], &g * self.value(*b));
                    acc(&mut grads[b.0], &g * self.value(*a));
                }
                Op::Min(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let to_a = ndarray::Zip::from(&g)
                        .and(av)
                        .and(bv)
                        .map_collect(|&gv, &x, &y| if x <= y { gv } else { 0.0 });
                    let to_b = ndarray::Zip::from(&g)
                        .and(av)
                        .and(bv)
                        .map_collect(|&gv, &x, &y| if x > y { gv } else { 0.0 });
                    acc(&mut grads[a.0], to_a);
                    acc(&mut grads[b.0], to_b);
                }
                Op::MatMul(a, b) => {
                    acc(&mut grads[a.0], g.dot(&self.value(*b).t()));
                    acc(&mut grads[b.0], self.value(*a).t().dot(&g));
                }
                Op::MatMulNT(a, b) => {
                    acc(&mut grads[a.0], g.dot(self.value(*b)));
                    acc(&mut grads[b.0], g.t().dot(self.value(*a)));
                }
                Op::AddRow(a, b) => {
                    acc(&mut grads[b.0], g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut grads[a.0], g);
                }
                Op::Scale(a, c) => acc(&mut grads[a.0], g.mapv(|v| v * c)),
                Op::Exp(a) => acc(&mut grads[a.0], &g * &self.nodes[id].value),
                Op::Gelu(a) => {
                    let da = ndarray::Zip::from(&g)
                        .and(self.value(*a))
                        .map_collect(|&gv, &x| gv * gelu_grad(x));
                    acc(&mut grads[a.0], da);
                }
                Op::Clamp { a, lo, hi } => {
                    let da = ndarray::Zip::from(&g)
                        .and(self.value(*a))
                        .map_collect(|&gv, &x| if x > *lo && x < *hi { gv } else { 0.0 });
                    acc(&mut grads[a.0], da);
                }
                Op::SliceCols { a, start } => {
                    let mut da = Array2::zeros(self.value(*a).dim());
                    da.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(&mut grads[a.0], da);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        let dp = g.slice(s![.., offset..offset + w]).to_owned();
                        acc(&mut grads[p.0], dp);
                        offset += w;
                    }
                }
                Op::GatherRows { a, indices } => {
                    let mut da = Array2::zeros(self.value(*a).dim());
                    for (out, &idx) in indices.iter().enumerate() {
                        let mut row = da.row_mut(idx);
                        row += &g.row(out);
                    }
                    acc(&mut grads[a.0], da);
                }
                Op::MeanRows(a) => {
                    let (n, m) = self.value(*a).dim();
                    let scaled = g.row(0).mapv(|v| v / n as f64);
                    let da = Array2::from_shape_fn((n, m), |(_, j)| scaled[j]);
                    acc(&mut grads[a.0], da);
                }
                Op::SumAll(a) => {
                    let da = Array2::from_elem(self.value(*a).dim(), g[[0, 0]]);
                    acc(&mut grads[a.0], da);
                }
                Op::Reshape(a) => {
                    let dim = self.value(*a).dim();
                    let da = g.into_shape_with_order(dim).expect("reshape grad");
                    acc(&mut grads[a.0], da);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let gv = self.value(*gain).row(0).to_owned();
                    let (n, m) = g.dim();
                    let mut dx = Array2::zeros((n, m));
                    let mut dg = Array2::zeros((1, m));
                    let mut db = Array2::zeros((1, m));
                    for i in 0..n {
                        let mut mean_dxhat = 0.0;
                        let mut mean_dxhat_xhat = 0.0;
                        for j in 0..m {
                            let dxh = g[[i, j]] * gv[j];
                            mean_dxhat += dxh;
                            mean_dxhat_xhat += dxh * xhat[[i, j]];
                            dg[[0, j]] += g[[i, j]] * xhat[[i, j]];
                            db[[0, j]] += g[[i, j]];
                        }
                        mean_dxhat /= m as f64;
                        mean_dxhat_xhat /= m as f64;
                        for j in 0..m {
                            let dxh = g[[i, j]] * gv[j];
                            dx[[i, j]] =
                                inv_std[i] * (dxh - mean_dxhat - xhat[[i, j]] * mean_dxhat_xhat);
                        }
                    }
                    acc(&mut grads[x.0], dx);
                    acc(&mut grads[gain.0], dg);
                    acc(&mut grads[bias.0], db);
                }
                Op::SoftmaxRows(a) => {
                    let p = &self.nodes[id].value;
                    let (n, m) = p.dim();
                    let mut da = Array2::zeros((n, m));
                    for i in 0..n {
                        let mut dot = 0.0;
                        for j in 0..m {
                            dot += g[[i, j]] * p[[i, j]];
                        }
                        for j in 0..m {
                            da[[i, j]] = p[[i, j]] * (g[[i, j]] - dot);
                        }
                    }
                    acc(&mut grads[a.0], da);
                }
                Op::GatherLogSoftmax {
                    logits,
                    targets,
                    probs,
                } => {
                    let (n, m) = probs.dim();
                    let mut da = Array2::zeros((n, m));
                    for i in 0..n {
                        let gi = g[[i, 0]];
                        if gi == 0.0 {
                            continue;
                        }
                        for j in 0..m {
                            da[[i, j]] = -gi * probs[[i, j]];
                        }
                        da[[i, targets[i]]] += gi;
                    }
                    acc(&mut grads[logits.0], da);
                }
                Op::KlVsConst {
                    logits,
                    p_old,
                    p_new,
                } => {
                    let scale = g[[0, 0]] / p_old.nrows() as f64;
                    let da = ndarray::Zip::from(p_new)
                        .and(p_old)
                        .map_collect(|&pn, &po| scale * (pn - po));
                    acc(&mut grads[logits.0], da);
                }
            }
        }
        ParamGrads { grads: by_param }
    }
}

/// Shared softmax pieces for one row: exp(v − max) with zeros at masked
/// indices, its sum, and the log-sum-exp `max + ln(sum)`. Every masked
/// softmax in the crate derives from these so that identical logits produce
/// bit-identical probabilities and logs everywhere.
fn masked_exp_parts(row: ArrayView1<f64>, masked: &[usize]) -> (Array1<f64>, f64, f64) {
    let mut max = f64::NEG_INFINITY;
    for (j, &v) in row.iter().enumerate() {
        if !masked.contains(&j) && v > max {
            max = v;
        }
    }
    let mut e = Array1::zeros(row.len());
    let mut sum = 0.0;
    for (j, &v) in row.iter().enumerate() {
        if !masked.contains(&j) {
            let x = (v - max).exp();
            e[j] = x;
            sum += x;
        }
    }
    (e, sum, max + sum.ln())
}

/// Log-sum-exp of a logits row with masked indices excluded.
pub fn masked_lse(row: ArrayView1<f64>, masked: &[usize]) -> f64 {
    masked_exp_parts(row, masked).2
}

/// Masked softmax of a logits row; masked indices get exactly 0.
pub fn masked_softmax(row: ArrayView1<f64>, masked: &[usize]) -> Array1<f64> {
    let (e, sum, _) = masked_exp_parts(row, masked);
    e / sum
}

/// Masked softmax of a logits row together with its log, sharing one
/// exponential pass. Masked indices get probability 0; their log entries are
/// 0 and must not be read.
pub fn masked_log_softmax(
    row: ArrayView1<f64>,
    masked: &[usize],
) -> (Array1<f64>, Array1<f64>) {
    let (e, sum, lse) = masked_exp_parts(row, masked);
    let mut lnp = Array1::zeros(row.len());
    for (j, &v) in row.iter().enumerate() {
        if !masked.contains(&j) {
            lnp[j] = v - lse;
        }
    }
    (e / sum, lnp)
}
