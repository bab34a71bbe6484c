//! Reverse-mode automatic differentiation on a linear tape.
//!
//! A `Graph` owns every intermediate tensor of one computation. Operations
//! append nodes; `backward` walks the tape in reverse and accumulates
//! gradients into every `requires_grad` node. Each graph is confined to one
//! thread; independent graphs (one per training instance or rollout) can run
//! concurrently.
//!
//! The op set is exactly what the toy transformer and its losses need:
//! matmul, elementwise arithmetic, exp/tanh/gelu, softmax and layer norm over
//! the last axis, embedding lookup, reductions, row-wise cosine, MSE,
//! fused causal multi-head attention, log-softmax gather, and the clipped
//! policy-gradient / KL objectives. Numerically sensitive kernels
//! (softmax, log-sum-exp, layer norm) use max-subtraction and an epsilon in
//! the denominator.

use crate::error::{Error, Result};
use crate::tensor::{gemm, gemm_nt, gemm_tn, Tensor};

/// Epsilon inside layer-norm denominators.
pub const LAYERNORM_EPS: f64 = 1e-6;
/// Epsilon guarding zero-norm rows in cosine similarity.
pub const COSINE_EPS: f64 = 1e-8;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
}

enum Op {
    Leaf,
    StopGrad,
    Matmul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Exp(NodeId),
    Tanh(NodeId),
    Gelu(NodeId),
    Softmax(NodeId),
    LayerNorm {
        input: NodeId,
        rstd: Vec<f64>,
    },
    Embedding {
        table: NodeId,
        ids: Vec<usize>,
    },
    AddRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    RowCosineMean {
        a: NodeId,
        b: NodeId,
        na: Vec<f64>,
        nb: Vec<f64>,
        dots: Vec<f64>,
        guarded_a: Vec<bool>,
        guarded_b: Vec<bool>,
    },
    Mse(NodeId, NodeId),
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        probs: Vec<f64>,
    },
    ConcatRows(NodeId, NodeId),
    SliceRows {
        input: NodeId,
        start: usize,
    },
    GatherLogSoftmax {
        logits: NodeId,
        idx: Vec<(usize, usize)>,
        probs: Vec<f64>,
    },
    PgSum {
        actor_lp: NodeId,
        old_lp: Vec<f64>,
        adv: Vec<f64>,
        eps_low: f64,
        eps_high: f64,
        dual_clip: f64,
    },
    KlSum {
        actor_lp: NodeId,
        ref_lp: Vec<f64>,
    },
}

/// Reverse-mode computation tape.
pub struct Graph {
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::with_capacity(256),
        }
    }

    /// Introduce a tensor as a graph leaf.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Introduce a constant (no gradient ever flows into it).
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, false, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, value: Tensor, requires_grad: bool, op: Op, name: &'static str) -> Result<NodeId> {
        value.check_finite(name)?;
        Ok(self.push(value, requires_grad, op))
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn shape_err(&self, op: &'static str, a: NodeId, b: NodeId) -> Error {
        Error::ShapeMismatch {
            op,
            lhs: self.value(a).shape().to_vec(),
            rhs: self.value(b).shape().to_vec(),
        }
    }

    /// Copy of `a` through which no gradient flows.
    pub fn stop_grad(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).clone();
        self.push(value, false, Op::StopGrad)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        self.push_checked(value, rg, Op::Matmul(a, b), "matmul")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(self.shape_err("add", a, b));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.needs(a) || self.needs(b);
        self.push_checked(value, rg, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(self.shape_err("sub", a, b));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.needs(a) || self.needs(b);
        self.push_checked(value, rg, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(self.shape_err("mul", a, b));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.needs(a) || self.needs(b);
        self.push_checked(value, rg, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let va = self.value(a);
        let data = va.data().iter().map(|x| x * c).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.needs(a);
        self.push_checked(value, rg, Op::Scale(a, c), "scale")
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let va = self.value(a);
        let data = va.data().iter().map(|x| x + c).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.needs(a);
        self.push_checked(value, rg, Op::AddScalar(a), "add_scalar")
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        let data = va.data().iter().map(|x| x.exp()).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.needs(a);
        self.push_checked(value, rg, Op::Exp(a), "exp")
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        let data = va.data().iter().map(|x| x.tanh()).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.needs(a);
        self.push_checked(value, rg, Op::Tanh(a), "tanh")
    }

    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| gelu_fwd(x)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.needs(a);
        self.push_checked(value, rg, Op::Gelu(a), "gelu")
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        let cols = va.cols();
        let mut data = va.data().to_vec();
        for row in data.chunks_mut(cols) {
            softmax_in_place(row);
        }
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.needs(a);
        self.push_checked(value, rg, Op::Softmax(a), "softmax")
    }

    /// Layer normalization over the last axis (no affine part).
    pub fn layer_norm(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        let cols = va.cols();
        if cols == 0 {
            return Err(Error::InvalidArgument("layer_norm on empty rows".into()));
        }
        let mut data = va.data().to_vec();
        let mut rstds = Vec::with_capacity(va.rows());
        for row in data.chunks_mut(cols) {
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / cols as f64;
            let rstd = 1.0 / (var + LAYERNORM_EPS).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * rstd;
            }
            rstds.push(rstd);
        }
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.needs(a);
        self.push_checked(value, rg, Op::LayerNorm { input: a, rstd: rstds }, "layer_norm")
    }

    /// Row lookup: `table [V, D]` gathered at `ids` into `[len(ids), D]`.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let vt = self.value(table);
        let (v, d) = (vt.rows(), vt.cols());
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::InvalidArgument(format!(
                    "embedding id {id} out of range for table with {v} rows"
                )));
            }
            data.extend_from_slice(vt.row(id));
        }
        let value = Tensor::new(vec![ids.len(), d], data)?;
        let rg = self.needs(table);
        self.push_checked(
            value,
            rg,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            "embedding",
        )
    }

    /// Broadcast-add a row vector `v [N]` to every row of `a [T, N]`.
    pub fn add_row(&mut self, a: NodeId, v: NodeId) -> Result<NodeId> {
        let (va, vv) = (self.value(a), self.value(v));
        if va.cols() != vv.numel() {
            return Err(self.shape_err("add_row", a, v));
        }
        let cols = va.cols();
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + vv.data()[i % cols])
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.needs(a) || self.needs(v);
        self.push_checked(value, rg, Op::AddRow(a, v), "add_row")
    }

    /// Broadcast-multiply every row of `a [T, N]` by `v [N]`.
    pub fn mul_row(&mut self, a: NodeId, v: NodeId) -> Result<NodeId> {
        let (va, vv) = (self.value(a), self.value(v));
        if va.cols() != vv.numel() {
            return Err(self.shape_err("mul_row", a, v));
        }
        let cols = va.cols();
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x * vv.data()[i % cols])
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.needs(a) || self.needs(v);
        self.push_checked(value, rg, Op::MulRow(a, v), "mul_row")
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        let s: f64 = self.value(a).data().iter().sum();
        let rg = self.needs(a);
        self.push_checked(Tensor::scalar(s), rg, Op::SumAll(a), "sum_all")
    }

    pub fn mean_all(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        if va.numel() == 0 {
            return Err(Error::InvalidArgument("mean_all on empty tensor".into()));
        }
        let s: f64 = va.data().iter().sum::<f64>() / va.numel() as f64;
        let rg = self.needs(a);
        self.push_checked(Tensor::scalar(s), rg, Op::MeanAll(a), "mean_all")
    }

    /// Mean over rows of the cosine similarity between matching rows of
    /// `a` and `b`. Zero-norm rows fall back to an epsilon-guarded
    /// denominator and are logged.
    pub fn row_cosine_mean(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(self.shape_err("row_cosine_mean", a, b));
        }
        let rows = va.rows();
        if rows == 0 {
            return Err(Error::InvalidArgument("row_cosine_mean on empty tensor".into()));
        }
        let mut na = Vec::with_capacity(rows);
        let mut nb = Vec::with_capacity(rows);
        let mut dots = Vec::with_capacity(rows);
        let mut guarded_a = Vec::with_capacity(rows);
        let mut guarded_b = Vec::with_capacity(rows);
        let mut acc = 0.0;
        for r in 0..rows {
            let (ra, rb) = (va.row(r), vb.row(r));
            let dot: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
            let norm_a = ra.iter().map(|x| x * x).sum::<f64>().sqrt();
            let norm_b = rb.iter().map(|x| x * x).sum::<f64>().sqrt();
            let ga = norm_a < COSINE_EPS;
            let gb = norm_b < COSINE_EPS;
            if ga || gb {
                log::warn!("row_cosine_mean: zero-norm row {r} guarded with eps {COSINE_EPS}");
            }
            let da = norm_a.max(COSINE_EPS);
            let db = norm_b.max(COSINE_EPS);
            acc += dot / (da * db);
            na.push(da);
            nb.push(db);
            dots.push(dot);
            guarded_a.push(ga);
            guarded_b.push(gb);
        }
        let rg = self.needs(a) || self.needs(b);
        self.push_checked(
            Tensor::scalar(acc / rows as f64),
            rg,
            Op::RowCosineMean {
                a,
                b,
                na,
                nb,
                dots,
                guarded_a,
                guarded_b,
            },
            "row_cosine_mean",
        )
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(self.shape_err("mse", a, b));
        }
        if va.numel() == 0 {
            return Err(Error::InvalidArgument("mse on empty tensor".into()));
        }
        let s: f64 = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / va.numel() as f64;
        let rg = self.needs(a) || self.needs(b);
        self.push_checked(Tensor::scalar(s), rg, Op::Mse(a, b), "mse")
    }

    /// Fused causal multi-head self-attention.
    ///
    /// `q`, `k`, `v` are `[T, D]` with `D % heads == 0`; scores are scaled by
    /// `1/sqrt(D/heads)` and masked so position `i` attends to `j <= i`.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize) -> Result<NodeId> {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        if vq.shape() != vk.shape() || vq.shape() != vv.shape() {
            return Err(self.shape_err("attention", q, k));
        }
        let t = vq.rows();
        let d = vq.cols();
        if heads == 0 || d % heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "attention: width {d} not divisible by {heads} heads"
            )));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; heads * t * t];
        let mut out = vec![0.0; t * d];
        let mut qh = vec![0.0; t * dh];
        let mut kh = vec![0.0; t * dh];
        let mut vh = vec![0.0; t * dh];
        let mut scores = vec![0.0; t * t];
        let mut oh = vec![0.0; t * dh];
        for h in 0..heads {
            copy_head(vq.data(), &mut qh, t, d, h, dh);
            copy_head(vk.data(), &mut kh, t, d, h, dh);
            copy_head(vv.data(), &mut vh, t, d, h, dh);
            gemm_nt(t, dh, t, scale, &qh, &kh, 0.0, &mut scores);
            for i in 0..t {
                let row = &mut scores[i * t..(i + 1) * t];
                softmax_in_place(&mut row[..=i]);
                for x in row[i + 1..].iter_mut() {
                    *x = 0.0;
                }
            }
            probs[h * t * t..(h + 1) * t * t].copy_from_slice(&scores);
            gemm(t, t, dh, 1.0, &scores, &vh, 0.0, &mut oh);
            scatter_head(&oh, &mut out, t, d, h, dh);
        }
        let value = Tensor::new(vec![t, d], out)?;
        let rg = self.needs(q) || self.needs(k) || self.needs(v);
        self.push_checked(value, rg, Op::Attention { q, k, v, heads, probs }, "attention")
    }

    /// Stack the rows of `a` above the rows of `b`.
    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.cols() {
            return Err(self.shape_err("concat_rows", a, b));
        }
        let cols = va.cols();
        let mut data = Vec::with_capacity(va.numel() + vb.numel());
        data.extend_from_slice(va.data());
        data.extend_from_slice(vb.data());
        let value = Tensor::new(vec![va.rows() + vb.rows(), cols], data)?;
        let rg = self.needs(a) || self.needs(b);
        self.push_checked(value, rg, Op::ConcatRows(a, b), "concat_rows")
    }

    /// Rows `start..start+len` of a 2-D tensor.
    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let va = self.value(a);
        let cols = va.cols();
        if start + len > va.rows() {
            return Err(Error::InvalidArgument(format!(
                "slice_rows {start}..{} out of range for {} rows",
                start + len,
                va.rows()
            )));
        }
        let data = va.data()[start * cols..(start + len) * cols].to_vec();
        let value = Tensor::new(vec![len, cols], data)?;
        let rg = self.needs(a);
        self.push_checked(value, rg, Op::SliceRows { input: a, start }, "slice_rows")
    }

    /// `log_softmax(logits)[row, col]` for each `(row, col)` pair, as a
    /// 1-D tensor. This is the shared primitive behind cross-entropy and
    /// policy log-probabilities.
    pub fn gather_log_softmax(&mut self, logits: NodeId, idx: &[(usize, usize)]) -> Result<NodeId> {
        let vl = self.value(logits);
        let (rows, cols) = (vl.rows(), vl.cols());
        let mut out = Vec::with_capacity(idx.len());
        let mut probs = Vec::with_capacity(idx.len() * cols);
        for &(r, c) in idx {
            if r >= rows || c >= cols {
                return Err(Error::InvalidArgument(format!(
                    "gather_log_softmax index ({r},{c}) out of range for [{rows},{cols}]"
                )));
            }
            let row = vl.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            out.push(row[c] - lse);
            probs.extend(row.iter().map(|x| (x - lse).exp()));
        }
        let value = Tensor::new(vec![idx.len()], out)?;
        let rg = self.needs(logits);
        self.push_checked(
            value,
            rg,
            Op::GatherLogSoftmax {
                logits,
                idx: idx.to_vec(),
                probs,
            },
            "gather_log_softmax",
        )
    }

    /// Sum over tokens of the dual-clipped policy-gradient surrogate.
    ///
    /// `actor_lp` holds per-token log-probabilities under the current
    /// policy; `old_lp` and `adv` are constants captured at rollout time.
    pub fn pg_sum(
        &mut self,
        actor_lp: NodeId,
        old_lp: &[f64],
        adv: &[f64],
        eps_low: f64,
        eps_high: f64,
        dual_clip: f64,
    ) -> Result<NodeId> {
        let va = self.value(actor_lp);
        if va.numel() != old_lp.len() || va.numel() != adv.len() {
            return Err(Error::InvalidArgument(format!(
                "pg_sum: {} log-probs vs {} old / {} advantages",
                va.numel(),
                old_lp.len(),
                adv.len()
            )));
        }
        if dual_clip <= 1.0 + eps_high {
            return Err(Error::InvalidArgument(format!(
                "pg_sum: dual clip {dual_clip} must exceed 1 + eps_high = {}",
                1.0 + eps_high
            )));
        }
        let mut total = 0.0;
        for (i, alp) in va.data().iter().enumerate() {
            let ratio = (alp - old_lp[i]).exp();
            let (value, _) = pg_token_value_and_slope(ratio, adv[i], eps_low, eps_high, dual_clip);
            total += value;
        }
        let rg = self.needs(actor_lp);
        self.push_checked(
            Tensor::scalar(total),
            rg,
            Op::PgSum {
                actor_lp,
                old_lp: old_lp.to_vec(),
                adv: adv.to_vec(),
                eps_low,
                eps_high,
                dual_clip,
            },
            "pg_sum",
        )
    }

    /// Sum over tokens of the non-negative KL estimator
    /// `exp(d) - d - 1` with `d = ref_lp - actor_lp`.
    pub fn kl_sum(&mut self, actor_lp: NodeId, ref_lp: &[f64]) -> Result<NodeId> {
        let va = self.value(actor_lp);
        if va.numel() != ref_lp.len() {
            return Err(Error::InvalidArgument(format!(
                "kl_sum: {} log-probs vs {} reference",
                va.numel(),
                ref_lp.len()
            )));
        }
        let mut total = 0.0;
        for (i, alp) in va.data().iter().enumerate() {
            let d = ref_lp[i] - alp;
            total += d.exp() - d - 1.0;
        }
        let rg = self.needs(actor_lp);
        self.push_checked(
            Tensor::scalar(total),
            rg,
            Op::KlSum {
                actor_lp,
                ref_lp: ref_lp.to_vec(),
            },
            "kl_sum",
        )
    }

    /// Reverse pass from a scalar `loss`. Gradients accumulate into every
    /// `requires_grad` node; calling twice without `zero_grads` doubles them.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let n = self.nodes.len();
        let mut local: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        local[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                local[i] = None;
                continue;
            }
            let Some(g) = local[i].take() else { continue };
            self.propagate(i, &g, &mut local)?;
            let node = &mut self.nodes[i];
            match node.grad.as_mut() {
                Some(acc) => {
                    for (dst, src) in acc.data_mut().iter_mut().zip(g.data()) {
                        *dst += src;
                    }
                }
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor, local: &mut [Option<Tensor>]) -> Result<()> {
        let add_to = |local: &mut [Option<Tensor>], id: NodeId, contrib: Tensor| {
            match local[id.0].as_mut() {
                Some(acc) => {
                    for (dst, src) in acc.data_mut().iter_mut().zip(contrib.data()) {
                        *dst += src;
                    }
                }
                None => local[id.0] = Some(contrib),
            }
        };
        match &self.nodes[i].op {
            Op::Leaf | Op::StopGrad => {}
            Op::Matmul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = (va.rows(), va.cols());
                let n = vb.cols();
                if self.needs(*a) {
                    let mut da = Tensor::zeros(&[m, k]);
                    gemm_nt(m, n, k, 1.0, g.data(), vb.data(), 0.0, da.data_mut());
                    add_to(local, *a, da.reshaped(va.shape().to_vec())?);
                }
                if self.needs(*b) {
                    let mut db = Tensor::zeros(&[k, n]);
                    gemm_tn(k, m, n, 1.0, va.data(), g.data(), 0.0, db.data_mut());
                    add_to(local, *b, db.reshaped(vb.shape().to_vec())?);
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    add_to(local, *a, g.clone());
                }
                if self.needs(*b) {
                    add_to(local, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    add_to(local, *a, g.clone());
                }
                if self.needs(*b) {
                    let data = g.data().iter().map(|x| -x).collect();
                    add_to(local, *b, Tensor::new(g.shape().to_vec(), data)?);
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let d = g
                        .data()
                        .iter()
                        .zip(self.value(*b).data())
                        .map(|(x, y)| x * y)
                        .collect();
                    add_to(local, *a, Tensor::new(g.shape().to_vec(), d)?);
                }
                if self.needs(*b) {
                    let d = g
                        .data()
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(x, y)| x * y)
                        .collect();
                    add_to(local, *b, Tensor::new(g.shape().to_vec(), d)?);
                }
            }
            Op::Scale(a, c) => {
                if self.needs(*a) {
                    let d = g.data().iter().map(|x| x * c).collect();
                    add_to(local, *a, Tensor::new(g.shape().to_vec(), d)?);
                }
            }
            Op::AddScalar(a) => {
                if self.needs(*a) {
                    add_to(local, *a, g.clone());
                }
            }
            Op::Exp(a) => {
                if self.needs(*a) {
                    let d = g
                        .data()
                        .iter()
                        .zip(self.nodes[i].value.data())
                        .map(|(x, y)| x * y)
                        .collect();
                    add_to(local, *a, Tensor::new(g.shape().to_vec(), d)?);
                }
            }
            Op::Tanh(a) => {
                if self.needs(*a) {
                    let d = g
                        .data()
                        .iter()
                        .zip(self.nodes[i].value.data())
                        .map(|(x, y)| x * (1.0 - y * y))
                        .collect();
                    add_to(local, *a, Tensor::new(g.shape().to_vec(), d)?);
                }
            }
            Op::Gelu(a) => {
                if self.needs(*a) {
                    let d = g
                        .data()
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(gv, &x)| gv * gelu_bwd(x))
                        .collect();
                    add_to(local, *a, Tensor::new(g.shape().to_vec(), d)?);
                }
            }
            Op::Softmax(a) => {
                if self.needs(*a) {
                    let y = self.nodes[i].value.data();
                    let cols = self.nodes[i].value.cols();
                    let mut d = vec![0.0; y.len()];
                    for (r, chunk) in y.chunks(cols).enumerate() {
                        let grow = &g.data()[r * cols..(r + 1) * cols];
                        let dot: f64 = grow.iter().zip(chunk).map(|(x, y)| x * y).sum();
                        for c in 0..cols {
                            d[r * cols + c] = chunk[c] * (grow[c] - dot);
                        }
                    }
                    add_to(local, *a, Tensor::new(g.shape().to_vec(), d)?);
                }
            }
            Op::LayerNorm { input, rstd } => {
                if self.needs(*input) {
                    let y = self.nodes[i].value.data();
                    let cols = self.nodes[i].value.cols();
                    let mut d = vec![0.0; y.len()];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g.data()[r * cols..(r + 1) * cols];
                        let mg = gr.iter().sum::<f64>() / cols as f64;
                        let mgy = gr.iter().zip(yr).map(|(x, y)| x * y).sum::<f64>() / cols as f64;
                        for c in 0..cols {
                            d[r * cols + c] = rs * (gr[c] - mg - yr[c] * mgy);
                        }
                    }
                    add_to(local, *input, Tensor::new(g.shape().to_vec(), d)?);
                }
            }
            Op::Embedding { table, ids } => {
                if self.needs(*table) {
                    let vt = self.value(*table);
                    let d = vt.cols();
                    let mut dt = Tensor::zeros(&[vt.rows(), d]);
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut dt.data_mut()[id * d..(id + 1) * d];
                        let src = &g.data()[r * d..(r + 1) * d];
                        for (x, y) in dst.iter_mut().zip(src) {
                            *x += y;
                        }
                    }
                    add_to(local, *table, dt);
                }
            }
            Op::AddRow(a, v) => {
                if self.needs(*a) {
                    add_to(local, *a, g.clone());
                }
                if self.needs(*v) {
                    let cols = self.value(*v).numel();
                    let mut d = vec![0.0; cols];
                    for (i, x) in g.data().iter().enumerate() {
                        d[i % cols] += x;
                    }
                    add_to(local, *v, Tensor::new(self.value(*v).shape().to_vec(), d)?);
                }
            }
            Op::MulRow(a, v) => {
                let cols = self.value(*v).numel();
                if self.needs(*a) {
                    let vv = self.value(*v).data();
                    let d = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, x)| x * vv[i % cols])
                        .collect();
                    add_to(local, *a, Tensor::new(g.shape().to_vec(), d)?);
                }
                if self.needs(*v) {
                    let va = self.value(*a).data();
                    let mut d = vec![0.0; cols];
                    for (i, x) in g.data().iter().enumerate() {
                        d[i % cols] += x * va[i];
                    }
                    add_to(local, *v, Tensor::new(self.value(*v).shape().to_vec(), d)?);
                }
            }
            Op::SumAll(a) => {
                if self.needs(*a) {
                    let va = self.value(*a);
                    add_to(local, *a, Tensor::full(va.shape(), g.item()));
                }
            }
            Op::MeanAll(a) => {
                if self.needs(*a) {
                    let va = self.value(*a);
                    add_to(local, *a, Tensor::full(va.shape(), g.item() / va.numel() as f64));
                }
            }
            Op::RowCosineMean {
                a,
                b,
                na,
                nb,
                dots,
                guarded_a,
                guarded_b,
            } => {
                let rows = na.len();
                let scale = g.item() / rows as f64;
                let (va, vb) = (self.value(*a), self.value(*b));
                let cols = va.cols();
                if self.needs(*a) {
                    let mut d = vec![0.0; va.numel()];
                    for r in 0..rows {
                        let (ra, rb) = (va.row(r), vb.row(r));
                        let denom = na[r] * nb[r];
                        for c in 0..cols {
                            let mut grad = rb[c] / denom;
                            if !guarded_a[r] {
                                grad -= dots[r] * ra[c] / (na[r] * na[r] * denom);
                            }
                            d[r * cols + c] = scale * grad;
                        }
                    }
                    add_to(local, *a, Tensor::new(va.shape().to_vec(), d)?);
                }
                if self.needs(*b) {
                    let mut d = vec![0.0; vb.numel()];
                    for r in 0..rows {
                        let (ra, rb) = (va.row(r), vb.row(r));
                        let denom = na[r] * nb[r];
                        for c in 0..cols {
                            let mut grad = ra[c] / denom;
                            if !guarded_b[r] {
                                grad -= dots[r] * rb[c] / (nb[r] * nb[r] * denom);
                            }
                            d[r * cols + c] = scale * grad;
                        }
                    }
                    add_to(local, *b, Tensor::new(vb.shape().to_vec(), d)?);
                }
            }
            Op::Mse(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let scale = 2.0 * g.item() / va.numel() as f64;
                if self.needs(*a) {
                    let d = va
                        .data()
                        .iter()
                        .zip(vb.data())
                        .map(|(x, y)| scale * (x - y))
                        .collect();
                    add_to(local, *a, Tensor::new(va.shape().to_vec(), d)?);
                }
                if self.needs(*b) {
                    let d = va
                        .data()
                        .iter()
                        .zip(vb.data())
                        .map(|(x, y)| -scale * (x - y))
                        .collect();
                    add_to(local, *b, Tensor::new(vb.shape().to_vec(), d)?);
                }
            }
            Op::Attention { q, k, v, heads, probs } => {
                let (vq, vk, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let t = vq.rows();
                let d = vq.cols();
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = vec![0.0; t * d];
                let mut dk = vec![0.0; t * d];
                let mut dv = vec![0.0; t * d];
                let mut qh = vec![0.0; t * dh];
                let mut kh = vec![0.0; t * dh];
                let mut vh = vec![0.0; t * dh];
                let mut goh = vec![0.0; t * dh];
                let mut dp = vec![0.0; t * t];
                let mut ds = vec![0.0; t * t];
                let mut dqh = vec![0.0; t * dh];
                let mut dkh = vec![0.0; t * dh];
                let mut dvh = vec![0.0; t * dh];
                for h in 0..*heads {
                    let p = &probs[h * t * t..(h + 1) * t * t];
                    copy_head(vq.data(), &mut qh, t, d, h, dh);
                    copy_head(vk.data(), &mut kh, t, d, h, dh);
                    copy_head(vv.data(), &mut vh, t, d, h, dh);
                    copy_head(g.data(), &mut goh, t, d, h, dh);
                    // dV = P^T dO
                    gemm_tn(t, t, dh, 1.0, p, &goh, 0.0, &mut dvh);
                    // dP = dO V^T
                    gemm_nt(t, dh, t, 1.0, &goh, &vh, 0.0, &mut dp);
                    // dS = P * (dP - rowsum(dP * P))
                    for i2 in 0..t {
                        let prow = &p[i2 * t..(i2 + 1) * t];
                        let dprow = &dp[i2 * t..(i2 + 1) * t];
                        let dot: f64 = prow.iter().zip(dprow).map(|(x, y)| x * y).sum();
                        for j in 0..t {
                            ds[i2 * t + j] = prow[j] * (dprow[j] - dot);
                        }
                    }
                    // dQ = scale * dS K ; dK = scale * dS^T Q
                    gemm(t, t, dh, scale, &ds, &kh, 0.0, &mut dqh);
                    gemm_tn(t, t, dh, scale, &ds, &qh, 0.0, &mut dkh);
                    accumulate_head(&dqh, &mut dq, t, d, h, dh);
                    accumulate_head(&dkh, &mut dk, t, d, h, dh);
                    accumulate_head(&dvh, &mut dv, t, d, h, dh);
                }
                if self.needs(*q) {
                    add_to(local, *q, Tensor::new(vec![t, d], dq)?);
                }
                if self.needs(*k) {
                    add_to(local, *k, Tensor::new(vec![t, d], dk)?);
                }
                if self.needs(*v) {
                    add_to(local, *v, Tensor::new(vec![t, d], dv)?);
                }
            }
            Op::ConcatRows(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let cols = va.cols();
                if self.needs(*a) {
                    let d = g.data()[..va.rows() * cols].to_vec();
                    add_to(local, *a, Tensor::new(va.shape().to_vec(), d)?);
                }
                if self.needs(*b) {
                    let d = g.data()[va.rows() * cols..].to_vec();
                    add_to(local, *b, Tensor::new(vb.shape().to_vec(), d)?);
                }
            }
            Op::SliceRows { input, start } => {
                if self.needs(*input) {
                    let vi = self.value(*input);
                    let cols = vi.cols();
                    let mut d = Tensor::zeros(&[vi.rows(), cols]);
                    d.data_mut()[start * cols..start * cols + g.numel()].copy_from_slice(g.data());
                    add_to(local, *input, d.reshaped(vi.shape().to_vec())?);
                }
            }
            Op::GatherLogSoftmax { logits, idx, probs } => {
                if self.needs(*logits) {
                    let vl = self.value(*logits);
                    let cols = vl.cols();
                    let mut d = vec![0.0; vl.numel()];
                    for (e, &(r, c)) in idx.iter().enumerate() {
                        let ge = g.data()[e];
                        let p = &probs[e * cols..(e + 1) * cols];
                        let drow = &mut d[r * cols..(r + 1) * cols];
                        for j in 0..cols {
                            drow[j] -= ge * p[j];
                        }
                        drow[c] += ge;
                    }
                    add_to(local, *logits, Tensor::new(vl.shape().to_vec(), d)?);
                }
            }
            Op::PgSum {
                actor_lp,
                old_lp,
                adv,
                eps_low,
                eps_high,
                dual_clip,
            } => {
                if self.needs(*actor_lp) {
                    let va = self.value(*actor_lp);
                    let ge = g.item();
                    let d = va
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(t, alp)| {
                            let ratio = (alp - old_lp[t]).exp();
                            let (_, slope) =
                                pg_token_value_and_slope(ratio, adv[t], *eps_low, *eps_high, *dual_clip);
                            // chain rule through ratio = exp(actor - old)
                            ge * slope * ratio
                        })
                        .collect();
                    add_to(local, *actor_lp, Tensor::new(va.shape().to_vec(), d)?);
                }
            }
            Op::KlSum { actor_lp, ref_lp } => {
                if self.needs(*actor_lp) {
                    let va = self.value(*actor_lp);
                    let ge = g.item();
                    let d = va
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(t, alp)| {
                            let delta = ref_lp[t] - alp;
                            ge * (1.0 - delta.exp())
                        })
                        .collect();
                    add_to(local, *actor_lp, Tensor::new(va.shape().to_vec(), d)?);
                }
            }
        }
        Ok(())
    }
}

/// Per-token dual-clipped surrogate: returns the loss value and its
/// derivative with respect to the ratio.
fn pg_token_value_and_slope(ratio: f64, adv: f64, eps_low: f64, eps_high: f64, dual_clip: f64) -> (f64, f64) {
    let lo = 1.0 - eps_low;
    let hi = 1.0 + eps_high;
    let clipped = ratio.clamp(lo, hi);
    let in_window = ratio >= lo && ratio <= hi;
    let v_unclipped = -ratio * adv;
    let v_clipped = -clipped * adv;
    let d_unclipped = -adv;
    let d_clipped = if in_window { -adv } else { 0.0 };
    let (inner, d_inner) = if v_unclipped >= v_clipped {
        (v_unclipped, d_unclipped)
    } else {
        (v_clipped, d_clipped)
    };
    if adv >= 0.0 {
        (inner, d_inner)
    } else {
        let cap = -dual_clip * adv;
        if inner <= cap {
            (inner, d_inner)
        } else {
            (cap, 0.0)
        }
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

pub(crate) fn gelu_fwd(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_bwd(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn copy_head(src: &[f64], dst: &mut [f64], t: usize, d: usize, h: usize, dh: usize) {
    for i in 0..t {
        dst[i * dh..(i + 1) * dh].copy_from_slice(&src[i * d + h * dh..i * d + (h + 1) * dh]);
    }
}

fn scatter_head(src: &[f64], dst: &mut [f64], t: usize, d: usize, h: usize, dh: usize) {
    for i in 0..t {
        dst[i * d + h * dh..i * d + (h + 1) * dh].copy_from_slice(&src[i * dh..(i + 1) * dh]);
    }
}

fn accumulate_head(src: &[f64], dst: &mut [f64], t: usize, d: usize, h: usize, dh: usize) {
    for i in 0..t {
        for c in 0..dh {
            dst[i * d + h * dh + c] += src[i * dh + c];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_symmetry() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
        let y = g.softmax(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, -5.0, 0.0, 5.0]).unwrap());
        let y = g.softmax(x).unwrap();
        for r in 0..2 {
            let s: f64 = g.value(y).row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layernorm_rows_are_centered() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2, 4], vec![1.0, 2.0, 3.0, 4.0, -1.0, 5.0, 2.0, 0.0]).unwrap());
        let y = g.layer_norm(x).unwrap();
        for r in 0..2 {
            let m: f64 = g.value(y).row(r).iter().sum::<f64>() / 4.0;
            assert!(m.abs() < 1e-10);
        }
    }

    #[test]
    fn cosine_of_identical_rows_is_one() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::new(vec![1, 3], vec![0.3, -1.2, 2.0]).unwrap());
        let c = g.row_cosine_mean(a, a).unwrap();
        assert!((g.value(c).item() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mse_hand_case() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let b = g.constant(Tensor::new(vec![2], vec![1.0, 4.0]).unwrap());
        let m = g.mse(a, b).unwrap();
        assert_eq!(g.value(m).item(), 2.0);
    }

    #[test]
    fn backward_square() {
        // loss = x . x at x = 3 -> grad 6
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0), true);
        let y = g.mul(x, x).unwrap();
        let loss = g.sum_all(y).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 6.0);
    }

    #[test]
    fn backward_matmul_sum() {
        // loss = sum(W x): grad of W is broadcast of x
        let mut g = Graph::new();
        let w = g.leaf(Tensor::new(vec![2, 3], vec![0.1; 6]).unwrap(), true);
        let x = g.constant(Tensor::new(vec![3, 1], vec![1.0, 2.0, 3.0]).unwrap());
        let y = g.matmul(w, x).unwrap();
        let loss = g.sum_all(y).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap().data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), true);
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn backward_accumulates_across_calls() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0), true);
        let y = g.mul(x, x).unwrap();
        let loss = g.sum_all(y).unwrap();
        g.backward(loss).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 12.0);
    }

    #[test]
    fn stop_grad_blocks_flow() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(2.0), true);
        let d = g.stop_grad(x);
        let y = g.mul(d, d).unwrap();
        let loss = g.sum_all(y).unwrap();
        g.backward(loss).unwrap();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn shape_mismatch_names_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[3, 3]));
        let err = g.add(a, b).unwrap_err();
        assert!(err.to_string().contains("[2, 3]"));
        assert!(err.to_string().contains("[3, 3]"));
    }

    #[test]
    fn attention_is_causal() {
        // perturb a later position; earlier outputs must not change
        let mut g = Graph::new();
        let base = Tensor::new(vec![3, 4], (0..12).map(|i| (i as f64) * 0.1).collect()).unwrap();
        let q = g.constant(base.clone());
        let k = g.constant(base.clone());
        let v = g.constant(base.clone());
        let o1 = g.attention(q, k, v, 2).unwrap();
        let first_rows: Vec<f64> = g.value(o1).data()[..8].to_vec();

        let mut perturbed = base.clone();
        perturbed.data_mut()[8] += 1.0; // position 2
        let mut g2 = Graph::new();
        let q2 = g2.constant(perturbed.clone());
        let k2 = g2.constant(perturbed.clone());
        let v2 = g2.constant(perturbed);
        let o2 = g2.attention(q2, k2, v2, 2).unwrap();
        assert_eq!(&g2.value(o2).data()[..8], first_rows.as_slice());
    }

    #[test]
    fn gather_log_softmax_matches_direct() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 0.0, 0.0, 0.0]).unwrap());
        let lp = g.gather_log_softmax(logits, &[(0, 2), (1, 0)]).unwrap();
        let z: f64 = (1.0f64.exp() + 2.0f64.exp() + 3.0f64.exp()).ln();
        assert!((g.value(lp).data()[0] - (3.0 - z)).abs() < 1e-12);
        assert!((g.value(lp).data()[1] - (0.0f64 - 3.0f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn kl_sum_zero_for_identical_policies() {
        let mut g = Graph::new();
        let lp = g.leaf(Tensor::new(vec![3], vec![-0.5, -1.0, -2.0]).unwrap(), true);
        let kl = g.kl_sum(lp, &[-0.5, -1.0, -2.0]).unwrap();
        assert_eq!(g.value(kl).item(), 0.0);
    }

    #[test]
    fn pg_sum_hand_cases() {
        // ratio 1, A=1 -> -1 ; ratio 2, A=1 -> -1.3 ; ratio 5, A=-1 -> 3
        let mut g = Graph::new();
        let old = [0.0, 0.0, 0.0];
        let actor = g.leaf(
            Tensor::new(vec![3], vec![0.0, 2.0f64.ln(), 5.0f64.ln()]).unwrap(),
            true,
        );
        let adv = [1.0, 1.0, -1.0];
        let s = g.pg_sum(actor, &old, &adv, 0.2, 0.3, 3.0).unwrap();
        assert!((g.value(s).item() - (-1.0 - 1.3 + 3.0)).abs() < 1e-12);
    }

    #[test]
    fn exp_overflow_rejected() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::new(vec![1], vec![1000.0]).unwrap());
        assert!(matches!(g.exp(a), Err(Error::NonFinite { .. })));
    }
}
