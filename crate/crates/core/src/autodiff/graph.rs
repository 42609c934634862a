//! Reverse-mode differentiation over a per-batch computation graph.
//!
//! Nodes live in an arena; every op's parents have smaller indices, so the
//! graph is acyclic by construction and the backward pass is a single
//! reverse sweep. Gradients are allocated lazily: nodes that do not lie on
//! a path to the root never get one.

use std::ops::Range;
use std::sync::Arc;

use thiserror::Error;

use super::tensor::{
    add_row_inplace, dgemm_strided, layer_norm_rows, log_softmax_rows_inplace, matmul,
    sigmoid_inplace, softmax_rows_inplace, tanh_inplace, Tensor, LAYER_NORM_EPS,
};

#[derive(Debug, Error, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("backward root must be a scalar, got {rows}x{cols}")]
    NonScalarRoot { rows: usize, cols: usize },
    #[error("non-finite gradient for parameter `{name}`")]
    NonFiniteGradient { name: String },
    #[error("backward already ran on this graph")]
    BackwardTwice,
}

fn shape_err(op: &'static str, detail: String) -> AutodiffError {
    AutodiffError::ShapeMismatch { op, detail }
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Boolean fill pattern for [`Graph::masked_fill`]. Rows tile: entry
/// `(r % rows, c)` applies to row `r` of the operand.
#[derive(Debug, Clone)]
pub struct Mask {
    rows: usize,
    cols: usize,
    blocked: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, blocked: Vec<bool>) -> Self {
        assert_eq!(blocked.len(), rows * cols);
        Self { rows, cols, blocked }
    }

    /// Causal mask over `t` positions: entry `(r, c)` is blocked when
    /// `c > r`, so each position sees itself and everything before it.
    pub fn causal(t: usize) -> Self {
        let mut blocked = vec![false; t * t];
        for r in 0..t {
            for c in r + 1..t {
                blocked[r * t + c] = true;
            }
        }
        Self {
            rows: t,
            cols: t,
            blocked,
        }
    }

    #[inline]
    fn is_blocked(&self, r: usize, c: usize) -> bool {
        self.blocked[(r % self.rows) * self.cols + c]
    }
}

/// Pointwise activation fused into [`Graph::linear`] and
/// [`Graph::linear2`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Tanh,
    Sigmoid,
}

impl Activation {
    fn apply(&self, data: &mut [f64]) {
        match self {
            Activation::Identity => {}
            Activation::Tanh => tanh_inplace(data),
            Activation::Sigmoid => sigmoid_inplace(data),
        }
    }

    /// Derivative expressed through the activation output.
    #[inline]
    fn derivative_from_output(&self, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul(NodeId, NodeId),
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        act: Activation,
    },
    Linear2 {
        x1: NodeId,
        w1: NodeId,
        x2: NodeId,
        w2: NodeId,
        b: NodeId,
        act: Activation,
    },
    CausalAttention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        seq_len: usize,
        scale: f64,
        probs: Tensor,
    },
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    AddTiledRows(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Hadamard(NodeId, NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Log(NodeId),
    SoftmaxRows(NodeId),
    LogSoftmaxRows(NodeId),
    MaskedFill { x: NodeId, mask: Arc<Mask> },
    ConcatCols(NodeId, NodeId),
    SliceCols { x: NodeId, range: Range<usize> },
    Embedding { table: NodeId, ids: Arc<Vec<usize>> },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId },
    AttnScores { q: NodeId, k: NodeId, heads: usize, seq_len: usize, scale: f64 },
    AttnApply { probs: NodeId, v: NodeId, heads: usize, seq_len: usize },
    Pick { x: NodeId, ids: Arc<Vec<usize>> },
    SumGroups { x: NodeId, group: usize },
    MeanAll(NodeId),
    DotConst { x: NodeId, weights: Arc<Vec<f64>> },
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
}

/// Dynamic computation graph, rebuilt per batch.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Insert an input or parameter value.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    fn same_shape(
        &self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
    ) -> Result<(usize, usize), AutodiffError> {
        let (ar, ac) = self.value(a).shape();
        let (br, bc) = self.value(b).shape();
        if (ar, ac) != (br, bc) {
            return Err(shape_err(op, format!("{ar}x{ac} vs {br}x{bc}")));
        }
        Ok((ar, ac))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let (ar, ac) = self.value(a).shape();
        let (br, bc) = self.value(b).shape();
        if ac != br {
            return Err(shape_err("matmul", format!("{ar}x{ac} . {br}x{bc}")));
        }
        let value = matmul(self.value(a), self.value(b));
        Ok(self.push(value, Op::Matmul(a, b)))
    }

    /// Fused `act(x . w + bias)` with `bias` shaped `(1, out)`.
    pub fn linear(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        act: Activation,
    ) -> Result<NodeId, AutodiffError> {
        let (xr, xc) = self.value(x).shape();
        let (wr, wc) = self.value(w).shape();
        let (br, bc) = self.value(b).shape();
        if xc != wr || br != 1 || bc != wc {
            return Err(shape_err(
                "linear",
                format!("{xr}x{xc} . {wr}x{wc} + {br}x{bc}"),
            ));
        }
        let mut value = matmul(self.value(x), self.value(w));
        add_row_inplace(value.data_mut(), wc, self.value(b).data());
        act.apply(value.data_mut());
        Ok(self.push(value, Op::Linear { x, w, b, act }))
    }

    /// Fused `act(x1 . w1 + x2 . w2 + bias)`, the shape of a gated
    /// recurrent cell's gate computation.
    pub fn linear2(
        &mut self,
        x1: NodeId,
        w1: NodeId,
        x2: NodeId,
        w2: NodeId,
        b: NodeId,
        act: Activation,
    ) -> Result<NodeId, AutodiffError> {
        let (x1r, x1c) = self.value(x1).shape();
        let (w1r, w1c) = self.value(w1).shape();
        let (x2r, x2c) = self.value(x2).shape();
        let (w2r, w2c) = self.value(w2).shape();
        let (br, bc) = self.value(b).shape();
        if x1c != w1r || x2c != w2r || w1c != w2c || x1r != x2r || br != 1 || bc != w1c {
            return Err(shape_err(
                "linear2",
                format!("{x1r}x{x1c}.{w1r}x{w1c} + {x2r}x{x2c}.{w2r}x{w2c} + {br}x{bc}"),
            ));
        }
        let mut value = matmul(self.value(x1), self.value(w1));
        dgemm_strided(
            x2r, x2c, w2c, 1.0, self.value(x2).data(), 0, x2c, 1, self.value(w2).data(), 0,
            w2c, 1, 1.0, value.data_mut(), 0, w2c, 1,
        );
        add_row_inplace(value.data_mut(), w1c, self.value(b).data());
        act.apply(value.data_mut());
        Ok(self.push(value, Op::Linear2 { x1, w1, x2, w2, b, act }))
    }

    /// Fused causally-masked scaled-dot-product attention: scores, causal
    /// mask, row softmax, and value mixing in one op. The attention
    /// probabilities are retained for the backward pass.
    pub fn causal_attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        seq_len: usize,
        scale: f64,
    ) -> Result<NodeId, AutodiffError> {
        let (qr, qc) = self.value(q).shape();
        for (name, id) in [("k", k), ("v", v)] {
            if self.value(id).shape() != (qr, qc) {
                return Err(shape_err(
                    "causal_attention",
                    format!("{name} shape {:?} != q shape {:?}", self.value(id).shape(), (qr, qc)),
                ));
            }
        }
        if qr % seq_len != 0 || qc % heads != 0 {
            return Err(shape_err(
                "causal_attention",
                format!("{qr}x{qc} with heads {heads}, seq_len {seq_len}"),
            ));
        }
        let batch = qr / seq_len;
        let dh = qc / heads;
        let mut probs = Tensor::zeros(batch * heads * seq_len, seq_len);
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        for b in 0..batch {
            for h in 0..heads {
                let opnd_off = b * seq_len * qc + h * dh;
                let out_off = ((b * heads + h) * seq_len) * seq_len;
                dgemm_strided(
                    seq_len, dh, seq_len, scale, qd, opnd_off, qc, 1, kd, opnd_off, 1, qc, 0.0,
                    probs.data_mut(), out_off, seq_len, 1,
                );
            }
        }
        for r in 0..probs.rows() {
            let t = r % seq_len;
            for c in t + 1..seq_len {
                *probs.at_mut(r, c) = f64::NEG_INFINITY;
            }
        }
        softmax_rows_inplace(probs.data_mut(), seq_len);
        let mut value = Tensor::zeros(qr, qc);
        let vd = self.value(v).data();
        for b in 0..batch {
            for h in 0..heads {
                let v_off = b * seq_len * qc + h * dh;
                let p_off = ((b * heads + h) * seq_len) * seq_len;
                dgemm_strided(
                    seq_len, seq_len, dh, 1.0, probs.data(), p_off, seq_len, 1, vd, v_off, qc,
                    1, 0.0, value.data_mut(), v_off, qc, 1,
                );
            }
        }
        Ok(self.push(
            value,
            Op::CausalAttention { q, k, v, heads, seq_len, scale, probs },
        ))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.same_shape("add", a, b)?;
        let value = Tensor::from_vec(
            self.value(a).rows(),
            self.value(a).cols(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(x, y)| x + y)
                .collect(),
        );
        Ok(self.push(value, Op::Add(a, b)))
    }

    /// `a + bias` where `bias` is `(1, C)` and broadcasts over rows.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId, AutodiffError> {
        let (_, ac) = self.value(a).shape();
        let (br, bc) = self.value(bias).shape();
        if br != 1 || bc != ac {
            return Err(shape_err("add_row", format!("bias {br}x{bc} for cols {ac}")));
        }
        let mut value = self.value(a).clone();
        add_row_inplace(value.data_mut(), ac, self.value(bias).data());
        Ok(self.push(value, Op::AddRow(a, bias)))
    }

    /// `a + tile(p)` where `p` has `P` rows and `a.rows % P == 0`; row `r`
    /// of `a` receives row `r % P` of `p`.
    pub fn add_tiled_rows(&mut self, a: NodeId, p: NodeId) -> Result<NodeId, AutodiffError> {
        let (ar, ac) = self.value(a).shape();
        let (pr, pc) = self.value(p).shape();
        if pc != ac || pr == 0 || ar % pr != 0 {
            return Err(shape_err(
                "add_tiled_rows",
                format!("{ar}x{ac} with tile {pr}x{pc}"),
            ));
        }
        let mut value = self.value(a).clone();
        for r in 0..ar {
            let src = self.value(p).row(r % pr).to_vec();
            for (v, s) in value.row_mut(r).iter_mut().zip(&src) {
                *v += s;
            }
        }
        Ok(self.push(value, Op::AddTiledRows(a, p)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.same_shape("sub", a, b)?;
        let value = Tensor::from_vec(
            self.value(a).rows(),
            self.value(a).cols(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(x, y)| x - y)
                .collect(),
        );
        Ok(self.push(value, Op::Sub(a, b)))
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.same_shape("hadamard", a, b)?;
        let value = Tensor::from_vec(
            self.value(a).rows(),
            self.value(a).cols(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(x, y)| x * y)
                .collect(),
        );
        Ok(self.push(value, Op::Hadamard(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let value = self.value(a).map(|v| v * factor);
        self.push(value, Op::Scale(a, factor))
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.value(a).map(|v| v + c);
        self.push(value, Op::AddConst(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let mut value = self.value(a).clone();
        tanh_inplace(value.data_mut());
        self.push(value, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let mut value = self.value(a).clone();
        sigmoid_inplace(value.data_mut());
        self.push(value, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(f64::exp);
        self.push(value, Op::Exp(a))
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(f64::ln);
        self.push(value, Op::Log(a))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let mut value = self.value(a).clone();
        let cols = value.cols();
        softmax_rows_inplace(value.data_mut(), cols);
        self.push(value, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: NodeId) -> NodeId {
        let mut value = self.value(a).clone();
        let cols = value.cols();
        log_softmax_rows_inplace(value.data_mut(), cols);
        self.push(value, Op::LogSoftmaxRows(a))
    }

    /// Replace blocked entries with `fill` (typically `-inf` ahead of a
    /// softmax). Gradients do not flow through blocked entries.
    pub fn masked_fill(
        &mut self,
        x: NodeId,
        mask: Arc<Mask>,
        fill: f64,
    ) -> Result<NodeId, AutodiffError> {
        let (xr, xc) = self.value(x).shape();
        if xc != mask.cols || xr % mask.rows != 0 {
            return Err(shape_err(
                "masked_fill",
                format!("{xr}x{xc} with mask {}x{}", mask.rows, mask.cols),
            ));
        }
        let mut value = self.value(x).clone();
        for r in 0..xr {
            let row = value.row_mut(r);
            for (c, v) in row.iter_mut().enumerate() {
                if mask.is_blocked(r, c) {
                    *v = fill;
                }
            }
        }
        Ok(self.push(value, Op::MaskedFill { x, mask }))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let (ar, ac) = self.value(a).shape();
        let (br, bc) = self.value(b).shape();
        if ar != br {
            return Err(shape_err("concat_cols", format!("{ar} rows vs {br} rows")));
        }
        let mut value = Tensor::zeros(ar, ac + bc);
        for r in 0..ar {
            value.row_mut(r)[..ac].copy_from_slice(self.value(a).row(r));
        }
        for r in 0..ar {
            value.row_mut(r)[ac..].copy_from_slice(self.value(b).row(r));
        }
        Ok(self.push(value, Op::ConcatCols(a, b)))
    }

    pub fn slice_cols(&mut self, x: NodeId, range: Range<usize>) -> Result<NodeId, AutodiffError> {
        let (xr, xc) = self.value(x).shape();
        if range.end > xc || range.start >= range.end {
            return Err(shape_err("slice_cols", format!("{range:?} of {xr}x{xc}")));
        }
        let mut value = Tensor::zeros(xr, range.len());
        for r in 0..xr {
            value
                .row_mut(r)
                .copy_from_slice(&self.value(x).row(r)[range.clone()]);
        }
        Ok(self.push(value, Op::SliceCols { x, range }))
    }

    /// Gather rows of `table` by id.
    pub fn embedding(
        &mut self,
        table: NodeId,
        ids: Arc<Vec<usize>>,
    ) -> Result<NodeId, AutodiffError> {
        let (tr, tc) = self.value(table).shape();
        if let Some(&bad) = ids.iter().find(|&&i| i >= tr) {
            return Err(shape_err("embedding", format!("id {bad} >= table rows {tr}")));
        }
        let mut value = Tensor::zeros(ids.len(), tc);
        for (r, &id) in ids.iter().enumerate() {
            value.row_mut(r).copy_from_slice(self.value(table).row(id));
        }
        Ok(self.push(value, Op::Embedding { table, ids }))
    }

    /// Row-wise layer norm with learned `(1, C)` gain and bias.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
    ) -> Result<NodeId, AutodiffError> {
        let (_, xc) = self.value(x).shape();
        for (name, id) in [("gain", gain), ("bias", bias)] {
            let (r, c) = self.value(id).shape();
            if r != 1 || c != xc {
                return Err(shape_err("layer_norm", format!("{name} {r}x{c} for cols {xc}")));
            }
        }
        let value = layer_norm_rows(
            self.value(x),
            self.value(gain).data(),
            self.value(bias).data(),
        );
        Ok(self.push(value, Op::LayerNorm { x, gain, bias }))
    }

    /// Scaled attention scores for `heads` heads over `seq_len` positions.
    ///
    /// `q` and `k` are `(B*T, E)` with head `h` occupying the column band
    /// `h*dh..(h+1)*dh`; the result is `(B*H*T, T)` with row
    /// `((b*H + h)*T + t)` holding the scores of query position `t`.
    pub fn attn_scores(
        &mut self,
        q: NodeId,
        k: NodeId,
        heads: usize,
        seq_len: usize,
        scale: f64,
    ) -> Result<NodeId, AutodiffError> {
        let (qr, qc) = self.value(q).shape();
        let (kr, kc) = self.value(k).shape();
        if qr != kr || qc != kc || qr % seq_len != 0 || qc % heads != 0 {
            return Err(shape_err(
                "attn_scores",
                format!("q {qr}x{qc}, k {kr}x{kc}, heads {heads}, seq_len {seq_len}"),
            ));
        }
        let batch = qr / seq_len;
        let dh = qc / heads;
        let mut value = Tensor::zeros(batch * heads * seq_len, seq_len);
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        for b in 0..batch {
            for h in 0..heads {
                let opnd_off = b * seq_len * qc + h * dh;
                let out_off = ((b * heads + h) * seq_len) * seq_len;
                // S_bh = scale * Q_bh . K_bh^T
                dgemm_strided(
                    seq_len, dh, seq_len, scale, qd, opnd_off, qc, 1, kd, opnd_off, 1, qc, 0.0,
                    value.data_mut(), out_off, seq_len, 1,
                );
            }
        }
        Ok(self.push(value, Op::AttnScores { q, k, heads, seq_len, scale }))
    }

    /// Apply attention probabilities `(B*H*T, T)` to values `(B*T, E)`,
    /// producing contexts `(B*T, E)` with heads re-concatenated.
    pub fn attn_apply(
        &mut self,
        probs: NodeId,
        v: NodeId,
        heads: usize,
        seq_len: usize,
    ) -> Result<NodeId, AutodiffError> {
        let (pr, pc) = self.value(probs).shape();
        let (vr, vc) = self.value(v).shape();
        if pc != seq_len || vr % seq_len != 0 || vc % heads != 0 {
            return Err(shape_err(
                "attn_apply",
                format!("probs {pr}x{pc}, v {vr}x{vc}, heads {heads}, seq_len {seq_len}"),
            ));
        }
        let batch = vr / seq_len;
        if pr != batch * heads * seq_len {
            return Err(shape_err(
                "attn_apply",
                format!("probs rows {pr} != batch*heads*seq_len {}", batch * heads * seq_len),
            ));
        }
        let dh = vc / heads;
        let mut value = Tensor::zeros(vr, vc);
        let pd = self.value(probs).data();
        let vd = self.value(v).data();
        for b in 0..batch {
            for h in 0..heads {
                let p_off = ((b * heads + h) * seq_len) * seq_len;
                let v_off = b * seq_len * vc + h * dh;
                // O_bh = P_bh . V_bh
                dgemm_strided(
                    seq_len, seq_len, dh, 1.0, pd, p_off, seq_len, 1, vd, v_off, vc, 1, 0.0,
                    value.data_mut(), v_off, vc, 1,
                );
            }
        }
        Ok(self.push(value, Op::AttnApply { probs, v, heads, seq_len }))
    }

    /// `out[r] = x[r, ids[r]]`, shape `(R, 1)`.
    pub fn pick(&mut self, x: NodeId, ids: Arc<Vec<usize>>) -> Result<NodeId, AutodiffError> {
        let (xr, xc) = self.value(x).shape();
        if ids.len() != xr {
            return Err(shape_err("pick", format!("{} ids for {xr} rows", ids.len())));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= xc) {
            return Err(shape_err("pick", format!("id {bad} >= cols {xc}")));
        }
        let data = ids
            .iter()
            .enumerate()
            .map(|(r, &c)| self.value(x).at(r, c))
            .collect();
        let value = Tensor::from_vec(xr, 1, data);
        Ok(self.push(value, Op::Pick { x, ids }))
    }

    /// Sum a `(R, 1)` column in consecutive groups of `group` rows.
    pub fn sum_groups(&mut self, x: NodeId, group: usize) -> Result<NodeId, AutodiffError> {
        let (xr, xc) = self.value(x).shape();
        if xc != 1 || group == 0 || xr % group != 0 {
            return Err(shape_err("sum_groups", format!("{xr}x{xc} by {group}")));
        }
        let data = self
            .value(x)
            .data()
            .chunks_exact(group)
            .map(|chunk| chunk.iter().sum())
            .collect();
        let value = Tensor::from_vec(xr / group, 1, data);
        Ok(self.push(value, Op::SumGroups { x, group }))
    }

    /// Mean of all entries, as a scalar node.
    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x);
        let mean = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(mean), Op::MeanAll(x))
    }

    /// Fixed-weight inner product of a `(R, 1)` column, as a scalar node.
    pub fn dot_const(
        &mut self,
        x: NodeId,
        weights: Arc<Vec<f64>>,
    ) -> Result<NodeId, AutodiffError> {
        let (xr, xc) = self.value(x).shape();
        if xc != 1 || weights.len() != xr {
            return Err(shape_err(
                "dot_const",
                format!("{xr}x{xc} with {} weights", weights.len()),
            ));
        }
        let v = self
            .value(x)
            .data()
            .iter()
            .zip(weights.iter())
            .map(|(a, w)| a * w)
            .sum();
        Ok(self.push(Tensor::scalar(v), Op::DotConst { x, weights }))
    }

    /// Propagate gradients from a scalar root to every reachable node.
    pub fn backward(&mut self, root: NodeId) -> Result<(), AutodiffError> {
        if self.backward_done {
            return Err(AutodiffError::BackwardTwice);
        }
        self.backward_done = true;
        let (rr, rc) = self.value(root).shape();
        if (rr, rc) != (1, 1) {
            return Err(AutodiffError::NonScalarRoot { rows: rr, cols: rc });
        }
        self.nodes[root.0].grad = Some(Tensor::scalar(1.0));
        for id in (0..=root.0).rev() {
            if self.nodes[id].grad.is_none() {
                continue;
            }
            self.propagate(id);
        }
        Ok(())
    }

    fn propagate(&mut self, id: usize) {
        // Parents always precede the node, so split the arena to borrow the
        // node immutably and its parents mutably at the same time.
        let (parents, rest) = self.nodes.split_at_mut(id);
        let node = &rest[0];
        let grad = node.grad.as_ref().expect("caller checked");
        let value = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (m, k) = parents[a.0].value.shape();
                let n = parents[b.0].value.cols();
                // dA += G . B^T
                {
                    let (bv, ga) = value_and_grad(parents, b.0, a.0, m, k);
                    dgemm_strided(
                        m, n, k, 1.0, grad.data(), 0, n, 1, bv.data(), 0, 1, n, 1.0,
                        ga.data_mut(), 0, k, 1,
                    );
                }
                // dB += A^T . G
                {
                    let (av, gb) = value_and_grad(parents, a.0, b.0, k, n);
                    dgemm_strided(
                        k, m, n, 1.0, av.data(), 0, 1, k, grad.data(), 0, n, 1, 1.0,
                        gb.data_mut(), 0, n, 1,
                    );
                }
            }
            Op::Linear { x, w, b, act } => {
                let act = *act;
                let (m, n) = value.shape();
                let k = parents[x.0].value.cols();
                let mut g_pre = Tensor::zeros(m, n);
                for ((o, g), y) in g_pre
                    .data_mut()
                    .iter_mut()
                    .zip(grad.data())
                    .zip(value.data())
                {
                    *o = g * act.derivative_from_output(*y);
                }
                {
                    let (wv, gx) = value_and_grad(parents, w.0, x.0, m, k);
                    dgemm_strided(
                        m, n, k, 1.0, g_pre.data(), 0, n, 1, wv.data(), 0, 1, n, 1.0,
                        gx.data_mut(), 0, k, 1,
                    );
                }
                {
                    let (xv, gw) = value_and_grad(parents, x.0, w.0, k, n);
                    dgemm_strided(
                        k, m, n, 1.0, xv.data(), 0, 1, k, g_pre.data(), 0, n, 1, 1.0,
                        gw.data_mut(), 0, n, 1,
                    );
                }
                let gb = grad_buf(&mut parents[b.0], 1, n);
                for row in g_pre.data().chunks_exact(n) {
                    for (o, g) in gb.data_mut().iter_mut().zip(row) {
                        *o += g;
                    }
                }
            }
            Op::Linear2 { x1, w1, x2, w2, b, act } => {
                let act = *act;
                let (m, n) = value.shape();
                let mut g_pre = Tensor::zeros(m, n);
                for ((o, g), y) in g_pre
                    .data_mut()
                    .iter_mut()
                    .zip(grad.data())
                    .zip(value.data())
                {
                    *o = g * act.derivative_from_output(*y);
                }
                for (x, w) in [(x1, w1), (x2, w2)] {
                    let k = parents[x.0].value.cols();
                    {
                        let (wv, gx) = value_and_grad(parents, w.0, x.0, m, k);
                        dgemm_strided(
                            m, n, k, 1.0, g_pre.data(), 0, n, 1, wv.data(), 0, 1, n, 1.0,
                            gx.data_mut(), 0, k, 1,
                        );
                    }
                    {
                        let (xv, gw) = value_and_grad(parents, x.0, w.0, k, n);
                        dgemm_strided(
                            k, m, n, 1.0, xv.data(), 0, 1, k, g_pre.data(), 0, n, 1, 1.0,
                            gw.data_mut(), 0, n, 1,
                        );
                    }
                }
                let gb = grad_buf(&mut parents[b.0], 1, n);
                for row in g_pre.data().chunks_exact(n) {
                    for (o, g) in gb.data_mut().iter_mut().zip(row) {
                        *o += g;
                    }
                }
            }
            Op::CausalAttention { q, k, v, heads, seq_len, scale, probs } => {
                let (heads, seq_len, scale) = (*heads, *seq_len, *scale);
                let (qr, qc) = parents[q.0].value.shape();
                let batch = qr / seq_len;
                let dh = qc / heads;
                // dP_bh = G_bh . V_bh^T
                let mut dprobs = Tensor::zeros(batch * heads * seq_len, seq_len);
                for b in 0..batch {
                    for h in 0..heads {
                        let v_off = b * seq_len * qc + h * dh;
                        let p_off = ((b * heads + h) * seq_len) * seq_len;
                        dgemm_strided(
                            seq_len, dh, seq_len, 1.0, grad.data(), v_off, qc, 1,
                            parents[v.0].value.data(), v_off, 1, qc, 1.0, dprobs.data_mut(),
                            p_off, seq_len, 1,
                        );
                    }
                }
                // dV_bh += P_bh^T . G_bh
                {
                    let gv = grad_buf(&mut parents[v.0], qr, qc);
                    for b in 0..batch {
                        for h in 0..heads {
                            let v_off = b * seq_len * qc + h * dh;
                            let p_off = ((b * heads + h) * seq_len) * seq_len;
                            dgemm_strided(
                                seq_len, seq_len, dh, 1.0, probs.data(), p_off, 1, seq_len,
                                grad.data(), v_off, qc, 1, 1.0, gv.data_mut(), v_off, qc, 1,
                            );
                        }
                    }
                }
                // Softmax backward in place: dS = P * (dP - sum(P * dP)).
                for (p_row, d_row) in probs
                    .data()
                    .chunks_exact(seq_len)
                    .zip(dprobs.data_mut().chunks_exact_mut(seq_len))
                {
                    let dot: f64 = p_row.iter().zip(d_row.iter()).map(|(p, d)| p * d).sum();
                    for (d, p) in d_row.iter_mut().zip(p_row) {
                        *d = p * (*d - dot);
                    }
                }
                // dQ_bh += scale * dS_bh . K_bh ; dK_bh += scale * dS_bh^T . Q_bh
                {
                    let (kv, gq) = value_and_grad(parents, k.0, q.0, qr, qc);
                    for b in 0..batch {
                        for h in 0..heads {
                            let opnd_off = b * seq_len * qc + h * dh;
                            let p_off = ((b * heads + h) * seq_len) * seq_len;
                            dgemm_strided(
                                seq_len, seq_len, dh, scale, dprobs.data(), p_off, seq_len, 1,
                                kv.data(), opnd_off, qc, 1, 1.0, gq.data_mut(), opnd_off, qc, 1,
                            );
                        }
                    }
                }
                {
                    let (qv, gk) = value_and_grad(parents, q.0, k.0, qr, qc);
                    for b in 0..batch {
                        for h in 0..heads {
                            let opnd_off = b * seq_len * qc + h * dh;
                            let p_off = ((b * heads + h) * seq_len) * seq_len;
                            dgemm_strided(
                                seq_len, seq_len, dh, scale, dprobs.data(), p_off, 1, seq_len,
                                qv.data(), opnd_off, qc, 1, 1.0, gk.data_mut(), opnd_off, qc, 1,
                            );
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                accumulate(&mut parents[a.0], grad.data());
                accumulate(&mut parents[b.0], grad.data());
            }
            Op::AddRow(a, bias) => {
                accumulate(&mut parents[a.0], grad.data());
                let cols = grad.cols();
                let gb = grad_buf(&mut parents[bias.0], 1, cols);
                for row in grad.data().chunks_exact(cols) {
                    for (g, r) in gb.data_mut().iter_mut().zip(row) {
                        *g += r;
                    }
                }
            }
            Op::AddTiledRows(a, p) => {
                accumulate(&mut parents[a.0], grad.data());
                let (pr, pc) = parents[p.0].value.shape();
                let gp = grad_buf(&mut parents[p.0], pr, pc);
                for (r, row) in grad.data().chunks_exact(pc).enumerate() {
                    for (g, v) in gp.row_mut(r % pr).iter_mut().zip(row) {
                        *g += v;
                    }
                }
            }
            Op::Sub(a, b) => {
                accumulate(&mut parents[a.0], grad.data());
                accumulate_scaled(&mut parents[b.0], grad.data(), -1.0);
            }
            Op::Hadamard(a, b) => {
                let bv: Vec<f64> = parents[b.0].value.data().to_vec();
                accumulate_mul(&mut parents[a.0], grad.data(), &bv);
                let av: Vec<f64> = parents[a.0].value.data().to_vec();
                accumulate_mul(&mut parents[b.0], grad.data(), &av);
            }
            Op::Scale(a, factor) => accumulate_scaled(&mut parents[a.0], grad.data(), *factor),
            Op::AddConst(a) => accumulate(&mut parents[a.0], grad.data()),
            Op::Tanh(a) => {
                let deriv: Vec<f64> = value.data().iter().map(|y| 1.0 - y * y).collect();
                accumulate_mul(&mut parents[a.0], grad.data(), &deriv);
            }
            Op::Sigmoid(a) => {
                let deriv: Vec<f64> = value.data().iter().map(|y| y * (1.0 - y)).collect();
                accumulate_mul(&mut parents[a.0], grad.data(), &deriv);
            }
            Op::Exp(a) => accumulate_mul(&mut parents[a.0], grad.data(), value.data()),
            Op::Log(a) => {
                let deriv: Vec<f64> = parents[a.0].value.data().iter().map(|x| 1.0 / x).collect();
                accumulate_mul(&mut parents[a.0], grad.data(), &deriv);
            }
            Op::SoftmaxRows(a) => {
                let cols = value.cols();
                let (r, c) = value.shape();
                let ga = grad_buf(&mut parents[a.0], r, c);
                for (row_idx, (y_row, g_row)) in value
                    .data()
                    .chunks_exact(cols)
                    .zip(grad.data().chunks_exact(cols))
                    .enumerate()
                {
                    let dot: f64 = y_row.iter().zip(g_row).map(|(y, g)| y * g).sum();
                    let out = ga.row_mut(row_idx);
                    for ((o, y), g) in out.iter_mut().zip(y_row).zip(g_row) {
                        *o += y * (g - dot);
                    }
                }
            }
            Op::LogSoftmaxRows(a) => {
                let cols = value.cols();
                let (r, c) = value.shape();
                let ga = grad_buf(&mut parents[a.0], r, c);
                for (row_idx, (y_row, g_row)) in value
                    .data()
                    .chunks_exact(cols)
                    .zip(grad.data().chunks_exact(cols))
                    .enumerate()
                {
                    let gsum: f64 = g_row.iter().sum();
                    let out = ga.row_mut(row_idx);
                    for ((o, y), g) in out.iter_mut().zip(y_row).zip(g_row) {
                        *o += g - y.exp() * gsum;
                    }
                }
            }
            Op::MaskedFill { x, mask } => {
                let mask = Arc::clone(mask);
                let (r, c) = value.shape();
                let gx = grad_buf(&mut parents[x.0], r, c);
                for row_idx in 0..r {
                    let g_row = &grad.data()[row_idx * c..(row_idx + 1) * c];
                    let out = gx.row_mut(row_idx);
                    for col in 0..c {
                        if !mask.is_blocked(row_idx, col) {
                            out[col] += g_row[col];
                        }
                    }
                }
            }
            Op::ConcatCols(a, b) => {
                let (ar, ac) = parents[a.0].value.shape();
                let (_, bc) = parents[b.0].value.shape();
                let total = ac + bc;
                {
                    let ga = grad_buf(&mut parents[a.0], ar, ac);
                    for r in 0..ar {
                        let g_row = &grad.data()[r * total..r * total + ac];
                        for (o, g) in ga.row_mut(r).iter_mut().zip(g_row) {
                            *o += g;
                        }
                    }
                }
                let gb = grad_buf(&mut parents[b.0], ar, bc);
                for r in 0..ar {
                    let g_row = &grad.data()[r * total + ac..(r + 1) * total];
                    for (o, g) in gb.row_mut(r).iter_mut().zip(g_row) {
                        *o += g;
                    }
                }
            }
            Op::SliceCols { x, range } => {
                let range = range.clone();
                let (xr, xc) = parents[x.0].value.shape();
                let gx = grad_buf(&mut parents[x.0], xr, xc);
                let width = range.len();
                for r in 0..xr {
                    let g_row = &grad.data()[r * width..(r + 1) * width];
                    for (o, g) in gx.row_mut(r)[range.clone()].iter_mut().zip(g_row) {
                        *o += g;
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let ids = Arc::clone(ids);
                let (tr, tc) = parents[table.0].value.shape();
                let gt = grad_buf(&mut parents[table.0], tr, tc);
                for (r, &id) in ids.iter().enumerate() {
                    let g_row = &grad.data()[r * tc..(r + 1) * tc];
                    for (o, g) in gt.row_mut(id).iter_mut().zip(g_row) {
                        *o += g;
                    }
                }
            }
            Op::LayerNorm { x, gain, bias } => {
                let cols = value.cols();
                let rows = value.rows();
                let inv_cols = 1.0 / cols as f64;
                let xv: Vec<f64> = parents[x.0].value.data().to_vec();
                let gv: Vec<f64> = parents[gain.0].value.data().to_vec();
                // Recompute per-row stats from the input.
                let mut dx = vec![0.0; rows * cols];
                let mut dgain = vec![0.0; cols];
                let mut dbias = vec![0.0; cols];
                for r in 0..rows {
                    let x_row = &xv[r * cols..(r + 1) * cols];
                    let g_row = &grad.data()[r * cols..(r + 1) * cols];
                    let mean = x_row.iter().sum::<f64>() * inv_cols;
                    let var =
                        x_row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() * inv_cols;
                    let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    let mut mean_gg = 0.0;
                    let mut mean_ggx = 0.0;
                    for c in 0..cols {
                        let xhat = (x_row[c] - mean) * inv_std;
                        let gg = gv[c] * g_row[c];
                        mean_gg += gg;
                        mean_ggx += gg * xhat;
                        dgain[c] += g_row[c] * xhat;
                        dbias[c] += g_row[c];
                    }
                    mean_gg *= inv_cols;
                    mean_ggx *= inv_cols;
                    let out = &mut dx[r * cols..(r + 1) * cols];
                    for c in 0..cols {
                        let xhat = (x_row[c] - mean) * inv_std;
                        out[c] = (gv[c] * g_row[c] - mean_gg - xhat * mean_ggx) * inv_std;
                    }
                }
                accumulate(&mut parents[x.0], &dx);
                let gg = grad_buf(&mut parents[gain.0], 1, cols);
                for (o, g) in gg.data_mut().iter_mut().zip(&dgain) {
                    *o += g;
                }
                let gb = grad_buf(&mut parents[bias.0], 1, cols);
                for (o, g) in gb.data_mut().iter_mut().zip(&dbias) {
                    *o += g;
                }
            }
            Op::AttnScores { q, k, heads, seq_len, scale } => {
                let (heads, seq_len, scale) = (*heads, *seq_len, *scale);
                let (qr, qc) = parents[q.0].value.shape();
                let batch = qr / seq_len;
                let dh = qc / heads;
                // dQ_bh += scale * G_bh . K_bh ; dK_bh += scale * G_bh^T . Q_bh
                {
                    let (kv, gq) = value_and_grad(parents, k.0, q.0, qr, qc);
                    for b in 0..batch {
                        for h in 0..heads {
                            let opnd_off = b * seq_len * qc + h * dh;
                            let g_off = ((b * heads + h) * seq_len) * seq_len;
                            dgemm_strided(
                                seq_len, seq_len, dh, scale, grad.data(), g_off, seq_len, 1,
                                kv.data(), opnd_off, qc, 1, 1.0, gq.data_mut(), opnd_off, qc, 1,
                            );
                        }
                    }
                }
                {
                    let (qv, gk) = value_and_grad(parents, q.0, k.0, qr, qc);
                    for b in 0..batch {
                        for h in 0..heads {
                            let opnd_off = b * seq_len * qc + h * dh;
                            let g_off = ((b * heads + h) * seq_len) * seq_len;
                            dgemm_strided(
                                seq_len, seq_len, dh, scale, grad.data(), g_off, 1, seq_len,
                                qv.data(), opnd_off, qc, 1, 1.0, gk.data_mut(), opnd_off, qc, 1,
                            );
                        }
                    }
                }
            }
            Op::AttnApply { probs, v, heads, seq_len } => {
                let (heads, seq_len) = (*heads, *seq_len);
                let (vr, vc) = parents[v.0].value.shape();
                let batch = vr / seq_len;
                let dh = vc / heads;
                // dP_bh += G_bh . V_bh^T ; dV_bh += P_bh^T . G_bh
                {
                    let (vv, gp) =
                        value_and_grad(parents, v.0, probs.0, batch * heads * seq_len, seq_len);
                    for b in 0..batch {
                        for h in 0..heads {
                            let v_off = b * seq_len * vc + h * dh;
                            let p_off = ((b * heads + h) * seq_len) * seq_len;
                            dgemm_strided(
                                seq_len, dh, seq_len, 1.0, grad.data(), v_off, vc, 1, vv.data(),
                                v_off, 1, vc, 1.0, gp.data_mut(), p_off, seq_len, 1,
                            );
                        }
                    }
                }
                {
                    let (pv, gv) = value_and_grad(parents, probs.0, v.0, vr, vc);
                    for b in 0..batch {
                        for h in 0..heads {
                            let v_off = b * seq_len * vc + h * dh;
                            let p_off = ((b * heads + h) * seq_len) * seq_len;
                            dgemm_strided(
                                seq_len, seq_len, dh, 1.0, pv.data(), p_off, 1, seq_len,
                                grad.data(), v_off, vc, 1, 1.0, gv.data_mut(), v_off, vc, 1,
                            );
                        }
                    }
                }
            }
            Op::Pick { x, ids } => {
                let ids = Arc::clone(ids);
                let (xr, xc) = parents[x.0].value.shape();
                let gx = grad_buf(&mut parents[x.0], xr, xc);
                for (r, &c) in ids.iter().enumerate() {
                    *gx.at_mut(r, c) += grad.data()[r];
                }
            }
            Op::SumGroups { x, group } => {
                let group = *group;
                let (xr, _) = parents[x.0].value.shape();
                let gx = grad_buf(&mut parents[x.0], xr, 1);
                for (r, o) in gx.data_mut().iter_mut().enumerate() {
                    *o += grad.data()[r / group];
                }
            }
            Op::MeanAll(a) => {
                let n = parents[a.0].value.len() as f64;
                let g = grad.data()[0] / n;
                let (r, c) = parents[a.0].value.shape();
                let ga = grad_buf(&mut parents[a.0], r, c);
                for o in ga.data_mut().iter_mut() {
                    *o += g;
                }
            }
            Op::DotConst { x, weights } => {
                let weights = Arc::clone(weights);
                let g = grad.data()[0];
                let (r, _) = parents[x.0].value.shape();
                let gx = grad_buf(&mut parents[x.0], r, 1);
                for (o, w) in gx.data_mut().iter_mut().zip(weights.iter()) {
                    *o += g * w;
                }
            }
        }
    }
}

fn grad_buf(node: &mut Node, rows: usize, cols: usize) -> &mut Tensor {
    node.grad.get_or_insert_with(|| Tensor::zeros(rows, cols))
}

/// Borrow the value of `read` and the (lazily allocated) gradient of
/// `write` at the same time. Works when the two indices coincide because
/// value and gradient are distinct fields.
fn value_and_grad(
    parents: &mut [Node],
    read: usize,
    write: usize,
    grad_rows: usize,
    grad_cols: usize,
) -> (&Tensor, &mut Tensor) {
    use std::cmp::Ordering;
    match read.cmp(&write) {
        Ordering::Equal => {
            let node = &mut parents[write];
            if node.grad.is_none() {
                node.grad = Some(Tensor::zeros(grad_rows, grad_cols));
            }
            let Node { value, grad, .. } = node;
            (&*value, grad.as_mut().expect("just allocated"))
        }
        Ordering::Less => {
            let (lo, hi) = parents.split_at_mut(write);
            (&lo[read].value, grad_buf(&mut hi[0], grad_rows, grad_cols))
        }
        Ordering::Greater => {
            let (lo, hi) = parents.split_at_mut(read);
            (&hi[0].value, grad_buf(&mut lo[write], grad_rows, grad_cols))
        }
    }
}

fn accumulate(node: &mut Node, contrib: &[f64]) {
    let (r, c) = node.value.shape();
    let g = grad_buf(node, r, c);
    for (o, v) in g.data_mut().iter_mut().zip(contrib) {
        *o += v;
    }
}

fn accumulate_scaled(node: &mut Node, contrib: &[f64], factor: f64) {
    let (r, c) = node.value.shape();
    let g = grad_buf(node, r, c);
    for (o, v) in g.data_mut().iter_mut().zip(contrib) {
        *o += v * factor;
    }
}

fn accumulate_mul(node: &mut Node, grad: &[f64], factor: &[f64]) {
    let (r, c) = node.value.shape();
    let g = grad_buf(node, r, c);
    for ((o, gv), f) in g.data_mut().iter_mut().zip(grad).zip(factor) {
        *o += gv * f;
    }
}
