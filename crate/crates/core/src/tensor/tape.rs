//! Recording tape for reverse-mode differentiation.
//!
//! A [`Tape`] is a linear record of primitive operations over 2-D buffers.
//! Programs are built eagerly (each call computes its value immediately),
//! then [`Tape::backward`] walks the record once in reverse, accumulating
//! adjoints. Leaves created through [`Tape::param`] participate in
//! differentiation; leaves from [`Tape::input`] are constants and their
//! adjoint branches are skipped entirely.
//!
//! Block operations treat a `(B*J, d)` buffer as `B` stacked `(J, d)`
//! matrices, which is how per-sample adjacency application and per-sample
//! attention run over a whole batch without materializing a batch rank.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{fast_tanh, gemm::gemm, Tensor};

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Value(pub(crate) usize);

enum Storage {
    Owned(Vec<f64>),
    Shared(Arc<Vec<f64>>),
}

impl Storage {
    fn as_slice(&self) -> &[f64] {
        match self {
            Storage::Owned(v) => v,
            Storage::Shared(a) => a,
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    SharedLeftMatMul(usize, usize),
    BlockMatMulNN { a: usize, b: usize, block: usize },
    BlockMatMulNT { a: usize, b: usize, block: usize },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    BroadcastAdd(usize, usize),
    Gelu(usize),
    Tanh(usize),
    Sin(usize),
    SoftmaxRows(usize),
    LayerNorm { x: usize, gain: usize, bias: usize },
    ConcatCols(usize, usize),
    SliceCols { x: usize, start: usize, len: usize },
    Mean(usize),
    Sum(usize),
    SumSquares(usize),
    BlockMean { x: usize, block: usize, groups: usize },
}

struct Node {
    op: Op,
    rows: usize,
    cols: usize,
    data: Storage,
    /// Forward intermediates reused by the backward pass.
    aux: Option<Vec<f64>>,
    needs_grad: bool,
}

/// Eager computation record; see module docs.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant leaf; gradients do not flow into it.
    pub fn input(&mut self, t: &Tensor) -> Result<Value> {
        self.leaf(t, false)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, t: &Tensor) -> Result<Value> {
        self.leaf(t, true)
    }

    fn leaf(&mut self, t: &Tensor, needs_grad: bool) -> Result<Value> {
        if !t.all_finite() {
            return Err(Error::NonFinite { op: "leaf".into() });
        }
        Ok(self.push(Node {
            op: Op::Leaf,
            rows: t.rows(),
            cols: t.cols(),
            data: Storage::Shared(t.shared()),
            aux: None,
            needs_grad,
        }))
    }

    /// Value of a node as an owned tensor.
    pub fn tensor(&self, v: Value) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(&[n.rows, n.cols], n.data.as_slice().to_vec()).expect("node shape is valid")
    }

    /// Raw value slice of a node.
    pub fn value(&self, v: Value) -> &[f64] {
        self.nodes[v.0].data.as_slice()
    }

    pub fn shape(&self, v: Value) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    fn push(&mut self, node: Node) -> Value {
        self.nodes.push(node);
        Value(self.nodes.len() - 1)
    }

    fn node(&self, v: Value) -> &Node {
        &self.nodes[v.0]
    }

    fn finish(
        &mut self,
        op: Op,
        name: &'static str,
        rows: usize,
        cols: usize,
        data: Vec<f64>,
        aux: Option<Vec<f64>>,
        needs_grad: bool,
    ) -> Result<Value> {
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: name.into() });
        }
        Ok(self.push(Node {
            op,
            rows,
            cols,
            data: Storage::Owned(data),
            aux,
            needs_grad,
        }))
    }

    fn mismatch(name: &'static str, detail: String) -> Error {
        Error::ShapeMismatch { op: name, detail }
    }

    // ── Primitive operations ────────────────────────────────────────────

    /// `a @ b` for `(m, k) @ (k, n)`.
    pub fn matmul(&mut self, a: Value, b: Value) -> Result<Value> {
        let (m, k) = self.shape(a);
        let (kb, n) = self.shape(b);
        if k != kb {
            return Err(Self::mismatch("matmul", format!("({m}, {k}) @ ({kb}, {n})")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, self.value(a), false, self.value(b), false, 0.0, &mut out);
        let ng = self.node(a).needs_grad || self.node(b).needs_grad;
        self.finish(Op::MatMul(a.0, b.0), "matmul", m, n, out, None, ng)
    }

    /// Applies one `(j, j)` matrix to every `(j, d)` row block of `x`.
    pub fn shared_left_matmul(&mut self, left: Value, x: Value) -> Result<Value> {
        let (j, j2) = self.shape(left);
        let (r, d) = self.shape(x);
        if j != j2 || r % j != 0 {
            return Err(Self::mismatch(
                "shared_left_matmul",
                format!("left ({j}, {j2}), x ({r}, {d})"),
            ));
        }
        let mut out = vec![0.0; r * d];
        let lv = self.value(left);
        let xv = self.value(x);
        for blk in 0..r / j {
            let s = blk * j * d;
            gemm(j, j, d, 1.0, lv, false, &xv[s..s + j * d], false, 0.0, &mut out[s..s + j * d]);
        }
        let ng = self.node(left).needs_grad || self.node(x).needs_grad;
        self.finish(Op::SharedLeftMatMul(left.0, x.0), "shared_left_matmul", r, d, out, None, ng)
    }

    /// Per-block product `out_b = a_b @ b_b` with `a` blocks `(j, j)` and
    /// `b` blocks `(j, d)`, both stacked along rows.
    pub fn block_matmul_nn(&mut self, a: Value, b: Value, block: usize) -> Result<Value> {
        let (ra, ca) = self.shape(a);
        let (rb, d) = self.shape(b);
        if block == 0 || ca != block || ra != rb || ra % block != 0 {
            return Err(Self::mismatch(
                "block_matmul_nn",
                format!("a ({ra}, {ca}), b ({rb}, {d}), block {block}"),
            ));
        }
        let j = block;
        let mut out = vec![0.0; ra * d];
        let av = self.value(a);
        let bv = self.value(b);
        for blk in 0..ra / j {
            let sa = blk * j * j;
            let sb = blk * j * d;
            gemm(j, j, d, 1.0, &av[sa..sa + j * j], false, &bv[sb..sb + j * d], false, 0.0, &mut out[sb..sb + j * d]);
        }
        let ng = self.node(a).needs_grad || self.node(b).needs_grad;
        self.finish(Op::BlockMatMulNN { a: a.0, b: b.0, block }, "block_matmul_nn", ra, d, out, None, ng)
    }

    /// Per-block product `out_b = a_b @ b_b^T` with both operands stacked
    /// `(j, d)` blocks; output blocks are `(j, j)`.
    pub fn block_matmul_nt(&mut self, a: Value, b: Value, block: usize) -> Result<Value> {
        let (ra, da) = self.shape(a);
        let (rb, db) = self.shape(b);
        if block == 0 || ra != rb || da != db || ra % block != 0 {
            return Err(Self::mismatch(
                "block_matmul_nt",
                format!("a ({ra}, {da}), b ({rb}, {db}), block {block}"),
            ));
        }
        let j = block;
        let mut out = vec![0.0; ra * j];
        let av = self.value(a);
        let bv = self.value(b);
        for blk in 0..ra / j {
            let s = blk * j * da;
            let so = blk * j * j;
            gemm(j, da, j, 1.0, &av[s..s + j * da], false, &bv[s..s + j * da], true, 0.0, &mut out[so..so + j * j]);
        }
        let ng = self.node(a).needs_grad || self.node(b).needs_grad;
        self.finish(Op::BlockMatMulNT { a: a.0, b: b.0, block }, "block_matmul_nt", ra, j, out, None, ng)
    }

    fn elementwise_pair(
        &mut self,
        a: Value,
        b: Value,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Value> {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        if (ra, ca) != (rb, cb) {
            return Err(Self::mismatch(name, format!("({ra}, {ca}) vs ({rb}, {cb})")));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let ng = self.node(a).needs_grad || self.node(b).needs_grad;
        self.finish(op, name, ra, ca, out, None, ng)
    }

    pub fn add(&mut self, a: Value, b: Value) -> Result<Value> {
        self.elementwise_pair(a, b, "add", |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Value, b: Value) -> Result<Value> {
        self.elementwise_pair(a, b, "sub", |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Value, b: Value) -> Result<Value> {
        self.elementwise_pair(a, b, "mul", |x, y| x * y, Op::Mul(a.0, b.0))
    }

    /// Multiplication by a compile-time-known scalar constant.
    pub fn scale(&mut self, a: Value, c: f64) -> Result<Value> {
        if !c.is_finite() {
            return Err(Error::NonFinite { op: "scale".into() });
        }
        let (r, co) = self.shape(a);
        let out = self.value(a).iter().map(|&x| c * x).collect();
        let ng = self.node(a).needs_grad;
        self.finish(Op::Scale(a.0, c), "scale", r, co, out, None, ng)
    }

    /// Adds a `(1, d)` row vector to every row of `x`.
    pub fn broadcast_add(&mut self, x: Value, bias: Value) -> Result<Value> {
        let (r, d) = self.shape(x);
        let (rb, db) = self.shape(bias);
        if rb != 1 || db != d {
            return Err(Self::mismatch(
                "broadcast_add",
                format!("x ({r}, {d}), bias ({rb}, {db})"),
            ));
        }
        let bv = self.value(bias).to_vec();
        let mut out = self.value(x).to_vec();
        for row in out.chunks_exact_mut(d) {
            for (o, &b) in row.iter_mut().zip(&bv) {
                *o += b;
            }
        }
        let ng = self.node(x).needs_grad || self.node(bias).needs_grad;
        self.finish(Op::BroadcastAdd(x.0, bias.0), "broadcast_add", r, d, out, None, ng)
    }

    /// GELU with the tanh form `0.5 x (1 + tanh(√(2/π)(x + 0.044715 x³)))`.
    pub fn gelu(&mut self, a: Value) -> Result<Value> {
        let (r, c) = self.shape(a);
        let av = self.value(a);
        let mut out = Vec::with_capacity(av.len());
        let mut aux = Vec::with_capacity(av.len());
        for &x in av {
            let t = fast_tanh(SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x));
            aux.push(t);
            out.push(0.5 * x * (1.0 + t));
        }
        let ng = self.node(a).needs_grad;
        self.finish(Op::Gelu(a.0), "gelu", r, c, out, Some(aux), ng)
    }

    pub fn tanh(&mut self, a: Value) -> Result<Value> {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|&x| fast_tanh(x)).collect();
        let ng = self.node(a).needs_grad;
        self.finish(Op::Tanh(a.0), "tanh", r, c, out, None, ng)
    }

    pub fn sin(&mut self, a: Value) -> Result<Value> {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|&x| x.sin()).collect();
        let ng = self.node(a).needs_grad;
        self.finish(Op::Sin(a.0), "sin", r, c, out, None, ng)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Value) -> Result<Value> {
        let (r, c) = self.shape(a);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_exact_mut(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let ng = self.node(a).needs_grad;
        self.finish(Op::SoftmaxRows(a.0), "softmax_rows", r, c, out, None, ng)
    }

    /// Row-wise layer normalization followed by a learned affine:
    /// `y = gain ⊙ (x − μ)/√(σ² + eps) + bias`.
    pub fn layer_norm(&mut self, x: Value, gain: Value, bias: Value, eps: f64) -> Result<Value> {
        let (r, d) = self.shape(x);
        let (rg, dg) = self.shape(gain);
        let (rb, db) = self.shape(bias);
        if rg != 1 || rb != 1 || dg != d || db != d {
            return Err(Self::mismatch(
                "layer_norm",
                format!("x ({r}, {d}), gain ({rg}, {dg}), bias ({rb}, {db})"),
            ));
        }
        if !(eps > 0.0) {
            return Err(Error::invalid("layer_norm eps must be positive"));
        }
        let gv = self.value(gain).to_vec();
        let bv = self.value(bias).to_vec();
        let xv = self.value(x);
        let mut out = vec![0.0; r * d];
        // aux layout: normalized values (r*d) then per-row 1/σ (r)
        let mut aux = vec![0.0; r * d + r];
        for i in 0..r {
            let row = &xv[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            aux[r * d + i] = inv;
            for jj in 0..d {
                let xh = (row[jj] - mean) * inv;
                aux[i * d + jj] = xh;
                out[i * d + jj] = gv[jj] * xh + bv[jj];
            }
        }
        let ng = self.node(x).needs_grad || self.node(gain).needs_grad || self.node(bias).needs_grad;
        self.finish(
            Op::LayerNorm { x: x.0, gain: gain.0, bias: bias.0 },
            "layer_norm",
            r,
            d,
            out,
            Some(aux),
            ng,
        )
    }

    /// Concatenates two matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, a: Value, b: Value) -> Result<Value> {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        if ra != rb {
            return Err(Self::mismatch(
                "concat_cols",
                format!("({ra}, {ca}) vs ({rb}, {cb})"),
            ));
        }
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for i in 0..ra {
            out.extend_from_slice(&av[i * ca..(i + 1) * ca]);
            out.extend_from_slice(&bv[i * cb..(i + 1) * cb]);
        }
        let ng = self.node(a).needs_grad || self.node(b).needs_grad;
        self.finish(Op::ConcatCols(a.0, b.0), "concat_cols", ra, ca + cb, out, None, ng)
    }

    /// Column slice `x[:, start..start+len]`.
    pub fn slice_cols(&mut self, x: Value, start: usize, len: usize) -> Result<Value> {
        let (r, c) = self.shape(x);
        if len == 0 || start + len > c {
            return Err(Self::mismatch(
                "slice_cols",
                format!("slice {start}..{} of {c} columns", start + len),
            ));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&xv[i * c + start..i * c + start + len]);
        }
        let ng = self.node(x).needs_grad;
        self.finish(Op::SliceCols { x: x.0, start, len }, "slice_cols", r, len, out, None, ng)
    }

    /// Mean over all elements, producing a `(1, 1)` scalar.
    pub fn mean(&mut self, a: Value) -> Result<Value> {
        let v = self.value(a);
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let ng = self.node(a).needs_grad;
        self.finish(Op::Mean(a.0), "mean", 1, 1, vec![m], None, ng)
    }

    /// Sum over all elements, producing a `(1, 1)` scalar.
    pub fn sum(&mut self, a: Value) -> Result<Value> {
        let s = self.value(a).iter().sum();
        let ng = self.node(a).needs_grad;
        self.finish(Op::Sum(a.0), "sum", 1, 1, vec![s], None, ng)
    }

    /// Sum of squared elements, producing a `(1, 1)` scalar.
    pub fn sum_squares(&mut self, a: Value) -> Result<Value> {
        let s = self.value(a).iter().map(|&x| x * x).sum();
        let ng = self.node(a).needs_grad;
        self.finish(Op::SumSquares(a.0), "sum_squares", 1, 1, vec![s], None, ng)
    }

    /// Averages groups of consecutive row blocks: input `(g*n*block, d)`
    /// becomes `(n*block, d)` where output block `b` is the mean of input
    /// blocks `b*g..(b+1)*g`.
    pub fn block_mean(&mut self, x: Value, block: usize, groups: usize) -> Result<Value> {
        let (r, d) = self.shape(x);
        if block == 0 || groups == 0 || r % (block * groups) != 0 {
            return Err(Self::mismatch(
                "block_mean",
                format!("x ({r}, {d}), block {block}, groups {groups}"),
            ));
        }
        let out_rows = r / groups;
        let mut out = vec![0.0; out_rows * d];
        let xv = self.value(x);
        let scale = 1.0 / groups as f64;
        for ob in 0..out_rows / block {
            for g in 0..groups {
                let src = (ob * groups + g) * block * d;
                let dst = ob * block * d;
                for t in 0..block * d {
                    out[dst + t] += xv[src + t] * scale;
                }
            }
        }
        let ng = self.node(x).needs_grad;
        self.finish(Op::BlockMean { x: x.0, block, groups }, "block_mean", out_rows, d, out, None, ng)
    }

    // ── Backward pass ───────────────────────────────────────────────────

    /// Adjoints of every node with respect to a scalar output.
    ///
    /// Returns one slot per node; `None` where no gradient was required or
    /// none flowed.
    pub fn backward(&self, out: Value) -> Result<Vec<Option<Vec<f64>>>> {
        let on = self.node(out);
        if (on.rows, on.cols) != (1, 1) {
            return Err(Error::invalid(format!(
                "backward needs a scalar output, got ({}, {})",
                on.rows, on.cols
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[out.0] = Some(vec![1.0]);

        for i in (0..=out.0).rev() {
            if adj[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let dy = adj[i].take().expect("checked above");
            self.propagate(i, &dy, &mut adj)?;
            adj[i] = Some(dy);
        }

        for (i, slot) in adj.iter().enumerate() {
            if let Some(g) = slot {
                if !g.iter().all(|v| v.is_finite()) {
                    return Err(Error::NonFinite {
                        op: format!("backward of {}", self.op_name(i)),
                    });
                }
            }
        }
        Ok(adj)
    }

    fn op_name(&self, i: usize) -> &'static str {
        match self.nodes[i].op {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::SharedLeftMatMul(..) => "shared_left_matmul",
            Op::BlockMatMulNN { .. } => "block_matmul_nn",
            Op::BlockMatMulNT { .. } => "block_matmul_nt",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::BroadcastAdd(..) => "broadcast_add",
            Op::Gelu(..) => "gelu",
            Op::Tanh(..) => "tanh",
            Op::Sin(..) => "sin",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceCols { .. } => "slice_cols",
            Op::Mean(..) => "mean",
            Op::Sum(..) => "sum",
            Op::SumSquares(..) => "sum_squares",
            Op::BlockMean { .. } => "block_mean",
        }
    }

    fn grad_slot<'a>(
        adj: &'a mut [Option<Vec<f64>>],
        id: usize,
        len: usize,
    ) -> &'a mut Vec<f64> {
        adj[id].get_or_insert_with(|| vec![0.0; len])
    }

    fn wants(&self, id: usize) -> bool {
        self.nodes[id].needs_grad
    }

    fn propagate(&self, i: usize, dy: &[f64], adj: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        match node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.shape(Value(a));
                let n = self.nodes[b].cols;
                if self.wants(a) {
                    let da = Self::grad_slot(adj, a, m * k);
                    gemm(m, n, k, 1.0, dy, false, self.value(Value(b)), true, 1.0, da);
                }
                if self.wants(b) {
                    let db = Self::grad_slot(adj, b, k * n);
                    gemm(k, m, n, 1.0, self.value(Value(a)), true, dy, false, 1.0, db);
                }
            }
            Op::SharedLeftMatMul(l, x) => {
                let (j, _) = self.shape(Value(l));
                let (r, d) = self.shape(Value(x));
                if self.wants(l) {
                    let dl = Self::grad_slot(adj, l, j * j);
                    let xv = self.value(Value(x));
                    for blk in 0..r / j {
                        let s = blk * j * d;
                        gemm(j, d, j, 1.0, &dy[s..s + j * d], false, &xv[s..s + j * d], true, 1.0, dl);
                    }
                }
                if self.wants(x) {
                    let lv = self.value(Value(l));
                    let dx = Self::grad_slot(adj, x, r * d);
                    for blk in 0..r / j {
                        let s = blk * j * d;
                        gemm(j, j, d, 1.0, lv, true, &dy[s..s + j * d], false, 1.0, &mut dx[s..s + j * d]);
                    }
                }
            }
            Op::BlockMatMulNN { a, b, block } => {
                let j = block;
                let (r, d) = self.shape(Value(b));
                if self.wants(a) {
                    let bv = self.value(Value(b));
                    let da = Self::grad_slot(adj, a, r * j);
                    for blk in 0..r / j {
                        let sb = blk * j * d;
                        let sa = blk * j * j;
                        gemm(j, d, j, 1.0, &dy[sb..sb + j * d], false, &bv[sb..sb + j * d], true, 1.0, &mut da[sa..sa + j * j]);
                    }
                }
                if self.wants(b) {
                    let av = self.value(Value(a));
                    let db = Self::grad_slot(adj, b, r * d);
                    for blk in 0..r / j {
                        let sb = blk * j * d;
                        let sa = blk * j * j;
                        gemm(j, j, d, 1.0, &av[sa..sa + j * j], true, &dy[sb..sb + j * d], false, 1.0, &mut db[sb..sb + j * d]);
                    }
                }
            }
            Op::BlockMatMulNT { a, b, block } => {
                let j = block;
                let (r, d) = self.shape(Value(a));
                if self.wants(a) {
                    let bv = self.value(Value(b));
                    let da = Self::grad_slot(adj, a, r * d);
                    for blk in 0..r / j {
                        let s = blk * j * d;
                        let so = blk * j * j;
                        gemm(j, j, d, 1.0, &dy[so..so + j * j], false, &bv[s..s + j * d], false, 1.0, &mut da[s..s + j * d]);
                    }
                }
                if self.wants(b) {
                    let av = self.value(Value(a));
                    let db = Self::grad_slot(adj, b, r * d);
                    for blk in 0..r / j {
                        let s = blk * j * d;
                        let so = blk * j * j;
                        gemm(j, j, d, 1.0, &dy[so..so + j * j], true, &av[s..s + j * d], false, 1.0, &mut db[s..s + j * d]);
                    }
                }
            }
            Op::Add(a, b) => {
                for id in [a, b] {
                    if self.wants(id) {
                        let g = Self::grad_slot(adj, id, dy.len());
                        for (s, &d) in g.iter_mut().zip(dy) {
                            *s += d;
                        }
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.wants(a) {
                    let g = Self::grad_slot(adj, a, dy.len());
                    for (s, &d) in g.iter_mut().zip(dy) {
                        *s += d;
                    }
                }
                if self.wants(b) {
                    let g = Self::grad_slot(adj, b, dy.len());
                    for (s, &d) in g.iter_mut().zip(dy) {
                        *s -= d;
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.wants(a) {
                    let bv = self.value(Value(b));
                    let g = Self::grad_slot(adj, a, dy.len());
                    for ((s, &d), &x) in g.iter_mut().zip(dy).zip(bv) {
                        *s += d * x;
                    }
                }
                if self.wants(b) {
                    let av = self.value(Value(a));
                    let g = Self::grad_slot(adj, b, dy.len());
                    for ((s, &d), &x) in g.iter_mut().zip(dy).zip(av) {
                        *s += d * x;
                    }
                }
            }
            Op::Scale(a, c) => {
                if self.wants(a) {
                    let g = Self::grad_slot(adj, a, dy.len());
                    for (s, &d) in g.iter_mut().zip(dy) {
                        *s += c * d;
                    }
                }
            }
            Op::BroadcastAdd(x, b) => {
                let (r, d) = self.shape(Value(x));
                if self.wants(x) {
                    let g = Self::grad_slot(adj, x, r * d);
                    for (s, &dv) in g.iter_mut().zip(dy) {
                        *s += dv;
                    }
                }
                if self.wants(b) {
                    let g = Self::grad_slot(adj, b, d);
                    for row in dy.chunks_exact(d) {
                        for (s, &dv) in g.iter_mut().zip(row) {
                            *s += dv;
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                if self.wants(a) {
                    let av = self.value(Value(a));
                    let t = node.aux.as_ref().expect("gelu caches tanh");
                    let g = Self::grad_slot(adj, a, dy.len());
                    for k in 0..dy.len() {
                        let x = av[k];
                        let tk = t[k];
                        let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
                        let deriv = 0.5 * (1.0 + tk) + 0.5 * x * (1.0 - tk * tk) * du;
                        g[k] += dy[k] * deriv;
                    }
                }
            }
            Op::Tanh(a) => {
                if self.wants(a) {
                    let yv = node.data.as_slice();
                    let g = Self::grad_slot(adj, a, dy.len());
                    for k in 0..dy.len() {
                        g[k] += dy[k] * (1.0 - yv[k] * yv[k]);
                    }
                }
            }
            Op::Sin(a) => {
                if self.wants(a) {
                    let av = self.value(Value(a));
                    let g = Self::grad_slot(adj, a, dy.len());
                    for k in 0..dy.len() {
                        g[k] += dy[k] * av[k].cos();
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                if self.wants(a) {
                    let y = node.data.as_slice();
                    let c = node.cols;
                    let g = Self::grad_slot(adj, a, dy.len());
                    for row in 0..node.rows {
                        let s = row * c;
                        let dot: f64 = (0..c).map(|k| dy[s + k] * y[s + k]).sum();
                        for k in 0..c {
                            g[s + k] += y[s + k] * (dy[s + k] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias } => {
                let (r, d) = self.shape(Value(x));
                let aux = node.aux.as_ref().expect("layer_norm caches normals");
                let (xh, inv) = aux.split_at(r * d);
                if self.wants(gain) {
                    let g = Self::grad_slot(adj, gain, d);
                    for i in 0..r {
                        for jj in 0..d {
                            g[jj] += dy[i * d + jj] * xh[i * d + jj];
                        }
                    }
                }
                if self.wants(bias) {
                    let g = Self::grad_slot(adj, bias, d);
                    for row in dy.chunks_exact(d) {
                        for (s, &dv) in g.iter_mut().zip(row) {
                            *s += dv;
                        }
                    }
                }
                if self.wants(x) {
                    let gv = self.value(Value(gain));
                    let g = Self::grad_slot(adj, x, r * d);
                    let dinv = 1.0 / d as f64;
                    for i in 0..r {
                        let s = i * d;
                        let mut mean_g = 0.0;
                        let mut mean_gx = 0.0;
                        for jj in 0..d {
                            let gj = dy[s + jj] * gv[jj];
                            mean_g += gj;
                            mean_gx += gj * xh[s + jj];
                        }
                        mean_g *= dinv;
                        mean_gx *= dinv;
                        for jj in 0..d {
                            let gj = dy[s + jj] * gv[jj];
                            g[s + jj] += inv[i] * (gj - mean_g - xh[s + jj] * mean_gx);
                        }
                    }
                }
            }
            Op::ConcatCols(a, b) => {
                let (r, ca) = self.shape(Value(a));
                let cb = self.nodes[b].cols;
                let c = ca + cb;
                if self.wants(a) {
                    let g = Self::grad_slot(adj, a, r * ca);
                    for i in 0..r {
                        for jj in 0..ca {
                            g[i * ca + jj] += dy[i * c + jj];
                        }
                    }
                }
                if self.wants(b) {
                    let g = Self::grad_slot(adj, b, r * cb);
                    for i in 0..r {
                        for jj in 0..cb {
                            g[i * cb + jj] += dy[i * c + ca + jj];
                        }
                    }
                }
            }
            Op::SliceCols { x, start, len } => {
                if self.wants(x) {
                    let (r, c) = self.shape(Value(x));
                    let g = Self::grad_slot(adj, x, r * c);
                    for i in 0..r {
                        for jj in 0..len {
                            g[i * c + start + jj] += dy[i * len + jj];
                        }
                    }
                }
            }
            Op::Mean(a) => {
                if self.wants(a) {
                    let n = self.nodes[a].rows * self.nodes[a].cols;
                    let g = Self::grad_slot(adj, a, n);
                    let d = dy[0] / n as f64;
                    for s in g.iter_mut() {
                        *s += d;
                    }
                }
            }
            Op::Sum(a) => {
                if self.wants(a) {
                    let n = self.nodes[a].rows * self.nodes[a].cols;
                    let g = Self::grad_slot(adj, a, n);
                    for s in g.iter_mut() {
                        *s += dy[0];
                    }
                }
            }
            Op::SumSquares(a) => {
                if self.wants(a) {
                    let av = self.value(Value(a));
                    let g = Self::grad_slot(adj, a, av.len());
                    for (s, &x) in g.iter_mut().zip(av) {
                        *s += 2.0 * dy[0] * x;
                    }
                }
            }
            Op::BlockMean { x, block, groups } => {
                if self.wants(x) {
                    let (r, d) = self.shape(Value(x));
                    let g = Self::grad_slot(adj, x, r * d);
                    let scale = 1.0 / groups as f64;
                    let out_rows = r / groups;
                    for ob in 0..out_rows / block {
                        for gi in 0..groups {
                            let src = (ob * groups + gi) * block * d;
                            let dst = ob * block * d;
                            for t in 0..block * d {
                                g[src + t] += dy[dst + t] * scale;
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}
