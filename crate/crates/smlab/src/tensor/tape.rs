use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::kernels;
use super::{NodeRef, Tensor};
use crate::error::{Error, Result};

static TAPE_COUNTER: AtomicU64 = AtomicU64::new(1);

/// Operation kinds accepted by [`Tape::record`], in the order of the public
/// primitive set: arithmetic, linear algebra, activations, reductions,
/// structure.
pub const PUBLIC_OP_KINDS: &[&str] = &[
    "add",
    "subtract",
    "scale",
    "multiply",
    "matvec",
    "bias-add",
    "tanh",
    "softplus",
    "sum",
    "inner",
    "sqnorm",
    "concat",
];

/// Primitive operations. The public set is what [`Tape::record`] accepts;
/// the remaining variants are adjoint helpers emitted by `backward` so that
/// every vector–Jacobian product is itself a recorded composite — the
/// property that makes gradients differentiable again. The set is closed:
/// each variant's adjoint is expressible in these variants.
#[derive(Clone, Copy, Debug, PartialEq)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    /// scalar ⊗ tensor (operand a is rank-0)
    ScalarMul,
    /// W[m,n]·x[n] → [m], or batched X[B,n] → [B,m]
    MatVec,
    /// Wᵀ[m,n]·v[m] → [n], or batched V[B,m] → [B,n]
    MatVecT,
    /// g[m]⊗x[n] → [m,n]; batched inputs accumulate Σ_b g_b⊗x_b
    Outer,
    /// X[B,m] + b[m] broadcast over rows (or plain [m]+[m])
    BiasAdd,
    /// [B,n] → [n] column sums
    SumRows,
    /// [n] → [rows,n] row replication
    Repeat(usize),
    Tanh,
    Softplus,
    Sigmoid,
    /// elementwise 1 − x
    OneMinus,
    /// all elements → scalar
    Sum,
    /// scalar → given shape, filled
    Expand,
    /// same-shape full contraction → scalar
    Inner,
    /// ‖·‖² → scalar
    SqNorm,
    /// per-row inner product: [B,n]×[B,n] → [B]
    RowInner,
    /// per-row scaling: [B,n]×[B] → [B,n]
    RowScale,
    /// along the last axis
    Concat,
    /// columns (or elements) [start, end) of the last axis
    Slice(usize, usize),
    /// place into columns [start, end) of a zero tensor with `total` columns
    PadZero(usize, usize),
}

struct Node {
    op: Op,
    a: Option<usize>,
    b: Option<usize>,
    shape: Vec<usize>,
    out: Arc<[f64]>,
}

/// Append-only record of primitive operations.
///
/// Single-writer by construction: every recording method takes `&mut self`,
/// so concurrent training runs each own an independent tape. Node order is
/// topological (operands precede outputs) because operands must exist to be
/// recorded against.
pub struct Tape {
    uid: u64,
    nodes: Vec<Node>,
    leaves: Vec<usize>,
    checked: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            uid: TAPE_COUNTER.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            leaves: Vec::new(),
            checked: true,
        }
    }

    /// Enables or disables the non-finite output check (on by default).
    pub fn set_checked(&mut self, on: bool) {
        self.checked = on;
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Registers `data` as a differentiation root and returns its handle.
    pub fn leaf(&mut self, t: &Tensor) -> Tensor {
        let idx = self.push_leaf(t.shape().to_vec(), t.data_arc());
        self.leaves.push(idx);
        self.tensor_of(idx)
    }

    /// Returns `t` itself when it already lives on this tape, otherwise
    /// registers it as a leaf. Off-tape handles are an error.
    pub fn ensure(&mut self, t: &Tensor) -> Result<Tensor> {
        match t.node {
            Some(r) if r.tape == self.uid => Ok(t.clone()),
            Some(_) => Err(Error::TapeMismatch { op: "ensure" }),
            None => Ok(self.leaf(t)),
        }
    }

    /// Leaf indices registered via [`Tape::leaf`], in registration order.
    pub fn leaf_count(&self) -> usize {
        self.leaves.len()
    }

    fn push_leaf(&mut self, shape: Vec<usize>, data: Arc<[f64]>) -> usize {
        self.nodes.push(Node {
            op: Op::Leaf,
            a: None,
            b: None,
            shape,
            out: data,
        });
        self.nodes.len() - 1
    }

    fn tensor_of(&self, idx: usize) -> Tensor {
        let n = &self.nodes[idx];
        Tensor::with_node(n.shape.clone(), n.out.clone(), NodeRef { tape: self.uid, idx })
    }

    /// Index of `t` on this tape, interning it as a constant leaf if it
    /// carries no handle. A handle from another tape is an error.
    fn enlist(&mut self, t: &Tensor, op: &'static str) -> Result<usize> {
        match t.node {
            Some(r) if r.tape == self.uid => Ok(r.idx),
            Some(_) => Err(Error::TapeMismatch { op }),
            None => Ok(self.push_leaf(t.shape().to_vec(), t.data_arc())),
        }
    }

    fn push_op(
        &mut self,
        op: Op,
        a: Option<usize>,
        b: Option<usize>,
        shape: Vec<usize>,
        out: Vec<f64>,
        name: &'static str,
    ) -> Result<Tensor> {
        if self.checked && !out.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node {
            op,
            a,
            b,
            shape,
            out: out.into(),
        });
        Ok(self.tensor_of(self.nodes.len() - 1))
    }

    fn shape_of(&self, idx: usize) -> &[usize] {
        &self.nodes[idx].shape
    }

    fn data_of(&self, idx: usize) -> &[f64] {
        &self.nodes[idx].out
    }

    // --- public primitives ------------------------------------------------

    /// Records one primitive by kind name. Unknown kinds are a contract
    /// violation; see [`PUBLIC_OP_KINDS`] for the accepted set. `scale`
    /// expects operands `[x, s]` with `s` rank-0.
    pub fn record(&mut self, kind: &str, operands: &[&Tensor]) -> Result<Tensor> {
        let need = |n: usize| -> Result<()> {
            if operands.len() != n {
                return Err(Error::ContractViolation(format!(
                    "op '{kind}' expects {n} operand(s), got {}",
                    operands.len()
                )));
            }
            Ok(())
        };
        match kind {
            "add" => {
                need(2)?;
                self.add(operands[0], operands[1])
            }
            "subtract" => {
                need(2)?;
                self.sub(operands[0], operands[1])
            }
            "scale" => {
                need(2)?;
                self.scalar_mul(operands[1], operands[0])
            }
            "multiply" => {
                need(2)?;
                self.mul(operands[0], operands[1])
            }
            "matvec" => {
                need(2)?;
                self.matvec(operands[0], operands[1])
            }
            "bias-add" => {
                need(2)?;
                self.bias_add(operands[0], operands[1])
            }
            "tanh" => {
                need(1)?;
                self.tanh(operands[0])
            }
            "softplus" => {
                need(1)?;
                self.softplus(operands[0])
            }
            "sum" => {
                need(1)?;
                self.sum(operands[0])
            }
            "inner" => {
                need(2)?;
                self.inner(operands[0], operands[1])
            }
            "sqnorm" => {
                need(1)?;
                self.sqnorm(operands[0])
            }
            "concat" => {
                need(2)?;
                self.concat(operands[0], operands[1])
            }
            other => Err(Error::ContractViolation(format!(
                "unknown op kind '{other}'"
            ))),
        }
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.elementwise_pair(Op::Add, a, b, "add")
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.elementwise_pair(Op::Sub, a, b, "subtract")
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.elementwise_pair(Op::Mul, a, b, "multiply")
    }

    fn elementwise_pair(&mut self, op: Op, a: &Tensor, b: &Tensor, name: &'static str) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(Error::shape(name, a.shape(), b.shape()));
        }
        let ia = self.enlist(a, name)?;
        let ib = self.enlist(b, name)?;
        let (da, db) = (self.data_of(ia), self.data_of(ib));
        let out: Vec<f64> = match op {
            Op::Add => da.iter().zip(db).map(|(x, y)| x + y).collect(),
            Op::Sub => da.iter().zip(db).map(|(x, y)| x - y).collect(),
            Op::Mul => da.iter().zip(db).map(|(x, y)| x * y).collect(),
            _ => unreachable!(),
        };
        let shape = self.shape_of(ia).to_vec();
        self.push_op(op, Some(ia), Some(ib), shape, out, name)
    }

    /// Scale every element of `t` by the rank-0 tensor `s`.
    pub fn scalar_mul(&mut self, s: &Tensor, t: &Tensor) -> Result<Tensor> {
        if !s.is_scalar() {
            return Err(Error::shape("scale", "[]", s.shape()));
        }
        let is = self.enlist(s, "scale")?;
        let it = self.enlist(t, "scale")?;
        let f = self.data_of(is)[0];
        let out: Vec<f64> = self.data_of(it).iter().map(|x| x * f).collect();
        let shape = self.shape_of(it).to_vec();
        self.push_op(Op::ScalarMul, Some(is), Some(it), shape, out, "scale")
    }

    /// Convenience: scale by a plain constant (interned as a leaf).
    pub fn scale(&mut self, t: &Tensor, c: f64) -> Result<Tensor> {
        let s = Tensor::scalar(c);
        self.scalar_mul(&s, t)
    }

    fn neg(&mut self, t: &Tensor) -> Result<Tensor> {
        self.scale(t, -1.0)
    }

    /// W[m,n]·x for x of shape [n] (→ [m]) or batched rows [B,n] (→ [B,m]).
    pub fn matvec(&mut self, w: &Tensor, x: &Tensor) -> Result<Tensor> {
        let iw = self.enlist(w, "matvec")?;
        let ix = self.enlist(x, "matvec")?;
        let ws = self.shape_of(iw).to_vec();
        let xs = self.shape_of(ix).to_vec();
        if ws.len() != 2 {
            return Err(Error::shape("matvec", "[m,n]", &ws));
        }
        let (m, n) = (ws[0], ws[1]);
        let (rows, shape) = match xs.as_slice() {
            [len] if *len == n => (1, vec![m]),
            [b, len] if *len == n => (*b, vec![*b, m]),
            _ => return Err(Error::shape("matvec", format!("[..,{n}]"), &xs)),
        };
        let mut out = vec![0.0; rows * m];
        kernels::matmul_abt(self.data_of(ix), self.data_of(iw), &mut out, rows, m, n);
        self.push_op(Op::MatVec, Some(iw), Some(ix), shape, out, "matvec")
    }

    /// Wᵀ[m,n]·v for v of shape [m] (→ [n]) or batched rows [B,m] (→ [B,n]).
    pub fn matvect(&mut self, w: &Tensor, v: &Tensor) -> Result<Tensor> {
        let iw = self.enlist(w, "matvect")?;
        let iv = self.enlist(v, "matvect")?;
        let ws = self.shape_of(iw).to_vec();
        let vs = self.shape_of(iv).to_vec();
        if ws.len() != 2 {
            return Err(Error::shape("matvect", "[m,n]", &ws));
        }
        let (m, n) = (ws[0], ws[1]);
        let (rows, shape) = match vs.as_slice() {
            [len] if *len == m => (1, vec![n]),
            [b, len] if *len == m => (*b, vec![*b, n]),
            _ => return Err(Error::shape("matvect", format!("[..,{m}]"), &vs)),
        };
        let mut out = vec![0.0; rows * n];
        kernels::matmul_ab(self.data_of(iv), self.data_of(iw), &mut out, rows, n, m);
        self.push_op(Op::MatVecT, Some(iw), Some(iv), shape, out, "matvect")
    }

    /// Outer product g⊗x → [m,n]; with batched inputs [B,m],[B,n] the result
    /// accumulates Σ_b g_b⊗x_b (the weight-gradient pattern).
    pub fn outer(&mut self, g: &Tensor, x: &Tensor) -> Result<Tensor> {
        let ig = self.enlist(g, "outer")?;
        let ix = self.enlist(x, "outer")?;
        let gs = self.shape_of(ig).to_vec();
        let xs = self.shape_of(ix).to_vec();
        let (rows, m, n) = match (gs.as_slice(), xs.as_slice()) {
            ([m], [n]) => (1, *m, *n),
            ([bg, m], [bx, n]) if bg == bx => (*bg, *m, *n),
            _ => return Err(Error::shape("outer", "[B,m] with [B,n]", (&gs, &xs))),
        };
        let mut out = vec![0.0; m * n];
        kernels::matmul_atb(self.data_of(ig), self.data_of(ix), &mut out, rows, m, n);
        self.push_op(Op::Outer, Some(ig), Some(ix), vec![m, n], out, "outer")
    }

    /// X[B,m] + b[m] broadcast over rows; also accepts [m]+[m].
    pub fn bias_add(&mut self, x: &Tensor, b: &Tensor) -> Result<Tensor> {
        let ix = self.enlist(x, "bias-add")?;
        let ib = self.enlist(b, "bias-add")?;
        let xs = self.shape_of(ix).to_vec();
        let bs = self.shape_of(ib).to_vec();
        if bs.len() != 1 {
            return Err(Error::shape("bias-add", "[m]", &bs));
        }
        let m = bs[0];
        let rows = match xs.as_slice() {
            [len] if *len == m => 1,
            [b_, len] if *len == m => *b_,
            _ => return Err(Error::shape("bias-add", format!("[..,{m}]"), &xs)),
        };
        let bias = self.data_of(ib).to_vec();
        let xd = self.data_of(ix);
        let mut out = vec![0.0; rows * m];
        for r in 0..rows {
            for j in 0..m {
                out[r * m + j] = xd[r * m + j] + bias[j];
            }
        }
        self.push_op(Op::BiasAdd, Some(ix), Some(ib), xs, out, "bias-add")
    }

    /// Column sums: [B,n] → [n].
    pub fn sum_rows(&mut self, x: &Tensor) -> Result<Tensor> {
        let ix = self.enlist(x, "sum-rows")?;
        let xs = self.shape_of(ix).to_vec();
        let [rows, cols] = xs.as_slice() else {
            return Err(Error::shape("sum-rows", "[B,n]", &xs));
        };
        let (rows, cols) = (*rows, *cols);
        let mut out = vec![0.0; cols];
        kernels::sum_rows(self.data_of(ix), &mut out, rows, cols);
        self.push_op(Op::SumRows, Some(ix), None, vec![cols], out, "sum-rows")
    }

    /// Row replication: [n] → [rows,n].
    pub fn repeat(&mut self, x: &Tensor, rows: usize) -> Result<Tensor> {
        let ix = self.enlist(x, "repeat")?;
        let xs = self.shape_of(ix).to_vec();
        let [n] = xs.as_slice() else {
            return Err(Error::shape("repeat", "[n]", &xs));
        };
        let n = *n;
        let src = self.data_of(ix);
        let mut out = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            out.extend_from_slice(src);
        }
        self.push_op(Op::Repeat(rows), Some(ix), None, vec![rows, n], out, "repeat")
    }

    pub fn tanh(&mut self, x: &Tensor) -> Result<Tensor> {
        let ix = self.enlist(x, "tanh")?;
        let src = self.data_of(ix);
        let mut out = vec![0.0; src.len()];
        kernels::vtanh(src, &mut out);
        let shape = self.shape_of(ix).to_vec();
        self.push_op(Op::Tanh, Some(ix), None, shape, out, "tanh")
    }

    pub fn softplus(&mut self, x: &Tensor) -> Result<Tensor> {
        let ix = self.enlist(x, "softplus")?;
        let out: Vec<f64> = self.data_of(ix).iter().map(|&v| kernels::softplus(v)).collect();
        let shape = self.shape_of(ix).to_vec();
        self.push_op(Op::Softplus, Some(ix), None, shape, out, "softplus")
    }

    fn sigmoid(&mut self, x: &Tensor) -> Result<Tensor> {
        let ix = self.enlist(x, "sigmoid")?;
        let out: Vec<f64> = self.data_of(ix).iter().map(|&v| kernels::sigmoid(v)).collect();
        let shape = self.shape_of(ix).to_vec();
        self.push_op(Op::Sigmoid, Some(ix), None, shape, out, "sigmoid")
    }

    fn one_minus(&mut self, x: &Tensor) -> Result<Tensor> {
        let ix = self.enlist(x, "one-minus")?;
        let out: Vec<f64> = self.data_of(ix).iter().map(|&v| 1.0 - v).collect();
        let shape = self.shape_of(ix).to_vec();
        self.push_op(Op::OneMinus, Some(ix), None, shape, out, "one-minus")
    }

    /// Sum of all elements → scalar.
    pub fn sum(&mut self, x: &Tensor) -> Result<Tensor> {
        let ix = self.enlist(x, "sum")?;
        let total: f64 = self.data_of(ix).iter().sum();
        self.push_op(Op::Sum, Some(ix), None, vec![], vec![total], "sum")
    }

    /// Scalar broadcast to `shape`, filled with its value.
    pub fn expand(&mut self, s: &Tensor, shape: &[usize]) -> Result<Tensor> {
        if !s.is_scalar() {
            return Err(Error::shape("expand", "[]", s.shape()));
        }
        let is = self.enlist(s, "expand")?;
        let v = self.data_of(is)[0];
        let n: usize = shape.iter().product();
        self.push_op(Op::Expand, Some(is), None, shape.to_vec(), vec![v; n], "expand")
    }

    /// Full contraction of two same-shape tensors → scalar.
    pub fn inner(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(Error::shape("inner", a.shape(), b.shape()));
        }
        let ia = self.enlist(a, "inner")?;
        let ib = self.enlist(b, "inner")?;
        let v = kernels::dot(self.data_of(ia), self.data_of(ib));
        self.push_op(Op::Inner, Some(ia), Some(ib), vec![], vec![v], "inner")
    }

    /// Squared L2 norm of all elements → scalar.
    pub fn sqnorm(&mut self, x: &Tensor) -> Result<Tensor> {
        let ix = self.enlist(x, "sqnorm")?;
        let v = kernels::sqnorm(self.data_of(ix));
        self.push_op(Op::SqNorm, Some(ix), None, vec![], vec![v], "sqnorm")
    }

    /// Per-row inner products: [B,n]×[B,n] → [B].
    pub fn row_inner(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(Error::shape("row-inner", a.shape(), b.shape()));
        }
        let ia = self.enlist(a, "row-inner")?;
        let ib = self.enlist(b, "row-inner")?;
        let xs = self.shape_of(ia).to_vec();
        let [rows, cols] = xs.as_slice() else {
            return Err(Error::shape("row-inner", "[B,n]", &xs));
        };
        let (rows, cols) = (*rows, *cols);
        let mut out = vec![0.0; rows];
        kernels::row_inner(self.data_of(ia), self.data_of(ib), &mut out, rows, cols);
        self.push_op(Op::RowInner, Some(ia), Some(ib), vec![rows], out, "row-inner")
    }

    /// Per-row scaling: [B,n]×[B] → [B,n].
    pub fn row_scale(&mut self, x: &Tensor, s: &Tensor) -> Result<Tensor> {
        let ix = self.enlist(x, "row-scale")?;
        let is = self.enlist(s, "row-scale")?;
        let xs = self.shape_of(ix).to_vec();
        let ss = self.shape_of(is).to_vec();
        let ([rows, cols], [srows]) = (xs.as_slice(), ss.as_slice()) else {
            return Err(Error::shape("row-scale", "[B,n] with [B]", (&xs, &ss)));
        };
        if rows != srows {
            return Err(Error::shape("row-scale", rows, srows));
        }
        let (rows, cols) = (*rows, *cols);
        let mut out = vec![0.0; rows * cols];
        kernels::row_scale(self.data_of(ix), self.data_of(is), &mut out, rows, cols);
        self.push_op(Op::RowScale, Some(ix), Some(is), xs, out, "row-scale")
    }

    /// Concatenation along the last axis: [n]+[m] → [n+m] or
    /// [B,n]+[B,m] → [B,n+m].
    pub fn concat(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let ia = self.enlist(a, "concat")?;
        let ib = self.enlist(b, "concat")?;
        let sa = self.shape_of(ia).to_vec();
        let sb = self.shape_of(ib).to_vec();
        let (shape, out) = match (sa.as_slice(), sb.as_slice()) {
            ([n], [m]) => {
                let mut out = Vec::with_capacity(n + m);
                out.extend_from_slice(self.data_of(ia));
                out.extend_from_slice(self.data_of(ib));
                (vec![n + m], out)
            }
            ([ba, n], [bb, m]) if ba == bb => {
                let (rows, n, m) = (*ba, *n, *m);
                let (da, db) = (self.data_of(ia), self.data_of(ib));
                let mut out = Vec::with_capacity(rows * (n + m));
                for r in 0..rows {
                    out.extend_from_slice(&da[r * n..(r + 1) * n]);
                    out.extend_from_slice(&db[r * m..(r + 1) * m]);
                }
                (vec![rows, n + m], out)
            }
            _ => return Err(Error::shape("concat", "matching ranks/batch", (&sa, &sb))),
        };
        self.push_op(Op::Concat, Some(ia), Some(ib), shape, out, "concat")
    }

    /// Columns (rank 2) or elements (rank 1) [start, end) of the last axis.
    pub fn slice(&mut self, x: &Tensor, start: usize, end: usize) -> Result<Tensor> {
        let ix = self.enlist(x, "slice")?;
        let xs = self.shape_of(ix).to_vec();
        let width = *xs.last().ok_or_else(|| Error::shape("slice", "rank ≥ 1", &xs))?;
        if start >= end || end > width {
            return Err(Error::IndexOutOfRange { index: end, len: width });
        }
        let w = end - start;
        let (shape, out) = match xs.as_slice() {
            [_] => (vec![w], self.data_of(ix)[start..end].to_vec()),
            [rows, _] => {
                let rows = *rows;
                let d = self.data_of(ix);
                let mut out = Vec::with_capacity(rows * w);
                for r in 0..rows {
                    out.extend_from_slice(&d[r * width + start..r * width + end]);
                }
                (vec![rows, w], out)
            }
            _ => return Err(Error::shape("slice", "rank ≤ 2", &xs)),
        };
        self.push_op(Op::Slice(start, end), Some(ix), None, shape, out, "slice")
    }

    /// Embeds `x` into a wider last axis of `total` columns, zero elsewhere,
    /// occupying columns [start, start + width).
    fn pad_zero(&mut self, x: &Tensor, start: usize, total: usize) -> Result<Tensor> {
        let ix = self.enlist(x, "pad-zero")?;
        let xs = self.shape_of(ix).to_vec();
        let width = *xs.last().ok_or_else(|| Error::shape("pad-zero", "rank ≥ 1", &xs))?;
        if start + width > total {
            return Err(Error::IndexOutOfRange {
                index: start + width,
                len: total,
            });
        }
        let (shape, out) = match xs.as_slice() {
            [_] => {
                let mut out = vec![0.0; total];
                out[start..start + width].copy_from_slice(self.data_of(ix));
                (vec![total], out)
            }
            [rows, _] => {
                let rows = *rows;
                let d = self.data_of(ix);
                let mut out = vec![0.0; rows * total];
                for r in 0..rows {
                    out[r * total + start..r * total + start + width]
                        .copy_from_slice(&d[r * width..(r + 1) * width]);
                }
                (vec![rows, total], out)
            }
            _ => return Err(Error::shape("pad-zero", "rank ≤ 2", &xs)),
        };
        self.push_op(
            Op::PadZero(start, start + width),
            Some(ix),
            None,
            shape,
            out,
            "pad-zero",
        )
    }

    // --- differentiation ----------------------------------------------------

    /// Reverse-mode gradients of a scalar `output` with respect to each
    /// tensor in `wrt`.
    ///
    /// The backward computation is recorded on the tape, so every returned
    /// gradient is itself differentiable — second order and beyond come from
    /// calling `backward` on (functions of) earlier gradients.
    ///
    /// A `wrt` tensor that lives on another tape or carries no handle gets a
    /// zero gradient (documented behavior, not an error). Nodes that cannot
    /// reach any `wrt` leaf are skipped entirely, so e.g. an input-gradient
    /// pass through a network never forms weight-gradient products.
    pub fn backward(&mut self, output: &Tensor, wrt: &[&Tensor]) -> Result<Vec<Tensor>> {
        if !output.is_scalar() {
            return Err(Error::ContractViolation(format!(
                "backward output must be scalar, got shape {:?}",
                output.shape()
            )));
        }
        let oidx = match output.node {
            Some(r) if r.tape == self.uid => r.idx,
            Some(_) => return Err(Error::TapeMismatch { op: "backward" }),
            None => {
                return Err(Error::ContractViolation(
                    "backward output is not on the tape".into(),
                ))
            }
        };

        let wrt_idx: Vec<Option<usize>> = wrt
            .iter()
            .map(|t| match t.node {
                Some(r) if r.tape == self.uid => Some(r.idx),
                _ => None,
            })
            .collect();

        // Forward reachability from the wrt set: a node needs an adjoint only
        // if some wrt leaf can influence it.
        let frozen = self.nodes.len();
        let mut need = vec![false; frozen];
        for idx in wrt_idx.iter().flatten() {
            need[*idx] = true;
        }
        for i in 0..frozen {
            if need[i] {
                continue;
            }
            let n = &self.nodes[i];
            let hit = n.a.map(|j| need[j]).unwrap_or(false) || n.b.map(|j| need[j]).unwrap_or(false);
            if hit {
                need[i] = true;
            }
        }

        let mut adj: Vec<Option<Tensor>> = (0..frozen).map(|_| None).collect();
        if need[oidx] {
            let seed = Tensor::scalar(1.0);
            adj[oidx] = Some(self.leaf_internal(&seed));
            for i in (0..=oidx).rev() {
                if !need[i] {
                    continue;
                }
                let Some(g) = adj[i].clone() else { continue };
                let contributions = self.vjp(i, &g, &need)?;
                for (j, contrib) in contributions {
                    adj[j] = Some(match adj[j].take() {
                        None => contrib,
                        Some(prev) => self.add(&prev, &contrib)?,
                    });
                }
            }
        }

        let mut grads = Vec::with_capacity(wrt.len());
        for (t, idx) in wrt.iter().zip(&wrt_idx) {
            let g = match idx {
                Some(i) => match adj[*i].take() {
                    Some(g) => g,
                    None => self.leaf_internal(&Tensor::zeros(t.shape())),
                },
                None => self.leaf_internal(&Tensor::zeros(t.shape())),
            };
            grads.push(g);
        }
        Ok(grads)
    }

    fn leaf_internal(&mut self, t: &Tensor) -> Tensor {
        let idx = self.push_leaf(t.shape().to_vec(), t.data_arc());
        self.tensor_of(idx)
    }

    /// Vector–Jacobian products of node `i` with adjoint `g`, one entry per
    /// operand that needs a gradient. Each contribution is recorded through
    /// the ordinary op methods, keeping the op set closed under
    /// differentiation.
    fn vjp(&mut self, i: usize, g: &Tensor, need: &[bool]) -> Result<Vec<(usize, Tensor)>> {
        let (op, a, b) = {
            let n = &self.nodes[i];
            (n.op, n.a, n.b)
        };
        let mut out = Vec::with_capacity(2);
        let need_a = a.map(|j| need[j]).unwrap_or(false);
        let need_b = b.map(|j| need[j]).unwrap_or(false);
        if !need_a && !need_b {
            return Ok(out);
        }
        let ta = a.map(|j| self.tensor_of(j));
        let tb = b.map(|j| self.tensor_of(j));
        match op {
            Op::Leaf => {}
            Op::Add => {
                if need_a {
                    out.push((a.unwrap(), g.clone()));
                }
                if need_b {
                    out.push((b.unwrap(), g.clone()));
                }
            }
            Op::Sub => {
                if need_a {
                    out.push((a.unwrap(), g.clone()));
                }
                if need_b {
                    let ng = self.neg(g)?;
                    out.push((b.unwrap(), ng));
                }
            }
            Op::Mul => {
                if need_a {
                    let d = self.mul(g, tb.as_ref().unwrap())?;
                    out.push((a.unwrap(), d));
                }
                if need_b {
                    let d = self.mul(g, ta.as_ref().unwrap())?;
                    out.push((b.unwrap(), d));
                }
            }
            Op::ScalarMul => {
                // a: scalar s, b: tensor t; out = s·t
                if need_a {
                    let d = self.inner(g, tb.as_ref().unwrap())?;
                    out.push((a.unwrap(), d));
                }
                if need_b {
                    let d = self.scalar_mul(ta.as_ref().unwrap(), g)?;
                    out.push((b.unwrap(), d));
                }
            }
            Op::MatVec => {
                // a: W, b: x; y = Wx
                if need_a {
                    let d = self.outer(g, tb.as_ref().unwrap())?;
                    out.push((a.unwrap(), d));
                }
                if need_b {
                    let d = self.matvect(ta.as_ref().unwrap(), g)?;
                    out.push((b.unwrap(), d));
                }
            }
            Op::MatVecT => {
                // a: W, b: v; y = Wᵀv
                if need_a {
                    let d = self.outer(tb.as_ref().unwrap(), g)?;
                    out.push((a.unwrap(), d));
                }
                if need_b {
                    let d = self.matvec(ta.as_ref().unwrap(), g)?;
                    out.push((b.unwrap(), d));
                }
            }
            Op::Outer => {
                // a: p, b: q; Y = Σ_b p_b⊗q_b, adjoint U has shape [m,n]
                if need_a {
                    let d = self.matvec(g, tb.as_ref().unwrap())?;
                    out.push((a.unwrap(), d));
                }
                if need_b {
                    let d = self.matvect(g, ta.as_ref().unwrap())?;
                    out.push((b.unwrap(), d));
                }
            }
            Op::BiasAdd => {
                if need_a {
                    out.push((a.unwrap(), g.clone()));
                }
                if need_b {
                    let d = if g.shape().len() == 2 {
                        self.sum_rows(g)?
                    } else {
                        g.clone()
                    };
                    out.push((b.unwrap(), d));
                }
            }
            Op::SumRows => {
                if need_a {
                    let rows = self.shape_of(a.unwrap())[0];
                    let d = self.repeat(g, rows)?;
                    out.push((a.unwrap(), d));
                }
            }
            Op::Repeat(_) => {
                if need_a {
                    let d = self.sum_rows(g)?;
                    out.push((a.unwrap(), d));
                }
            }
            Op::Tanh => {
                if need_a {
                    let y = self.tensor_of(i);
                    let y2 = self.mul(&y, &y)?;
                    let om = self.one_minus(&y2)?;
                    let d = self.mul(g, &om)?;
                    out.push((a.unwrap(), d));
                }
            }
            Op::Softplus => {
                if need_a {
                    let s = self.sigmoid(ta.as_ref().unwrap())?;
                    let d = self.mul(g, &s)?;
                    out.push((a.unwrap(), d));
                }
            }
            Op::Sigmoid => {
                if need_a {
                    let s = self.tensor_of(i);
                    let om = self.one_minus(&s)?;
                    let sp = self.mul(&s, &om)?;
                    let d = self.mul(g, &sp)?;
                    out.push((a.unwrap(), d));
                }
            }
            Op::OneMinus => {
                if need_a {
                    let d = self.neg(g)?;
                    out.push((a.unwrap(), d));
                }
            }
            Op::Sum => {
                if need_a {
                    let shape = self.shape_of(a.unwrap()).to_vec();
                    let d = self.expand(g, &shape)?;
                    out.push((a.unwrap(), d));
                }
            }
            Op::Expand => {
                if need_a {
                    let d = self.sum(g)?;
                    out.push((a.unwrap(), d));
                }
            }
            Op::Inner => {
                if need_a {
                    let d = self.scalar_mul(g, tb.as_ref().unwrap())?;
                    out.push((a.unwrap(), d));
                }
                if need_b {
                    let d = self.scalar_mul(g, ta.as_ref().unwrap())?;
                    out.push((b.unwrap(), d));
                }
            }
            Op::SqNorm => {
                if need_a {
                    let g2 = self.scale(g, 2.0)?;
                    let d = self.scalar_mul(&g2, ta.as_ref().unwrap())?;
                    out.push((a.unwrap(), d));
                }
            }
            Op::RowInner => {
                if need_a {
                    let d = self.row_scale(tb.as_ref().unwrap(), g)?;
                    out.push((a.unwrap(), d));
                }
                if need_b {
                    let d = self.row_scale(ta.as_ref().unwrap(), g)?;
                    out.push((b.unwrap(), d));
                }
            }
            Op::RowScale => {
                // a: X[B,n], b: s[B]
                if need_a {
                    let d = self.row_scale(g, tb.as_ref().unwrap())?;
                    out.push((a.unwrap(), d));
                }
                if need_b {
                    let d = self.row_inner(g, ta.as_ref().unwrap())?;
                    out.push((b.unwrap(), d));
                }
            }
            Op::Concat => {
                let na = *self.shape_of(a.unwrap()).last().unwrap();
                let nb = *self.shape_of(b.unwrap()).last().unwrap();
                if need_a {
                    let d = self.slice(g, 0, na)?;
                    out.push((a.unwrap(), d));
                }
                if need_b {
                    let d = self.slice(g, na, na + nb)?;
                    out.push((b.unwrap(), d));
                }
            }
            Op::Slice(start, _end) => {
                if need_a {
                    let total = *self.shape_of(a.unwrap()).last().unwrap();
                    let d = self.pad_zero(g, start, total)?;
                    out.push((a.unwrap(), d));
                }
            }
            Op::PadZero(start, end) => {
                if need_a {
                    let d = self.slice(g, start, end)?;
                    out.push((a.unwrap(), d));
                }
            }
        }
        Ok(out)
    }

    /// Row `i` of the Jacobian ∂y/∂x for a vector output `y` (shape [d] or
    /// batched [B,d]: the batched form returns per-row gradients of y_i).
    /// Calling it for i = 0..d−1 and picking diagonal entries yields the
    /// exact trace.
    pub fn jacobian_row(&mut self, y: &Tensor, i: usize, x: &Tensor) -> Result<Tensor> {
        let d = *y
            .shape()
            .last()
            .ok_or_else(|| Error::shape("jacobian_row", "rank ≥ 1", y.shape()))?;
        if i >= d {
            return Err(Error::IndexOutOfRange { index: i, len: d });
        }
        let yi = self.slice(y, i, i + 1)?;
        let total = self.sum(&yi)?;
        Ok(self.backward(&total, &[x])?.remove(0))
    }

    /// Re-executes every node's forward kernel from its operands and checks
    /// the recorded outputs reproduce bit-exactly.
    pub fn replay_check(&self) -> Result<()> {
        for (i, n) in self.nodes.iter().enumerate() {
            if matches!(n.op, Op::Leaf) {
                continue;
            }
            let recomputed = self.eval_node(n);
            if recomputed.as_slice() != &n.out[..] {
                return Err(Error::ContractViolation(format!(
                    "replay mismatch at node {i} ({:?})",
                    n.op
                )));
            }
        }
        Ok(())
    }

    fn eval_node(&self, n: &Node) -> Vec<f64> {
        let da = n.a.map(|j| self.data_of(j));
        let db = n.b.map(|j| self.data_of(j));
        let sa = n.a.map(|j| self.shape_of(j));
        match n.op {
            Op::Leaf => n.out.to_vec(),
            Op::Add => da
                .unwrap()
                .iter()
                .zip(db.unwrap())
                .map(|(x, y)| x + y)
                .collect(),
            Op::Sub => da
                .unwrap()
                .iter()
                .zip(db.unwrap())
                .map(|(x, y)| x - y)
                .collect(),
            Op::Mul => da
                .unwrap()
                .iter()
                .zip(db.unwrap())
                .map(|(x, y)| x * y)
                .collect(),
            Op::ScalarMul => {
                let f = da.unwrap()[0];
                db.unwrap().iter().map(|x| x * f).collect()
            }
            Op::MatVec => {
                let ws = sa.unwrap();
                let (m, k) = (ws[0], ws[1]);
                let rows = db.unwrap().len() / k;
                let mut out = vec![0.0; rows * m];
                kernels::matmul_abt(db.unwrap(), da.unwrap(), &mut out, rows, m, k);
                out
            }
            Op::MatVecT => {
                let ws = sa.unwrap();
                let (m, k) = (ws[0], ws[1]);
                let rows = db.unwrap().len() / m;
                let mut out = vec![0.0; rows * k];
                kernels::matmul_ab(db.unwrap(), da.unwrap(), &mut out, rows, k, m);
                out
            }
            Op::Outer => {
                let (m, nn) = (n.shape[0], n.shape[1]);
                let rows = da.unwrap().len() / m;
                let mut out = vec![0.0; m * nn];
                kernels::matmul_atb(da.unwrap(), db.unwrap(), &mut out, rows, m, nn);
                out
            }
            Op::BiasAdd => {
                let bias = db.unwrap();
                let m = bias.len();
                let xd = da.unwrap();
                let mut out = vec![0.0; xd.len()];
                for (r, chunk) in xd.chunks_exact(m).enumerate() {
                    for j in 0..m {
                        out[r * m + j] = chunk[j] + bias[j];
                    }
                }
                out
            }
            Op::SumRows => {
                let shape = sa.unwrap();
                let mut out = vec![0.0; shape[1]];
                kernels::sum_rows(da.unwrap(), &mut out, shape[0], shape[1]);
                out
            }
            Op::Repeat(rows) => {
                let src = da.unwrap();
                let mut out = Vec::with_capacity(rows * src.len());
                for _ in 0..rows {
                    out.extend_from_slice(src);
                }
                out
            }
            Op::Tanh => {
                let src = da.unwrap();
                let mut out = vec![0.0; src.len()];
                kernels::vtanh(src, &mut out);
                out
            }
            Op::Softplus => da.unwrap().iter().map(|&v| kernels::softplus(v)).collect(),
            Op::Sigmoid => da.unwrap().iter().map(|&v| kernels::sigmoid(v)).collect(),
            Op::OneMinus => da.unwrap().iter().map(|&v| 1.0 - v).collect(),
            Op::Sum => vec![da.unwrap().iter().sum()],
            Op::Expand => {
                let v = da.unwrap()[0];
                vec![v; n.shape.iter().product()]
            }
            Op::Inner => vec![kernels::dot(da.unwrap(), db.unwrap())],
            Op::SqNorm => vec![kernels::sqnorm(da.unwrap())],
            Op::RowInner => {
                let shape = sa.unwrap();
                let mut out = vec![0.0; shape[0]];
                kernels::row_inner(da.unwrap(), db.unwrap(), &mut out, shape[0], shape[1]);
                out
            }
            Op::RowScale => {
                let shape = sa.unwrap();
                let mut out = vec![0.0; shape[0] * shape[1]];
                kernels::row_scale(da.unwrap(), db.unwrap(), &mut out, shape[0], shape[1]);
                out
            }
            Op::Concat => {
                let (xa, xb) = (da.unwrap(), db.unwrap());
                let wa = *sa.unwrap().last().unwrap();
                let wb = xb.len() / (xa.len() / wa).max(1);
                let rows = xa.len() / wa;
                let mut out = Vec::with_capacity(xa.len() + xb.len());
                for r in 0..rows {
                    out.extend_from_slice(&xa[r * wa..(r + 1) * wa]);
                    out.extend_from_slice(&xb[r * wb..(r + 1) * wb]);
                }
                out
            }
            Op::Slice(s, e) => {
                let src = da.unwrap();
                let width = *sa.unwrap().last().unwrap();
                let rows = src.len() / width;
                let mut out = Vec::with_capacity(rows * (e - s));
                for r in 0..rows {
                    out.extend_from_slice(&src[r * width + s..r * width + e]);
                }
                out
            }
            Op::PadZero(s, e) => {
                let src = da.unwrap();
                let width = e - s;
                let total = *n.shape.last().unwrap();
                let rows = src.len() / width;
                let mut out = vec![0.0; rows * total];
                for r in 0..rows {
                    out[r * total + s..r * total + e].copy_from_slice(&src[r * width..(r + 1) * width]);
                }
                out
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grad_of<F>(f: F, x: &[f64]) -> Vec<f64>
    where
        F: Fn(&mut Tape, &Tensor) -> Tensor,
    {
        let mut tape = Tape::new();
        let xt = tape.leaf(&Tensor::vector(x));
        let y = f(&mut tape, &xt);
        let g = tape.backward(&y, &[&xt]).unwrap();
        g[0].data().to_vec()
    }

    fn numeric_grad<F>(f: F, x: &[f64], h: f64) -> Vec<f64>
    where
        F: Fn(&[f64]) -> f64,
    {
        let mut g = vec![0.0; x.len()];
        let mut xp = x.to_vec();
        for i in 0..x.len() {
            xp[i] = x[i] + h;
            let up = f(&xp);
            xp[i] = x[i] - h;
            let dn = f(&xp);
            xp[i] = x[i];
            g[i] = (up - dn) / (2.0 * h);
        }
        g
    }

    fn assert_close(got: &[f64], want: &[f64], rel: f64) {
        assert_eq!(got.len(), want.len());
        for (i, (g, w)) in got.iter().zip(want).enumerate() {
            let scale = w.abs().max(1e-8);
            assert!(
                (g - w).abs() / scale < rel,
                "element {i}: got {g}, want {w} (rel {})",
                (g - w).abs() / scale
            );
        }
    }

    #[test]
    fn inner_example() {
        let mut tape = Tape::new();
        let a = Tensor::vector(&[1.0, 2.0]);
        let b = Tensor::vector(&[3.0, 4.0]);
        let y = tape.inner(&a, &b).unwrap();
        assert_eq!(y.scalar_value().unwrap(), 11.0);
    }

    #[test]
    fn tanh_at_zero_is_zero() {
        let mut tape = Tape::new();
        let x = Tensor::vector(&[0.0]);
        let y = tape.tanh(&x).unwrap();
        assert_eq!(y.data(), &[0.0]);
    }

    #[test]
    fn matvec_identity() {
        let mut tape = Tape::new();
        let w = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let x = Tensor::vector(&[5.0, -3.0]);
        let y = tape.matvec(&w, &x).unwrap();
        assert_eq!(y.data(), &[5.0, -3.0]);
    }

    #[test]
    fn grad_of_half_sqnorm_is_x() {
        let g = grad_of(
            |t, x| {
                let s = t.sqnorm(x).unwrap();
                t.scale(&s, 0.5).unwrap()
            },
            &[3.0, 4.0],
        );
        assert_eq!(g, vec![3.0, 4.0]);
    }

    #[test]
    fn grad_of_linear_form_is_coefficients() {
        let c = [2.0, -7.0, 0.5];
        let g = grad_of(
            |t, x| {
                let cv = Tensor::vector(&c);
                t.inner(&cv, x).unwrap()
            },
            &[1.0, 1.0, 1.0],
        );
        assert_eq!(g, c.to_vec());
    }

    #[test]
    fn off_tape_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::vector(&[1.0, 2.0]));
        let never_used = Tensor::vector(&[9.0, 9.0, 9.0]);
        let y = tape.sqnorm(&x).unwrap();
        let g = tape.backward(&y, &[&never_used]).unwrap();
        assert_eq!(g[0].shape(), &[3]);
        assert!(g[0].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unknown_record_kind_is_contract_violation() {
        let mut tape = Tape::new();
        let x = Tensor::vector(&[1.0]);
        let err = tape.record("transmogrify", &[&x]).unwrap_err();
        assert!(matches!(err, Error::ContractViolation(_)));
    }

    #[test]
    fn record_covers_public_kinds() {
        let mut tape = Tape::new();
        let v = Tensor::vector(&[0.25, -0.5]);
        let w = Tensor::vector(&[1.5, 2.0]);
        let m = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let s = Tensor::scalar(3.0);
        for kind in PUBLIC_OP_KINDS {
            let r = match *kind {
                "add" | "subtract" | "multiply" | "inner" | "concat" => {
                    tape.record(kind, &[&v, &w])
                }
                "scale" => tape.record(kind, &[&v, &s]),
                "matvec" => tape.record(kind, &[&m, &v]),
                "bias-add" => tape.record(kind, &[&v, &w]),
                _ => tape.record(kind, &[&v]),
            };
            assert!(r.is_ok(), "kind {kind} failed: {:?}", r.err());
        }
    }

    #[test]
    fn mlp_gradient_matches_finite_differences() {
        // f(x) = sum(tanh(W2·softplus(W1·x + b1) + b2) ⊙ c) — every public op
        // participates somewhere below.
        let w1v = vec![0.3, -0.2, 0.5, 0.7, 0.1, -0.4, -0.6, 0.2, 0.05, 0.9, -0.8, 0.3];
        let b1v = vec![0.1, -0.2, 0.3, 0.0];
        let w2v = vec![0.2, -0.5, 0.3, 0.8, -0.1, 0.4, 0.6, -0.7];
        let b2v = vec![-0.3, 0.2];
        let cv = vec![1.5, -2.0];
        let x0 = [0.7, -1.1, 0.4];

        let f_plain = |x: &[f64]| -> f64 {
            let mut h = [0.0; 4];
            for i in 0..4 {
                let mut acc = b1v[i];
                for j in 0..3 {
                    acc += w1v[i * 3 + j] * x[j];
                }
                h[i] = kernels::softplus(acc);
            }
            let mut out = 0.0;
            for i in 0..2 {
                let mut acc = b2v[i];
                for j in 0..4 {
                    acc += w2v[i * 4 + j] * h[j];
                }
                let mut t = vec![0.0];
                kernels::vtanh(&[acc], &mut t);
                out += t[0] * cv[i];
            }
            out
        };

        let analytic = grad_of(
            |t, x| {
                let w1 = Tensor::matrix(4, 3, w1v.clone()).unwrap();
                let b1 = Tensor::vector(&b1v);
                let w2 = Tensor::matrix(2, 4, w2v.clone()).unwrap();
                let b2 = Tensor::vector(&b2v);
                let c = Tensor::vector(&cv);
                let z1 = t.matvec(&w1, x).unwrap();
                let z1 = t.bias_add(&z1, &b1).unwrap();
                let h = t.softplus(&z1).unwrap();
                let z2 = t.matvec(&w2, &h).unwrap();
                let z2 = t.bias_add(&z2, &b2).unwrap();
                let a = t.tanh(&z2).unwrap();
                t.inner(&a, &c).unwrap()
            },
            &x0,
        );
        let numeric = numeric_grad(f_plain, &x0, 1e-5);
        assert_close(&analytic, &numeric, 1e-4);
    }

    #[test]
    fn second_order_gradient_matches_finite_differences() {
        // φ(x) = ‖∇_x f(x)‖² for f(x) = inner(tanh(Wx), c); check ∇φ against
        // central differences of the first-order gradient.
        let wv = vec![0.6, -0.3, 0.2, 0.8, -0.5, 0.1, 0.4, 0.9, -0.7];
        let cv = vec![0.5, -1.0, 0.75];
        let x0 = [0.3, -0.6, 0.9];

        let first_grad = |x: &[f64]| -> Vec<f64> {
            let mut tape = Tape::new();
            let xt = tape.leaf(&Tensor::vector(x));
            let w = Tensor::matrix(3, 3, wv.clone()).unwrap();
            let c = Tensor::vector(&cv);
            let z = tape.matvec(&w, &xt).unwrap();
            let a = tape.tanh(&z).unwrap();
            let y = tape.inner(&a, &c).unwrap();
            let g = tape.backward(&y, &[&xt]).unwrap();
            g[0].data().to_vec()
        };

        let analytic = {
            let mut tape = Tape::new();
            let xt = tape.leaf(&Tensor::vector(&x0));
            let w = Tensor::matrix(3, 3, wv.clone()).unwrap();
            let c = Tensor::vector(&cv);
            let z = tape.matvec(&w, &xt).unwrap();
            let a = tape.tanh(&z).unwrap();
            let y = tape.inner(&a, &c).unwrap();
            let g = tape.backward(&y, &[&xt]).unwrap().remove(0);
            let phi = tape.sqnorm(&g).unwrap();
            tape.backward(&phi, &[&xt]).unwrap().remove(0).data().to_vec()
        };

        let h = 1e-5;
        let mut numeric = vec![0.0; 3];
        let mut xp = x0.to_vec();
        for i in 0..3 {
            xp[i] = x0[i] + h;
            let up: f64 = first_grad(&xp).iter().map(|v| v * v).sum();
            xp[i] = x0[i] - h;
            let dn: f64 = first_grad(&xp).iter().map(|v| v * v).sum();
            xp[i] = x0[i];
            numeric[i] = (up - dn) / (2.0 * h);
        }
        assert_close(&analytic, &numeric, 1e-3);
    }

    #[test]
    fn third_order_on_scalar_chain() {
        // f(x) = tanh(x)³ via repeated mul; d³f/dx³ at 0.4 against an
        // analytic formula. y = t³, y' = 3t²(1−t²),
        // y'' = (6t − 12t³)(1−t²), y''' = (6 − 36t²)(1−t²) − 2t(6t − 12t³)·(1−t²)… —
        // use finite differences of the second derivative instead.
        let second = |x0: f64| -> f64 {
            let mut tape = Tape::new();
            let xt = tape.leaf(&Tensor::vector(&[x0]));
            let t = tape.tanh(&xt).unwrap();
            let t2 = tape.mul(&t, &t).unwrap();
            let t3 = tape.mul(&t2, &t).unwrap();
            let y = tape.sum(&t3).unwrap();
            let g1 = tape.backward(&y, &[&xt]).unwrap().remove(0);
            let s1 = tape.sum(&g1).unwrap();
            let g2 = tape.backward(&s1, &[&xt]).unwrap().remove(0);
            g2.data()[0]
        };
        let third = |x0: f64| -> f64 {
            let mut tape = Tape::new();
            let xt = tape.leaf(&Tensor::vector(&[x0]));
            let t = tape.tanh(&xt).unwrap();
            let t2 = tape.mul(&t, &t).unwrap();
            let t3 = tape.mul(&t2, &t).unwrap();
            let y = tape.sum(&t3).unwrap();
            let g1 = tape.backward(&y, &[&xt]).unwrap().remove(0);
            let s1 = tape.sum(&g1).unwrap();
            let g2 = tape.backward(&s1, &[&xt]).unwrap().remove(0);
            let s2 = tape.sum(&g2).unwrap();
            let g3 = tape.backward(&s2, &[&xt]).unwrap().remove(0);
            g3.data()[0]
        };
        let h = 1e-4;
        let numeric = (second(0.4 + h) - second(0.4 - h)) / (2.0 * h);
        let got = third(0.4);
        assert!(
            (got - numeric).abs() / numeric.abs().max(1e-8) < 1e-3,
            "third derivative {got} vs numeric {numeric}"
        );
    }

    #[test]
    fn batched_matvec_matches_per_row() {
        let mut tape = Tape::new();
        let w = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.5, 4.0]).unwrap();
        let xb = Tensor::matrix(2, 3, vec![1.0, 0.0, 2.0, -3.0, 1.0, 0.5]).unwrap();
        let yb = tape.matvec(&w, &xb).unwrap();
        assert_eq!(yb.shape(), &[2, 2]);
        for r in 0..2 {
            let row = Tensor::vector(&xb.data()[r * 3..(r + 1) * 3]);
            let y = tape.matvec(&w, &row).unwrap();
            assert_eq!(&yb.data()[r * 2..(r + 1) * 2], y.data());
        }
    }

    #[test]
    fn batched_backward_through_row_ops() {
        // y = Σ_b s_b · ⟨X_b, X_b⟩ with X [B,n]; ∂y/∂X_b = 2 s_b X_b.
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::matrix(2, 2, vec![1.0, 2.0, -1.0, 3.0]).unwrap());
        let s = Tensor::vector(&[0.5, -2.0]);
        let r = tape.row_inner(&x, &x).unwrap();
        let y = tape.inner(&r, &s).unwrap();
        let g = tape.backward(&y, &[&x]).unwrap().remove(0);
        assert_eq!(g.data(), &[1.0, 2.0, 4.0, -12.0]);
    }

    #[test]
    fn row_scale_backward_hits_both_operands() {
        // y = Σ row_scale(X, s): ∂y/∂X_bj = s_b, ∂y/∂s_b = Σ_j X_bj.
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let s = tape.leaf(&Tensor::vector(&[2.0, -1.0]));
        let scaled = tape.row_scale(&x, &s).unwrap();
        let y = tape.sum(&scaled).unwrap();
        let g = tape.backward(&y, &[&x, &s]).unwrap();
        assert_eq!(g[0].data(), &[2.0, 2.0, 2.0, -1.0, -1.0, -1.0]);
        assert_eq!(g[1].data(), &[6.0, 15.0]);
    }

    #[test]
    fn concat_slice_round_trip_gradient() {
        let g = grad_of(
            |t, x| {
                let tail = Tensor::vector(&[10.0, 20.0]);
                let joined = t.concat(x, &tail).unwrap();
                let back = t.slice(&joined, 0, 3).unwrap();
                t.sqnorm(&back).unwrap()
            },
            &[1.0, -2.0, 3.0],
        );
        assert_eq!(g, vec![2.0, -4.0, 6.0]);
    }

    #[test]
    fn jacobian_rows_assemble_exact_jacobian() {
        // y = tanh(Wx): J = diag(1 − tanh²(Wx))·W, checked row by row.
        let wv = vec![0.5, -0.25, 0.75, 1.0];
        let x0 = [0.3, -0.8];
        let mut tape = Tape::new();
        let xt = tape.leaf(&Tensor::vector(&x0));
        let w = Tensor::matrix(2, 2, wv.clone()).unwrap();
        let z = tape.matvec(&w, &xt).unwrap();
        let y = tape.tanh(&z).unwrap();
        for i in 0..2 {
            let row = tape.jacobian_row(&y, i, &xt).unwrap();
            let zi: f64 = (0..2).map(|j| wv[i * 2 + j] * x0[j]).sum();
            let mut th = vec![0.0];
            kernels::vtanh(&[zi], &mut th);
            let factor = 1.0 - th[0] * th[0];
            let want: Vec<f64> = (0..2).map(|j| factor * wv[i * 2 + j]).collect();
            assert_close(row.data(), &want, 1e-12);
        }
        assert!(tape.jacobian_row(&y, 5, &xt).is_err());
    }

    #[test]
    fn replay_is_bit_exact() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::vector(&[0.3, -0.7, 1.2]));
        let w = Tensor::matrix(2, 3, vec![0.1, 0.2, 0.3, -0.4, 0.5, -0.6]).unwrap();
        let z = tape.matvec(&w, &x).unwrap();
        let a = tape.tanh(&z).unwrap();
        let sp = tape.softplus(&a).unwrap();
        let y = tape.sqnorm(&sp).unwrap();
        let _g = tape.backward(&y, &[&x]).unwrap();
        tape.replay_check().unwrap();
    }

    #[test]
    fn same_seed_same_tape_outputs() {
        let run = || {
            let mut rng = crate::rng::stream_rng(42, crate::rng::streams::DATA);
            let xv = crate::rng::standard_normal(&mut rng, 6);
            let mut tape = Tape::new();
            let x = tape.leaf(&Tensor::matrix(2, 3, xv).unwrap());
            let w = Tensor::matrix(4, 3, vec![0.25; 12]).unwrap();
            let z = tape.matvec(&w, &x).unwrap();
            let a = tape.tanh(&z).unwrap();
            let y = tape.sqnorm(&a).unwrap();
            let g = tape.backward(&y, &[&x]).unwrap().remove(0);
            (y.data().to_vec(), g.data().to_vec())
        };
        let (y1, g1) = run();
        let (y2, g2) = run();
        assert_eq!(y1, y2);
        assert_eq!(g1, g2);
    }

    #[test]
    fn tensors_from_different_tapes_do_not_mix() {
        let mut t1 = Tape::new();
        let mut t2 = Tape::new();
        let a = t1.leaf(&Tensor::vector(&[1.0]));
        let b = t2.leaf(&Tensor::vector(&[2.0]));
        let err = t1.add(&a, &b).unwrap_err();
        assert!(matches!(err, Error::TapeMismatch { .. }));
    }

    #[test]
    fn non_finite_output_is_reported() {
        let mut tape = Tape::new();
        let a = Tensor::vector(&[f64::MAX]);
        let b = Tensor::vector(&[f64::MAX]);
        let err = tape.add(&a, &b).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
        tape.set_checked(false);
        assert!(tape.add(&a, &b).is_ok());
    }

    #[test]
    fn gradient_unaffected_by_unrelated_branches() {
        // An energy branch hanging off the same input must not perturb the
        // gradient of the main scalar (pruning correctness).
        let lean = grad_of(
            |t, x| {
                let w = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
                let z = t.matvec(&w, x).unwrap();
                t.sqnorm(&z).unwrap()
            },
            &[1.0, -1.0],
        );
        let with_extra = {
            let mut tape = Tape::new();
            let x = tape.leaf(&Tensor::vector(&[1.0, -1.0]));
            let w = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
            let z = tape.matvec(&w, &x).unwrap();
            let _side = tape.tanh(&z).unwrap();
            let _more = tape.softplus(&_side).unwrap();
            let y = tape.sqnorm(&z).unwrap();
            tape.backward(&y, &[&x]).unwrap().remove(0).data().to_vec()
        };
        assert_eq!(lean, with_extra);
    }
}

#[cfg(test)]
mod prop_tests {
    use super::*;
    use proptest::prelude::*;

    fn vec_strategy(n: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-3.0f64..3.0, n)
    }

    proptest! {
        #[test]
        fn add_commutes(a in vec_strategy(5), b in vec_strategy(5)) {
            let mut tape = Tape::new();
            let ta = Tensor::vector(&a);
            let tb = Tensor::vector(&b);
            let ab = tape.add(&ta, &tb).unwrap();
            let ba = tape.add(&tb, &ta).unwrap();
            prop_assert_eq!(ab.data(), ba.data());
        }

        #[test]
        fn inner_matches_sqnorm(a in vec_strategy(7)) {
            let mut tape = Tape::new();
            let ta = Tensor::vector(&a);
            let ii = tape.inner(&ta, &ta).unwrap();
            let sq = tape.sqnorm(&ta).unwrap();
            prop_assert_eq!(ii.scalar_value().unwrap(), sq.scalar_value().unwrap());
        }

        #[test]
        fn backward_of_sum_is_ones(a in vec_strategy(6)) {
            let mut tape = Tape::new();
            let x = tape.leaf(&Tensor::vector(&a));
            let y = tape.sum(&x).unwrap();
            let g = tape.backward(&y, &[&x]).unwrap();
            prop_assert!(g[0].data().iter().all(|&v| v == 1.0));
        }

        #[test]
        fn scale_linearity(a in vec_strategy(4), c in -2.0f64..2.0) {
            let mut tape = Tape::new();
            let x = tape.leaf(&Tensor::vector(&a));
            let cx = tape.scale(&x, c).unwrap();
            let y = tape.sum(&cx).unwrap();
            let g = tape.backward(&y, &[&x]).unwrap();
            for &v in g[0].data() {
                prop_assert!((v - c).abs() < 1e-15);
            }
        }

        #[test]
        fn replay_survives_random_graphs(a in vec_strategy(6), b in vec_strategy(6)) {
            let mut tape = Tape::new();
            let x = tape.leaf(&Tensor::vector(&a));
            let yv = Tensor::vector(&b);
            let s = tape.sub(&x, &yv).unwrap();
            let m = tape.mul(&s, &s).unwrap();
            let t = tape.tanh(&m).unwrap();
            let out = tape.sum(&t).unwrap();
            let _ = tape.backward(&out, &[&x]).unwrap();
            prop_assert!(tape.replay_check().is_ok());
        }
    }
}

