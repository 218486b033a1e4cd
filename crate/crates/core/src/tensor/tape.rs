use super::{SeqTensor, Shape};
use crate::error::TensorError;

const LAYER_NORM_EPS: f64 = 1e-5;
const COUNTER_LIMIT: u64 = 1 << 62;

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Boolean attention mask over the last two axes; `true` means "may attend".
///
/// A mask either applies to every batch item (`batch == 1`) or carries one
/// pattern per batch item.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    batch: usize,
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl Mask {
    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                allowed.push(f(i, j));
            }
        }
        Mask {
            batch: 1,
            rows,
            cols,
            allowed,
        }
    }

    /// Position `i` attends to `j <= i`.
    pub fn causal(rows: usize, cols: usize) -> Self {
        Mask::from_fn(rows, cols, |i, j| j <= i)
    }

    /// Stacks single-pattern masks into one per-batch mask.
    pub fn stack(parts: Vec<Mask>) -> Result<Self, TensorError> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::dim("mask_stack", "no masks"))?;
        let (rows, cols) = (first.rows, first.cols);
        let mut allowed = Vec::with_capacity(parts.len() * rows * cols);
        let mut batch = 0;
        for m in &parts {
            if m.rows != rows || m.cols != cols {
                return Err(TensorError::dim("mask_stack", "mask shapes differ"));
            }
            batch += m.batch;
            allowed.extend_from_slice(&m.allowed);
        }
        Ok(Mask {
            batch,
            rows,
            cols,
            allowed,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn allowed(&self, b: usize, i: usize, j: usize) -> bool {
        let b = if self.batch == 1 { 0 } else { b };
        self.allowed[(b * self.rows + i) * self.cols + j]
    }

    /// True when no row attends to a later column.
    pub fn is_causal(&self) -> bool {
        (0..self.batch).all(|b| {
            (0..self.rows).all(|i| (i + 1..self.cols).all(|j| !self.allowed(b, i, j)))
        })
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    TransposeLast(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Softmax {
        x: Var,
        mask: Option<Mask>,
    },
    Conv {
        x: Var,
        w: Var,
        bias: Option<Var>,
        dilation: usize,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Elu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    ConcatDim(Vec<Var>),
    SliceDim {
        x: Var,
        start: usize,
    },
    SliceLen {
        x: Var,
        start: usize,
    },
    Gather {
        x: Var,
        idx: Vec<Vec<usize>>,
    },
    Scatter {
        base: Var,
        rows: Var,
        idx: Vec<Vec<usize>>,
    },
    SliceBatch {
        x: Var,
        index: usize,
    },
    ConcatBatch(Vec<Var>),
    MeanLen(Var),
    CumMeanLen(Var),
    Mse(Var, Var),
    Sum(Var),
    Mean(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::TransposeLast(..) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Softmax { .. } => "softmax",
            Op::Conv { .. } => "conv1d",
            Op::MaxPool { .. } => "maxpool",
            Op::Elu(..) => "elu",
            Op::LayerNorm { .. } => "layer_norm",
            Op::ConcatDim(..) => "concat_dim",
            Op::SliceDim { .. } => "slice_dim",
            Op::SliceLen { .. } => "slice_len",
            Op::Gather { .. } => "gather",
            Op::Scatter { .. } => "scatter",
            Op::SliceBatch { .. } => "slice_batch",
            Op::ConcatBatch(..) => "concat_batch",
            Op::MeanLen(..) => "mean_len",
            Op::CumMeanLen(..) => "cummean_len",
            Op::Mse(..) => "mse",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Mse(a, b) => {
                vec![*a, *b]
            }
            Op::TransposeLast(x)
            | Op::Scale(x, _)
            | Op::Elu(x)
            | Op::MeanLen(x)
            | Op::CumMeanLen(x)
            | Op::Sum(x)
            | Op::Mean(x) => vec![*x],
            Op::Softmax { x, .. }
            | Op::MaxPool { x, .. }
            | Op::SliceDim { x, .. }
            | Op::SliceLen { x, .. }
            | Op::Gather { x, .. }
            | Op::SliceBatch { x, .. } => vec![*x],
            Op::Conv { x, w, bias, .. } => {
                let mut v = vec![*x, *w];
                v.extend(bias);
                v
            }
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::ConcatDim(parts) | Op::ConcatBatch(parts) => parts.clone(),
            Op::Scatter { base, rows, .. } => vec![*base, *rows],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: SeqTensor,
    requires_grad: bool,
    op: Op,
}

/// Records differentiable operations in execution order and replays them
/// backwards to populate gradients.
///
/// A tape also owns a multiply counter: when counting is enabled, every
/// matrix product and convolution tap adds the number of scalar
/// multiplications it performed.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    counting: bool,
    mults: u64,
    check_finite: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            counting: false,
            mults: 0,
            check_finite: cfg!(debug_assertions),
        }
    }

    pub fn set_counting(&mut self, on: bool) {
        self.counting = on;
    }

    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    /// Multiplies counted so far.
    pub fn mults(&self) -> u64 {
        self.mults
    }

    /// Returns the counted multiplies and resets the counter.
    pub fn take_mults(&mut self) -> Result<u64, TensorError> {
        let n = std::mem::take(&mut self.mults);
        if n > COUNTER_LIMIT {
            return Err(TensorError::CounterOverflow);
        }
        Ok(n)
    }

    /// Adds multiplies performed outside the tape's own kernels (e.g. the
    /// sparsity measure of ProbSparse attention).
    pub fn record_mults(&mut self, n: usize) {
        self.count(n);
    }

    fn count(&mut self, n: usize) {
        if self.counting {
            self.mults = self.mults.saturating_add(n as u64);
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Names of the recorded non-leaf operations, in execution order.
    pub fn op_trace(&self) -> Vec<&'static str> {
        self.nodes
            .iter()
            .filter(|n| !matches!(n.op, Op::Leaf))
            .map(|n| n.op.name())
            .collect()
    }

    /// Handle of the `index`-th recorded node.
    pub fn var_at(&self, index: usize) -> Option<Var> {
        (index < self.nodes.len()).then_some(Var(index))
    }

    /// Direct inputs of a recorded node.
    pub fn inputs_of(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    pub fn leaf(&mut self, value: SeqTensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: SeqTensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: SeqTensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &SeqTensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient populated by the last [`Tape::backward`] call.
    pub fn grad(&self, v: Var) -> Option<SeqTensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(SeqTensor::new(self.shape(v), g.clone()).expect("grad shape"))
    }

    fn push(&mut self, value: SeqTensor, op: Op) -> Result<Var, TensorError> {
        if self.check_finite && !value.is_finite() {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // ----- forward kernels -------------------------------------------------

    /// Batched matrix product `[B × m × k] · [B × k × n]`; either operand
    /// may have batch 1 and is then shared across the other's batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.dim != sb.len {
            return Err(TensorError::dim(
                "matmul",
                format!("inner dims differ: {sa} · {sb}"),
            ));
        }
        let batch = broadcast_batch("matmul", sa.batch, sb.batch)?;
        let (m, k, n) = (sa.len, sa.dim, sb.dim);
        let mut out = vec![0.0; batch * m * n];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            for bi in 0..batch {
                let ao = if sa.batch == 1 { 0 } else { bi * m * k };
                let bo = if sb.batch == 1 { 0 } else { bi * k * n };
                gemm_acc(
                    &av[ao..ao + m * k],
                    &bv[bo..bo + k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        self.count(batch * m * k * n);
        self.push(
            SeqTensor::new(Shape::new(batch, m, n), out)?,
            Op::MatMul(a, b),
        )
    }

    /// Swaps the length and dim axes.
    pub fn transpose_last(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.shape(x);
        let xv = self.value(x).data();
        let mut out = vec![0.0; s.numel()];
        for b in 0..s.batch {
            let o = b * s.len * s.dim;
            for i in 0..s.len {
                for j in 0..s.dim {
                    out[o + j * s.len + i] = xv[o + i * s.dim + j];
                }
            }
        }
        self.push(
            SeqTensor::new(Shape::new(s.batch, s.dim, s.len), out)?,
            Op::TransposeLast(x),
        )
    }

    /// `a + b`, where `b` may broadcast over batch and/or length.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.broadcast_binary("add", a, b, |x, y| x + y)?;
        self.push(out, Op::Add(a, b))
    }

    /// `a - b`, where `b` may broadcast over batch and/or length.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.broadcast_binary("sub", a, b, |x, y| x - y)?;
        self.push(out, Op::Sub(a, b))
    }

    /// Elementwise product of equal-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::dim("mul", format!("{sa} vs {sb}")));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        self.push(SeqTensor::new(sa, data)?, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var, TensorError> {
        let s = self.shape(x);
        let data = self.value(x).data().iter().map(|v| v * c).collect();
        self.push(SeqTensor::new(s, data)?, Op::Scale(x, c))
    }

    fn broadcast_binary(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<SeqTensor, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        check_broadcast(op, sa, sb)?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(sa.numel());
        for bi in 0..sa.batch {
            for l in 0..sa.len {
                let ao = (bi * sa.len + l) * sa.dim;
                let bo = broadcast_row(sb, bi, l);
                out.extend((0..sa.dim).map(|d| f(av[ao + d], bv[bo + d])));
            }
        }
        SeqTensor::new(sa, out)
    }

    /// Softmax over the last axis with optional mask.
    ///
    /// Masked entries get probability zero. A row with no allowed entry
    /// becomes the uniform distribution over all columns.
    pub fn softmax(&mut self, x: Var, mask: Option<&Mask>) -> Result<Var, TensorError> {
        let s = self.shape(x);
        if let Some(m) = mask {
            if m.rows != s.len || m.cols != s.dim || (m.batch != 1 && m.batch != s.batch) {
                return Err(TensorError::dim(
                    "softmax",
                    format!("mask {}×{}×{} for {s}", m.batch, m.rows, m.cols),
                ));
            }
        }
        let xv = self.value(x).data();
        let mut out = vec![0.0; s.numel()];
        for b in 0..s.batch {
            for i in 0..s.len {
                let o = (b * s.len + i) * s.dim;
                let row = &xv[o..o + s.dim];
                let ok = |j: usize| mask.is_none_or(|m| m.allowed(b, i, j));
                let max = (0..s.dim)
                    .filter(|&j| ok(j))
                    .map(|j| row[j])
                    .fold(f64::NEG_INFINITY, f64::max);
                if max == f64::NEG_INFINITY {
                    out[o..o + s.dim].fill(1.0 / s.dim as f64);
                    continue;
                }
                let mut total = 0.0;
                for j in 0..s.dim {
                    if ok(j) {
                        let e = (row[j] - max).exp();
                        out[o + j] = e;
                        total += e;
                    }
                }
                for v in &mut out[o..o + s.dim] {
                    *v /= total;
                }
            }
        }
        self.push(
            SeqTensor::new(s, out)?,
            Op::Softmax {
                x,
                mask: mask.cloned(),
            },
        )
    }

    /// Causal dilated 1-D convolution along the length axis.
    ///
    /// `w` is `[k × d_in × d_out]`; tap `j` multiplies `x[n - j·dilation]`,
    /// positions before the sequence start read as zero. `bias`, when given,
    /// is `[1 × 1 × d_out]`.
    pub fn conv1d_causal(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        dilation: usize,
    ) -> Result<Var, TensorError> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if dilation == 0 || sw.batch == 0 {
            return Err(TensorError::Degenerate {
                op: "conv1d",
                detail: format!("kernel {} dilation {dilation}", sw.batch),
            });
        }
        if sw.len != sx.dim {
            return Err(TensorError::dim("conv1d", format!("x {sx}, w {sw}")));
        }
        if let Some(bv) = bias {
            let sb = self.shape(bv);
            if sb != Shape::new(1, 1, sw.dim) {
                return Err(TensorError::dim("conv1d", format!("bias {sb}")));
            }
        }
        let (k, din, dout) = (sw.batch, sw.len, sw.dim);
        let mut out = vec![0.0; sx.batch * sx.len * dout];
        let mut taps = 0;
        {
            let (xv, wv) = (self.value(x).data(), self.value(w).data());
            for b in 0..sx.batch {
                for n in 0..sx.len {
                    let oo = (b * sx.len + n) * dout;
                    for j in 0..k {
                        let Some(src) = n.checked_sub(j * dilation) else {
                            break;
                        };
                        taps += 1;
                        let xo = (b * sx.len + src) * din;
                        gemm_acc(
                            &xv[xo..xo + din],
                            &wv[j * din * dout..(j + 1) * din * dout],
                            &mut out[oo..oo + dout],
                            1,
                            din,
                            dout,
                        );
                    }
                }
            }
            if let Some(bv) = bias {
                let bd = self.value(bv).data();
                for row in out.chunks_mut(dout) {
                    for (o, b) in row.iter_mut().zip(bd) {
                        *o += b;
                    }
                }
            }
        }
        self.count(taps * din * dout);
        self.push(
            SeqTensor::new(Shape::new(sx.batch, sx.len, dout), out)?,
            Op::Conv {
                x,
                w,
                bias,
                dilation,
            },
        )
    }

    /// Max-pooling with kernel 3 and stride 2, windows clipped at the
    /// sequence start: `y[m] = max(x[2m-1], x[2m], x[2m+1])`. Output length
    /// is exactly `⌊L/2⌋`; ties resolve to the lowest index.
    pub fn maxpool_causal(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.shape(x);
        if s.len < 2 {
            return Err(TensorError::Degenerate {
                op: "maxpool",
                detail: format!("length {} < 2", s.len),
            });
        }
        let out_len = s.len / 2;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(s.batch * out_len * s.dim);
        let mut argmax = Vec::with_capacity(out.capacity());
        for b in 0..s.batch {
            for m in 0..out_len {
                let lo = (2 * m).saturating_sub(1);
                for d in 0..s.dim {
                    let mut best = (b * s.len + lo) * s.dim + d;
                    for src in lo + 1..=2 * m + 1 {
                        let i = (b * s.len + src) * s.dim + d;
                        if xv[i] > xv[best] {
                            best = i;
                        }
                    }
                    argmax.push(best);
                    out.push(xv[best]);
                }
            }
        }
        self.push(
            SeqTensor::new(Shape::new(s.batch, out_len, s.dim), out)?,
            Op::MaxPool { x, argmax },
        )
    }

    pub fn elu(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.shape(x);
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|&v| if v >= 0.0 { v } else { v.exp_m1() })
            .collect();
        self.push(SeqTensor::new(s, data)?, Op::Elu(x))
    }

    /// Layer normalization over the last axis; `gain` and `bias` are
    /// `[1 × 1 × dim]`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, TensorError> {
        let s = self.shape(x);
        for p in [gain, bias] {
            if self.shape(p) != Shape::new(1, 1, s.dim) {
                return Err(TensorError::dim(
                    "layer_norm",
                    format!("param {} for {s}", self.shape(p)),
                ));
            }
        }
        let (xv, gv, bv) = (
            self.value(x).data(),
            self.value(gain).data(),
            self.value(bias).data(),
        );
        let rows = s.batch * s.len;
        let mut xhat = Vec::with_capacity(s.numel());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(s.numel());
        for row in xv.chunks(s.dim) {
            let mean = row.iter().sum::<f64>() / s.dim as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / s.dim as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd.push(r);
            for (d, v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * gv[d] + bv[d]);
            }
        }
        self.push(
            SeqTensor::new(s, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        )
    }

    /// Concatenates along the dim axis.
    pub fn concat_dim(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = self.shape(
            *parts
                .first()
                .ok_or_else(|| TensorError::dim("concat_dim", "no parts"))?,
        );
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.batch != first.batch || s.len != first.len {
                return Err(TensorError::dim("concat_dim", format!("{s} vs {first}")));
            }
            total += s.dim;
        }
        let mut out = Vec::with_capacity(first.batch * first.len * total);
        for row in 0..first.batch * first.len {
            for &p in parts {
                let d = self.shape(p).dim;
                out.extend_from_slice(&self.value(p).data()[row * d..(row + 1) * d]);
            }
        }
        self.push(
            SeqTensor::new(Shape::new(first.batch, first.len, total), out)?,
            Op::ConcatDim(parts.to_vec()),
        )
    }

    /// Columns `start..start + width` of the dim axis.
    pub fn slice_dim(&mut self, x: Var, start: usize, width: usize) -> Result<Var, TensorError> {
        let s = self.shape(x);
        if start + width > s.dim {
            return Err(TensorError::dim(
                "slice_dim",
                format!("columns {start}..{} of {s}", start + width),
            ));
        }
        let out = self
            .value(x)
            .data()
            .chunks(s.dim)
            .flat_map(|row| row[start..start + width].iter().copied())
            .collect();
        self.push(
            SeqTensor::new(Shape::new(s.batch, s.len, width), out)?,
            Op::SliceDim { x, start },
        )
    }

    /// Splits the dim axis into consecutive parts of the given sizes.
    pub fn split_dim(&mut self, x: Var, sizes: &[usize]) -> Result<Vec<Var>, TensorError> {
        let s = self.shape(x);
        let total: usize = sizes.iter().sum();
        if total != s.dim {
            return Err(TensorError::dim(
                "split_dim",
                format!("sizes {sizes:?} sum to {total}, dim is {}", s.dim),
            ));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &w in sizes {
            out.push(self.slice_dim(x, start, w)?);
            start += w;
        }
        Ok(out)
    }

    /// Rows `start..start + len` of the length axis.
    pub fn slice_len(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let out = self.value(x).slice_len(start, len)?;
        self.push(out, Op::SliceLen { x, start })
    }

    /// Picks rows `idx[b]` of batch item `b`; every `idx[b]` has equal size.
    pub fn gather_rows(&mut self, x: Var, idx: Vec<Vec<usize>>) -> Result<Var, TensorError> {
        let s = self.shape(x);
        let u = check_row_index("gather_rows", s, &idx)?;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(s.batch * u * s.dim);
        for (b, rows) in idx.iter().enumerate() {
            for &r in rows {
                let o = (b * s.len + r) * s.dim;
                out.extend_from_slice(&xv[o..o + s.dim]);
            }
        }
        self.push(
            SeqTensor::new(Shape::new(s.batch, u, s.dim), out)?,
            Op::Gather { x, idx },
        )
    }

    /// Copy of `base` with rows `idx[b]` replaced by the rows of `rows`.
    pub fn scatter_rows(
        &mut self,
        base: Var,
        rows: Var,
        idx: Vec<Vec<usize>>,
    ) -> Result<Var, TensorError> {
        let (sb, sr) = (self.shape(base), self.shape(rows));
        let u = check_row_index("scatter_rows", sb, &idx)?;
        if sr != Shape::new(sb.batch, u, sb.dim) {
            return Err(TensorError::dim("scatter_rows", format!("rows {sr}")));
        }
        for r in &idx {
            let mut sorted = r.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != r.len() {
                return Err(TensorError::dim("scatter_rows", "duplicate row index"));
            }
        }
        let mut out = self.value(base).clone();
        let rv = self.value(rows).data();
        for (b, list) in idx.iter().enumerate() {
            for (i, &r) in list.iter().enumerate() {
                let src = (b * u + i) * sb.dim;
                let dst = (b * sb.len + r) * sb.dim;
                out.data_mut()[dst..dst + sb.dim].copy_from_slice(&rv[src..src + sb.dim]);
            }
        }
        self.push(out, Op::Scatter { base, rows, idx })
    }

    /// Batch item `index` as a batch-1 tensor.
    pub fn slice_batch(&mut self, x: Var, index: usize) -> Result<Var, TensorError> {
        let s = self.shape(x);
        if index >= s.batch {
            return Err(TensorError::dim("slice_batch", format!("item {index} of {s}")));
        }
        let n = s.len * s.dim;
        let data = self.value(x).data()[index * n..(index + 1) * n].to_vec();
        self.push(
            SeqTensor::new(Shape::new(1, s.len, s.dim), data)?,
            Op::SliceBatch { x, index },
        )
    }

    /// Concatenates along the batch axis.
    pub fn concat_batch(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let values: Vec<SeqTensor> = parts.iter().map(|&p| self.value(p).clone()).collect();
        let out = SeqTensor::stack_batch(&values)?;
        self.push(out, Op::ConcatBatch(parts.to_vec()))
    }

    /// Every output row is the mean of all rows of `x` (same length as `x`).
    pub fn mean_len(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.shape(x);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(s.numel());
        for b in 0..s.batch {
            let mut mean = vec![0.0; s.dim];
            for l in 0..s.len {
                let o = (b * s.len + l) * s.dim;
                for (m, v) in mean.iter_mut().zip(&xv[o..o + s.dim]) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= s.len as f64);
            for _ in 0..s.len {
                out.extend_from_slice(&mean);
            }
        }
        self.push(SeqTensor::new(s, out)?, Op::MeanLen(x))
    }

    /// Row `i` of the output is the mean of rows `0..=i` of `x`.
    pub fn cummean_len(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.shape(x);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(s.numel());
        for b in 0..s.batch {
            let mut acc = vec![0.0; s.dim];
            for l in 0..s.len {
                let o = (b * s.len + l) * s.dim;
                for (a, v) in acc.iter_mut().zip(&xv[o..o + s.dim]) {
                    *a += v;
                }
                out.extend(acc.iter().map(|a| a / (l + 1) as f64));
            }
        }
        self.push(SeqTensor::new(s, out)?, Op::CumMeanLen(x))
    }

    /// Mean squared error between equal-shape tensors, as a scalar.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var, TensorError> {
        let (sp, st) = (self.shape(pred), self.shape(target));
        if sp != st {
            return Err(TensorError::dim("mse", format!("{sp} vs {st}")));
        }
        let n = sp.numel().max(1) as f64;
        let v = self
            .value(pred)
            .data()
            .iter()
            .zip(self.value(target).data())
            .map(|(p, t)| (p - t).powi(2))
            .sum::<f64>()
            / n;
        self.push(SeqTensor::scalar(v), Op::Mse(pred, target))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let v = self.value(x).data().iter().sum();
        self.push(SeqTensor::scalar(v), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.value(x);
        let v = s.data().iter().sum::<f64>() / s.numel().max(1) as f64;
        self.push(SeqTensor::scalar(v), Op::Mean(x))
    }

    // ----- reverse pass ----------------------------------------------------

    /// Populates gradients of every recorded tensor that `loss` depends on.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let node = &self.nodes[loss.0];
        if node.value.numel() != 1 {
            return Err(TensorError::dim(
                "backward",
                format!("loss must be scalar, got {}", node.value.shape()),
            ));
        }
        if !node.requires_grad {
            return Err(TensorError::MissingGrad(
                "loss is detached from every tensor that requires grad".into(),
            ));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            if self.nodes[i].requires_grad {
                self.backprop_node(i, &g);
            }
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, g: &[f64]) {
        let Tape { nodes, grads, .. } = self;
        let nodes: &[Node] = nodes;
        let node = &nodes[i];
        let out = &node.value;
        let so = out.shape();
        let val = |v: &Var| nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k, n) = (sa.len, sa.dim, sb.dim);
                let (av, bv) = (val(a), val(b));
                if let Some(ga) = acc(grads, nodes, *a) {
                    for bi in 0..so.batch {
                        let ao = if sa.batch == 1 { 0 } else { bi * m * k };
                        let bo = if sb.batch == 1 { 0 } else { bi * k * n };
                        let gc = &g[bi * m * n..(bi + 1) * m * n];
                        let bt = transpose(&bv[bo..bo + k * n], k, n);
                        gemm_acc(gc, &bt, &mut ga[ao..ao + m * k], m, n, k);
                    }
                }
                if let Some(gb) = acc(grads, nodes, *b) {
                    for bi in 0..so.batch {
                        let ao = if sa.batch == 1 { 0 } else { bi * m * k };
                        let bo = if sb.batch == 1 { 0 } else { bi * k * n };
                        let gc = &g[bi * m * n..(bi + 1) * m * n];
                        let at = transpose(&av[ao..ao + m * k], m, k);
                        gemm_acc(&at, gc, &mut gb[bo..bo + k * n], k, m, n);
                    }
                }
            }
            Op::TransposeLast(x) => {
                if let Some(gx) = acc(grads, nodes, *x) {
                    // output is [B × D × L]
                    for b in 0..so.batch {
                        let o = b * so.len * so.dim;
                        for i in 0..so.len {
                            for j in 0..so.dim {
                                gx[o + j * so.len + i] += g[o + i * so.dim + j];
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -1.0
                } else {
                    1.0
                };
                if let Some(ga) = acc(grads, nodes, *a) {
                    add_into(ga, g);
                }
                let sb = nodes[b.0].value.shape();
                if let Some(gb) = acc(grads, nodes, *b) {
                    for bi in 0..so.batch {
                        for l in 0..so.len {
                            let go = (bi * so.len + l) * so.dim;
                            let bo = broadcast_row(sb, bi, l);
                            for d in 0..so.dim {
                                gb[bo + d] += sign * g[go + d];
                            }
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(a), val(b));
                if let Some(ga) = acc(grads, nodes, *a) {
                    for ((dst, gv), y) in ga.iter_mut().zip(g).zip(bv) {
                        *dst += gv * y;
                    }
                }
                if let Some(gb) = acc(grads, nodes, *b) {
                    for ((dst, gv), x) in gb.iter_mut().zip(g).zip(av) {
                        *dst += gv * x;
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(gx) = acc(grads, nodes, *x) {
                    for (dst, gv) in gx.iter_mut().zip(g) {
                        *dst += c * gv;
                    }
                }
            }
            Op::Softmax { x, mask } => {
                let y = out.data();
                if let Some(gx) = acc(grads, nodes, *x) {
                    for row in 0..so.batch * so.len {
                        let (b, i) = (row / so.len, row % so.len);
                        // a fully masked row is the constant uniform row
                        if let Some(m) = mask {
                            if (0..so.dim).all(|j| !m.allowed(b, i, j)) {
                                continue;
                            }
                        }
                        let o = row * so.dim;
                        let (grow, yrow) = (&g[o..o + so.dim], &y[o..o + so.dim]);
                        let inner = dot(grow, yrow);
                        for j in 0..so.dim {
                            gx[o + j] += yrow[j] * (grow[j] - inner);
                        }
                    }
                }
            }
            Op::Conv {
                x,
                w,
                bias,
                dilation,
            } => {
                let (sx, sw) = (nodes[x.0].value.shape(), nodes[w.0].value.shape());
                let (k, din, dout) = (sw.batch, sw.len, sw.dim);
                let (xv, wv) = (val(x), val(w));
                if let Some(gx) = acc(grads, nodes, *x) {
                    for b in 0..sx.batch {
                        for n in 0..sx.len {
                            let grow = &g[(b * sx.len + n) * dout..(b * sx.len + n + 1) * dout];
                            for j in 0..k {
                                let Some(src) = n.checked_sub(j * dilation) else {
                                    break;
                                };
                                let xo = (b * sx.len + src) * din;
                                for p in 0..din {
                                    let wrow = &wv[(j * din + p) * dout..(j * din + p + 1) * dout];
                                    gx[xo + p] += dot(grow, wrow);
                                }
                            }
                        }
                    }
                }
                if let Some(gw) = acc(grads, nodes, *w) {
                    for b in 0..sx.batch {
                        for n in 0..sx.len {
                            let grow = &g[(b * sx.len + n) * dout..(b * sx.len + n + 1) * dout];
                            for j in 0..k {
                                let Some(src) = n.checked_sub(j * dilation) else {
                                    break;
                                };
                                let xo = (b * sx.len + src) * din;
                                for p in 0..din {
                                    let xval = xv[xo + p];
                                    let wo = (j * din + p) * dout;
                                    for (dst, gv) in gw[wo..wo + dout].iter_mut().zip(grow) {
                                        *dst += xval * gv;
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(bv) = bias {
                    if let Some(gb) = acc(grads, nodes, *bv) {
                        for grow in g.chunks(dout) {
                            add_into(gb, grow);
                        }
                    }
                }
            }
            Op::MaxPool { x, argmax } => {
                if let Some(gx) = acc(grads, nodes, *x) {
                    for (&src, gv) in argmax.iter().zip(g) {
                        gx[src] += gv;
                    }
                }
            }
            Op::Elu(x) => {
                let xv = val(x);
                if let Some(gx) = acc(grads, nodes, *x) {
                    for ((dst, gv), &v) in gx.iter_mut().zip(g).zip(xv) {
                        *dst += if v >= 0.0 { *gv } else { gv * v.exp() };
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = so.dim;
                let gv = val(gain);
                if let Some(gx) = acc(grads, nodes, *x) {
                    for (r, ((grow, hrow), dst)) in g
                        .chunks(d)
                        .zip(xhat.chunks(d))
                        .zip(gx.chunks_mut(d))
                        .enumerate()
                    {
                        let dh: Vec<f64> = grow.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dh_h = dot(&dh, hrow) / d as f64;
                        for j in 0..d {
                            dst[j] += rstd[r] * (dh[j] - mean_dh - hrow[j] * mean_dh_h);
                        }
                    }
                }
                if let Some(gg) = acc(grads, nodes, *gain) {
                    for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += grow[j] * hrow[j];
                        }
                    }
                }
                if let Some(gb) = acc(grads, nodes, *bias) {
                    for grow in g.chunks(d) {
                        add_into(gb, grow);
                    }
                }
            }
            Op::ConcatDim(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = nodes[p.0].value.shape().dim;
                    if let Some(gp) = acc(grads, nodes, *p) {
                        for (row, dst) in gp.chunks_mut(w).enumerate() {
                            let o = row * so.dim + offset;
                            add_into(dst, &g[o..o + w]);
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceDim { x, start } => {
                let sx = nodes[x.0].value.shape();
                if let Some(gx) = acc(grads, nodes, *x) {
                    for (row, grow) in g.chunks(so.dim).enumerate() {
                        let o = row * sx.dim + start;
                        add_into(&mut gx[o..o + so.dim], grow);
                    }
                }
            }
            Op::SliceLen { x, start } => {
                let sx = nodes[x.0].value.shape();
                if let Some(gx) = acc(grads, nodes, *x) {
                    for b in 0..so.batch {
                        let o = (b * sx.len + start) * sx.dim;
                        let n = so.len * so.dim;
                        add_into(&mut gx[o..o + n], &g[b * n..(b + 1) * n]);
                    }
                }
            }
            Op::Gather { x, idx } => {
                let sx = nodes[x.0].value.shape();
                if let Some(gx) = acc(grads, nodes, *x) {
                    for (b, rows) in idx.iter().enumerate() {
                        for (i, &r) in rows.iter().enumerate() {
                            let src = (b * so.len + i) * so.dim;
                            let dst = (b * sx.len + r) * sx.dim;
                            add_into(&mut gx[dst..dst + sx.dim], &g[src..src + so.dim]);
                        }
                    }
                }
            }
            Op::Scatter { base, rows, idx } => {
                let u = idx.first().map_or(0, Vec::len);
                let is_replaced = |b: usize, l: usize| idx[b].contains(&l);
                if let Some(gb) = acc(grads, nodes, *base) {
                    for b in 0..so.batch {
                        for l in 0..so.len {
                            if !is_replaced(b, l) {
                                let o = (b * so.len + l) * so.dim;
                                add_into(&mut gb[o..o + so.dim], &g[o..o + so.dim]);
                            }
                        }
                    }
                }
                if let Some(gr) = acc(grads, nodes, *rows) {
                    for (b, list) in idx.iter().enumerate() {
                        for (i, &r) in list.iter().enumerate() {
                            let dst = (b * u + i) * so.dim;
                            let src = (b * so.len + r) * so.dim;
                            add_into(&mut gr[dst..dst + so.dim], &g[src..src + so.dim]);
                        }
                    }
                }
            }
            Op::SliceBatch { x, index } => {
                let n = so.len * so.dim;
                if let Some(gx) = acc(grads, nodes, *x) {
                    add_into(&mut gx[index * n..(index + 1) * n], g);
                }
            }
            Op::ConcatBatch(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = nodes[p.0].value.numel();
                    if let Some(gp) = acc(grads, nodes, *p) {
                        add_into(gp, &g[offset..offset + n]);
                    }
                    offset += n;
                }
            }
            Op::MeanLen(x) => {
                if let Some(gx) = acc(grads, nodes, *x) {
                    for b in 0..so.batch {
                        let mut total = vec![0.0; so.dim];
                        for l in 0..so.len {
                            let o = (b * so.len + l) * so.dim;
                            add_into(&mut total, &g[o..o + so.dim]);
                        }
                        for l in 0..so.len {
                            let o = (b * so.len + l) * so.dim;
                            for (dst, t) in gx[o..o + so.dim].iter_mut().zip(&total) {
                                *dst += t / so.len as f64;
                            }
                        }
                    }
                }
            }
            Op::CumMeanLen(x) => {
                if let Some(gx) = acc(grads, nodes, *x) {
                    for b in 0..so.batch {
                        let mut suffix = vec![0.0; so.dim];
                        for l in (0..so.len).rev() {
                            let o = (b * so.len + l) * so.dim;
                            for (s, gv) in suffix.iter_mut().zip(&g[o..o + so.dim]) {
                                *s += gv / (l + 1) as f64;
                            }
                            add_into(&mut gx[o..o + so.dim], &suffix);
                        }
                    }
                }
            }
            Op::Mse(p, t) => {
                let (pv, tv) = (val(p), val(t));
                let scale = 2.0 * g[0] / pv.len().max(1) as f64;
                if let Some(gp) = acc(grads, nodes, *p) {
                    for ((dst, a), b) in gp.iter_mut().zip(pv).zip(tv) {
                        *dst += scale * (a - b);
                    }
                }
                if let Some(gt) = acc(grads, nodes, *t) {
                    for ((dst, a), b) in gt.iter_mut().zip(pv).zip(tv) {
                        *dst -= scale * (a - b);
                    }
                }
            }
            Op::Sum(x) | Op::Mean(x) => {
                let n = nodes[x.0].value.numel();
                let c = if matches!(node.op, Op::Mean(_)) {
                    g[0] / n.max(1) as f64
                } else {
                    g[0]
                };
                if let Some(gx) = acc(grads, nodes, *x) {
                    gx.iter_mut().for_each(|v| *v += c);
                }
            }
        }
    }
}

/// Gradient buffer of `v`, allocated on first use; `None` when `v` does not
/// require grad.
fn acc<'g>(
    grads: &'g mut [Option<Vec<f64>>],
    nodes: &[Node],
    v: Var,
) -> Option<&'g mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]))
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let (ac, bc) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ac.remainder().iter().zip(bc.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ac.zip(bc) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// `c += a · b` for row-major `a: m×k`, `b: k×n`, `c: m×n`.
fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    if n < 16 && k > n {
        // short output rows: dots along k against bᵀ keep the loops long
        let bt = transpose(b, k, n);
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            for j in 0..n {
                c[i * n + j] += dot(arow, &bt[j * k..(j + 1) * k]);
            }
        }
        return;
    }
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (cv, bv) in crow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *cv += av * bv;
            }
        }
    }
}

fn broadcast_batch(op: &'static str, a: usize, b: usize) -> Result<usize, TensorError> {
    match (a, b) {
        (a, b) if a == b => Ok(a),
        (1, b) => Ok(b),
        (a, 1) => Ok(a),
        _ => Err(TensorError::dim(op, format!("batch {a} vs {b}"))),
    }
}

fn check_broadcast(op: &'static str, sa: Shape, sb: Shape) -> Result<(), TensorError> {
    let ok = sb.dim == sa.dim
        && (sb.batch == sa.batch || sb.batch == 1)
        && (sb.len == sa.len || sb.len == 1);
    if ok {
        Ok(())
    } else {
        Err(TensorError::dim(op, format!("cannot broadcast {sb} to {sa}")))
    }
}

fn broadcast_row(sb: Shape, b: usize, l: usize) -> usize {
    let bb = if sb.batch == 1 { 0 } else { b };
    let ll = if sb.len == 1 { 0 } else { l };
    (bb * sb.len + ll) * sb.dim
}

fn check_row_index(op: &'static str, s: Shape, idx: &[Vec<usize>]) -> Result<usize, TensorError> {
    if idx.len() != s.batch {
        return Err(TensorError::dim(
            op,
            format!("{} index lists for batch {}", idx.len(), s.batch),
        ));
    }
    let u = idx.first().map_or(0, Vec::len);
    if idx.iter().any(|r| r.len() != u || r.iter().any(|&i| i >= s.len)) {
        return Err(TensorError::dim(op, "ragged or out-of-range row index"));
    }
    Ok(u)
}
