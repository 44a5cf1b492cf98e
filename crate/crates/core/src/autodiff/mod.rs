//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every operation of a forward pass in topological
//! order; [`Tape::backward`] replays the records once, in reverse, and
//! accumulates gradients additively at fan-out. Everything the network
//! needs is a first-class op here; nothing else is.
//!
//! All tape values are 2-D row-major matrices internally. Plain vectors
//! are single-row matrices and scalars are 1x1.

pub mod gradcheck;
pub mod kernels;


use crate::error::{CoreError, Result};
use kernels::{gelu, gelu_grad, log_sum_exp, mm_nn, mm_nt, mm_tn, norm2};

/// Additive logit offset standing in for -inf when masking attention.
pub const NEG_MASK: f64 = -1e30;

/// Norm floor below which `l2_normalize` refuses to divide.
pub const NORM_EPS: f64 = 1e-8;

// ─── Tensor ──────────────────────────────────────────────────────────

/// A dense 64-bit float tensor, row-major, with an optional gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(CoreError::Shape(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data, requires_grad, grad: None })
    }

    pub fn zeros(shape: Vec<usize>, requires_grad: bool) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel], requires_grad, grad: None }
    }

    pub fn scalar(v: f64, requires_grad: bool) -> Self {
        Tensor { shape: vec![1], data: vec![v], requires_grad, grad: None }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// View an up-to-2-D shape as (rows, cols).
    pub fn dims2(&self) -> Result<(usize, usize)> {
        as_2d(&self.shape)
    }
}

/// Interpret a shape as (rows, cols): `[]` is 1x1, `[n]` is 1xn.
pub fn as_2d(shape: &[usize]) -> Result<(usize, usize)> {
    match shape.len() {
        0 => Ok((1, 1)),
        1 => Ok((1, shape[0])),
        2 => Ok((shape[0], shape[1])),
        _ => Err(CoreError::Shape(format!("expected rank <= 2, got {:?}", shape))),
    }
}

// ─── Tape ────────────────────────────────────────────────────────────

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    MatMulNT { a: Var, b: Var },
    Add { a: Var, b: Var },
    AddConst { a: Var },
    AddBias { a: Var, bias: Var },
    Scale { a: Var, c: f64 },
    Gelu { a: Var },
    SoftmaxRows { a: Var },
    LayerNorm { a: Var, gain: Var, bias: Var, stats: Vec<(f64, f64)> },
    L2NormalizeRows { a: Var, norms: Vec<f64> },
    GatherRows { src: Var, ids: Vec<usize> },
    ScatterAddRows { base: Var, rows: Var, positions: Vec<usize> },
    SliceCols { a: Var, start: usize },
    ConcatCols { parts: Vec<Var> },
    SliceRows { a: Var, start: usize },
    ConcatRows { parts: Vec<Var> },
    MeanPoolRows { a: Var, start: usize, len: usize },
    CrossEntropySum { logits: Var, targets: Vec<(usize, usize)>, lse: Vec<f64> },
    AddN { parts: Vec<Var> },
    StraightThrough { input: Var },
}

struct Node {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Records a forward pass; replays it in reverse for gradients.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, data: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(data.len(), rows * cols);
        self.nodes.push(Node { rows, cols, data, grad: None, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).data
    }

    pub fn shape2(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    /// Gradient of `v` after [`Tape::backward`]; `None` if none was recorded.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.node(v).grad.as_deref()
    }

    /// Copy a tape value (and its gradient, if any) out into a [`Tensor`].
    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor {
            shape: vec![n.rows, n.cols],
            data: n.data.clone(),
            requires_grad: n.requires_grad,
            grad: n.grad.clone(),
        }
    }

    // ── Leaves ───────────────────────────────────────────────────────

    pub fn leaf(&mut self, t: &Tensor) -> Result<Var> {
        let (r, c) = t.dims2()?;
        Ok(self.push(r, c, t.data.clone(), t.requires_grad, Op::Leaf))
    }

    pub fn leaf_from(&mut self, rows: usize, cols: usize, data: Vec<f64>, requires_grad: bool) -> Result<Var> {
        if data.len() != rows * cols {
            return Err(CoreError::Shape(format!(
                "leaf data length {} != {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(self.push(rows, cols, data, requires_grad, Op::Leaf))
    }

    /// A value that never receives gradient.
    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        self.leaf_from(rows, cols, data, false)
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.push(rows, cols, vec![0.0; rows * cols], false, Op::Leaf)
    }

    // ── Ops ──────────────────────────────────────────────────────────

    /// C = A[m x k] * B[k x n].
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape2(a);
        let (k2, n) = self.shape2(b);
        if k != k2 {
            return Err(CoreError::Dimension(format!(
                "matmul: inner dims {k} vs {k2} (shapes {m}x{k}, {k2}x{n})"
            )));
        }
        let mut out = vec![0.0; m * n];
        mm_nn(&mut out, &self.node(a).data, &self.node(b).data, m, k, n, false);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(m, n, out, rg, Op::MatMul { a, b }))
    }

    /// C = A[m x k] * B[n x k]^T.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape2(a);
        let (n, k2) = self.shape2(b);
        if k != k2 {
            return Err(CoreError::Dimension(format!(
                "matmul_nt: inner dims {k} vs {k2} (shapes {m}x{k}, {n}x{k2})"
            )));
        }
        let mut out = vec![0.0; m * n];
        mm_nt(&mut out, &self.node(a).data, &self.node(b).data, m, k, n, false);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(m, n, out, rg, Op::MatMulNT { a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape2(a);
        let sb = self.shape2(b);
        if sa != sb {
            return Err(CoreError::Dimension(format!("add: shapes {sa:?} vs {sb:?}")));
        }
        let data: Vec<f64> = self
            .node(a)
            .data
            .iter()
            .zip(self.node(b).data.iter())
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(sa.0, sa.1, data, rg, Op::Add { a, b }))
    }

    /// Add an untracked constant of the same shape (used for masks).
    pub fn add_const(&mut self, a: Var, c: &[f64]) -> Result<Var> {
        let (r, co) = self.shape2(a);
        if c.len() != r * co {
            return Err(CoreError::Dimension(format!(
                "add_const: constant length {} != {}x{}",
                c.len(),
                r,
                co
            )));
        }
        let data: Vec<f64> = self.node(a).data.iter().zip(c.iter()).map(|(x, y)| x + y).collect();
        let rg = self.rg(a);
        Ok(self.push(r, co, data, rg, Op::AddConst { a }))
    }

    /// Broadcast-add a 1 x n bias row to every row of a.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.shape2(a);
        let (br, bn) = self.shape2(bias);
        if br != 1 || bn != n {
            return Err(CoreError::Dimension(format!("add_bias: bias {br}x{bn} vs 1x{n}")));
        }
        let bdata = &self.node(bias).data;
        let mut data = self.node(a).data.clone();
        for row in data.chunks_mut(n) {
            for (x, b) in row.iter_mut().zip(bdata.iter()) {
                *x += b;
            }
        }
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(m, n, data, rg, Op::AddBias { a, bias }))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let (r, co) = self.shape2(a);
        let data: Vec<f64> = self.node(a).data.iter().map(|x| x * c).collect();
        let rg = self.rg(a);
        self.push(r, co, data, rg, Op::Scale { a, c })
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let (r, c) = self.shape2(a);
        let data: Vec<f64> = self.node(a).data.iter().map(|&x| gelu(x)).collect();
        let rg = self.rg(a);
        self.push(r, c, data, rg, Op::Gelu { a })
    }

    /// Row-wise softmax with max subtraction; rows sum to 1.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.shape2(a);
        let mut data = self.node(a).data.clone();
        kernels::softmax_rows(&mut data, r, c);
        let rg = self.rg(a);
        self.push(r, c, data, rg, Op::SoftmaxRows { a })
    }

    /// Per-row layer norm with learnable gain/bias (1 x n each).
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.shape2(a);
        if n < 2 {
            return Err(CoreError::Dimension(format!("layer_norm: feature dim {n} < 2")));
        }
        for v in [gain, bias] {
            let s = self.shape2(v);
            if s != (1, n) {
                return Err(CoreError::Dimension(format!("layer_norm: affine {s:?} vs 1x{n}")));
            }
        }
        let mut out = vec![0.0; m * n];
        let stats = kernels::layer_norm_rows(
            &mut out,
            &self.node(a).data,
            m,
            n,
            &self.node(gain).data,
            &self.node(bias).data,
        );
        let rg = self.rg(a) || self.rg(gain) || self.rg(bias);
        Ok(self.push(m, n, out, rg, Op::LayerNorm { a, gain, bias, stats }))
    }

    /// Normalize every row onto the unit sphere.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.shape2(a);
        let mut norms = Vec::with_capacity(m);
        let mut out = Vec::with_capacity(m * n);
        for row in self.node(a).data.chunks(n) {
            let nr = norm2(row);
            if nr <= NORM_EPS {
                return Err(CoreError::DegenerateNorm { norm: nr, eps: NORM_EPS });
            }
            out.extend(row.iter().map(|x| x / nr));
            norms.push(nr);
        }
        let rg = self.rg(a);
        Ok(self.push(m, n, out, rg, Op::L2NormalizeRows { a, norms }))
    }

    /// out[i] = src[ids[i]]; gradient scatter-adds back into src rows.
    pub fn gather_rows(&mut self, src: Var, ids: &[usize]) -> Result<Var> {
        let (m, n) = self.shape2(src);
        let mut data = Vec::with_capacity(ids.len() * n);
        for &id in ids {
            if id >= m {
                return Err(CoreError::Index(format!("gather_rows: row {id} >= {m}")));
            }
            data.extend_from_slice(&self.node(src).data[id * n..(id + 1) * n]);
        }
        let rg = self.rg(src);
        Ok(self.push(ids.len(), n, data, rg, Op::GatherRows { src, ids: ids.to_vec() }))
    }

    /// out = base; out[positions[i]] += rows[i].
    pub fn scatter_add_rows(&mut self, base: Var, rows: Var, positions: &[usize]) -> Result<Var> {
        let (m, n) = self.shape2(base);
        let (rm, rn) = self.shape2(rows);
        if rn != n || rm != positions.len() {
            return Err(CoreError::Dimension(format!(
                "scatter_add_rows: rows {rm}x{rn} vs {} positions into {m}x{n}",
                positions.len()
            )));
        }
        let mut data = self.node(base).data.clone();
        for (i, &p) in positions.iter().enumerate() {
            if p >= m {
                return Err(CoreError::Index(format!("scatter_add_rows: position {p} >= {m}")));
            }
            let src = &self.node(rows).data[i * n..(i + 1) * n];
            for (d, s) in data[p * n..(p + 1) * n].iter_mut().zip(src.iter()) {
                *d += s;
            }
        }
        let rg = self.rg(base) || self.rg(rows);
        Ok(self.push(m, n, data, rg, Op::ScatterAddRows { base, rows, positions: positions.to_vec() }))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.shape2(a);
        if start + len > n || len == 0 {
            return Err(CoreError::Dimension(format!("slice_cols: [{start}..{}] of {n}", start + len)));
        }
        let mut data = Vec::with_capacity(m * len);
        for row in self.node(a).data.chunks(n) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let rg = self.rg(a);
        Ok(self.push(m, len, data, rg, Op::SliceCols { a, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(CoreError::Dimension("concat_cols: no parts".into()));
        }
        let m = self.shape2(parts[0]).0;
        let widths: Vec<usize> = parts.iter().map(|&p| self.shape2(p).1).collect();
        for &p in parts {
            if self.shape2(p).0 != m {
                return Err(CoreError::Dimension("concat_cols: row mismatch".into()));
            }
        }
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(widths.iter()) {
                data.extend_from_slice(&self.node(p).data[i * w..(i + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(m, n, data, rg, Op::ConcatCols { parts: parts.to_vec() }))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.shape2(a);
        if start + len > m || len == 0 {
            return Err(CoreError::Dimension(format!("slice_rows: [{start}..{}] of {m}", start + len)));
        }
        let data = self.node(a).data[start * n..(start + len) * n].to_vec();
        let rg = self.rg(a);
        Ok(self.push(len, n, data, rg, Op::SliceRows { a, start }))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(CoreError::Dimension("concat_rows: no parts".into()));
        }
        let n = self.shape2(parts[0]).1;
        let mut m = 0;
        for &p in parts {
            let s = self.shape2(p);
            if s.1 != n {
                return Err(CoreError::Dimension("concat_rows: col mismatch".into()));
            }
            m += s.0;
        }
        let mut data = Vec::with_capacity(m * n);
        for &p in parts {
            data.extend_from_slice(&self.node(p).data);
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(m, n, data, rg, Op::ConcatRows { parts: parts.to_vec() }))
    }

    /// Arithmetic mean of a non-empty row span; returns 1 x n.
    pub fn mean_pool_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.shape2(a);
        if len == 0 {
            return Err(CoreError::Span("mean_pool_rows: empty span".into()));
        }
        if start + len > m {
            return Err(CoreError::Span(format!("mean_pool_rows: [{start}..{}] of {m}", start + len)));
        }
        let mut data = vec![0.0; n];
        for row in self.node(a).data[start * n..(start + len) * n].chunks(n) {
            for (d, x) in data.iter_mut().zip(row.iter()) {
                *d += x;
            }
        }
        for d in data.iter_mut() {
            *d /= len as f64;
        }
        let rg = self.rg(a);
        Ok(self.push(1, n, data, rg, Op::MeanPoolRows { a, start, len }))
    }

    /// -log softmax(logits[row])[class], summed over (row, class) pairs.
    /// Computed in log space via log-sum-exp.
    pub fn cross_entropy_sum(&mut self, logits: Var, targets: &[(usize, usize)]) -> Result<Var> {
        let (m, n) = self.shape2(logits);
        let mut lse = Vec::with_capacity(targets.len());
        let mut total = 0.0;
        for &(row, class) in targets {
            if row >= m {
                return Err(CoreError::Index(format!("cross_entropy: row {row} >= {m}")));
            }
            if class >= n {
                return Err(CoreError::Index(format!("cross_entropy: target {class} >= {n}")));
            }
            let r = &self.node(logits).data[row * n..(row + 1) * n];
            let l = log_sum_exp(r);
            total += l - r[class];
            lse.push(l);
        }
        let rg = self.rg(logits);
        Ok(self.push(1, 1, vec![total], rg, Op::CrossEntropySum { logits, targets: targets.to_vec(), lse }))
    }

    /// -log softmax(logits)[target] for a single-row logits vector.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let (m, _) = self.shape2(logits);
        if m != 1 {
            return Err(CoreError::Dimension(format!("cross_entropy: expected one row, got {m}")));
        }
        self.cross_entropy_sum(logits, &[(0, target)])
    }

    /// Elementwise sum of same-shaped values.
    pub fn add_n(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(CoreError::Dimension("add_n: no parts".into()));
        }
        let (m, n) = self.shape2(parts[0]);
        for &p in parts {
            if self.shape2(p) != (m, n) {
                return Err(CoreError::Dimension("add_n: shape mismatch".into()));
            }
        }
        let mut data = vec![0.0; m * n];
        for &p in parts {
            for (d, x) in data.iter_mut().zip(self.node(p).data.iter()) {
                *d += x;
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(m, n, data, rg, Op::AddN { parts: parts.to_vec() }))
    }

    /// Forward the quantized value; route the upstream gradient to `input`
    /// unchanged. `quantized` receives nothing through this op.
    pub fn straight_through(&mut self, input: Var, quantized: Var) -> Result<Var> {
        let si = self.shape2(input);
        let sq = self.shape2(quantized);
        if si != sq {
            return Err(CoreError::Shape(format!("straight_through: {si:?} vs {sq:?}")));
        }
        let data = self.node(quantized).data.clone();
        let rg = self.rg(input);
        Ok(self.push(si.0, si.1, data, rg, Op::StraightThrough { input }))
    }

    // ── Composites ───────────────────────────────────────────────────

    /// x * W (+ bias).
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(bias) => self.add_bias(y, bias),
            None => Ok(y),
        }
    }

    /// Multi-head scaled dot-product attention over already-projected
    /// q[tq x d], k[tk x d], v[tk x d]. `mask[i*tk + j]` true means query i
    /// may see key j; masked logits get [`NEG_MASK`] before the softmax.
    /// Head outputs are concatenated back to width d.
    pub fn masked_attention(&mut self, q: Var, k: Var, v: Var, mask: &[bool], heads: usize) -> Result<Var> {
        let (tq, d) = self.shape2(q);
        let (tk, dk) = self.shape2(k);
        let (tv, dv) = self.shape2(v);
        if dk != d || dv != d || tv != tk {
            return Err(CoreError::Dimension(format!(
                "masked_attention: q {tq}x{d}, k {tk}x{dk}, v {tv}x{dv}"
            )));
        }
        if heads == 0 || d % heads != 0 {
            return Err(CoreError::Dimension(format!("masked_attention: d={d} not divisible by heads={heads}")));
        }
        if mask.len() != tq * tk {
            return Err(CoreError::Mask(format!("mask length {} != {tq}x{tk}", mask.len())));
        }
        for i in 0..tq {
            if !mask[i * tk..(i + 1) * tk].iter().any(|&b| b) {
                return Err(CoreError::Mask(format!("query row {i} has no unmasked key")));
            }
        }
        let bias: Vec<f64> = mask.iter().map(|&b| if b { 0.0 } else { NEG_MASK }).collect();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = self.slice_cols(q, h * dh, dh)?;
            let kh = self.slice_cols(k, h * dh, dh)?;
            let vh = self.slice_cols(v, h * dh, dh)?;
            let logits = self.matmul_nt(qh, kh)?;
            let logits = self.scale(logits, scale);
            let logits = self.add_const(logits, &bias)?;
            let att = self.softmax_rows(logits);
            outs.push(self.matmul(att, vh)?);
        }
        self.concat_cols(&outs)
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Populate gradients of everything reachable from a scalar loss.
    /// Visits each node exactly once, in reverse topological order.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(CoreError::Construction("backward already ran on this tape".into()));
        }
        let (r, c) = self.shape2(loss);
        if (r, c) != (1, 1) {
            return Err(CoreError::Shape(format!("backward: loss must be scalar, got {r}x{c}")));
        }
        self.backward_done = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        if !self.rg(loss) {
            // Nothing trainable feeds the loss; record the seed and stop.
            self.nodes[loss.0].grad = Some(vec![1.0]);
            return Ok(());
        }
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..n).rev() {
            if grads[i].is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let g = grads[i].take().unwrap();
            self.apply_backward(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        for (node, g) in self.nodes.iter_mut().zip(grads.into_iter()) {
            node.grad = g;
        }
        Ok(())
    }

    fn ensure<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        if !self.rg(v) {
            return None;
        }
        let n = self.node(v);
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(vec![0.0; n.rows * n.cols]);
        }
        slot.as_mut()
    }

    fn apply_backward(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let (rows, cols) = (node.rows, node.cols);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = self.shape2(*a);
                let (_, nn) = self.shape2(*b);
                let bdata = &self.node(*b).data;
                if let Some(da) = self.ensure(grads, *a) {
                    mm_nt(da, g, bdata, m, nn, k, true);
                }
                let adata = &self.node(*a).data;
                if let Some(db) = self.ensure(grads, *b) {
                    mm_tn(db, adata, g, k, m, nn, true);
                }
            }
            Op::MatMulNT { a, b } => {
                let (m, k) = self.shape2(*a);
                let (nn, _) = self.shape2(*b);
                let bdata = &self.node(*b).data;
                if let Some(da) = self.ensure(grads, *a) {
                    mm_nn(da, g, bdata, m, nn, k, true);
                }
                let adata = &self.node(*a).data;
                if let Some(db) = self.ensure(grads, *b) {
                    mm_tn(db, g, adata, nn, m, k, true);
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if let Some(dv) = self.ensure(grads, v) {
                        for (d, x) in dv.iter_mut().zip(g.iter()) {
                            *d += x;
                        }
                    }
                }
            }
            Op::AddConst { a } => {
                if let Some(da) = self.ensure(grads, *a) {
                    for (d, x) in da.iter_mut().zip(g.iter()) {
                        *d += x;
                    }
                }
            }
            Op::AddBias { a, bias } => {
                if let Some(da) = self.ensure(grads, *a) {
                    for (d, x) in da.iter_mut().zip(g.iter()) {
                        *d += x;
                    }
                }
                if let Some(db) = self.ensure(grads, *bias) {
                    for row in g.chunks(cols) {
                        for (d, x) in db.iter_mut().zip(row.iter()) {
                            *d += x;
                        }
                    }
                }
            }
            Op::Scale { a, c } => {
                if let Some(da) = self.ensure(grads, *a) {
                    for (d, x) in da.iter_mut().zip(g.iter()) {
                        *d += c * x;
                    }
                }
            }
            Op::Gelu { a } => {
                let x = &self.node(*a).data;
                if let Some(da) = self.ensure(grads, *a) {
                    for ((d, gi), xi) in da.iter_mut().zip(g.iter()).zip(x.iter()) {
                        *d += gi * gelu_grad(*xi);
                    }
                }
            }
            Op::SoftmaxRows { a } => {
                let y = &node.data;
                if let Some(da) = self.ensure(grads, *a) {
                    for r in 0..rows {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = yr.iter().zip(gr.iter()).map(|(a, b)| a * b).sum();
                        let dr = &mut da[r * cols..(r + 1) * cols];
                        for j in 0..cols {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { a, gain, bias, stats } => {
                let x = &self.node(*a).data;
                let gn = &self.node(*gain).data;
                if let Some(dgain) = self.ensure(grads, *gain) {
                    for r in 0..rows {
                        let (mean, rstd) = stats[r];
                        let xr = &x[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        for j in 0..cols {
                            dgain[j] += gr[j] * (xr[j] - mean) * rstd;
                        }
                    }
                }
                if let Some(dbias) = self.ensure(grads, *bias) {
                    for row in g.chunks(cols) {
                        for (d, x) in dbias.iter_mut().zip(row.iter()) {
                            *d += x;
                        }
                    }
                }
                if let Some(da) = self.ensure(grads, *a) {
                    for r in 0..rows {
                        let (mean, rstd) = stats[r];
                        let xr = &x[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let mut mean_h = 0.0;
                        let mut mean_hx = 0.0;
                        for j in 0..cols {
                            let h = gr[j] * gn[j];
                            let xhat = (xr[j] - mean) * rstd;
                            mean_h += h;
                            mean_hx += h * xhat;
                        }
                        mean_h /= cols as f64;
                        mean_hx /= cols as f64;
                        let dr = &mut da[r * cols..(r + 1) * cols];
                        for j in 0..cols {
                            let h = gr[j] * gn[j];
                            let xhat = (xr[j] - mean) * rstd;
                            dr[j] += rstd * (h - mean_h - xhat * mean_hx);
                        }
                    }
                }
            }
            Op::L2NormalizeRows { a, norms } => {
                let y = &node.data;
                if let Some(da) = self.ensure(grads, *a) {
                    for r in 0..rows {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = yr.iter().zip(gr.iter()).map(|(a, b)| a * b).sum();
                        let dr = &mut da[r * cols..(r + 1) * cols];
                        for j in 0..cols {
                            dr[j] += (gr[j] - yr[j] * dot) / norms[r];
                        }
                    }
                }
            }
            Op::GatherRows { src, ids } => {
                if let Some(ds) = self.ensure(grads, *src) {
                    for (i, &id) in ids.iter().enumerate() {
                        let gr = &g[i * cols..(i + 1) * cols];
                        for (d, x) in ds[id * cols..(id + 1) * cols].iter_mut().zip(gr.iter()) {
                            *d += x;
                        }
                    }
                }
            }
            Op::ScatterAddRows { base, rows: rv, positions } => {
                if let Some(db) = self.ensure(grads, *base) {
                    for (d, x) in db.iter_mut().zip(g.iter()) {
                        *d += x;
                    }
                }
                if let Some(dr) = self.ensure(grads, *rv) {
                    for (i, &p) in positions.iter().enumerate() {
                        let gr = &g[p * cols..(p + 1) * cols];
                        for (d, x) in dr[i * cols..(i + 1) * cols].iter_mut().zip(gr.iter()) {
                            *d += x;
                        }
                    }
                }
            }
            Op::SliceCols { a, start } => {
                let (_, an) = self.shape2(*a);
                if let Some(da) = self.ensure(grads, *a) {
                    for r in 0..rows {
                        let gr = &g[r * cols..(r + 1) * cols];
                        for (d, x) in da[r * an + start..r * an + start + cols].iter_mut().zip(gr.iter()) {
                            *d += x;
                        }
                    }
                }
            }
            Op::ConcatCols { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let (_, w) = self.shape2(p);
                    if let Some(dp) = self.ensure(grads, p) {
                        for r in 0..rows {
                            let gr = &g[r * cols + offset..r * cols + offset + w];
                            for (d, x) in dp[r * w..(r + 1) * w].iter_mut().zip(gr.iter()) {
                                *d += x;
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceRows { a, start } => {
                if let Some(da) = self.ensure(grads, *a) {
                    for (d, x) in da[start * cols..(start + rows) * cols].iter_mut().zip(g.iter()) {
                        *d += x;
                    }
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let (pr, _) = self.shape2(p);
                    if let Some(dp) = self.ensure(grads, p) {
                        for (d, x) in dp.iter_mut().zip(g[offset * cols..(offset + pr) * cols].iter()) {
                            *d += x;
                        }
                    }
                    offset += pr;
                }
            }
            Op::MeanPoolRows { a, start, len } => {
                let w = 1.0 / *len as f64;
                if let Some(da) = self.ensure(grads, *a) {
                    for r in *start..*start + *len {
                        for (d, x) in da[r * cols..(r + 1) * cols].iter_mut().zip(g.iter()) {
                            *d += w * x;
                        }
                    }
                }
            }
            Op::CrossEntropySum { logits, targets, lse } => {
                let gs = g[0];
                let (_, n) = self.shape2(*logits);
                let ldata = &self.node(*logits).data;
                if let Some(dl) = self.ensure(grads, *logits) {
                    for (&(row, class), &l) in targets.iter().zip(lse.iter()) {
                        let lr = &ldata[row * n..(row + 1) * n];
                        let dr = &mut dl[row * n..(row + 1) * n];
                        for j in 0..n {
                            let p = (lr[j] - l).exp();
                            dr[j] += gs * (p - if j == class { 1.0 } else { 0.0 });
                        }
                    }
                }
            }
            Op::AddN { parts } => {
                for &p in parts {
                    if let Some(dp) = self.ensure(grads, p) {
                        for (d, x) in dp.iter_mut().zip(g.iter()) {
                            *d += x;
                        }
                    }
                }
            }
            Op::StraightThrough { input } => {
                if let Some(di) = self.ensure(grads, *input) {
                    for (d, x) in di.iter_mut().zip(g.iter()) {
                        *d += x;
                    }
                }
            }
        }
    }
}
