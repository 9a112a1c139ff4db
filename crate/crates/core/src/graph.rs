//! Reverse-mode differentiation over a recorded operation tape.
//!
//! A [`Graph`] is an arena of nodes. Every operation evaluates eagerly,
//! appends a node holding its value and the information its adjoint needs,
//! and returns a [`Var`] handle. [`Graph::backward`] walks the arena in
//! reverse and accumulates (sums) gradients into every node that requires
//! them. Only the operations this matcher needs are implemented.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRows(Var, Var),
    DivRows(Var, Var),
    MulCols(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    EluPlusOne(Var),
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    Powf(Var, f64),
    Clamp(Var, f64, f64),
    Softmax(Var, Axis),
    LayerNorm { x: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Sum(Var),
    Mean(Var),
    SumAxis(Var, Axis),
    GatherRows(Var, Vec<usize>),
    ScatterRows { compact: Var, carry: Var, idx: Vec<usize> },
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    Reshape(Var),
    Im2Col(Var, ConvGeometry),
    StraightThrough(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulRows(..) => "mul_rows",
            Op::DivRows(..) => "div_rows",
            Op::MulCols(..) => "mul_cols",
            Op::Scale(..) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Relu(_) => "relu",
            Op::EluPlusOne(_) => "elu_plus_one",
            Op::Sigmoid(_) => "sigmoid",
            Op::Exp(_) => "exp",
            Op::Ln(_) => "ln",
            Op::Powf(..) => "powf",
            Op::Clamp(..) => "clamp",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumAxis(..) => "sum_axis",
            Op::GatherRows(..) => "gather_rows",
            Op::ScatterRows { .. } => "scatter_rows",
            Op::ConcatCols(_) => "concat_cols",
            Op::SliceCols { .. } => "slice_cols",
            Op::Reshape(_) => "reshape",
            Op::Im2Col(..) => "im2col",
            Op::StraightThrough(_) => "straight_through",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Operation tape. Single-threaded; build one per forward pass.
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    record: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn dim_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Dimension {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            record: true,
        }
    }

    /// A graph whose parameters never require gradients. Forward values are
    /// identical to a recording graph.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            record: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, mut value: Tensor, op: Op, requires_grad: bool) -> Var {
        value.requires_grad = requires_grad && self.record;
        value.grad = None;
        self.nodes.push(Node { value, op });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value.data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of the last `backward` call, if the node received one.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.value.grad = None;
        }
        for g in &mut self.grads {
            *g = None;
        }
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// Name of the earliest operation whose output is not finite.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.nodes
            .iter()
            .find(|n| !n.value.is_finite())
            .map(|n| n.op.name())
    }

    // ---------------------------------------------------------------- ops

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape.len() != 2 || tb.shape.len() != 2 || ta.shape[1] != tb.shape[0] {
            return Err(dim_err("matmul", &ta.shape, &tb.shape));
        }
        let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
        let mut out = vec![0.0; m * n];
        gemm_nn(m, k, n, &ta.data, &tb.data, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (r, c) = t.dims2();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = t.data[i * c + j];
            }
        }
        let rg = self.rg(a);
        self.push(Tensor::from_parts(vec![c, r], out), Op::Transpose(a), rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(dim_err(op, sa, sb));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect();
        let shape = ta.shape.clone();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::from_parts(shape, data), op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_map(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_map(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_map(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    /// `x[r×c] + b[c]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let (r, c) = tx.dims2();
        if tb.len() != c {
            return Err(dim_err("add_row", &tx.shape, &tb.shape));
        }
        let mut data = tx.data.clone();
        for i in 0..r {
            for (v, bv) in data[i * c..(i + 1) * c].iter_mut().zip(&tb.data) {
                *v += bv;
            }
        }
        let shape = tx.shape.clone();
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(Tensor::from_parts(shape, data), Op::AddRow(x, b), rg))
    }

    /// Row `i` of `x` scaled by `s[i]`.
    pub fn mul_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (tx, ts) = (self.value(x), self.value(s));
        let (r, c) = tx.dims2();
        if ts.len() != r {
            return Err(dim_err("mul_rows", &tx.shape, &ts.shape));
        }
        let mut data = tx.data.clone();
        for i in 0..r {
            let sv = ts.data[i];
            data[i * c..(i + 1) * c].iter_mut().for_each(|v| *v *= sv);
        }
        let shape = tx.shape.clone();
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(Tensor::from_parts(shape, data), Op::MulRows(x, s), rg))
    }

    /// Row `i` of `x` divided by `s[i]`.
    pub fn div_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (tx, ts) = (self.value(x), self.value(s));
        let (r, c) = tx.dims2();
        if ts.len() != r {
            return Err(dim_err("div_rows", &tx.shape, &ts.shape));
        }
        let mut data = tx.data.clone();
        for i in 0..r {
            let sv = ts.data[i];
            data[i * c..(i + 1) * c].iter_mut().for_each(|v| *v /= sv);
        }
        let shape = tx.shape.clone();
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(Tensor::from_parts(shape, data), Op::DivRows(x, s), rg))
    }

    /// Column `j` of `x` scaled by `g[j]`.
    pub fn mul_cols(&mut self, x: Var, g: Var) -> Result<Var> {
        let (tx, tg) = (self.value(x), self.value(g));
        let (r, c) = tx.dims2();
        if tg.len() != c {
            return Err(dim_err("mul_cols", &tx.shape, &tg.shape));
        }
        let mut data = tx.data.clone();
        for i in 0..r {
            for (v, gv) in data[i * c..(i + 1) * c].iter_mut().zip(&tg.data) {
                *v *= gv;
            }
        }
        let shape = tx.shape.clone();
        let rg = self.rg(x) || self.rg(g);
        Ok(self.push(Tensor::from_parts(shape, data), Op::MulCols(x, g), rg))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(a);
        let data = t.data.iter().map(|&x| f(x)).collect();
        let shape = t.shape.clone();
        let rg = self.rg(a);
        self.push(Tensor::from_parts(shape, data), op, rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.map(a, |x| x + s, Op::AddScalar(a))
    }

    /// `s - a`
    pub fn rsub_scalar(&mut self, s: f64, a: Var) -> Var {
        let neg = self.scale(a, -1.0);
        self.add_scalar(neg, s)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    /// `elu(x) + 1`: `x + 1` for positive inputs, `exp(x)` otherwise.
    pub fn elu_plus_one(&mut self, a: Var) -> Var {
        self.map(a, elu_plus_one, Op::EluPlusOne(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, math::sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, math::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.map(a, math::ln, Op::Ln(a))
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        self.map(a, |x| math::powf(x, p), Op::Powf(a, p))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.map(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    /// Max-stabilized softmax over each row (`Axis::Cols` normalizes along
    /// columns, i.e. each column sums to one).
    pub fn softmax(&mut self, a: Var, axis: Axis) -> Var {
        let t = self.value(a);
        let (r, c) = t.dims2();
        let data = softmax_2d(&t.data, r, c, axis, None, None);
        let shape = t.shape.clone();
        let rg = self.rg(a);
        self.push(Tensor::from_parts(shape, data), Op::Softmax(a, axis), rg)
    }

    /// Softmax restricted to live rows and columns; dead entries are zero
    /// (equivalent to `-inf` logits). A slice with no live entry is all zero.
    pub fn masked_softmax(
        &mut self,
        a: Var,
        axis: Axis,
        row_live: &[bool],
        col_live: &[bool],
    ) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = t.dims2();
        if row_live.len() != r || col_live.len() != c {
            return Err(dim_err(
                "masked_softmax",
                &t.shape,
                &[row_live.len(), col_live.len()],
            ));
        }
        let data = softmax_2d(&t.data, r, c, axis, Some(row_live), Some(col_live));
        let shape = t.shape.clone();
        let rg = self.rg(a);
        // The adjoint y ⊙ (dy − Σ y·dy) is already zero on dead entries.
        Ok(self.push(Tensor::from_parts(shape, data), Op::Softmax(a, axis), rg))
    }

    /// Normalizes each row to zero mean and unit variance (biased variance,
    /// `eps` added before the square root). No affine part.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let t = self.value(a);
        let (r, c) = t.dims2();
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        for i in 0..r {
            let row = &t.data[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / math::sqrt(var + eps);
            inv_std[i] = inv;
            for (o, x) in xhat[i * c..(i + 1) * c].iter_mut().zip(row) {
                *o = (x - mean) * inv;
            }
        }
        let shape = t.shape.clone();
        let rg = self.rg(a);
        let out = Tensor::from_parts(shape, xhat.clone());
        self.push(out, Op::LayerNorm { x: a, xhat, inv_std }, rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data.iter().sum::<f64>() / t.len().max(1) as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// `Axis::Rows` sums over rows giving `[1×c]`; `Axis::Cols` sums over
    /// columns giving `[r×1]`.
    pub fn sum_axis(&mut self, a: Var, axis: Axis) -> Var {
        let t = self.value(a);
        let (r, c) = t.dims2();
        let (shape, data) = match axis {
            Axis::Rows => {
                let mut out = vec![0.0; c];
                for i in 0..r {
                    for (o, x) in out.iter_mut().zip(&t.data[i * c..(i + 1) * c]) {
                        *o += x;
                    }
                }
                (vec![1, c], out)
            }
            Axis::Cols => {
                let out = (0..r)
                    .map(|i| t.data[i * c..(i + 1) * c].iter().sum())
                    .collect();
                (vec![r, 1], out)
            }
        };
        let rg = self.rg(a);
        self.push(Tensor::from_parts(shape, data), Op::SumAxis(a, axis), rg)
    }

    /// Copies the listed rows. Indices may repeat; the adjoint sums.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = t.dims2();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(Error::InvalidIndex {
                    op: "gather_rows",
                    index: i,
                    len: r,
                });
            }
            data.extend_from_slice(&t.data[i * c..(i + 1) * c]);
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::from_parts(vec![idx.len(), c], data),
            Op::GatherRows(a, idx.to_vec()),
            rg,
        ))
    }

    /// Writes the rows of `compact` into `carry` at `idx`; other rows of
    /// `carry` pass through.
    pub fn scatter_rows(&mut self, compact: Var, idx: &[usize], carry: Var) -> Result<Var> {
        let (tc, tk) = (self.value(compact), self.value(carry));
        let (k, d) = tc.dims2();
        let (n, dc) = tk.dims2();
        if d != dc || k != idx.len() {
            return Err(dim_err("scatter_rows", &tc.shape, &tk.shape));
        }
        let mut seen = vec![false; n];
        for &i in idx {
            if i >= n {
                return Err(Error::InvalidIndex {
                    op: "scatter_rows",
                    index: i,
                    len: n,
                });
            }
            if seen[i] {
                return Err(Error::DuplicateIndex {
                    op: "scatter_rows",
                    index: i,
                });
            }
            seen[i] = true;
        }
        let mut data = tk.data.clone();
        for (row, &i) in idx.iter().enumerate() {
            data[i * d..(i + 1) * d].copy_from_slice(&tc.data[row * d..(row + 1) * d]);
        }
        let shape = tk.shape.clone();
        let rg = self.rg(compact) || self.rg(carry);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::ScatterRows {
                compact,
                carry,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = self.value(parts[0]).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.value(p).dims2();
            if pr != r {
                return Err(dim_err("concat_cols", self.shape(parts[0]), self.shape(p)));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; r * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let t = &self.value(p).data;
            for i in 0..r {
                data[i * total + off..i * total + off + w].copy_from_slice(&t[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::from_parts(vec![r, total], data),
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = t.dims2();
        if start + len > c {
            return Err(dim_err("slice_cols", &t.shape, &[start, len]));
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&t.data[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::from_parts(vec![r, len], data),
            Op::SliceCols { x: a, start },
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if shape.iter().product::<usize>() != t.len() {
            return Err(dim_err("reshape", &t.shape, shape));
        }
        let data = t.data.clone();
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(shape.to_vec(), data), Op::Reshape(a), rg))
    }

    /// Unfolds `[in_h·in_w × channels]` (HWC) into convolution patches
    /// `[out_h·out_w × kernel²·channels]` ordered (ky, kx, channel), with
    /// replicate padding.
    pub fn im2col(&mut self, a: Var, geo: ConvGeometry) -> Result<Var> {
        let t = self.value(a);
        if t.len() != geo.in_h * geo.in_w * geo.channels {
            return Err(dim_err(
                "im2col",
                &t.shape,
                &[geo.in_h, geo.in_w, geo.channels],
            ));
        }
        let (oh, ow, pl) = (geo.out_h(), geo.out_w(), geo.patch_len());
        let mut data = vec![0.0; oh * ow * pl];
        for_each_tap(&geo, |out_idx, col, src| {
            data[out_idx * pl + col..out_idx * pl + col + geo.channels]
                .copy_from_slice(&t.data[src * geo.channels..(src + 1) * geo.channels]);
        });
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::from_parts(vec![oh * ow, pl], data),
            Op::Im2Col(a, geo),
            rg,
        ))
    }

    /// Forward value `hard`, gradient routed to `soft` unchanged.
    pub fn straight_through(&mut self, soft: Var, hard: Tensor) -> Result<Var> {
        let ts = self.value(soft);
        if ts.len() != hard.len() {
            return Err(dim_err("straight_through", &ts.shape, &hard.shape));
        }
        let hard = Tensor::from_parts(ts.shape.clone(), hard.data);
        let rg = self.rg(soft);
        Ok(self.push(hard, Op::StraightThrough(soft), rg))
    }

    // ----------------------------------------------------------- backward

    /// Accumulates d`loss`/d(node) into every node that requires grad.
    /// `loss` must hold a single value.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(dim_err("backward", self.shape(loss), &[1]));
        }
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].value.requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g);
            self.grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(self.grads.iter_mut()) {
            if node.value.requires_grad {
                if let Some(g) = g.take() {
                    match &mut node.value.grad {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => node.value.grad = Some(g),
                    }
                }
            }
        }
        Ok(())
    }

    fn acc(&mut self, v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].value.requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.len();
        let slot = self.grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(slot);
    }

    fn backprop_node(&mut self, i: usize, g: &[f64]) {
        // Values needed by adjoints are cloned out of the arena only where
        // the borrow checker demands it.
        let op = core::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2();
                let n = self.value(*b).cols();
                if self.rg(*a) {
                    let bd = self.value(*b).data.clone();
                    self.acc(*a, |ga| gemm_nt(m, n, k, g, &bd, ga));
                }
                if self.rg(*b) {
                    let ad = self.value(*a).data.clone();
                    self.acc(*b, |gb| gemm_tn(k, m, n, &ad, g, gb));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = self.value(*a).dims2();
                self.acc(*a, |ga| {
                    for x in 0..r {
                        for y in 0..c {
                            ga[x * c + y] += g[y * r + x];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.acc(*a, |ga| add_into(ga, g));
                self.acc(*b, |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                self.acc(*a, |ga| add_into(ga, g));
                self.acc(*b, |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let bd = self.value(*b).data.clone();
                    self.acc(*a, |ga| {
                        for ((x, y), z) in ga.iter_mut().zip(g).zip(&bd) {
                            *x += y * z;
                        }
                    });
                }
                if self.rg(*b) {
                    let ad = self.value(*a).data.clone();
                    self.acc(*b, |gb| {
                        for ((x, y), z) in gb.iter_mut().zip(g).zip(&ad) {
                            *x += y * z;
                        }
                    });
                }
            }
            Op::AddRow(x, b) => {
                let (r, c) = self.value(*x).dims2();
                self.acc(*x, |gx| add_into(gx, g));
                self.acc(*b, |gb| {
                    for row in 0..r {
                        add_into(gb, &g[row * c..(row + 1) * c]);
                    }
                });
            }
            Op::MulRows(x, s) => {
                let (r, c) = self.value(*x).dims2();
                if self.rg(*x) {
                    let sd = self.value(*s).data.clone();
                    self.acc(*x, |gx| {
                        for row in 0..r {
                            for j in 0..c {
                                gx[row * c + j] += g[row * c + j] * sd[row];
                            }
                        }
                    });
                }
                if self.rg(*s) {
                    let xd = self.value(*x).data.clone();
                    self.acc(*s, |gs| {
                        for row in 0..r {
                            gs[row] += dot(&g[row * c..(row + 1) * c], &xd[row * c..(row + 1) * c]);
                        }
                    });
                }
            }
            Op::DivRows(x, s) => {
                let (r, c) = self.value(*x).dims2();
                let sd = self.value(*s).data.clone();
                if self.rg(*x) {
                    self.acc(*x, |gx| {
                        for row in 0..r {
                            for j in 0..c {
                                gx[row * c + j] += g[row * c + j] / sd[row];
                            }
                        }
                    });
                }
                if self.rg(*s) {
                    let out = self.nodes[i].value.data.clone();
                    self.acc(*s, |gs| {
                        for row in 0..r {
                            let d = dot(&g[row * c..(row + 1) * c], &out[row * c..(row + 1) * c]);
                            gs[row] -= d / sd[row];
                        }
                    });
                }
            }
            Op::MulCols(x, gm) => {
                let (r, c) = self.value(*x).dims2();
                if self.rg(*x) {
                    let gd = self.value(*gm).data.clone();
                    self.acc(*x, |gx| {
                        for row in 0..r {
                            for j in 0..c {
                                gx[row * c + j] += g[row * c + j] * gd[j];
                            }
                        }
                    });
                }
                if self.rg(*gm) {
                    let xd = self.value(*x).data.clone();
                    self.acc(*gm, |gg| {
                        for row in 0..r {
                            for j in 0..c {
                                gg[j] += g[row * c + j] * xd[row * c + j];
                            }
                        }
                    });
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.acc(*a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y * s));
            }
            Op::AddScalar(a) | Op::Reshape(a) | Op::StraightThrough(a) => {
                self.acc(*a, |ga| add_into(ga, g));
            }
            Op::Relu(a) => {
                let xd = self.value(*a).data.clone();
                self.acc(*a, |ga| {
                    for ((o, y), x) in ga.iter_mut().zip(g).zip(&xd) {
                        if *x > 0.0 {
                            *o += y;
                        }
                    }
                });
            }
            Op::EluPlusOne(a) => {
                let xd = self.value(*a).data.clone();
                let out = self.nodes[i].value.data.clone();
                self.acc(*a, |ga| {
                    for (((o, y), x), f) in ga.iter_mut().zip(g).zip(&xd).zip(&out) {
                        *o += y * if *x > 0.0 { 1.0 } else { *f };
                    }
                });
            }
            Op::Sigmoid(a) => {
                let out = self.nodes[i].value.data.clone();
                self.acc(*a, |ga| {
                    for ((o, y), s) in ga.iter_mut().zip(g).zip(&out) {
                        *o += y * s * (1.0 - s);
                    }
                });
            }
            Op::Exp(a) => {
                let out = self.nodes[i].value.data.clone();
                self.acc(*a, |ga| {
                    for ((o, y), e) in ga.iter_mut().zip(g).zip(&out) {
                        *o += y * e;
                    }
                });
            }
            Op::Ln(a) => {
                let xd = self.value(*a).data.clone();
                self.acc(*a, |ga| {
                    for ((o, y), x) in ga.iter_mut().zip(g).zip(&xd) {
                        *o += y / x;
                    }
                });
            }
            Op::Powf(a, p) => {
                let p = *p;
                let xd = self.value(*a).data.clone();
                self.acc(*a, |ga| {
                    for ((o, y), x) in ga.iter_mut().zip(g).zip(&xd) {
                        let d = if p == 0.0 {
                            0.0
                        } else if p == 1.0 {
                            1.0
                        } else {
                            p * math::powf(*x, p - 1.0)
                        };
                        *o += y * d;
                    }
                });
            }
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let xd = self.value(*a).data.clone();
                self.acc(*a, |ga| {
                    for ((o, y), x) in ga.iter_mut().zip(g).zip(&xd) {
                        if *x >= lo && *x <= hi {
                            *o += y;
                        }
                    }
                });
            }
            Op::Softmax(a, axis) => {
                let (r, c) = self.value(*a).dims2();
                let y = self.nodes[i].value.data.clone();
                let axis = *axis;
                self.acc(*a, |ga| softmax_backward(&y, g, r, c, axis, ga));
            }
            Op::LayerNorm { x, xhat, inv_std } => {
                let (r, c) = self.value(*x).dims2();
                self.acc(*x, |gx| {
                    let n = c as f64;
                    for row in 0..r {
                        let gr = &g[row * c..(row + 1) * c];
                        let xr = &xhat[row * c..(row + 1) * c];
                        let sg: f64 = gr.iter().sum();
                        let sgx = dot(gr, xr);
                        for j in 0..c {
                            gx[row * c + j] += inv_std[row] / n * (n * gr[j] - sg - xr[j] * sgx);
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let g0 = g[0];
                self.acc(*a, |ga| ga.iter_mut().for_each(|x| *x += g0));
            }
            Op::Mean(a) => {
                let n = self.value(*a).len().max(1) as f64;
                let g0 = g[0] / n;
                self.acc(*a, |ga| ga.iter_mut().for_each(|x| *x += g0));
            }
            Op::SumAxis(a, axis) => {
                let (r, c) = self.value(*a).dims2();
                let axis = *axis;
                self.acc(*a, |ga| {
                    for row in 0..r {
                        for j in 0..c {
                            ga[row * c + j] += match axis {
                                Axis::Rows => g[j],
                                Axis::Cols => g[row],
                            };
                        }
                    }
                });
            }
            Op::GatherRows(a, idx) => {
                let c = self.value(*a).cols();
                self.acc(*a, |ga| {
                    for (row, &src) in idx.iter().enumerate() {
                        add_into(&mut ga[src * c..(src + 1) * c], &g[row * c..(row + 1) * c]);
                    }
                });
            }
            Op::ScatterRows {
                compact,
                carry,
                idx,
            } => {
                let d = self.value(*carry).cols();
                self.acc(*compact, |gc| {
                    for (row, &dst) in idx.iter().enumerate() {
                        add_into(&mut gc[row * d..(row + 1) * d], &g[dst * d..(dst + 1) * d]);
                    }
                });
                self.acc(*carry, |gk| {
                    let n = gk.len() / d.max(1);
                    let mut overwritten = vec![false; n];
                    idx.iter().for_each(|&j| overwritten[j] = true);
                    for (row, _) in overwritten.iter().enumerate().filter(|(_, o)| !**o) {
                        add_into(&mut gk[row * d..(row + 1) * d], &g[row * d..(row + 1) * d]);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = self.nodes[i].value.cols();
                let r = self.nodes[i].value.rows();
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    self.acc(p, |gp| {
                        for row in 0..r {
                            add_into(
                                &mut gp[row * w..(row + 1) * w],
                                &g[row * total + off..row * total + off + w],
                            );
                        }
                    });
                    off += w;
                }
            }
            Op::SliceCols { x, start } => {
                let (r, c) = self.value(*x).dims2();
                let w = self.nodes[i].value.cols();
                let start = *start;
                self.acc(*x, |gx| {
                    for row in 0..r {
                        add_into(
                            &mut gx[row * c + start..row * c + start + w],
                            &g[row * w..(row + 1) * w],
                        );
                    }
                });
            }
            Op::Im2Col(a, geo) => {
                let geo = *geo;
                let pl = geo.patch_len();
                self.acc(*a, |ga| {
                    for_each_tap(&geo, |out_idx, col, src| {
                        add_into(
                            &mut ga[src * geo.channels..(src + 1) * geo.channels],
                            &g[out_idx * pl + col..out_idx * pl + col + geo.channels],
                        );
                    });
                });
            }
        }
        self.nodes[i].op = op;
    }
}

#[inline]
pub(crate) fn elu_plus_one(x: f64) -> f64 {
    if x > 0.0 {
        x + 1.0
    } else {
        math::exp(x)
    }
}

#[inline]
fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Visits every (output cell, patch column, source pixel) triple. Taps
/// outside the map read the nearest edge pixel (replicate padding), so a
/// constant map convolves to a constant map.
fn for_each_tap(geo: &ConvGeometry, mut f: impl FnMut(usize, usize, usize)) {
    let (oh, ow) = (geo.out_h(), geo.out_w());
    for oy in 0..oh {
        for ox in 0..ow {
            let out_idx = oy * ow + ox;
            for ky in 0..geo.kernel {
                let iy = (oy * geo.stride + ky) as isize - geo.pad as isize;
                let iy = iy.clamp(0, geo.in_h as isize - 1) as usize;
                for kx in 0..geo.kernel {
                    let ix = (ox * geo.stride + kx) as isize - geo.pad as isize;
                    let ix = ix.clamp(0, geo.in_w as isize - 1) as usize;
                    let col = (ky * geo.kernel + kx) * geo.channels;
                    f(out_idx, col, iy * geo.in_w + ix);
                }
            }
        }
    }
}

fn softmax_2d(
    x: &[f64],
    r: usize,
    c: usize,
    axis: Axis,
    row_live: Option<&[bool]>,
    col_live: Option<&[bool]>,
) -> Vec<f64> {
    let live = |i: usize, j: usize| {
        row_live.is_none_or(|m| m[i]) && col_live.is_none_or(|m| m[j])
    };
    let mut out = vec![0.0; r * c];
    let (outer, inner) = match axis {
        Axis::Rows => (r, c),
        Axis::Cols => (c, r),
    };
    let at = |o: usize, n: usize| match axis {
        Axis::Rows => (o, n),
        Axis::Cols => (n, o),
    };
    for o in 0..outer {
        let mut mx = f64::NEG_INFINITY;
        for n in 0..inner {
            let (i, j) = at(o, n);
            if live(i, j) {
                mx = mx.max(x[i * c + j]);
            }
        }
        if mx == f64::NEG_INFINITY {
            continue;
        }
        let mut z = 0.0;
        for n in 0..inner {
            let (i, j) = at(o, n);
            if live(i, j) {
                let e = math::exp(x[i * c + j] - mx);
                out[i * c + j] = e;
                z += e;
            }
        }
        for n in 0..inner {
            let (i, j) = at(o, n);
            out[i * c + j] /= z;
        }
    }
    out
}

fn softmax_backward(y: &[f64], g: &[f64], r: usize, c: usize, axis: Axis, gx: &mut [f64]) {
    match axis {
        Axis::Rows => {
            for i in 0..r {
                let yr = &y[i * c..(i + 1) * c];
                let gr = &g[i * c..(i + 1) * c];
                let s = dot(yr, gr);
                for j in 0..c {
                    gx[i * c + j] += yr[j] * (gr[j] - s);
                }
            }
        }
        Axis::Cols => {
            for j in 0..c {
                let mut s = 0.0;
                for i in 0..r {
                    s += y[i * c + j] * g[i * c + j];
                }
                for i in 0..r {
                    gx[i * c + j] += y[i * c + j] * (g[i * c + j] - s);
                }
            }
        }
    }
}
