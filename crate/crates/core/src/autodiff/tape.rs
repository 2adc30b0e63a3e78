//! Recorded computation graph and reverse-mode gradient propagation.

use std::sync::Arc;

use super::conv::{col2im, im2col, ConvGeom};
use super::{gemm, Real, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The fixed primitive vocabulary.
///
/// | primitive | operand dims | result |
/// |---|---|---|
/// | `MatMul` | `[m,k]`, `[k,n]` | `[m,n]` |
/// | `AddBias` | `[.., c]`, `[c]` | same as lhs |
/// | `Add`/`Sub`/`Mul` | equal dims | same |
/// | `MulColumn` | `[r, ..]`, `[r, 1]` | same as lhs |
/// | `ConcatCols` | `[r, c_i]`... | `[r, sum c_i]` |
/// | `ConcatRows` | `[r_i, c]`... | `[sum r_i, c]` |
/// | `Conv3d` | `[n,s,s,s,ci]`, `[k,k,k,ci,co]` | `[n,s',s',s',co]` |
/// | `ConvTranspose3d` | `[n,s,s,s,ci]`, `[k,k,k,co,ci]` | `[n,s',s',s',co]` |
/// | `Sum`/`Mean` | any | `[1]` |
/// | `RowSum`/`RowMean` | `[r, ..]` | `[r, 1]` |
/// | `BceWithLogits` | any, constant target of equal length | same |
/// | `SoftmaxCrossEntropy` | `[r, c]`, `r` labels | `[r, 1]` |
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Primitive {
    Leaf,
    MatMul,
    AddBias,
    Add,
    Sub,
    Mul,
    MulColumn,
    Scale,
    AddScalar,
    Sigmoid,
    Tanh,
    Exp,
    Log,
    Square,
    Sum,
    Mean,
    RowSum,
    RowMean,
    ConcatCols,
    ConcatRows,
    SliceRows,
    SliceCols,
    GatherRows,
    ScatterAddRows,
    Reshape,
    Conv3d,
    ConvTranspose3d,
    BceWithLogits,
    SoftmaxCrossEntropy,
}

enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    AddBias(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MulColumn(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    Sigmoid(usize),
    Tanh(usize),
    Exp(usize),
    Log(usize),
    Square(usize),
    Sum(usize),
    Mean(usize),
    RowSum(usize),
    RowMean(usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceRows { x: usize, start: usize },
    SliceCols { x: usize, start: usize },
    GatherRows { x: usize, index: Arc<[usize]> },
    ScatterAddRows { x: usize, index: Arc<[usize]> },
    Reshape(usize),
    Conv3d { x: usize, w: usize, geom: ConvGeom },
    ConvTranspose3d { x: usize, w: usize, geom: ConvGeom },
    BceWithLogits { x: usize, target: Arc<[T]> },
    SoftmaxCrossEntropy { x: usize, labels: Arc<[usize]> },
}

impl<T> Op<T> {
    fn kind(&self) -> Primitive {
        match self {
            Op::Leaf => Primitive::Leaf,
            Op::MatMul(..) => Primitive::MatMul,
            Op::AddBias(..) => Primitive::AddBias,
            Op::Add(..) => Primitive::Add,
            Op::Sub(..) => Primitive::Sub,
            Op::Mul(..) => Primitive::Mul,
            Op::MulColumn(..) => Primitive::MulColumn,
            Op::Scale(..) => Primitive::Scale,
            Op::AddScalar(..) => Primitive::AddScalar,
            Op::Sigmoid(..) => Primitive::Sigmoid,
            Op::Tanh(..) => Primitive::Tanh,
            Op::Exp(..) => Primitive::Exp,
            Op::Log(..) => Primitive::Log,
            Op::Square(..) => Primitive::Square,
            Op::Sum(..) => Primitive::Sum,
            Op::Mean(..) => Primitive::Mean,
            Op::RowSum(..) => Primitive::RowSum,
            Op::RowMean(..) => Primitive::RowMean,
            Op::ConcatCols(..) => Primitive::ConcatCols,
            Op::ConcatRows(..) => Primitive::ConcatRows,
            Op::SliceRows { .. } => Primitive::SliceRows,
            Op::SliceCols { .. } => Primitive::SliceCols,
            Op::GatherRows { .. } => Primitive::GatherRows,
            Op::ScatterAddRows { .. } => Primitive::ScatterAddRows,
            Op::Reshape(..) => Primitive::Reshape,
            Op::Conv3d { .. } => Primitive::Conv3d,
            Op::ConvTranspose3d { .. } => Primitive::ConvTranspose3d,
            Op::BceWithLogits { .. } => Primitive::BceWithLogits,
            Op::SoftmaxCrossEntropy { .. } => Primitive::SoftmaxCrossEntropy,
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Append-only record of primitive applications.
///
/// Nodes are stored in creation order, which is a topological order of the
/// graph. A tape supports a single backward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
    fault: Option<Primitive>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, detail: String) -> TensorError {
    TensorError::Shape { op, detail }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            backward_done: false,
            fault: None,
        }
    }

    /// Scale the input gradients of every `kind` node by 1.5 during backward.
    ///
    /// Only used as a negative control for gradient checking.
    #[doc(hidden)]
    pub fn inject_backward_fault(&mut self, kind: Primitive) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    /// Trainable leaf: gradients are collected for it.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true)
    }

    /// Non-trainable leaf (inputs, targets, masks).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op<T>, dims: Vec<usize>, data: Vec<T>) -> Result<Var, TensorError> {
        let kind = op.kind();
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NumericFault {
                op: kind,
                index: pos,
            });
        }
        let needs_grad = self.op_inputs(&op).iter().any(|&i| self.nodes[i].needs_grad);
        let value = Tensor::new(dims, data)?;
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn op_inputs(&self, op: &Op<T>) -> Vec<usize> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::AddBias(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::MulColumn(a, b) => vec![*a, *b],
            Op::Conv3d { x, w, .. } | Op::ConvTranspose3d { x, w, .. } => vec![*x, *w],
            Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Sigmoid(x)
            | Op::Tanh(x)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::Square(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::RowSum(x)
            | Op::RowMean(x)
            | Op::Reshape(x)
            | Op::SliceRows { x, .. }
            | Op::SliceCols { x, .. }
            | Op::GatherRows { x, .. }
            | Op::ScatterAddRows { x, .. }
            | Op::BceWithLogits { x, .. }
            | Op::SoftmaxCrossEntropy { x, .. } => vec![*x],
            Op::ConcatCols(xs) | Op::ConcatRows(xs) => xs.clone(),
        }
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize), TensorError> {
        let d = self.dims(v);
        if d.len() != 2 {
            return Err(shape_err(op, format!("expected a matrix, got dims {d:?}")));
        }
        Ok((d[0], d[1]))
    }

    fn same_dims(&self, a: Var, b: Var, op: &'static str) -> Result<(), TensorError> {
        if self.dims(a) != self.dims(b) {
            return Err(shape_err(
                op,
                format!("operand dims {:?} and {:?} differ", self.dims(a), self.dims(b)),
            ));
        }
        Ok(())
    }

    fn map_unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Result<Var, TensorError> {
        let value = self.value(x);
        let dims = value.dims().to_vec();
        let data = value.data().iter().map(|&v| f(v)).collect();
        self.push(op, dims, data)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", format!("[{m},{k}] x [{k2},{n}]")));
        }
        let mut out = vec![T::ZERO; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        self.push(Op::MatMul(a.0, b.0), vec![m, n], out)
    }

    /// Broadcast-add a bias vector along the last axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let xd = self.dims(x).to_vec();
        let bd = self.dims(bias);
        let c = *xd.last().unwrap_or(&0);
        if bd.len() != 1 || bd[0] != c {
            return Err(shape_err("add_bias", format!("{xd:?} + {bd:?}")));
        }
        let b = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .chunks(c)
            .flat_map(|row| row.iter().zip(b).map(|(&v, &bb)| v + bb))
            .collect();
        self.push(Op::AddBias(x.0, bias.0), xd, data)
    }

    fn zip_binary(&mut self, a: Var, b: Var, op: Op<T>, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Var, TensorError> {
        self.same_dims(a, b, name)?;
        let dims = self.dims(a).to_vec();
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        self.push(op, dims, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_binary(a, b, Op::Add(a.0, b.0), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_binary(a, b, Op::Sub(a.0, b.0), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_binary(a, b, Op::Mul(a.0, b.0), "mul", |x, y| x * y)
    }

    /// Multiply every row of `x` by the matching entry of the `[rows, 1]` column.
    pub fn mul_column(&mut self, x: Var, column: Var) -> Result<Var, TensorError> {
        let xd = self.dims(x).to_vec();
        let cd = self.dims(column);
        if cd != [xd[0], 1] {
            return Err(shape_err("mul_column", format!("{xd:?} * {cd:?}")));
        }
        let cols = self.value(x).cols();
        let s = self.value(column).data();
        let data = self
            .value(x)
            .data()
            .chunks(cols)
            .zip(s)
            .flat_map(|(row, &f)| row.iter().map(move |&v| v * f))
            .collect();
        self.push(Op::MulColumn(x.0, column.0), xd, data)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var, TensorError> {
        let f = T::from_f64(factor);
        self.map_unary(x, Op::Scale(x.0, f), |v| v * f)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var, TensorError> {
        let c = T::from_f64(c);
        self.map_unary(x, Op::AddScalar(x.0), |v| v + c)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, TensorError> {
        self.map_unary(x, Op::Sigmoid(x.0), T::sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var, TensorError> {
        self.map_unary(x, Op::Tanh(x.0), T::tanh)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, TensorError> {
        self.map_unary(x, Op::Exp(x.0), T::exp)
    }

    pub fn log(&mut self, x: Var) -> Result<Var, TensorError> {
        self.map_unary(x, Op::Log(x.0), T::ln)
    }

    pub fn square(&mut self, x: Var) -> Result<Var, TensorError> {
        self.map_unary(x, Op::Square(x.0), |v| v * v)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.value(x).data().iter().fold(T::ZERO, |acc, &v| acc + v);
        self.push(Op::Sum(x.0), vec![1], vec![s])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, TensorError> {
        let v = self.value(x);
        let n = T::from_f64(v.numel() as f64);
        let s = v.data().iter().fold(T::ZERO, |acc, &v| acc + v);
        self.push(Op::Mean(x.0), vec![1], vec![s / n])
    }

    pub fn row_sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let v = self.value(x);
        let (r, c) = (v.rows(), v.cols());
        let data = v
            .data()
            .chunks(c)
            .map(|row| row.iter().fold(T::ZERO, |acc, &v| acc + v))
            .collect();
        self.push(Op::RowSum(x.0), vec![r, 1], data)
    }

    pub fn row_mean(&mut self, x: Var) -> Result<Var, TensorError> {
        let v = self.value(x);
        let (r, c) = (v.rows(), v.cols());
        let n = T::from_f64(c as f64);
        let data = v
            .data()
            .chunks(c)
            .map(|row| row.iter().fold(T::ZERO, |acc, &v| acc + v) / n)
            .collect();
        self.push(Op::RowMean(x.0), vec![r, 1], data)
    }

    /// Concatenate matrices along the last axis.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var, TensorError> {
        if xs.is_empty() {
            return Err(shape_err("concat_cols", "no operands".into()));
        }
        let rows = self.matrix_dims(xs[0], "concat_cols")?.0;
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let (r, c) = self.matrix_dims(x, "concat_cols")?;
            if r != rows {
                return Err(shape_err("concat_cols", format!("row counts {rows} and {r} differ")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&x, &w) in xs.iter().zip(&widths) {
                data.extend_from_slice(&self.value(x).data()[r * w..(r + 1) * w]);
            }
        }
        self.push(Op::ConcatCols(xs.iter().map(|v| v.0).collect()), vec![rows, total], data)
    }

    /// Stack matrices along the first axis.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var, TensorError> {
        if xs.is_empty() {
            return Err(shape_err("concat_rows", "no operands".into()));
        }
        let cols = self.matrix_dims(xs[0], "concat_rows")?.1;
        let mut rows = 0;
        let mut data = Vec::new();
        for &x in xs {
            let (r, c) = self.matrix_dims(x, "concat_rows")?;
            if c != cols {
                return Err(shape_err("concat_rows", format!("column counts {cols} and {c} differ")));
            }
            rows += r;
            data.extend_from_slice(self.value(x).data());
        }
        self.push(Op::ConcatRows(xs.iter().map(|v| v.0).collect()), vec![rows, cols], data)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let (r, c) = self.matrix_dims(x, "slice_rows")?;
        if len == 0 || start + len > r {
            return Err(shape_err("slice_rows", format!("rows {start}..{} of {r}", start + len)));
        }
        let data = self.value(x).data()[start * c..(start + len) * c].to_vec();
        self.push(Op::SliceRows { x: x.0, start }, vec![len, c], data)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let (r, c) = self.matrix_dims(x, "slice_cols")?;
        if len == 0 || start + len > c {
            return Err(shape_err("slice_cols", format!("cols {start}..{} of {c}", start + len)));
        }
        let src = self.value(x).data();
        let data = (0..r)
            .flat_map(|i| src[i * c + start..i * c + start + len].iter().copied())
            .collect();
        self.push(Op::SliceCols { x: x.0, start }, vec![r, len], data)
    }

    /// `out[i] = x[index[i]]` row-wise.
    pub fn gather_rows(&mut self, x: Var, index: Arc<[usize]>) -> Result<Var, TensorError> {
        let (r, c) = self.matrix_dims(x, "gather_rows")?;
        if index.is_empty() {
            return Err(shape_err("gather_rows", "empty index".into()));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= r) {
            return Err(TensorError::Index {
                op: "gather_rows",
                index: bad,
                bound: r,
            });
        }
        let src = self.value(x).data();
        let data = index
            .iter()
            .flat_map(|&i| src[i * c..(i + 1) * c].iter().copied())
            .collect();
        let n = index.len();
        self.push(Op::GatherRows { x: x.0, index }, vec![n, c], data)
    }

    /// `out[index[i]] += x[i]` into `rows` output rows.
    pub fn scatter_add_rows(&mut self, x: Var, index: Arc<[usize]>, rows: usize) -> Result<Var, TensorError> {
        let (r, c) = self.matrix_dims(x, "scatter_add_rows")?;
        if index.len() != r {
            return Err(shape_err("scatter_add_rows", format!("{} indices for {r} rows", index.len())));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(TensorError::Index {
                op: "scatter_add_rows",
                index: bad,
                bound: rows,
            });
        }
        let src = self.value(x).data();
        let mut data = vec![T::ZERO; rows * c];
        for (i, &dst) in index.iter().enumerate() {
            for (d, &s) in data[dst * c..(dst + 1) * c].iter_mut().zip(&src[i * c..(i + 1) * c]) {
                *d += s;
            }
        }
        self.push(Op::ScatterAddRows { x: x.0, index }, vec![rows, c], data)
    }

    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Result<Var, TensorError> {
        let v = self.value(x).reshaped(dims)?;
        let data = v.data().to_vec();
        self.push(Op::Reshape(x.0), dims.to_vec(), data)
    }

    fn volume_dims(&self, x: Var, op: &'static str) -> Result<(usize, usize, usize), TensorError> {
        let d = self.dims(x);
        if d.len() != 5 || d[1] != d[2] || d[2] != d[3] {
            return Err(shape_err(op, format!("expected [n,s,s,s,c], got {d:?}")));
        }
        Ok((d[0], d[1], d[4]))
    }

    /// Strided cubic convolution (no bias).
    pub fn conv3d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var, TensorError> {
        let (n, side, cin) = self.volume_dims(x, "conv3d")?;
        let wd = self.dims(w).to_vec();
        if wd.len() != 5 || wd[0] != wd[1] || wd[1] != wd[2] || wd[3] != cin {
            return Err(shape_err("conv3d", format!("input {:?} with kernel {wd:?}", self.dims(x))));
        }
        let (k, cout) = (wd[0], wd[4]);
        let lo = ConvGeom::conv_out_side(side, k, stride, pad)
            .ok_or_else(|| shape_err("conv3d", format!("side {side} kernel {k} stride {stride} pad {pad}")))?;
        let geom = ConvGeom {
            batch: n,
            hi: side,
            lo,
            channels: cin,
            kernel: k,
            stride,
            pad,
        };
        let mut cols = vec![T::ZERO; geom.patch_rows() * geom.patch_len()];
        im2col(&geom, self.value(x).data(), &mut cols);
        let mut out = vec![T::ZERO; geom.patch_rows() * cout];
        gemm(geom.patch_rows(), geom.patch_len(), cout, &cols, false, self.value(w).data(), false, &mut out, false);
        self.push(Op::Conv3d { x: x.0, w: w.0, geom }, vec![n, lo, lo, lo, cout], out)
    }

    /// Strided cubic transposed convolution (no bias); the adjoint of [`Tape::conv3d`].
    pub fn conv_transpose3d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var, TensorError> {
        let (n, side, cin) = self.volume_dims(x, "conv_transpose3d")?;
        let wd = self.dims(w).to_vec();
        if wd.len() != 5 || wd[0] != wd[1] || wd[1] != wd[2] || wd[4] != cin {
            return Err(shape_err(
                "conv_transpose3d",
                format!("input {:?} with kernel {wd:?}", self.dims(x)),
            ));
        }
        let (k, cout) = (wd[0], wd[3]);
        let hi = ConvGeom::transposed_out_side(side, k, stride, pad).ok_or_else(|| {
            shape_err("conv_transpose3d", format!("side {side} kernel {k} stride {stride} pad {pad}"))
        })?;
        let geom = ConvGeom {
            batch: n,
            hi,
            lo: side,
            channels: cout,
            kernel: k,
            stride,
            pad,
        };
        if ConvGeom::conv_out_side(hi, k, stride, pad) != Some(side) {
            return Err(shape_err("conv_transpose3d", format!("side {side} is not invertible")));
        }
        let mut cols = vec![T::ZERO; geom.patch_rows() * geom.patch_len()];
        gemm(geom.patch_rows(), cin, geom.patch_len(), self.value(x).data(), false, self.value(w).data(), true, &mut cols, false);
        let mut out = vec![T::ZERO; geom.hi_len()];
        col2im(&geom, &cols, &mut out);
        self.push(Op::ConvTranspose3d { x: x.0, w: w.0, geom }, vec![n, hi, hi, hi, cout], out)
    }

    /// Elementwise numerically stable binary cross-entropy on logits.
    pub fn bce_with_logits(&mut self, x: Var, target: Arc<[T]>) -> Result<Var, TensorError> {
        let v = self.value(x);
        if target.len() != v.numel() {
            return Err(shape_err(
                "bce_with_logits",
                format!("{} targets for dims {:?}", target.len(), v.dims()),
            ));
        }
        let dims = v.dims().to_vec();
        let data = v
            .data()
            .iter()
            .zip(target.iter())
            .map(|(&l, &y)| l.max(T::ZERO) - l * y + (T::ONE + (-l.abs()).exp()).ln())
            .collect();
        self.push(Op::BceWithLogits { x: x.0, target }, dims, data)
    }

    /// Per-row softmax cross-entropy against integer labels.
    pub fn softmax_cross_entropy(&mut self, x: Var, labels: Arc<[usize]>) -> Result<Var, TensorError> {
        let (r, c) = self.matrix_dims(x, "softmax_cross_entropy")?;
        if labels.len() != r {
            return Err(shape_err("softmax_cross_entropy", format!("{} labels for {r} rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(TensorError::Index {
                op: "softmax_cross_entropy",
                index: bad,
                bound: c,
            });
        }
        let src = self.value(x).data();
        let data = src
            .chunks(c)
            .zip(labels.iter())
            .map(|(row, &l)| log_sum_exp(row) - row[l])
            .collect();
        self.push(Op::SoftmaxCrossEntropy { x: x.0, labels }, vec![r, 1], data)
    }

    /// Propagate gradients from a scalar `loss` to every trainable leaf.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>, TensorError> {
        if self.backward_done {
            return Err(TensorError::Contract("backward already ran on this tape".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Contract(format!(
                "loss must be scalar, got dims {:?}",
                self.dims(loss)
            )));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![T::ONE]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let mut contributions = self.node_backward(i, &g);
            if self.fault == Some(self.nodes[i].op.kind()) {
                let f = T::from_f64(1.5);
                for (_, c) in contributions.iter_mut() {
                    c.iter_mut().for_each(|v| *v *= f);
                }
            }
            for (input, c) in contributions {
                if !self.nodes[input].needs_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, b)| *a += *b),
                    slot @ None => *slot = Some(c),
                }
            }
        }
        let mut leaf = Vec::new();
        for (i, g) in grads.into_iter().enumerate() {
            if let (Some(g), Op::Leaf) = (g, &self.nodes[i].op) {
                if self.nodes[i].needs_grad {
                    leaf.push((i, g));
                }
            }
        }
        Ok(Gradients { grads: leaf })
    }

    fn node_backward(&self, i: usize, g: &[T]) -> Vec<(usize, Vec<T>)> {
        let node = &self.nodes[i];
        let val = |j: usize| self.nodes[j].value.data();
        match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[*a].value.rows(), self.nodes[*a].value.cols());
                let n = self.nodes[*b].value.cols();
                let mut ga = Vec::new();
                let mut gb = Vec::new();
                if self.nodes[*a].needs_grad {
                    ga = vec![T::ZERO; m * k];
                    gemm(m, n, k, g, false, val(*b), true, &mut ga, false);
                }
                if self.nodes[*b].needs_grad {
                    gb = vec![T::ZERO; k * n];
                    gemm(k, m, n, val(*a), true, g, false, &mut gb, false);
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::AddBias(x, b) => {
                let c = self.nodes[*b].value.numel();
                let mut gb = vec![T::ZERO; c];
                for row in g.chunks(c) {
                    gb.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                }
                vec![(*x, g.to_vec()), (*b, gb)]
            }
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|&v| -v).collect())],
            Op::Mul(a, b) => {
                let ga = g.iter().zip(val(*b)).map(|(&d, &y)| d * y).collect();
                let gb = g.iter().zip(val(*a)).map(|(&d, &x)| d * x).collect();
                vec![(*a, ga), (*b, gb)]
            }
            Op::MulColumn(x, col) => {
                let cols = self.nodes[*x].value.cols();
                let s = val(*col);
                let gx = g
                    .chunks(cols)
                    .zip(s)
                    .flat_map(|(row, &f)| row.iter().map(move |&v| v * f))
                    .collect();
                let gc = g
                    .chunks(cols)
                    .zip(val(*x).chunks(cols))
                    .map(|(dr, xr)| dr.iter().zip(xr).fold(T::ZERO, |acc, (&d, &v)| acc + d * v))
                    .collect();
                vec![(*x, gx), (*col, gc)]
            }
            Op::Scale(x, f) => vec![(*x, g.iter().map(|&d| d * *f).collect())],
            Op::AddScalar(x) | Op::Reshape(x) => vec![(*x, g.to_vec())],
            Op::Sigmoid(x) => {
                let y = node.value.data();
                vec![(*x, g.iter().zip(y).map(|(&d, &s)| d * s * (T::ONE - s)).collect())]
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                vec![(*x, g.iter().zip(y).map(|(&d, &t)| d * (T::ONE - t * t)).collect())]
            }
            Op::Exp(x) => {
                let y = node.value.data();
                vec![(*x, g.iter().zip(y).map(|(&d, &e)| d * e).collect())]
            }
            Op::Log(x) => vec![(*x, g.iter().zip(val(*x)).map(|(&d, &v)| d / v).collect())],
            Op::Square(x) => {
                let two = T::from_f64(2.0);
                vec![(*x, g.iter().zip(val(*x)).map(|(&d, &v)| d * two * v).collect())]
            }
            Op::Sum(x) => vec![(*x, vec![g[0]; self.nodes[*x].value.numel()])],
            Op::Mean(x) => {
                let n = self.nodes[*x].value.numel();
                vec![(*x, vec![g[0] / T::from_f64(n as f64); n])]
            }
            Op::RowSum(x) | Op::RowMean(x) => {
                let c = self.nodes[*x].value.cols();
                let scale = if matches!(node.op, Op::RowMean(_)) {
                    T::ONE / T::from_f64(c as f64)
                } else {
                    T::ONE
                };
                vec![(*x, g.iter().flat_map(|&d| std::iter::repeat_n(d * scale, c)).collect())]
            }
            Op::ConcatCols(xs) => {
                let rows = node.value.rows();
                let total = node.value.cols();
                let mut offset = 0;
                xs.iter()
                    .map(|&x| {
                        let w = self.nodes[x].value.cols();
                        let gx = (0..rows)
                            .flat_map(|r| g[r * total + offset..r * total + offset + w].iter().copied())
                            .collect();
                        offset += w;
                        (x, gx)
                    })
                    .collect()
            }
            Op::ConcatRows(xs) => {
                let mut offset = 0;
                xs.iter()
                    .map(|&x| {
                        let n = self.nodes[x].value.numel();
                        let gx = g[offset..offset + n].to_vec();
                        offset += n;
                        (x, gx)
                    })
                    .collect()
            }
            Op::SliceRows { x, start } => {
                let c = node.value.cols();
                let mut gx = vec![T::ZERO; self.nodes[*x].value.numel()];
                gx[start * c..start * c + g.len()].copy_from_slice(g);
                vec![(*x, gx)]
            }
            Op::SliceCols { x, start } => {
                let len = node.value.cols();
                let c = self.nodes[*x].value.cols();
                let mut gx = vec![T::ZERO; self.nodes[*x].value.numel()];
                for (r, row) in g.chunks(len).enumerate() {
                    gx[r * c + start..r * c + start + len].copy_from_slice(row);
                }
                vec![(*x, gx)]
            }
            Op::GatherRows { x, index } => {
                let c = node.value.cols();
                let mut gx = vec![T::ZERO; self.nodes[*x].value.numel()];
                for (r, &src) in index.iter().enumerate() {
                    for (a, &d) in gx[src * c..(src + 1) * c].iter_mut().zip(&g[r * c..(r + 1) * c]) {
                        *a += d;
                    }
                }
                vec![(*x, gx)]
            }
            Op::ScatterAddRows { x, index } => {
                let c = node.value.cols();
                let gx = index
                    .iter()
                    .flat_map(|&dst| g[dst * c..(dst + 1) * c].iter().copied())
                    .collect();
                vec![(*x, gx)]
            }
            Op::Conv3d { x, w, geom } => {
                let cout = node.value.dims()[4];
                let rows = geom.patch_rows();
                let plen = geom.patch_len();
                let mut cols = vec![T::ZERO; rows * plen];
                im2col(geom, val(*x), &mut cols);
                let mut gw = vec![T::ZERO; plen * cout];
                gemm(plen, rows, cout, &cols, true, g, false, &mut gw, false);
                let mut gx = Vec::new();
                if self.nodes[*x].needs_grad {
                    let mut gcols = cols;
                    gemm(rows, cout, plen, g, false, val(*w), true, &mut gcols, false);
                    gx = vec![T::ZERO; geom.hi_len()];
                    col2im(geom, &gcols, &mut gx);
                }
                vec![(*x, gx), (*w, gw)]
            }
            Op::ConvTranspose3d { x, w, geom } => {
                let cin = self.nodes[*x].value.dims()[4];
                let rows = geom.patch_rows();
                let plen = geom.patch_len();
                let mut gcols = vec![T::ZERO; rows * plen];
                im2col(geom, g, &mut gcols);
                let mut gw = vec![T::ZERO; plen * cin];
                gemm(plen, rows, cin, &gcols, true, val(*x), false, &mut gw, false);
                let mut gx = Vec::new();
                if self.nodes[*x].needs_grad {
                    gx = vec![T::ZERO; rows * cin];
                    gemm(rows, plen, cin, &gcols, false, val(*w), false, &mut gx, false);
                }
                vec![(*x, gx), (*w, gw)]
            }
            Op::BceWithLogits { x, target } => {
                let gx = g
                    .iter()
                    .zip(val(*x))
                    .zip(target.iter())
                    .map(|((&d, &l), &y)| d * (l.sigmoid() - y))
                    .collect();
                vec![(*x, gx)]
            }
            Op::SoftmaxCrossEntropy { x, labels } => {
                let c = self.nodes[*x].value.cols();
                let mut gx = Vec::with_capacity(self.nodes[*x].value.numel());
                for ((row, &l), &d) in val(*x).chunks(c).zip(labels.iter()).zip(g) {
                    let lse = log_sum_exp(row);
                    for (j, &v) in row.iter().enumerate() {
                        let p = (v - lse).exp();
                        let onehot = if j == l { T::ONE } else { T::ZERO };
                        gx.push(d * (p - onehot));
                    }
                }
                vec![(*x, gx)]
            }
        }
    }
}

fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let m = row.iter().copied().fold(row[0], T::max);
    m + row.iter().fold(T::ZERO, |acc, &v| acc + (v - m).exp()).ln()
}

/// Gradients of the trainable leaves reached by a backward pass.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<(usize, Vec<T>)>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads
            .binary_search_by_key(&v.0, |(i, _)| *i)
            .ok()
            .map(|pos| self.grads[pos].1.as_slice())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads
            .binary_search_by_key(&v.0, |(i, _)| *i)
            .ok()
            .map(|pos| std::mem::take(&mut self.grads[pos].1))
    }
}
