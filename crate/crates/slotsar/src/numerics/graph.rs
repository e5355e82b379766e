//! Define-by-run compute graph with reverse-mode differentiation.
//!
//! Every operation evaluates eagerly, records itself on the tape, and
//! validates shapes and finiteness. `backward` sweeps the tape once in
//! anti-topological order and returns one gradient per trainable leaf,
//! with exact zeros for parameters the loss never touched.
//!
//! Complex fields (FFT filtering) are carried as real tensors of shape
//! [2, H, W]: plane 0 real, plane 1 imaginary.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::fft;
use crate::numerics::ops;
use crate::numerics::tensor::{Precision, Tensor};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

enum Value {
    Owned(Tensor),
    Shared(Arc<Tensor>),
}

impl Value {
    fn tensor(&self) -> &Tensor {
        match self {
            Value::Owned(t) => t,
            Value::Shared(t) => t,
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf {
        name: Option<String>,
        trainable: bool,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Recip(usize),
    AddConst(usize),
    Scale(usize, f64),
    Relu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Exp(usize),
    Sqrt(usize),
    Cos(usize),
    Sin(usize),
    Matmul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    SumAll(usize),
    MeanAll(usize),
    SumAxis(usize, usize),
    Softmax(usize, usize),
    LayerNorm {
        x: usize,
        inv_std: Vec<f64>,
    },
    BatchNorm {
        x: usize,
        mean: Vec<f64>,
        var: Vec<f64>,
        inv_std: Vec<f64>,
    },
    AddRowVec(usize, usize),
    MulRowVec(usize, usize),
    ScaleRows(usize, usize),
    RepeatRow(usize, usize),
    SelectRow(usize, usize),
    StackRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceCols {
        x: usize,
        start: usize,
        len: usize,
    },
    AvgPool2d(usize, usize),
    BilinearResize(usize),
    PackComplex(usize, usize),
    ComplexReal(usize),
    ComplexMul(usize, usize),
    Modulus(usize),
    Fft2d {
        x: usize,
        inverse: bool,
    },
    EmbedKernel(usize),
    SlotwiseOuter(usize, usize),
    FusedSlotReduce(usize, usize, usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(..) => "neg",
            Op::Recip(..) => "recip",
            Op::AddConst(..) => "add_const",
            Op::Scale(..) => "scale",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Exp(..) => "exp",
            Op::Sqrt(..) => "sqrt",
            Op::Cos(..) => "cos",
            Op::Sin(..) => "sin",
            Op::Matmul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::SumAll(..) => "sum_all",
            Op::MeanAll(..) => "mean_all",
            Op::SumAxis(..) => "sum_axis",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::BatchNorm { .. } => "batch_norm",
            Op::AddRowVec(..) => "add_row_vec",
            Op::MulRowVec(..) => "mul_row_vec",
            Op::ScaleRows(..) => "scale_rows",
            Op::RepeatRow(..) => "repeat_row",
            Op::SelectRow(..) => "select_row",
            Op::StackRows(..) => "stack_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceCols { .. } => "slice_cols",
            Op::AvgPool2d(..) => "avg_pool2d",
            Op::BilinearResize(..) => "bilinear_resize",
            Op::PackComplex(..) => "pack_complex",
            Op::ComplexReal(..) => "complex_real",
            Op::ComplexMul(..) => "complex_mul",
            Op::Modulus(..) => "modulus",
            Op::Fft2d { .. } => "fft2d",
            Op::EmbedKernel(..) => "embed_kernel",
            Op::SlotwiseOuter(..) => "slotwise_outer",
            Op::FusedSlotReduce(..) => "fused_slot_reduce",
        }
    }
}

struct Node {
    op: Op,
    value: Value,
    needs_grad: bool,
}

/// Gradients keyed by parameter name. Parameters registered on the graph
/// but unused by the loss get an exact-zero tensor.
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    map: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn insert(&mut self, name: String, t: Tensor) {
        self.map.insert(name, t);
    }

    /// Sum `other` into `self` entry-wise (shapes must agree).
    pub fn accumulate(&mut self, other: &Gradients) {
        for (name, g) in other.iter() {
            match self.map.get_mut(name) {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                None => {
                    self.map.insert(name.clone(), g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for (_, g) in self.map.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }

    /// Global L2 norm over every entry of every gradient.
    pub fn global_norm(&self) -> f64 {
        self.map
            .values()
            .flat_map(|t| t.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

/// The tape.
pub struct Graph {
    precision: Precision,
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new(precision: Precision) -> Self {
        Graph {
            precision,
            nodes: Vec::new(),
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value of a node.
    pub fn value(&self, v: Var) -> &Tensor {
        self.nodes[v.0].value.tensor()
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, op: Op, mut value: Tensor, needs_grad: bool) -> Result<Var> {
        if self.precision == Precision::F32 {
            value.round_f32();
        }
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: op.name().to_string(),
                node: self.nodes.len(),
            });
        }
        self.nodes.push(Node {
            op,
            value: Value::Owned(value),
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes[id].needs_grad
    }

    // ── Leaves ───────────────────────────────────────────────────────

    /// Non-trainable leaf (input data or constant).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf {
                name: None,
                trainable: false,
            },
            value: Value::Owned(t),
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Named non-trainable input.
    pub fn input(&mut self, name: &str, t: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf {
                name: Some(name.to_string()),
                trainable: false,
            },
            value: Value::Owned(t),
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Named trainable parameter; shares storage with the caller.
    pub fn param(&mut self, name: &str, t: Arc<Tensor>) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf {
                name: Some(name.to_string()),
                trainable: true,
            },
            value: Value::Shared(t),
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Non-trainable leaf sharing the caller's storage (frozen
    /// parameters, cached constants).
    pub fn constant_shared(&mut self, t: Arc<Tensor>) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf {
                name: None,
                trainable: false,
            },
            value: Value::Shared(t),
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    // ── Elementwise binary (same shape, or scalar on either side) ────

    fn binary(&mut self, op: fn(usize, usize) -> Op, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let opv = op(a.0, b.0);
        if ta.shape() != tb.shape() && ta.numel() != 1 && tb.numel() != 1 {
            return Err(Error::shape(
                opv.name(),
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let value = ops::broadcast_binary(ta, tb, match opv {
            Op::Add(..) => |x, y| x + y,
            Op::Sub(..) => |x, y| x - y,
            Op::Mul(..) => |x, y| x * y,
            Op::Div(..) => |x, y| x / y,
            _ => unreachable!(),
        });
        let ng = self.needs(a.0) || self.needs(b.0);
        self.push(opv, value, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Div, a, b)
    }

    // ── Elementwise unary ────────────────────────────────────────────

    fn unary(&mut self, op: Op, x: Var, f: impl Fn(f64) -> f64) -> Result<Var> {
        let t = self.value(x);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())?;
        let ng = self.needs(x.0);
        self.push(op, value, ng)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Neg(x.0), x, |v| -v)
    }

    pub fn recip(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Recip(x.0), x, |v| 1.0 / v)
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(Op::AddConst(x.0), x, |v| v + c)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(Op::Scale(x.0, c), x, |v| v * c)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Relu(x.0), x, |v| v.max(0.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Sigmoid(x.0), x, |v| 1.0 / (1.0 + (-v).exp()))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Tanh(x.0), x, |v| v.tanh())
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Exp(x.0), x, |v| v.exp())
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Sqrt(x.0), x, |v| v.sqrt())
    }

    pub fn cos(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Cos(x.0), x, |v| v.cos())
    }

    pub fn sin(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Sin(x.0), x, |v| v.sin())
    }

    // ── Linear algebra ───────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.cols() != tb.rows() {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", ta.shape(), tb.shape()),
            ));
        }
        let value = ops::matmul(ta, tb);
        let ng = self.needs(a.0) || self.needs(b.0);
        self.push(Op::Matmul(a.0, b.0), value, ng)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(Error::shape("transpose", format!("{:?}", t.shape())));
        }
        let value = ops::transpose(t);
        let ng = self.needs(x.0);
        self.push(Op::Transpose(x.0), value, ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let value = t.clone().reshaped(shape.to_vec())?;
        let ng = self.needs(x.0);
        self.push(Op::Reshape(x.0), value, ng)
    }

    // ── Reductions ───────────────────────────────────────────────────

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().sum();
        let ng = self.needs(x.0);
        self.push(Op::SumAll(x.0), Tensor::scalar(s), ng)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s: f64 = t.data().iter().sum::<f64>() / t.numel() as f64;
        let ng = self.needs(x.0);
        self.push(Op::MeanAll(x.0), Tensor::scalar(s), ng)
    }

    /// Sum of a 2-d tensor along `axis` (0: over rows -> [cols],
    /// 1: over cols -> [rows]).
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 || axis > 1 {
            return Err(Error::shape("sum_axis", format!("{:?}", t.shape())));
        }
        let value = ops::sum_axis(t, axis);
        let ng = self.needs(x.0);
        self.push(Op::SumAxis(x.0, axis), value, ng)
    }

    // ── Normalizations ───────────────────────────────────────────────

    /// Softmax of a 2-d tensor along `axis` (0: down each column,
    /// 1: along each row).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 || axis > 1 {
            return Err(Error::shape("softmax", format!("{:?}", t.shape())));
        }
        let value = ops::softmax(t, axis);
        let ng = self.needs(x.0);
        self.push(Op::Softmax(x.0, axis), value, ng)
    }

    /// Row-wise layer normalization of a 2-d tensor, no affine terms.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(Error::shape("layer_norm", format!("{:?}", t.shape())));
        }
        let (value, inv_std) = ops::layer_norm(t, eps);
        let ng = self.needs(x.0);
        self.push(Op::LayerNorm { x: x.0, inv_std }, value, ng)
    }

    /// Column-wise batch normalization with per-call statistics, no affine
    /// terms. Statistics are retrievable via [`Graph::batch_norm_stats`].
    pub fn batch_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(Error::shape("batch_norm", format!("{:?}", t.shape())));
        }
        let (value, mean, var, inv_std) = ops::batch_norm(t, eps);
        let ng = self.needs(x.0);
        self.push(
            Op::BatchNorm {
                x: x.0,
                mean,
                var,
                inv_std,
            },
            value,
            ng,
        )
    }

    /// Per-column mean and biased variance recorded by a `batch_norm` node.
    pub fn batch_norm_stats(&self, v: Var) -> Option<(Vec<f64>, Vec<f64>)> {
        match &self.nodes[v.0].op {
            Op::BatchNorm { mean, var, .. } => Some((mean.clone(), var.clone())),
            _ => None,
        }
    }

    // ── Broadcast helpers ────────────────────────────────────────────

    /// x[M,N] + v[N] per row.
    pub fn add_row_vec(&mut self, x: Var, v: Var) -> Result<Var> {
        let (tx, tv) = (self.value(x), self.value(v));
        if tx.rank() != 2 || tv.numel() != tx.cols() {
            return Err(Error::shape(
                "add_row_vec",
                format!("{:?} + {:?}", tx.shape(), tv.shape()),
            ));
        }
        let value = ops::row_broadcast(tx, tv.data(), |a, b| a + b);
        let ng = self.needs(x.0) || self.needs(v.0);
        self.push(Op::AddRowVec(x.0, v.0), value, ng)
    }

    /// x[M,N] * v[N] per row.
    pub fn mul_row_vec(&mut self, x: Var, v: Var) -> Result<Var> {
        let (tx, tv) = (self.value(x), self.value(v));
        if tx.rank() != 2 || tv.numel() != tx.cols() {
            return Err(Error::shape(
                "mul_row_vec",
                format!("{:?} * {:?}", tx.shape(), tv.shape()),
            ));
        }
        let value = ops::row_broadcast(tx, tv.data(), |a, b| a * b);
        let ng = self.needs(x.0) || self.needs(v.0);
        self.push(Op::MulRowVec(x.0, v.0), value, ng)
    }

    /// Row i of x[M,N] scaled by v[i].
    pub fn scale_rows(&mut self, x: Var, v: Var) -> Result<Var> {
        let (tx, tv) = (self.value(x), self.value(v));
        if tx.rank() != 2 || tv.numel() != tx.rows() {
            return Err(Error::shape(
                "scale_rows",
                format!("{:?} by {:?}", tx.shape(), tv.shape()),
            ));
        }
        let value = ops::scale_rows(tx, tv.data());
        let ng = self.needs(x.0) || self.needs(v.0);
        self.push(Op::ScaleRows(x.0, v.0), value, ng)
    }

    /// Tile a [D] or [1,D] vector into [n,D].
    pub fn repeat_row(&mut self, v: Var, n: usize) -> Result<Var> {
        let tv = self.value(v);
        let d = tv.numel();
        if tv.rank() > 2 || (tv.rank() == 2 && tv.rows() != 1) {
            return Err(Error::shape("repeat_row", format!("{:?}", tv.shape())));
        }
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            data.extend_from_slice(tv.data());
        }
        let value = Tensor::new(vec![n, d], data)?;
        let ng = self.needs(v.0);
        self.push(Op::RepeatRow(v.0, n), value, ng)
    }

    /// Row `i` of a 2-d tensor as [1,D].
    pub fn select_row(&mut self, x: Var, i: usize) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 || i >= t.rows() {
            return Err(Error::shape(
                "select_row",
                format!("row {} of {:?}", i, t.shape()),
            ));
        }
        let d = t.cols();
        let value = Tensor::new(vec![1, d], t.data()[i * d..(i + 1) * d].to_vec())?;
        let ng = self.needs(x.0);
        self.push(Op::SelectRow(x.0, i), value, ng)
    }

    /// Stack K vectors ([N] or [1,N]) into [K,N].
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        if rows.is_empty() {
            return Err(Error::shape("stack_rows", "no rows"));
        }
        let n = self.value(rows[0]).numel();
        let mut data = Vec::with_capacity(rows.len() * n);
        let mut ng = false;
        for &r in rows {
            let t = self.value(r);
            if t.numel() != n || t.rank() > 2 {
                return Err(Error::shape("stack_rows", format!("{:?}", t.shape())));
            }
            data.extend_from_slice(t.data());
            ng |= self.needs(r.0);
        }
        let value = Tensor::new(vec![rows.len(), n], data)?;
        self.push(Op::StackRows(rows.iter().map(|v| v.0).collect()), value, ng)
    }

    /// Concatenate [N,Ci] tensors along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_cols", "no parts"));
        }
        let n = self.value(parts[0]).rows();
        let mut widths = Vec::with_capacity(parts.len());
        let mut ng = false;
        for &p in parts {
            let t = self.value(p);
            if t.rank() != 2 || t.rows() != n {
                return Err(Error::shape("concat_cols", format!("{:?}", t.shape())));
            }
            widths.push(t.cols());
            ng |= self.needs(p.0);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; n * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let t = self.value(p);
            for r in 0..n {
                data[r * total + off..r * total + off + w]
                    .copy_from_slice(&t.data()[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let value = Tensor::new(vec![n, total], data)?;
        self.push(
            Op::ConcatCols(parts.iter().map(|v| v.0).collect()),
            value,
            ng,
        )
    }

    /// Columns [start, start+len) of a 2-d tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 || start + len > t.cols() {
            return Err(Error::shape(
                "slice_cols",
                format!("cols {}..{} of {:?}", start, start + len, t.shape()),
            ));
        }
        let (n, c) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(n * len);
        for r in 0..n {
            data.extend_from_slice(&t.data()[r * c + start..r * c + start + len]);
        }
        let value = Tensor::new(vec![n, len], data)?;
        let ng = self.needs(x.0);
        self.push(Op::SliceCols { x: x.0, start, len }, value, ng)
    }

    // ── Spatial ──────────────────────────────────────────────────────

    /// Non-overlapping f×f average pooling of an [H,W] tensor.
    pub fn avg_pool2d(&mut self, x: Var, f: usize) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 || f == 0 || t.rows() % f != 0 || t.cols() % f != 0 {
            return Err(Error::shape(
                "avg_pool2d",
                format!("{:?} by {}", t.shape(), f),
            ));
        }
        let value = ops::avg_pool2d(t, f);
        let ng = self.needs(x.0);
        self.push(Op::AvgPool2d(x.0, f), value, ng)
    }

    /// Bilinear resize of an [H,W] tensor (half-pixel centers).
    pub fn bilinear_resize(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 || oh == 0 || ow == 0 {
            return Err(Error::shape(
                "bilinear_resize",
                format!("{:?} -> [{},{}]", t.shape(), oh, ow),
            ));
        }
        let (h, w) = (t.rows(), t.cols());
        let out = ops::bilinear_resize(t.data(), h, w, oh, ow);
        let value = Tensor::new(vec![oh, ow], out)?;
        let ng = self.needs(x.0);
        self.push(Op::BilinearResize(x.0), value, ng)
    }

    // ── Complex plane ops ────────────────────────────────────────────

    /// Two [H,W] tensors into one [2,H,W] complex field.
    pub fn pack_complex(&mut self, re: Var, im: Var) -> Result<Var> {
        let (tr, ti) = (self.value(re), self.value(im));
        if tr.shape() != ti.shape() || tr.rank() != 2 {
            return Err(Error::shape(
                "pack_complex",
                format!("{:?} vs {:?}", tr.shape(), ti.shape()),
            ));
        }
        let (h, w) = (tr.rows(), tr.cols());
        let mut data = Vec::with_capacity(2 * h * w);
        data.extend_from_slice(tr.data());
        data.extend_from_slice(ti.data());
        let value = Tensor::new(vec![2, h, w], data)?;
        let ng = self.needs(re.0) || self.needs(im.0);
        self.push(Op::PackComplex(re.0, im.0), value, ng)
    }

    fn expect_complex(&self, op: &str, x: Var) -> Result<(usize, usize)> {
        let t = self.value(x);
        if t.rank() != 3 || t.shape()[0] != 2 {
            return Err(Error::shape(op, format!("{:?} is not [2,H,W]", t.shape())));
        }
        Ok((t.shape()[1], t.shape()[2]))
    }

    /// Real plane of a [2,H,W] field.
    pub fn complex_real(&mut self, x: Var) -> Result<Var> {
        let (h, w) = self.expect_complex("complex_real", x)?;
        let t = self.value(x);
        let value = Tensor::new(vec![h, w], t.data()[..h * w].to_vec())?;
        let ng = self.needs(x.0);
        self.push(Op::ComplexReal(x.0), value, ng)
    }

    /// Pointwise complex product of two [2,H,W] fields.
    pub fn complex_mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (h, w) = self.expect_complex("complex_mul", a)?;
        let (h2, w2) = self.expect_complex("complex_mul", b)?;
        if (h, w) != (h2, w2) {
            return Err(Error::shape("complex_mul", "plane size mismatch"));
        }
        let value = ops::complex_mul(self.value(a), self.value(b));
        let ng = self.needs(a.0) || self.needs(b.0);
        self.push(Op::ComplexMul(a.0, b.0), value, ng)
    }

    /// Pointwise modulus of a [2,H,W] field -> [H,W].
    pub fn modulus(&mut self, x: Var) -> Result<Var> {
        let (h, w) = self.expect_complex("modulus", x)?;
        let t = self.value(x);
        let hw = h * w;
        let data: Vec<f64> = (0..hw)
            .map(|k| (t.data()[k].powi(2) + t.data()[hw + k].powi(2)).sqrt())
            .collect();
        let value = Tensor::new(vec![h, w], data)?;
        let ng = self.needs(x.0);
        self.push(Op::Modulus(x.0), value, ng)
    }

    /// 2-d DFT of a [2,H,W] field (forward unnormalized; inverse divides
    /// by H*W).
    pub fn fft2d(&mut self, x: Var, inverse: bool) -> Result<Var> {
        let (h, w) = self.expect_complex("fft2d", x)?;
        let t = self.value(x);
        let mut buf = fft::planes_to_complex(t.data(), h * w);
        fft::fft2d(&mut buf, h, w, inverse);
        let value = Tensor::new(vec![2, h, w], fft::complex_to_planes(&buf))?;
        let ng = self.needs(x.0);
        self.push(Op::Fft2d { x: x.0, inverse }, value, ng)
    }

    /// Place an odd [2,s,s] kernel centered at the origin of a [2,h,w]
    /// grid with circular wrapping.
    pub fn embed_kernel(&mut self, k: Var, h: usize, w: usize) -> Result<Var> {
        let (s, s2) = self.expect_complex("embed_kernel", k)?;
        if s != s2 || s % 2 == 0 || s > h || s > w {
            return Err(Error::shape(
                "embed_kernel",
                format!("kernel {}x{} into {}x{}", s, s2, h, w),
            ));
        }
        let value = ops::embed_kernel(self.value(k), h, w);
        let ng = self.needs(k.0);
        self.push(Op::EmbedKernel(k.0), value, ng)
    }

    // ── Slot-attention specials ──────────────────────────────────────

    /// out[k,n,:] = m[k,n] * p[n,:] for m [K,N], p [N,D].
    pub fn slotwise_outer(&mut self, m: Var, p: Var) -> Result<Var> {
        let (tm, tp) = (self.value(m), self.value(p));
        if tm.rank() != 2 || tp.rank() != 2 || tm.cols() != tp.rows() {
            return Err(Error::shape(
                "slotwise_outer",
                format!("{:?} (x) {:?}", tm.shape(), tp.shape()),
            ));
        }
        let value = ops::slotwise_outer(tm, tp);
        let ng = self.needs(m.0) || self.needs(p.0);
        self.push(Op::SlotwiseOuter(m.0, p.0), value, ng)
    }

    /// u[k,:] = sum_n a[k,n] * (mf[k,n,:] ⊙ v[n,:]) for a [K,N],
    /// mf [K,N,D], v [N,D].
    pub fn fused_slot_reduce(&mut self, a: Var, mf: Var, v: Var) -> Result<Var> {
        let (ta, tmf, tv) = (self.value(a), self.value(mf), self.value(v));
        let ok = ta.rank() == 2
            && tmf.rank() == 3
            && tv.rank() == 2
            && tmf.shape()[0] == ta.rows()
            && tmf.shape()[1] == ta.cols()
            && tmf.shape()[1] == tv.rows()
            && tmf.shape()[2] == tv.cols();
        if !ok {
            return Err(Error::shape(
                "fused_slot_reduce",
                format!("{:?}, {:?}, {:?}", ta.shape(), tmf.shape(), tv.shape()),
            ));
        }
        let value = ops::fused_slot_reduce(ta, tmf, tv);
        let ng = self.needs(a.0) || self.needs(mf.0) || self.needs(v.0);
        self.push(Op::FusedSlotReduce(a.0, mf.0, v.0), value, ng)
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss node. Returns one gradient per
    /// trainable leaf registered on this graph.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::shape("backward", "loss node does not exist"));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        let mut adj: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        adj.resize_with(self.nodes.len(), || None);
        adj[loss.0] = Some(Tensor::new(
            self.value(loss).shape().to_vec(),
            vec![1.0],
        )?);

        let mut grads = Gradients::default();
        for id in (0..=loss.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            if !self.nodes[id].needs_grad {
                continue;
            }
            self.propagate(id, &g, &mut adj, &mut grads)?;
        }

        // Exact zeros for every registered parameter the loss never used.
        for node in &self.nodes {
            if let Op::Leaf {
                name: Some(name),
                trainable: true,
            } = &node.op
            {
                if grads.get(name).is_none() {
                    grads.insert(name.clone(), Tensor::zeros(node.value.tensor().shape()));
                }
            }
        }
        if self.precision == Precision::F32 {
            for (_, g) in grads.iter_mut() {
                g.round_f32();
            }
        }
        Ok(grads)
    }

    fn accumulate(adj: &mut [Option<Tensor>], id: usize, delta: Tensor) {
        match &mut adj[id] {
            Some(acc) => {
                for (a, d) in acc.data_mut().iter_mut().zip(delta.data()) {
                    *a += d;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    /// Reduce a gradient to the shape of input `id` (sums over all entries
    /// when the input was a broadcast scalar).
    fn reduce_to(&self, id: usize, g: Tensor) -> Tensor {
        let shape = self.nodes[id].value.tensor().shape();
        if g.shape() == shape {
            return g;
        }
        debug_assert_eq!(shape.iter().product::<usize>(), 1);
        let s: f64 = g.data().iter().sum();
        Tensor::new(shape.to_vec(), vec![s]).unwrap()
    }

    fn propagate(
        &self,
        id: usize,
        g: &Tensor,
        adj: &mut [Option<Tensor>],
        grads: &mut Gradients,
    ) -> Result<()> {
        let val = |i: usize| self.nodes[i].value.tensor();
        let needs = |i: usize| self.nodes[i].needs_grad;
        match &self.nodes[id].op {
            Op::Leaf { name, trainable } => {
                if *trainable {
                    if let Some(name) = name {
                        match grads.map.get_mut(name) {
                            Some(acc) => {
                                for (a, d) in acc.data_mut().iter_mut().zip(g.data()) {
                                    *a += d;
                                }
                            }
                            None => grads.insert(name.clone(), g.clone()),
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    Self::accumulate(adj, *a, self.reduce_to(*a, g.clone()));
                }
                if needs(*b) {
                    Self::accumulate(adj, *b, self.reduce_to(*b, g.clone()));
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    Self::accumulate(adj, *a, self.reduce_to(*a, g.clone()));
                }
                if needs(*b) {
                    let mut d = g.clone();
                    for v in d.data_mut() {
                        *v = -*v;
                    }
                    Self::accumulate(adj, *b, self.reduce_to(*b, d));
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    let d = ops::broadcast_binary(g, val(*b), |x, y| x * y);
                    Self::accumulate(adj, *a, self.reduce_to(*a, d));
                }
                if needs(*b) {
                    let d = ops::broadcast_binary(g, val(*a), |x, y| x * y);
                    Self::accumulate(adj, *b, self.reduce_to(*b, d));
                }
            }
            Op::Div(a, b) => {
                if needs(*a) {
                    let d = ops::broadcast_binary(g, val(*b), |x, y| x / y);
                    Self::accumulate(adj, *a, self.reduce_to(*a, d));
                }
                if needs(*b) {
                    let num = ops::broadcast_binary(val(*a), val(*b), |x, y| -x / (y * y));
                    let d = ops::broadcast_binary(g, &num, |x, y| x * y);
                    Self::accumulate(adj, *b, self.reduce_to(*b, d));
                }
            }
            Op::Neg(x) => {
                let mut d = g.clone();
                for v in d.data_mut() {
                    *v = -*v;
                }
                Self::accumulate(adj, *x, d);
            }
            Op::Recip(x) => {
                let y = val(id);
                let d = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(y.data())
                        .map(|(&gv, &yv)| -gv * yv * yv)
                        .collect(),
                )?;
                Self::accumulate(adj, *x, d);
            }
            Op::AddConst(x) => Self::accumulate(adj, *x, g.clone()),
            Op::Scale(x, c) => {
                let d = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().map(|&v| v * c).collect(),
                )?;
                Self::accumulate(adj, *x, d);
            }
            Op::Relu(x) => {
                let xin = val(*x);
                let d = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(xin.data())
                        .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                        .collect(),
                )?;
                Self::accumulate(adj, *x, d);
            }
            Op::Sigmoid(x) => {
                let y = val(id);
                let d = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(y.data())
                        .map(|(&gv, &yv)| gv * yv * (1.0 - yv))
                        .collect(),
                )?;
                Self::accumulate(adj, *x, d);
            }
            Op::Tanh(x) => {
                let y = val(id);
                let d = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(y.data())
                        .map(|(&gv, &yv)| gv * (1.0 - yv * yv))
                        .collect(),
                )?;
                Self::accumulate(adj, *x, d);
            }
            Op::Exp(x) => {
                let y = val(id);
                let d = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(y.data())
                        .map(|(&gv, &yv)| gv * yv)
                        .collect(),
                )?;
                Self::accumulate(adj, *x, d);
            }
            Op::Sqrt(x) => {
                let y = val(id);
                let d = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(y.data())
                        .map(|(&gv, &yv)| if yv == 0.0 { 0.0 } else { gv / (2.0 * yv) })
                        .collect(),
                )?;
                Self::accumulate(adj, *x, d);
            }
            Op::Cos(x) => {
                let xin = val(*x);
                let d = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(xin.data())
                        .map(|(&gv, &xv)| -gv * xv.sin())
                        .collect(),
                )?;
                Self::accumulate(adj, *x, d);
            }
            Op::Sin(x) => {
                let xin = val(*x);
                let d = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(xin.data())
                        .map(|(&gv, &xv)| gv * xv.cos())
                        .collect(),
                )?;
                Self::accumulate(adj, *x, d);
            }
            Op::Matmul(a, b) => {
                if needs(*a) {
                    Self::accumulate(adj, *a, ops::matmul_nt(g, val(*b)));
                }
                if needs(*b) {
                    Self::accumulate(adj, *b, ops::matmul_tn(val(*a), g));
                }
            }
            Op::Transpose(x) => {
                Self::accumulate(adj, *x, ops::transpose(g));
            }
            Op::Reshape(x) => {
                let d = g.clone().reshaped(val(*x).shape().to_vec())?;
                Self::accumulate(adj, *x, d);
            }
            Op::SumAll(x) => {
                let d = Tensor::full(val(*x).shape(), g.item());
                Self::accumulate(adj, *x, d);
            }
            Op::MeanAll(x) => {
                let t = val(*x);
                let d = Tensor::full(t.shape(), g.item() / t.numel() as f64);
                Self::accumulate(adj, *x, d);
            }
            Op::SumAxis(x, axis) => {
                let t = val(*x);
                let (m, n) = (t.rows(), t.cols());
                let mut d = Tensor::zeros(t.shape());
                for r in 0..m {
                    for c in 0..n {
                        d.data_mut()[r * n + c] = if *axis == 0 {
                            g.data()[c]
                        } else {
                            g.data()[r]
                        };
                    }
                }
                Self::accumulate(adj, *x, d);
            }
            Op::Softmax(x, axis) => {
                let y = val(id);
                Self::accumulate(adj, *x, ops::softmax_backward(y, g, *axis));
            }
            Op::LayerNorm { x, inv_std } => {
                let y = val(id);
                Self::accumulate(adj, *x, ops::layer_norm_backward(y, g, inv_std));
            }
            Op::BatchNorm { x, inv_std, .. } => {
                let y = val(id);
                Self::accumulate(adj, *x, ops::batch_norm_backward(y, g, inv_std));
            }
            Op::AddRowVec(x, v) => {
                if needs(*x) {
                    Self::accumulate(adj, *x, g.clone());
                }
                if needs(*v) {
                    let col_sums = ops::sum_axis(g, 0);
                    let d = col_sums.reshaped(val(*v).shape().to_vec())?;
                    Self::accumulate(adj, *v, d);
                }
            }
            Op::MulRowVec(x, v) => {
                let (tx, tv) = (val(*x), val(*v));
                let n = tx.cols();
                if needs(*x) {
                    let d = ops::row_broadcast(g, tv.data(), |a, b| a * b);
                    Self::accumulate(adj, *x, d);
                }
                if needs(*v) {
                    let mut d = vec![0.0; n];
                    for r in 0..tx.rows() {
                        for c in 0..n {
                            d[c] += g.data()[r * n + c] * tx.data()[r * n + c];
                        }
                    }
                    let d = Tensor::new(tv.shape().to_vec(), d)?;
                    Self::accumulate(adj, *v, d);
                }
            }
            Op::ScaleRows(x, v) => {
                let (tx, tv) = (val(*x), val(*v));
                let (m, n) = (tx.rows(), tx.cols());
                if needs(*x) {
                    let d = ops::scale_rows(g, tv.data());
                    Self::accumulate(adj, *x, d);
                }
                if needs(*v) {
                    let mut d = vec![0.0; m];
                    for r in 0..m {
                        d[r] = g.data()[r * n..(r + 1) * n]
                            .iter()
                            .zip(&tx.data()[r * n..(r + 1) * n])
                            .map(|(a, b)| a * b)
                            .sum();
                    }
                    let d = Tensor::new(tv.shape().to_vec(), d)?;
                    Self::accumulate(adj, *v, d);
                }
            }
            Op::RepeatRow(v, n) => {
                let tv = val(*v);
                let d = tv.numel();
                let mut acc = vec![0.0; d];
                for r in 0..*n {
                    for c in 0..d {
                        acc[c] += g.data()[r * d + c];
                    }
                }
                let dt = Tensor::new(tv.shape().to_vec(), acc)?;
                Self::accumulate(adj, *v, dt);
            }
            Op::SelectRow(x, i) => {
                let t = val(*x);
                let mut d = Tensor::zeros(t.shape());
                let n = t.cols();
                d.data_mut()[i * n..(i + 1) * n].copy_from_slice(g.data());
                Self::accumulate(adj, *x, d);
            }
            Op::StackRows(rows) => {
                let n = val(rows[0]).numel();
                for (k, &r) in rows.iter().enumerate() {
                    if needs(r) {
                        let d = Tensor::new(
                            val(r).shape().to_vec(),
                            g.data()[k * n..(k + 1) * n].to_vec(),
                        )?;
                        Self::accumulate(adj, r, d);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let n = val(parts[0]).rows();
                let total = val(id).cols();
                let mut off = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if needs(p) {
                        let mut d = Tensor::zeros(val(p).shape());
                        for r in 0..n {
                            d.data_mut()[r * w..(r + 1) * w]
                                .copy_from_slice(&g.data()[r * total + off..r * total + off + w]);
                        }
                        Self::accumulate(adj, p, d);
                    }
                    off += w;
                }
            }
            Op::SliceCols { x, start, len } => {
                let t = val(*x);
                let (n, c) = (t.rows(), t.cols());
                let mut d = Tensor::zeros(t.shape());
                for r in 0..n {
                    d.data_mut()[r * c + start..r * c + start + len]
                        .copy_from_slice(&g.data()[r * len..(r + 1) * len]);
                }
                Self::accumulate(adj, *x, d);
            }
            Op::AvgPool2d(x, f) => {
                Self::accumulate(adj, *x, ops::avg_pool2d_backward(g, val(*x).shape(), *f));
            }
            Op::BilinearResize(x) => {
                let t = val(*x);
                let d = ops::bilinear_resize_backward(
                    g.data(),
                    g.rows(),
                    g.cols(),
                    t.rows(),
                    t.cols(),
                );
                Self::accumulate(adj, *x, Tensor::new(t.shape().to_vec(), d)?);
            }
            Op::PackComplex(re, im) => {
                let hw = val(*re).numel();
                if needs(*re) {
                    let d = Tensor::new(val(*re).shape().to_vec(), g.data()[..hw].to_vec())?;
                    Self::accumulate(adj, *re, d);
                }
                if needs(*im) {
                    let d = Tensor::new(val(*im).shape().to_vec(), g.data()[hw..].to_vec())?;
                    Self::accumulate(adj, *im, d);
                }
            }
            Op::ComplexReal(x) => {
                let t = val(*x);
                let hw = g.numel();
                let mut data = vec![0.0; 2 * hw];
                data[..hw].copy_from_slice(g.data());
                Self::accumulate(adj, *x, Tensor::new(t.shape().to_vec(), data)?);
            }
            Op::ComplexMul(a, b) => {
                if needs(*a) {
                    Self::accumulate(adj, *a, ops::complex_mul_conj(g, val(*b)));
                }
                if needs(*b) {
                    Self::accumulate(adj, *b, ops::complex_mul_conj(g, val(*a)));
                }
            }
            Op::Modulus(x) => {
                let t = val(*x);
                let y = val(id);
                let hw = y.numel();
                let mut d = vec![0.0; 2 * hw];
                for k in 0..hw {
                    let m = y.data()[k];
                    if m > 0.0 {
                        d[k] = g.data()[k] * t.data()[k] / m;
                        d[hw + k] = g.data()[k] * t.data()[hw + k] / m;
                    }
                }
                Self::accumulate(adj, *x, Tensor::new(t.shape().to_vec(), d)?);
            }
            Op::Fft2d { x, inverse } => {
                let t = val(*x);
                let (h, w) = (t.shape()[1], t.shape()[2]);
                let hw = h * w;
                let mut buf = fft::planes_to_complex(g.data(), hw);
                // vjp of y = F x is conj(F) g; of y = (1/N) conj(F) x it
                // is (1/N) F g.
                if *inverse {
                    fft::fft2d(&mut buf, h, w, false);
                    let s = 1.0 / hw as f64;
                    for v in &mut buf {
                        *v *= s;
                    }
                } else {
                    fft::fft2d(&mut buf, h, w, true);
                    let s = hw as f64;
                    for v in &mut buf {
                        *v *= s;
                    }
                }
                let d = Tensor::new(t.shape().to_vec(), fft::complex_to_planes(&buf))?;
                Self::accumulate(adj, *x, d);
            }
            Op::EmbedKernel(k) => {
                let t = val(*k);
                let out = val(id);
                let d = ops::embed_kernel_backward(g, t.shape(), out.shape());
                Self::accumulate(adj, *k, d);
            }
            Op::SlotwiseOuter(m, p) => {
                let (tm, tp) = (val(*m), val(*p));
                if needs(*m) {
                    Self::accumulate(adj, *m, ops::slotwise_outer_grad_m(g, tp));
                }
                if needs(*p) {
                    Self::accumulate(adj, *p, ops::slotwise_outer_grad_p(g, tm));
                }
            }
            Op::FusedSlotReduce(a, mf, v) => {
                let (ta, tmf, tv) = (val(*a), val(*mf), val(*v));
                let (da, dmf, dv) = ops::fused_slot_reduce_backward(
                    g,
                    ta,
                    tmf,
                    tv,
                    needs(*a),
                    needs(*mf),
                    needs(*v),
                );
                if let Some(d) = da {
                    Self::accumulate(adj, *a, d);
                }
                if let Some(d) = dmf {
                    Self::accumulate(adj, *mf, d);
                }
                if let Some(d) = dv {
                    Self::accumulate(adj, *v, d);
                }
            }
        }
        Ok(())
    }
}
