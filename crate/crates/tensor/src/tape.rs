//! Record-on-forward reverse-mode differentiation.
//!
//! A [`Tape`] owns every intermediate value of one forward computation.
//! Operations are appended in execution order, so node indices are already a
//! topological order and backward is a single reverse sweep.

use crate::error::{Result, TensorError};
use crate::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`]. Only meaningful for the tape
/// that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UnaryOp {
    Exp,
    Log,
    Neg,
    Sigmoid,
    Relu,
    Clamp { min: f64, max: f64 },
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Binary {
        kind: BinaryOp,
        a: Var,
        b: Var,
    },
    Scalar {
        kind: BinaryOp,
        a: Var,
        c: f64,
    },
    Unary {
        kind: UnaryOp,
        a: Var,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    Transpose {
        a: Var,
    },
    Reshape {
        a: Var,
    },
    Sum {
        a: Var,
    },
    SumAxis {
        a: Var,
        axis: usize,
    },
    Softmax {
        a: Var,
        axis: usize,
    },
    LogSoftmax {
        a: Var,
        axis: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Upsample {
        a: Var,
        from: (usize, usize),
        to: (usize, usize),
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    AddBias {
        a: Var,
        b: Var,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    L2Normalize {
        a: Var,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every differentiable leaf.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copies `v` into a new constant leaf (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // ---- elementwise ----------------------------------------------------

    /// Elementwise binary op. Shapes must match, or one side must hold a
    /// single element which is then broadcast.
    pub fn binary(&mut self, kind: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let f = binary_fn(kind);
        let out = if av.shape() == bv.shape() {
            let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(av.shape(), data)?
        } else if bv.is_scalar() {
            let y = bv.item();
            av.map(|x| f(x, y))
        } else if av.is_scalar() {
            let x = av.item();
            bv.map(|y| f(x, y))
        } else {
            return Err(TensorError::ShapeMismatch {
                op: binary_name(kind),
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        };
        self.push(binary_name(kind), out, Op::Binary { kind, a, b }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }

    /// `a (op) c` for a constant scalar `c`.
    pub fn binary_scalar(&mut self, kind: BinaryOp, a: Var, c: f64) -> Result<Var> {
        let f = binary_fn(kind);
        let out = self.value(a).map(|x| f(x, c));
        self.push(binary_name(kind), out, Op::Scalar { kind, a, c }, &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.binary_scalar(BinaryOp::Add, a, c)
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.binary_scalar(BinaryOp::Mul, a, c)
    }

    pub fn unary(&mut self, kind: UnaryOp, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| unary_fn(kind, x));
        self.push(unary_name(kind), out, Op::Unary { kind, a }, &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Log, a)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Neg, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Sigmoid, a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Relu, a)
    }

    pub fn clamp(&mut self, a: Var, min: f64, max: f64) -> Result<Var> {
        if min > max || min.is_nan() || max.is_nan() {
            return Err(TensorError::InvalidArgument {
                op: "clamp",
                reason: format!("empty interval [{min}, {max}]"),
            });
        }
        self.unary(UnaryOp::Clamp { min, max }, a)
    }

    // ---- linear algebra ---------------------------------------------------

    /// `[m×k]·[k×n]`, or batched `[B×m×k]·[B×k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (batch, m, k, n) = matmul_dims(av.shape(), bv.shape())?;
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            kernels::matmul_acc(
                &av.data()[bi * m * k..(bi + 1) * m * k],
                &bv.data()[bi * k * n..(bi + 1) * k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let shape: Vec<usize> = if av.rank() == 3 { vec![batch, m, n] } else { vec![m, n] };
        let out = Tensor::new(&shape, out)?;
        self.push("matmul", out, Op::MatMul { a, b }, &[a, b])
    }

    /// Swaps the last two axes of a rank-2 or rank-3 tensor.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let shape = av.shape().to_vec();
        if !(2..=3).contains(&shape.len()) {
            return Err(TensorError::InvalidArgument {
                op: "transpose",
                reason: format!("rank {} unsupported", shape.len()),
            });
        }
        let r = shape.len();
        let (rows, cols) = (shape[r - 2], shape[r - 1]);
        let batch = av.numel() / (rows * cols);
        let mut out = vec![0.0; av.numel()];
        transpose_into(av.data(), &mut out, batch, rows, cols);
        let mut new_shape = shape;
        new_shape.swap(r - 2, r - 1);
        let out = Tensor::new(&new_shape, out)?;
        self.push("transpose", out, Op::Transpose { a }, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        self.push("reshape", out, Op::Reshape { a }, &[a])
    }

    // ---- reductions -------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push("sum", out, Op::Sum { a }, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a)?;
        self.mul_scalar(s, 1.0 / n)
    }

    /// Sums out `axis`, dropping it from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let av = self.value(a);
        check_axis("sum_axis", axis, av.rank())?;
        let (outer, len, inner) = kernels::axis_split(av.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += av.data()[(o * len + j) * inner + i];
                }
            }
        }
        let mut shape = av.shape().to_vec();
        shape.remove(axis);
        let out = if shape.is_empty() {
            Tensor::scalar(out[0])
        } else {
            Tensor::new(&shape, out)?
        };
        self.push("sum_axis", out, Op::SumAxis { a, axis }, &[a])
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let av = self.value(a);
        check_axis("softmax", axis, av.rank())?;
        let data = kernels::softmax_forward(av.data(), kernels::axis_split(av.shape(), axis));
        let out = Tensor::new(av.shape(), data)?;
        self.push("softmax", out, Op::Softmax { a, axis }, &[a])
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let av = self.value(a);
        check_axis("log_softmax", axis, av.rank())?;
        let data = kernels::log_softmax_forward(av.data(), kernels::axis_split(av.shape(), axis));
        let out = Tensor::new(av.shape(), data)?;
        self.push("log_softmax", out, Op::LogSoftmax { a, axis }, &[a])
    }

    // ---- image ops --------------------------------------------------------

    /// Cross-correlation of `x` (`[C_in×H×W]` or `[N×C_in×H×W]`) with square
    /// kernels `w` (`[C_out×C_in×k×k]`, `k` odd) plus an optional per-channel
    /// bias.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let batched = xv.rank() == 4;
        let (n, c_in, h, wd) = match *xv.shape() {
            [c, h, w] => (1, c, h, w),
            [n, c, h, w] => (n, c, h, w),
            _ => {
                return Err(TensorError::InvalidArgument {
                    op: "conv2d",
                    reason: format!("input rank {} unsupported", xv.rank()),
                })
            }
        };
        let [c_out, wc_in, k, k2] = *wv.shape() else {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                reason: format!("weight shape {:?} is not 4-D", wv.shape()),
            });
        };
        if wc_in != c_in || k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: xv.shape().to_vec(),
                rhs: wv.shape().to_vec(),
            });
        }
        if k % 2 == 0 || stride == 0 {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                reason: format!("kernel {k} must be odd and stride {stride} positive"),
            });
        }
        // Floor semantics; the geometry is rejected only when the last
        // window stops short of the final real input row/column.
        let extent = |e: usize| -> Result<usize> {
            let err = TensorError::ConvGeometry {
                extent: e,
                kernel: k,
                stride,
                pad,
            };
            let span = (e + 2 * pad).checked_sub(k).ok_or(err.clone())?;
            let out = span / stride + 1;
            if (out - 1) * stride + k < e + pad {
                return Err(err);
            }
            Ok(out)
        };
        let (h_out, w_out) = (extent(h)?, extent(wd)?);
        if let Some(b) = b {
            if self.value(b).shape() != [c_out] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d",
                    lhs: vec![c_out],
                    rhs: self.value(b).shape().to_vec(),
                });
            }
        }
        let geom = ConvGeom {
            n,
            c_in,
            h,
            w: wd,
            c_out,
            k,
            stride,
            pad,
            h_out,
            w_out,
        };
        let data = kernels::conv2d_forward(xv.data(), wv.data(), b.map(|b| self.value(b).data()), &geom);
        let shape: Vec<usize> = if batched {
            vec![n, c_out, h_out, w_out]
        } else {
            vec![c_out, h_out, w_out]
        };
        let out = Tensor::new(&shape, data)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push("conv2d", out, Op::Conv2d { x, w, b, geom }, &inputs)
    }

    /// Bilinear resize of the last two axes with half-pixel centers
    /// (align_corners = false). Only enlarging is supported.
    pub fn upsample_bilinear(&mut self, a: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let av = self.value(a);
        if av.rank() < 2 {
            return Err(TensorError::InvalidArgument {
                op: "upsample_bilinear",
                reason: "needs at least two axes".into(),
            });
        }
        let r = av.rank();
        let (h, w) = (av.shape()[r - 2], av.shape()[r - 1]);
        if out_h < h || out_w < w {
            return Err(TensorError::Downsample {
                from: (h, w),
                to: (out_h, out_w),
            });
        }
        let planes = av.numel() / (h * w);
        let data = kernels::upsample_forward(av.data(), planes, (h, w), (out_h, out_w));
        let mut shape = av.shape().to_vec();
        shape[r - 2] = out_h;
        shape[r - 1] = out_w;
        let out = Tensor::new(&shape, data)?;
        self.push(
            "upsample_bilinear",
            out,
            Op::Upsample {
                a,
                from: (h, w),
                to: (out_h, out_w),
            },
            &[a],
        )
    }

    // ---- structural -------------------------------------------------------

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or(TensorError::InvalidArgument {
            op: "concat",
            reason: "no inputs".into(),
        })?;
        let base = self.value(*first).shape().to_vec();
        check_axis("concat", axis, base.len())?;
        let mut total = 0;
        for p in parts {
            let s = self.value(*p).shape();
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let pv = self.value(*p);
                let chunk = pv.shape()[axis] * inner;
                data.extend_from_slice(&pv.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::new(&shape, data)?;
        self.push(
            "concat",
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        )
    }

    /// Adds `b` to every trailing block of `a`; `b`'s shape must be a suffix
    /// of `a`'s (e.g. a row bias `[n]` on `[m×n]`).
    pub fn add_bias(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if !av.shape().ends_with(bv.shape()) || bv.rank() == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let block = bv.numel();
        let data = av
            .data()
            .chunks(block)
            .flat_map(|c| c.iter().zip(bv.data()).map(|(x, y)| x + y))
            .collect();
        let out = Tensor::new(av.shape(), data)?;
        self.push("add_bias", out, Op::AddBias { a, b }, &[a, b])
    }

    /// Gathers rows of a `[V×D]` table, giving `[ids.len()×D]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let [vocab, dim] = *tv.shape() else {
            return Err(TensorError::InvalidArgument {
                op: "embedding",
                reason: format!("table shape {:?} is not 2-D", tv.shape()),
            });
        };
        if ids.is_empty() {
            return Err(TensorError::InvalidArgument {
                op: "embedding",
                reason: "no ids".into(),
            });
        }
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= vocab {
                return Err(TensorError::InvalidArgument {
                    op: "embedding",
                    reason: format!("id {id} out of range for vocabulary {vocab}"),
                });
            }
            data.extend_from_slice(&tv.data()[id * dim..(id + 1) * dim]);
        }
        let out = Tensor::new(&[ids.len(), dim], data)?;
        self.push(
            "embedding",
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    /// Scales every vector along the last axis to unit L2 norm.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let dim = *av.shape().last().ok_or(TensorError::InvalidArgument {
            op: "l2_normalize",
            reason: "scalar input".into(),
        })?;
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(dim) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(TensorError::ZeroNorm { op: "l2_normalize" });
            }
            row.iter_mut().for_each(|v| *v /= norm);
        }
        let out = Tensor::new(av.shape(), data)?;
        self.push("l2_normalize", out, Op::L2Normalize { a }, &[a])
    }

    // ---- differentiation ------------------------------------------------

    /// Hash of the active piece of every piecewise-linear op (relu sign,
    /// clamp region). Two evaluations with equal signatures lie on the same
    /// smooth piece of the recorded function.
    pub fn kink_signature(&self) -> u64 {
        const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
        const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;
        let mut h = FNV_OFFSET;
        let mut feed = |byte: u8| {
            h ^= byte as u64;
            h = h.wrapping_mul(FNV_PRIME);
        };
        for node in &self.nodes {
            if let Op::Unary { kind, a } = node.op {
                let input = self.nodes[a.0].value.data();
                match kind {
                    UnaryOp::Relu => input.iter().for_each(|&x| feed((x > 0.0) as u8)),
                    UnaryOp::Clamp { min, max } => input.iter().for_each(|&x| {
                        feed(if x < min {
                            0
                        } else if x > max {
                            2
                        } else {
                            1
                        })
                    }),
                    _ => {}
                }
            }
        }
        h
    }

    /// Reverse sweep from a scalar `loss`. Consumes the tape; every
    /// differentiable leaf receives a gradient (zeros when unreachable).
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let loss_shape = self.nodes[loss.0].value.shape().to_vec();
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(TensorError::NonScalarLoss { shape: loss_shape });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop(idx, &g, &mut grads);
        }
        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| {
                if matches!(node.op, Op::Leaf) && node.requires_grad {
                    let data = g.unwrap_or_else(|| vec![0.0; node.value.numel()]);
                    Some(Tensor::new(node.value.shape(), data).expect("gradient shape"))
                } else {
                    None
                }
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let numel = node.value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; numel]))
    }

    fn backprop(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &self.nodes[idx].value;
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Binary { kind, a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let a_bcast = av.numel() != out.numel();
                let b_bcast = bv.numel() != out.numel();
                let at = |i: usize| if a_bcast { av.data()[0] } else { av.data()[i] };
                let bt = |i: usize| if b_bcast { bv.data()[0] } else { bv.data()[i] };
                let (da, db): (fn(f64, f64) -> f64, fn(f64, f64) -> f64) = match kind {
                    BinaryOp::Add => (|_, _| 1.0, |_, _| 1.0),
                    BinaryOp::Sub => (|_, _| 1.0, |_, _| -1.0),
                    BinaryOp::Mul => (|_, y| y, |x, _| x),
                    BinaryOp::Div => (|_, y| 1.0 / y, |x, y| -x / (y * y)),
                };
                if let Some(s) = self.slot(grads, *a) {
                    for (i, &gi) in g.iter().enumerate() {
                        s[if a_bcast { 0 } else { i }] += gi * da(at(i), bt(i));
                    }
                }
                if let Some(s) = self.slot(grads, *b) {
                    for (i, &gi) in g.iter().enumerate() {
                        s[if b_bcast { 0 } else { i }] += gi * db(at(i), bt(i));
                    }
                }
            }
            Op::Scalar { kind, a, c } => {
                if let Some(s) = self.slot(grads, *a) {
                    let scale = match kind {
                        BinaryOp::Add | BinaryOp::Sub => 1.0,
                        BinaryOp::Mul => *c,
                        BinaryOp::Div => 1.0 / c,
                    };
                    for (d, &gi) in s.iter_mut().zip(g) {
                        *d += gi * scale;
                    }
                }
            }
            Op::Unary { kind, a } => {
                let xv = self.value(*a).data();
                let y = out.data();
                if let Some(s) = self.slot(grads, *a) {
                    for i in 0..g.len() {
                        let d = match *kind {
                            UnaryOp::Exp => y[i],
                            UnaryOp::Log => 1.0 / xv[i],
                            UnaryOp::Neg => -1.0,
                            UnaryOp::Sigmoid => y[i] * (1.0 - y[i]),
                            UnaryOp::Relu => {
                                if xv[i] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            UnaryOp::Clamp { min, max } => {
                                if xv[i] < min || xv[i] > max {
                                    0.0
                                } else {
                                    1.0
                                }
                            }
                        };
                        s[i] += g[i] * d;
                    }
                }
            }
            Op::MatMul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (batch, m, k, n) = matmul_dims(av.shape(), bv.shape()).expect("recorded shapes");
                if let Some(s) = self.slot(grads, *a) {
                    for bi in 0..batch {
                        kernels::matmul_nt_acc(
                            &g[bi * m * n..(bi + 1) * m * n],
                            &bv.data()[bi * k * n..(bi + 1) * k * n],
                            &mut s[bi * m * k..(bi + 1) * m * k],
                            m,
                            k,
                            n,
                        );
                    }
                }
                if let Some(s) = self.slot(grads, *b) {
                    for bi in 0..batch {
                        kernels::matmul_tn_acc(
                            &av.data()[bi * m * k..(bi + 1) * m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            &mut s[bi * k * n..(bi + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                }
            }
            Op::Transpose { a } => {
                if let Some(s) = self.slot(grads, *a) {
                    let r = out.rank();
                    let (rows, cols) = (out.shape()[r - 2], out.shape()[r - 1]);
                    let batch = out.numel() / (rows * cols);
                    let mut t = vec![0.0; g.len()];
                    transpose_into(g, &mut t, batch, rows, cols);
                    s.iter_mut().zip(&t).for_each(|(d, v)| *d += v);
                }
            }
            Op::Reshape { a } => {
                if let Some(s) = self.slot(grads, *a) {
                    s.iter_mut().zip(g).for_each(|(d, v)| *d += v);
                }
            }
            Op::Sum { a } => {
                if let Some(s) = self.slot(grads, *a) {
                    s.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::SumAxis { a, axis } => {
                let shape = self.value(*a).shape().to_vec();
                if let Some(s) = self.slot(grads, *a) {
                    let (outer, len, inner) = kernels::axis_split(&shape, *axis);
                    for o in 0..outer {
                        for j in 0..len {
                            for i in 0..inner {
                                s[(o * len + j) * inner + i] += g[o * inner + i];
                            }
                        }
                    }
                }
            }
            Op::Softmax { a, axis } => {
                if let Some(s) = self.slot(grads, *a) {
                    let (outer, len, inner) = kernels::axis_split(out.shape(), *axis);
                    let y = out.data();
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| (o * len + j) * inner + i;
                            let dot: f64 = (0..len).map(|j| g[idx(j)] * y[idx(j)]).sum();
                            for j in 0..len {
                                s[idx(j)] += y[idx(j)] * (g[idx(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LogSoftmax { a, axis } => {
                if let Some(s) = self.slot(grads, *a) {
                    let (outer, len, inner) = kernels::axis_split(out.shape(), *axis);
                    let y = out.data();
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| (o * len + j) * inner + i;
                            let total: f64 = (0..len).map(|j| g[idx(j)]).sum();
                            for j in 0..len {
                                s[idx(j)] += g[idx(j)] - y[idx(j)].exp() * total;
                            }
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                // Disjoint slots: take each buffer out, then put it back.
                let mut dx = self.slot(grads, *x).map(std::mem::take);
                let mut dw = self.slot(grads, *w).map(std::mem::take);
                let mut db = b.and_then(|b| self.slot(grads, b).map(std::mem::take));
                kernels::conv2d_backward(xv, wv, g, geom, dx.as_deref_mut(), dw.as_deref_mut(), db.as_deref_mut());
                if let Some(d) = dx {
                    grads[x.0] = Some(d);
                }
                if let Some(d) = dw {
                    grads[w.0] = Some(d);
                }
                if let (Some(d), Some(b)) = (db, b) {
                    grads[b.0] = Some(d);
                }
            }
            Op::Upsample { a, from, to } => {
                if let Some(s) = self.slot(grads, *a) {
                    let planes = out.numel() / (to.0 * to.1);
                    kernels::upsample_backward(g, s, planes, *from, *to);
                }
            }
            Op::Concat { parts, axis } => {
                let inner: usize = out.shape()[axis + 1..].iter().product();
                let outer: usize = out.shape()[..*axis].iter().product();
                let row = out.shape()[*axis] * inner;
                let mut offset = 0;
                for p in parts {
                    let chunk = self.value(*p).shape()[*axis] * inner;
                    if let Some(s) = self.slot(grads, *p) {
                        for o in 0..outer {
                            let src = &g[o * row + offset..o * row + offset + chunk];
                            s[o * chunk..(o + 1) * chunk]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, v)| *d += v);
                        }
                    }
                    offset += chunk;
                }
            }
            Op::AddBias { a, b } => {
                if let Some(s) = self.slot(grads, *a) {
                    s.iter_mut().zip(g).for_each(|(d, v)| *d += v);
                }
                let block = self.value(*b).numel();
                if let Some(s) = self.slot(grads, *b) {
                    for c in g.chunks(block) {
                        s.iter_mut().zip(c).for_each(|(d, v)| *d += v);
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let dim = self.value(*table).shape()[1];
                if let Some(s) = self.slot(grads, *table) {
                    for (row, &id) in ids.iter().enumerate() {
                        s[id * dim..(id + 1) * dim]
                            .iter_mut()
                            .zip(&g[row * dim..(row + 1) * dim])
                            .for_each(|(d, v)| *d += v);
                    }
                }
            }
            Op::L2Normalize { a } => {
                let xv = self.value(*a).data();
                let dim = *out.shape().last().expect("rank >= 1");
                if let Some(s) = self.slot(grads, *a) {
                    for (r, y) in out.data().chunks(dim).enumerate() {
                        let x = &xv[r * dim..(r + 1) * dim];
                        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let gr = &g[r * dim..(r + 1) * dim];
                        let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..dim {
                            s[r * dim + j] += (gr[j] - y[j] * dot) / norm;
                        }
                    }
                }
            }
        }
    }
}

fn binary_fn(kind: BinaryOp) -> fn(f64, f64) -> f64 {
    match kind {
        BinaryOp::Add => |x, y| x + y,
        BinaryOp::Sub => |x, y| x - y,
        BinaryOp::Mul => |x, y| x * y,
        BinaryOp::Div => |x, y| x / y,
    }
}

fn binary_name(kind: BinaryOp) -> &'static str {
    match kind {
        BinaryOp::Add => "add",
        BinaryOp::Sub => "sub",
        BinaryOp::Mul => "mul",
        BinaryOp::Div => "div",
    }
}

fn unary_fn(kind: UnaryOp, x: f64) -> f64 {
    match kind {
        UnaryOp::Exp => x.exp(),
        UnaryOp::Log => x.ln(),
        UnaryOp::Neg => -x,
        UnaryOp::Sigmoid => {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        }
        UnaryOp::Relu => x.max(0.0),
        UnaryOp::Clamp { min, max } => x.clamp(min, max),
    }
}

fn unary_name(kind: UnaryOp) -> &'static str {
    match kind {
        UnaryOp::Exp => "exp",
        UnaryOp::Log => "log",
        UnaryOp::Neg => "neg",
        UnaryOp::Sigmoid => "sigmoid",
        UnaryOp::Relu => "relu",
        UnaryOp::Clamp { .. } => "clamp",
    }
}

fn check_axis(op: &'static str, axis: usize, rank: usize) -> Result<()> {
    if axis >= rank {
        Err(TensorError::InvalidAxis { op, axis, rank })
    } else {
        Ok(())
    }
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize, usize)> {
    let mismatch = || TensorError::ShapeMismatch {
        op: "matmul",
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    match (a, b) {
        (&[m, k], &[k2, n]) if k == k2 => Ok((1, m, k, n)),
        (&[ba, m, k], &[bb, k2, n]) if k == k2 && ba == bb => Ok((ba, m, k, n)),
        _ => Err(mismatch()),
    }
}

fn transpose_into(src: &[f64], dst: &mut [f64], batch: usize, rows: usize, cols: usize) {
    for bi in 0..batch {
        let off = bi * rows * cols;
        for r in 0..rows {
            for c in 0..cols {
                dst[off + c * rows + r] = src[off + r * cols + c];
            }
        }
    }
}
