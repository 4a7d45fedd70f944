//! Operation kinds and their eager forward evaluation.
//!
//! Elementwise binary ops accept two tensors of identical shape, or one
//! one-element tensor paired with a tensor of any shape. Nothing else
//! broadcasts.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    /// Input value; no parents.
    Leaf,
    Add,
    Sub,
    Mul,
    /// Multiplication by a fixed constant.
    Scale(f64),
    /// `op(a) . op(b)` where `op` optionally transposes its rank-2 input.
    MatMul { trans_a: bool, trans_b: bool },
    /// Concatenation of any number of inputs along the last axis.
    ConcatLast,
    /// Columns `start..end` of the last axis.
    SliceLast { start: usize, end: usize },
    /// Zero-pads the last axis to `total`, placing the input at `before`.
    PadLast { before: usize, total: usize },
    /// Sum of every element; rank-0 result.
    Sum,
    /// Mean of every element; rank-0 result.
    Mean,
    /// Fills `shape` with the value of a one-element input.
    Expand(Vec<usize>),
    /// Sum over the last axis, keeping it with size 1.
    SumLast,
    /// Repeats a last axis of size 1 to the given width.
    RepeatLast(usize),
    Reshape(Vec<usize>),
    Tanh,
    /// `g * (1 - y^2)` for inputs `[y, g]`; the tanh derivative applied to an adjoint.
    TanhGrad,
    /// Elementwise power with a fixed exponent; the base must be non-negative.
    Pow(f64),
    Ln,
    Exp,
    Sin,
    Cos,
    /// Squared L2 norm over the last axis, keeping it with size 1.
    SquaredNorm,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::MatMul { .. } => "matmul",
            Op::ConcatLast => "concat",
            Op::SliceLast { .. } => "slice",
            Op::PadLast { .. } => "pad",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::Expand(_) => "expand",
            Op::SumLast => "sum_last",
            Op::RepeatLast(_) => "repeat_last",
            Op::Reshape(_) => "reshape",
            Op::Tanh => "tanh",
            Op::TanhGrad => "tanh_grad",
            Op::Pow(_) => "pow",
            Op::Ln => "ln",
            Op::Exp => "exp",
            Op::Sin => "sin",
            Op::Cos => "cos",
            Op::SquaredNorm => "squared_norm",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Op::Leaf => Some(0),
            Op::Add | Op::Sub | Op::Mul | Op::MatMul { .. } | Op::TanhGrad => Some(2),
            Op::ConcatLast => None,
            _ => Some(1),
        }
    }

    /// Evaluates the op on concrete inputs.
    pub fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        if let Some(expected) = self.arity() {
            if inputs.len() != expected {
                return Err(Error::Arity {
                    op: self.name(),
                    expected,
                    found: inputs.len(),
                });
            }
        }
        match self {
            Op::Leaf => Err(Error::InvalidArgument(
                "leaf nodes carry their value and have no forward rule".into(),
            )),
            Op::Add => binary(self.name(), inputs[0], inputs[1], |a, b| a + b),
            Op::Sub => binary(self.name(), inputs[0], inputs[1], |a, b| a - b),
            Op::Mul => binary(self.name(), inputs[0], inputs[1], |a, b| a * b),
            Op::Scale(c) => {
                let c = *c;
                Ok(inputs[0].map(|v| c * v))
            }
            Op::MatMul { trans_a, trans_b } => matmul(inputs[0], inputs[1], *trans_a, *trans_b),
            Op::ConcatLast => concat_last(inputs),
            Op::SliceLast { start, end } => slice_last(inputs[0], *start, *end),
            Op::PadLast { before, total } => pad_last(inputs[0], *before, *total),
            Op::Sum => Ok(Tensor::scalar(inputs[0].data().iter().sum())),
            Op::Mean => {
                let x = inputs[0];
                if x.numel() == 0 {
                    return Err(Error::InvalidShape {
                        op: "mean",
                        shape: x.shape().to_vec(),
                        reason: "mean of an empty tensor".into(),
                    });
                }
                let s: f64 = x.data().iter().sum();
                Ok(Tensor::scalar(s / x.numel() as f64))
            }
            Op::Expand(shape) => {
                let v = one_element(self.name(), inputs[0])?;
                Ok(Tensor::full(shape.clone(), v))
            }
            Op::SumLast => sum_last(inputs[0]),
            Op::RepeatLast(width) => repeat_last(inputs[0], *width),
            Op::Reshape(shape) => {
                let x = inputs[0];
                let n: usize = shape.iter().product();
                if n != x.numel() {
                    return Err(Error::ShapeMismatch {
                        op: "reshape",
                        lhs: x.shape().to_vec(),
                        rhs: shape.clone(),
                    });
                }
                Ok(Tensor::from_parts(shape.clone(), x.data().to_vec()))
            }
            Op::Tanh => Ok(Tensor::from_parts(
                inputs[0].shape().to_vec(),
                crate::fastmath::tanh_slice(inputs[0].data()),
            )),
            Op::TanhGrad => {
                let (y, g) = (inputs[0], inputs[1]);
                if y.shape() != g.shape() {
                    return Err(Error::ShapeMismatch {
                        op: "tanh_grad",
                        lhs: y.shape().to_vec(),
                        rhs: g.shape().to_vec(),
                    });
                }
                let data = y
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&y, &g)| g * (1.0 - y * y))
                    .collect();
                Ok(Tensor::from_parts(y.shape().to_vec(), data))
            }
            Op::Pow(c) => {
                let x = inputs[0];
                if let Some(&bad) = x.data().iter().find(|v| **v < 0.0) {
                    return Err(Error::Domain {
                        op: "pow",
                        value: bad,
                    });
                }
                let c = *c;
                Ok(x.map(|v| v.powf(c)))
            }
            Op::Ln => {
                let x = inputs[0];
                if let Some(&bad) = x.data().iter().find(|v| !(**v > 0.0)) {
                    return Err(Error::Domain { op: "ln", value: bad });
                }
                Ok(x.map(f64::ln))
            }
            Op::Exp => Ok(inputs[0].map(f64::exp)),
            Op::Sin => Ok(inputs[0].map(f64::sin)),
            Op::Cos => Ok(inputs[0].map(f64::cos)),
            Op::SquaredNorm => {
                let x = inputs[0];
                let w = require_rank1(self.name(), x)?;
                let out = x
                    .data()
                    .chunks_exact(w)
                    .map(|row| row.iter().map(|v| v * v).sum())
                    .collect();
                Ok(Tensor::from_parts(keep_last(x.shape(), 1), out))
            }
        }
    }
}

pub(crate) fn binary_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    if a.shape() == b.shape() {
        Ok(a.shape().to_vec())
    } else if a.numel() == 1 {
        Ok(b.shape().to_vec())
    } else if b.numel() == 1 {
        Ok(a.shape().to_vec())
    } else {
        Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })
    }
}

fn binary(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    let shape = binary_shape(op, a, b)?;
    let data = if a.shape() == b.shape() {
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
    } else if a.numel() == 1 {
        let x = a.data()[0];
        b.data().iter().map(|&y| f(x, y)).collect()
    } else {
        let y = b.data()[0];
        a.data().iter().map(|&x| f(x, y)).collect()
    };
    Ok(Tensor::from_parts(shape, data))
}

fn one_element(op: &'static str, x: &Tensor) -> Result<f64> {
    if x.numel() != 1 {
        return Err(Error::InvalidShape {
            op,
            shape: x.shape().to_vec(),
            reason: "expected a one-element tensor".into(),
        });
    }
    Ok(x.data()[0])
}

fn require_rank1(op: &'static str, x: &Tensor) -> Result<usize> {
    if x.rank() == 0 {
        return Err(Error::InvalidShape {
            op,
            shape: Vec::new(),
            reason: "needs at least one axis".into(),
        });
    }
    Ok(x.last_dim())
}

fn keep_last(shape: &[usize], width: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    if let Some(last) = s.last_mut() {
        *last = width;
    }
    s
}

fn matrix_dims(op: &'static str, x: &Tensor, trans: bool) -> Result<(usize, usize)> {
    if x.rank() != 2 {
        return Err(Error::InvalidShape {
            op,
            shape: x.shape().to_vec(),
            reason: "matmul operands must be rank 2".into(),
        });
    }
    let (r, c) = (x.shape()[0], x.shape()[1]);
    Ok(if trans { (c, r) } else { (r, c) })
}

fn matmul(a: &Tensor, b: &Tensor, trans_a: bool, trans_b: bool) -> Result<Tensor> {
    let (m, k) = matrix_dims("matmul", a, trans_a)?;
    let (k2, n) = matrix_dims("matmul", b, trans_b)?;
    if k != k2 {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    if k == 1 {
        // Outer product: both operands are plain vectors whatever the flags.
        let mut out = Vec::with_capacity(m * n);
        for &ai in a.data() {
            out.extend(b.data().iter().map(|&bj| ai * bj));
        }
        return Ok(Tensor::from_parts(vec![m, n], out));
    }
    if m == 0 || n == 0 || k == 0 {
        return Ok(Tensor::from_parts(vec![m, n], vec![0.0; m * n]));
    }
    let mut out = Vec::with_capacity(m * n);
    // Row-major storage; a transposed view swaps the strides.
    let (ars, acs) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (brs, bcs) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the pointers cover `m*k`, `k*n` and `m*n` elements with the
    // strides computed above, and `out` does not alias the inputs. With
    // beta = 0 the output is written without being read, so every element
    // is initialized when `set_len` runs.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data().as_ptr(),
            ars,
            acs,
            b.data().as_ptr(),
            brs,
            bcs,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
        out.set_len(m * n);
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

fn concat_last(inputs: &[&Tensor]) -> Result<Tensor> {
    let first = inputs.first().ok_or(Error::Arity {
        op: "concat",
        expected: 1,
        found: 0,
    })?;
    require_rank1("concat", first)?;
    let lead = &first.shape()[..first.rank() - 1];
    for x in &inputs[1..] {
        if x.rank() != first.rank() || &x.shape()[..x.rank() - 1] != lead {
            return Err(Error::ShapeMismatch {
                op: "concat",
                lhs: first.shape().to_vec(),
                rhs: x.shape().to_vec(),
            });
        }
    }
    let rows: usize = lead.iter().product();
    let total: usize = inputs.iter().map(|x| x.last_dim()).sum();
    let mut out = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for x in inputs {
            let w = x.last_dim();
            out.extend_from_slice(&x.data()[r * w..(r + 1) * w]);
        }
    }
    Ok(Tensor::from_parts(keep_last(first.shape(), total), out))
}

fn slice_last(x: &Tensor, start: usize, end: usize) -> Result<Tensor> {
    let w = require_rank1("slice", x)?;
    if start >= end || end > w {
        return Err(Error::InvalidShape {
            op: "slice",
            shape: x.shape().to_vec(),
            reason: format!("range {start}..{end} outside last axis of width {w}"),
        });
    }
    let out = x
        .data()
        .chunks_exact(w)
        .flat_map(|row| row[start..end].iter().copied())
        .collect();
    Ok(Tensor::from_parts(keep_last(x.shape(), end - start), out))
}

fn pad_last(x: &Tensor, before: usize, total: usize) -> Result<Tensor> {
    let w = require_rank1("pad", x)?;
    if before + w > total {
        return Err(Error::InvalidShape {
            op: "pad",
            shape: x.shape().to_vec(),
            reason: format!("cannot place width {w} at {before} inside {total}"),
        });
    }
    let rows = x.numel() / w.max(1);
    let mut out = vec![0.0; rows * total];
    for (r, row) in x.data().chunks_exact(w).enumerate() {
        out[r * total + before..r * total + before + w].copy_from_slice(row);
    }
    Ok(Tensor::from_parts(keep_last(x.shape(), total), out))
}

fn sum_last(x: &Tensor) -> Result<Tensor> {
    let w = require_rank1("sum_last", x)?;
    let out = x.data().chunks_exact(w).map(|row| row.iter().sum()).collect();
    Ok(Tensor::from_parts(keep_last(x.shape(), 1), out))
}

fn repeat_last(x: &Tensor, width: usize) -> Result<Tensor> {
    let w = require_rank1("repeat_last", x)?;
    if w != 1 {
        return Err(Error::InvalidShape {
            op: "repeat_last",
            shape: x.shape().to_vec(),
            reason: "last axis must have size 1".into(),
        });
    }
    let out = x
        .data()
        .iter()
        .flat_map(|&v| std::iter::repeat_n(v, width))
        .collect();
    Ok(Tensor::from_parts(keep_last(x.shape(), width), out))
}
