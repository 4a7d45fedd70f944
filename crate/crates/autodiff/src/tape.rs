use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::op::Op;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Node {
    op: Op,
    parents: Vec<Var>,
    value: Tensor,
}

impl Node {
    pub fn op(&self) -> &Op {
        &self.op
    }

    pub fn parents(&self) -> &[Var] {
        &self.parents
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }
}

/// Append-only record of eagerly evaluated operations.
///
/// Parents always precede their children, so tape order is a topological
/// order. [`Tape::grad`] records the backward pass as ordinary nodes, which
/// makes the returned gradients differentiable again when `create_graph`
/// is set.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    marks: BTreeSet<usize>,
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

    pub fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Value of a one-element node.
    pub fn item(&self, v: Var) -> Result<f64> {
        self.value(v).item()
    }

    /// Ids flagged by [`Tape::variable`].
    pub fn marks(&self) -> &BTreeSet<usize> {
        &self.marks
    }

    pub fn is_marked(&self, v: Var) -> bool {
        self.marks.contains(&v.0)
    }

    pub fn check_finite(&self, v: Var, context: &str) -> Result<()> {
        self.value(v).check_finite(context)
    }

    /// Records an input that is not meant to be differentiated.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, Vec::new(), value)
    }

    /// Records an input and flags it as a differentiation leaf.
    pub fn variable(&mut self, value: Tensor) -> Var {
        let v = self.push(Op::Leaf, Vec::new(), value);
        self.marks.insert(v.0);
        v
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    fn push(&mut self, op: Op, parents: Vec<Var>, value: Tensor) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node { op, parents, value });
        Var(id)
    }

    fn owned(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::ForeignNode {
                id: v.0,
                len: self.nodes.len(),
            })
        }
    }

    /// Evaluates `op` on the values of `inputs` and appends the result.
    pub fn record(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        for &v in inputs {
            self.owned(v)?;
        }
        let value = {
            let values: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            op.forward(&values)?
        };
        Ok(self.push(op, inputs.to_vec(), value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Mul, &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.record(Op::Scale(c), &[a])
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    pub fn matmul_t(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        self.record(Op::MatMul { trans_a, trans_b }, &[a, b])
    }

    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        self.record(Op::ConcatLast, parts)
    }

    pub fn slice_last(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        self.record(Op::SliceLast { start, end }, &[a])
    }

    pub fn pad_last(&mut self, a: Var, before: usize, total: usize) -> Result<Var> {
        self.record(Op::PadLast { before, total }, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Sum, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Mean, &[a])
    }

    pub fn expand(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        self.record(Op::Expand(shape), &[a])
    }

    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        self.record(Op::SumLast, &[a])
    }

    pub fn repeat_last(&mut self, a: Var, width: usize) -> Result<Var> {
        self.record(Op::RepeatLast(width), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        self.record(Op::Reshape(shape), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Tanh, &[a])
    }

    pub fn sin(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Sin, &[a])
    }

    pub fn cos(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Cos, &[a])
    }

    pub fn pow(&mut self, a: Var, exponent: f64) -> Result<Var> {
        self.record(Op::Pow(exponent), &[a])
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Ln, &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Exp, &[a])
    }

    pub fn squared_norm(&mut self, a: Var) -> Result<Var> {
        self.record(Op::SquaredNorm, &[a])
    }

    /// Gradients of the scalar `output` with respect to each node in `wrt`.
    ///
    /// A `wrt` node that `output` does not depend on gets a zero tensor of
    /// its own shape. With `create_graph` the returned nodes are part of the
    /// graph and can be differentiated again; otherwise the backward nodes
    /// are dropped and detached constants holding the gradient values are
    /// returned.
    pub fn grad(&mut self, output: Var, wrt: &[Var], create_graph: bool) -> Result<Vec<Var>> {
        self.owned(output)?;
        for &w in wrt {
            self.owned(w)?;
        }
        let out_shape = self.shape(output).to_vec();
        if out_shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarOutput { shape: out_shape });
        }

        let mark = self.nodes.len();
        let end = output.0 + 1;

        // Nodes that depend on some wrt node.
        let mut depends = vec![false; end];
        for &w in wrt {
            if w.0 < end {
                depends[w.0] = true;
            }
        }
        let first = wrt.iter().map(|w| w.0).min().unwrap_or(end);
        for i in first..end {
            if !depends[i] {
                depends[i] = self.nodes[i].parents.iter().any(|p| depends[p.0]);
            }
        }

        let mut adjoint: Vec<Option<Var>> = vec![None; end];
        if depends[output.0] {
            adjoint[output.0] = Some(self.constant(Tensor::ones(out_shape)));
        }
        for i in (first..end).rev() {
            let Some(g) = adjoint[i] else { continue };
            if !depends[i] {
                continue;
            }
            let parents = self.nodes[i].parents.clone();
            for (slot, &p) in parents.iter().enumerate() {
                if !depends[p.0] {
                    continue;
                }
                let contrib = self.vjp(Var(i), slot, g)?;
                adjoint[p.0] = Some(match adjoint[p.0] {
                    None => contrib,
                    Some(acc) => self.add(acc, contrib)?,
                });
            }
        }

        let grads: Vec<Option<Var>> = wrt
            .iter()
            .map(|w| adjoint.get(w.0).copied().flatten())
            .collect();

        if create_graph {
            return Ok(grads
                .into_iter()
                .zip(wrt)
                .map(|(g, w)| match g {
                    Some(g) => g,
                    None => {
                        let zeros = Tensor::zeros(self.shape(*w).to_vec());
                        self.constant(zeros)
                    }
                })
                .collect());
        }

        let values: Vec<Tensor> = grads
            .iter()
            .zip(wrt)
            .map(|(g, w)| match g {
                Some(g) => self.value(*g).clone(),
                None => Tensor::zeros(self.shape(*w).to_vec()),
            })
            .collect();
        self.nodes.truncate(mark);
        Ok(values.into_iter().map(|v| self.constant(v)).collect())
    }

    /// Contribution of node `node`'s adjoint `g` to its parent in `slot`,
    /// recorded as tape operations.
    fn vjp(&mut self, node: Var, slot: usize, g: Var) -> Result<Var> {
        let op = self.nodes[node.0].op.clone();
        let parents = self.nodes[node.0].parents.clone();
        let parent = parents[slot];
        match op {
            Op::Leaf => unreachable!("leaves have no parents"),
            Op::Add => self.unbroadcast(g, parent),
            Op::Sub => {
                let g = if slot == 0 { g } else { self.neg(g)? };
                self.unbroadcast(g, parent)
            }
            Op::Mul => {
                let other = parents[1 - slot];
                let prod = self.mul(g, other)?;
                self.unbroadcast(prod, parent)
            }
            Op::Scale(c) => self.scale(g, c),
            Op::MatMul { trans_a, trans_b } => {
                let (a, b) = (parents[0], parents[1]);
                // C = op(A) op(B); each case written so no transpose is materialized.
                match (slot, trans_a, trans_b) {
                    (0, false, false) => self.matmul_t(g, b, false, true),
                    (0, false, true) => self.matmul_t(g, b, false, false),
                    (0, true, false) => self.matmul_t(b, g, false, true),
                    (0, true, true) => self.matmul_t(b, g, true, true),
                    (1, false, false) => self.matmul_t(a, g, true, false),
                    (1, false, true) => self.matmul_t(g, a, true, false),
                    (1, true, false) => self.matmul_t(a, g, false, false),
                    (1, true, true) => self.matmul_t(g, a, true, true),
                    _ => unreachable!(),
                }
            }
            Op::ConcatLast => {
                let start: usize = parents[..slot]
                    .iter()
                    .map(|p| self.value(*p).last_dim())
                    .sum();
                let width = self.value(parent).last_dim();
                self.slice_last(g, start, start + width)
            }
            Op::SliceLast { start, .. } => {
                let total = self.value(parent).last_dim();
                self.pad_last(g, start, total)
            }
            Op::PadLast { before, .. } => {
                let width = self.value(parent).last_dim();
                self.slice_last(g, before, before + width)
            }
            Op::Sum => {
                let shape = self.shape(parent).to_vec();
                self.expand(g, shape)
            }
            Op::Mean => {
                let shape = self.shape(parent).to_vec();
                let n = self.value(parent).numel() as f64;
                let scaled = self.scale(g, 1.0 / n)?;
                self.expand(scaled, shape)
            }
            Op::Expand(_) => {
                let shape = self.shape(parent).to_vec();
                let s = self.sum(g)?;
                self.reshape(s, shape)
            }
            Op::SumLast => {
                let width = self.value(parent).last_dim();
                self.repeat_last(g, width)
            }
            Op::RepeatLast(_) => self.sum_last(g),
            Op::Reshape(_) => {
                let shape = self.shape(parent).to_vec();
                self.reshape(g, shape)
            }
            Op::Tanh => self.record(Op::TanhGrad, &[node, g]),
            Op::TanhGrad => {
                let (y, up) = (parents[0], parents[1]);
                if slot == 1 {
                    self.record(Op::TanhGrad, &[y, g])
                } else {
                    // d/dy [up * (1 - y^2)] = -2 y up
                    let t = self.mul(g, up)?;
                    let t = self.mul(t, y)?;
                    self.scale(t, -2.0)
                }
            }
            Op::Pow(c) => {
                let d = if c == 1.0 {
                    return Ok(g);
                } else if c == 2.0 {
                    self.scale(parent, 2.0)?
                } else {
                    let p = self.pow(parent, c - 1.0)?;
                    self.scale(p, c)?
                };
                self.mul(g, d)
            }
            Op::Ln => {
                let r = self.pow(parent, -1.0)?;
                self.mul(g, r)
            }
            Op::Exp => self.mul(g, node),
            Op::Sin => {
                let c = self.cos(parent)?;
                self.mul(g, c)
            }
            Op::Cos => {
                let s = self.sin(parent)?;
                let s = self.neg(s)?;
                self.mul(g, s)
            }
            Op::SquaredNorm => {
                let width = self.value(parent).last_dim();
                let r = self.repeat_last(g, width)?;
                let m = self.mul(r, parent)?;
                self.scale(m, 2.0)
            }
        }
    }

    /// Reduces `g` back to the shape of `parent` when the parent was a
    /// broadcast one-element operand.
    fn unbroadcast(&mut self, g: Var, parent: Var) -> Result<Var> {
        if self.shape(g) == self.shape(parent) {
            return Ok(g);
        }
        let shape = self.shape(parent).to_vec();
        debug_assert_eq!(shape.iter().product::<usize>(), 1);
        let s = self.sum(g)?;
        self.reshape(s, shape)
    }

    /// Re-evaluates every non-leaf node from its parents, producing a fresh tape.
    pub fn replay(&self) -> Result<Tape> {
        let mut out = Tape {
            nodes: Vec::with_capacity(self.nodes.len()),
            marks: self.marks.clone(),
        };
        for node in &self.nodes {
            let value = match node.op {
                Op::Leaf => node.value.clone(),
                _ => {
                    let inputs: Vec<&Tensor> =
                        node.parents.iter().map(|p| &out.nodes[p.0].value).collect();
                    node.op.forward(&inputs)?
                }
            };
            out.nodes.push(Node {
                op: node.op.clone(),
                parents: node.parents.clone(),
                value,
            });
        }
        Ok(out)
    }

    /// True when both tapes hold the same ops, parents and bit-identical values.
    pub fn bits_eq(&self, other: &Tape) -> bool {
        self.nodes.len() == other.nodes.len()
            && self.marks == other.marks
            && self.nodes.iter().zip(&other.nodes).all(|(a, b)| {
                a.op == b.op && a.parents == b.parents && a.value.bits_eq(&b.value)
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + b.abs())
    }

    #[test]
    fn add_records_eager_value() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let y = tape.constant(Tensor::vector(vec![3.0, 4.0]));
        let z = tape.add(x, y).unwrap();
        assert_eq!(tape.value(z).data(), &[4.0, 6.0]);
        assert_eq!(tape.node(z).parents(), &[x, y]);
    }

    #[test]
    fn matmul_of_ones() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::ones(vec![2, 3]));
        let b = tape.constant(Tensor::ones(vec![3, 1]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(c), &[2, 1]);
        assert_eq!(tape.value(c).data(), &[3.0, 3.0]);
    }

    #[test]
    fn matmul_inner_dim_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::ones(vec![2, 3]));
        let b = tape.constant(Tensor::ones(vec![2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            Error::ShapeMismatch {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 3]
            }
        );
    }

    #[test]
    fn power_rule() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let g = tape.grad(y, &[x], false).unwrap();
        assert_eq!(tape.item(g[0]).unwrap(), 6.0);
    }

    #[test]
    fn half_squared_norm_gradient_is_identity() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::vector(vec![3.0, 4.0]));
        let n = tape.squared_norm(x).unwrap();
        let h = tape.scale(n, 0.5).unwrap();
        let s = tape.sum(h).unwrap();
        let g = tape.grad(s, &[x], false).unwrap();
        assert_eq!(tape.value(g[0]).data(), &[3.0, 4.0]);
    }

    #[test]
    fn second_derivative_through_tanh_matches_closed_form() {
        let x0 = 0.7_f64;
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::scalar(x0));
        let y = tape.tanh(x).unwrap();
        let dy = tape.grad(y, &[x], true).unwrap()[0];
        let g = tape.mul(dy, dy).unwrap();
        let dg = tape.grad(g, &[x], false).unwrap()[0];
        let t = x0.tanh();
        let s = 1.0 - t * t;
        // d/dx s^2 = 2 s * (-2 t s)
        let expected = -4.0 * t * s * s;
        assert!(close(tape.item(dg).unwrap(), expected, 1e-14));
    }

    #[test]
    fn unreachable_wrt_gets_zeros() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::vector(vec![1.0, 2.0]));
        let unused = tape.variable(Tensor::zeros(vec![2, 2]));
        let s = tape.sum(x).unwrap();
        let g = tape.grad(s, &[unused, x], false).unwrap();
        assert_eq!(tape.value(g[0]), &Tensor::zeros(vec![2, 2]));
        assert_eq!(tape.value(g[1]).data(), &[1.0, 1.0]);
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(
            tape.grad(x, &[x], false),
            Err(Error::NonScalarOutput { .. })
        ));
    }

    #[test]
    fn grad_without_graph_leaves_tape_compact() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::vector(vec![0.1, 0.2, 0.3]));
        let y = tape.tanh(x).unwrap();
        let s = tape.sum(y).unwrap();
        let before = tape.len();
        tape.grad(s, &[x], false).unwrap();
        assert_eq!(tape.len(), before + 1);
    }

    #[test]
    fn foreign_node_is_rejected() {
        let mut small = Tape::new();
        let mut big = Tape::new();
        for _ in 0..3 {
            big.scalar(1.0);
        }
        let v = big.scalar(2.0);
        small.scalar(0.0);
        assert!(matches!(
            small.add(v, v),
            Err(Error::ForeignNode { id: 3, len: 1 })
        ));
    }

    #[test]
    fn replay_reproduces_values() {
        let mut tape = Tape::new();
        let a = tape.variable(Tensor::matrix(2, 2, vec![0.3, -0.1, 0.5, 0.9]).unwrap());
        let b = tape.matmul(a, a).unwrap();
        let c = tape.tanh(b).unwrap();
        let s = tape.mean(c).unwrap();
        tape.grad(s, &[a], true).unwrap();
        let again = tape.replay().unwrap();
        assert!(tape.bits_eq(&again));
    }
}
