use std::collections::BTreeMap;

use super::ops::{self, Pointwise};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Value<'a, T> {
    Owned(Tensor<T>),
    Borrowed(&'a Tensor<T>),
}

enum Op<T> {
    Input,
    Param,
    MatMul(Var, Var),
    Linear(Var, Var),
    Unary(Pointwise, Var),
    Binary(Pointwise, Var, Var),
    Scale(Var, T),
    Embed {
        table: Var,
        ids: Vec<usize>,
    },
    SumSquares(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        temperature: f64,
        scale: T,
    },
}

struct Node<'a, T> {
    value: Value<'a, T>,
    op: Op<T>,
}

/// Reverse-mode tape. Parameters are borrowed, not copied; each parameter
/// id maps to exactly one leaf, so a matrix used at two sites (weight tying)
/// receives the sum of both gradients.
pub struct Graph<'a, T> {
    nodes: Vec<Node<'a, T>>,
    params: BTreeMap<usize, Var>,
}

impl<'a, T: Scalar> Default for Graph<'a, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Scalar> Graph<'a, T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }

    /// Constant leaf (inputs, carried state, dropout masks).
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input)
    }

    /// Trainable leaf. Repeated calls with the same id return the same node.
    pub fn param(&mut self, id: usize, value: &'a Tensor<T>) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: Value::Borrowed(value),
            op: Op::Param,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `x · wᵀ` with `w` stored `[out×in]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let out = ops::linear(self.value(x), self.value(w))?;
        Ok(self.push(out, Op::Linear(x, w)))
    }

    pub fn unary(&mut self, kind: Pointwise, a: Var) -> Result<Var> {
        let out = ops::pointwise(kind, &[self.value(a)])?;
        Ok(self.push(out, Op::Unary(kind, a)))
    }

    pub fn binary(&mut self, kind: Pointwise, a: Var, b: Var) -> Result<Var> {
        let out = ops::pointwise(kind, &[self.value(a), self.value(b)])?;
        Ok(self.push(out, Op::Binary(kind, a, b)))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(Pointwise::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(Pointwise::Tanh, a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(Pointwise::Relu, a)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Pointwise::Mul, a, b)
    }

    /// Elementwise sum; `b` may be a rank-1 bias broadcast over rows.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Pointwise::Add, a, b)
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let out = self.value(a).map(|v| v * factor);
        self.push(out, Op::Scale(a, factor))
    }

    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let out = ops::gather_rows(self.value(table), ids)?;
        Ok(self.push(
            out,
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// `Σ x²` as a one-element tensor.
    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s = self
            .value(a)
            .values()
            .iter()
            .fold(T::zero(), |acc, &v| acc + v * v);
        self.push(Tensor::scalar(s), Op::SumSquares(a))
    }

    /// `scale · Σ_rows nll(row, target)` under a tempered softmax.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        temperature: f64,
        scale: T,
    ) -> Result<Var> {
        let nll = ops::row_nll(self.value(logits), targets, temperature)?;
        let total = T::from_f64(nll.iter().sum::<f64>()) * scale;
        Ok(self.push(
            Tensor::scalar(total),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                temperature,
                scale,
            },
        ))
    }

    /// Sum of a list of same-shaped nodes.
    pub fn sum(&mut self, terms: &[Var]) -> Result<Var> {
        let (&first, rest) = terms
            .split_first()
            .ok_or_else(|| Error::InvalidArgument("sum of no terms".into()))?;
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }

    /// Backpropagates from a one-element node.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward root must be a scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(root.0 + 1);
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(Tensor::scalar(T::one()));

        fn acc<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input | Op::Param => {}
                Op::MatMul(a, b) => {
                    let (da, db) = ops::matmul_backward(self.value(*a), self.value(*b), &g);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Linear(x, w) => {
                    let (dx, dw) = ops::linear_backward(self.value(*x), self.value(*w), &g);
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *w, dw);
                }
                Op::Unary(kind, a) => {
                    let mut d =
                        ops::pointwise_backward(*kind, &[self.value(*a)], self.value(Var(i)), &g);
                    acc(&mut grads, *a, d.remove(0));
                }
                Op::Binary(kind, a, b) => {
                    let mut d = ops::pointwise_backward(
                        *kind,
                        &[self.value(*a), self.value(*b)],
                        self.value(Var(i)),
                        &g,
                    );
                    let db = d.pop().expect("two grads");
                    let da = d.pop().expect("two grads");
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Scale(a, factor) => {
                    let f = *factor;
                    acc(&mut grads, *a, g.map(|v| v * f));
                }
                Op::Embed { table, ids } => {
                    let shape = self.value(*table).shape().to_vec();
                    acc(&mut grads, *table, ops::scatter_rows(&shape, ids, &g));
                }
                Op::SumSquares(a) => {
                    let up = g.values()[0];
                    let two = T::from_f64(2.0);
                    acc(&mut grads, *a, self.value(*a).map(|v| two * v * up));
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    temperature,
                    scale,
                } => {
                    let up = g.values()[0];
                    let d = ops::cross_entropy_backward(
                        self.value(*logits),
                        targets,
                        *temperature,
                        *scale * up,
                    );
                    acc(&mut grads, *logits, d);
                }
            }
            grads[i] = Some(g);
        }

        Ok(Gradients {
            nodes: grads,
            params: self.params.clone(),
        })
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    nodes: Vec<Option<Tensor<T>>>,
    params: BTreeMap<usize, Var>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to any node, `None` if the root does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for a parameter id.
    pub fn param(&self, id: usize) -> Option<&Tensor<T>> {
        self.params.get(&id).and_then(|&v| self.wrt(v))
    }

    /// `(id, gradient)` for every parameter that was used on the tape.
    pub fn params(&self) -> impl Iterator<Item = (usize, &Tensor<T>)> {
        self.params
            .iter()
            .filter_map(|(&id, &v)| self.wrt(v).map(|g| (id, g)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shared_param_sums_both_uses() {
        let w = Tensor::<f64>::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let mut g = Graph::new();
        let a = g.param(0, &w);
        let b = g.param(0, &w);
        assert_eq!(a, b);
        let s1 = g.sum_squares(a);
        let s2 = g.sum_squares(b);
        let total = g.add(s1, s2).unwrap();
        let grads = g.backward(total).unwrap();
        assert_eq!(grads.param(0).unwrap().values(), &[4.0, 8.0, 12.0, 16.0]);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros(&[2, 2]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn unused_node_has_no_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::full(&[2], 3.0));
        let y = g.input(Tensor::full(&[2], 1.0));
        let s = g.sum_squares(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).unwrap().values(), &[6.0, 6.0]);
        assert!(grads.wrt(y).is_none());
    }
}
