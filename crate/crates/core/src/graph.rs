//! Tape-style reverse-mode differentiation.
//!
//! A [`Graph`] is rebuilt for every training step. Nodes are appended in
//! evaluation order, so node index order is a topological order and the
//! backward sweep is a single reverse pass over the node list.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{self, Scalar, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product of a recorded operation.
///
/// `needs[i]` is false when input `i` does not lead to a trainable leaf;
/// implementations may return `None` for such inputs.
pub trait Op<S: Scalar>: Send + Sync {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        inputs: &[&Tensor<S>],
        output: &Tensor<S>,
        grad: &Tensor<S>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<S>>>>;
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    inputs: Vec<usize>,
    op: Option<Box<dyn Op<S>>>,
    requires_grad: bool,
    trainable: bool,
}

pub struct Graph<S: Scalar = f32> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar root with respect to every trainable leaf.
#[derive(Debug)]
pub struct Gradients<S: Scalar> {
    by_leaf: BTreeMap<Var, Tensor<S>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.by_leaf.get(&v)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.by_leaf.remove(&v)
    }

    pub fn len(&self) -> usize {
        self.by_leaf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_leaf.is_empty()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn leaf(&mut self, value: Tensor<S>, trainable: bool) -> Var {
        self.nodes.push(Node {
            value,
            inputs: Vec::new(),
            op: None,
            requires_grad: trainable,
            trainable,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf held constant.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Record the result of a custom operation.
    pub fn record(&mut self, op: Box<dyn Op<S>>, inputs: &[Var], value: Tensor<S>) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            inputs: inputs.iter().map(|v| v.0).collect(),
            op: Some(op),
            requires_grad,
            trainable: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let out = tensor::conv2d(self.value(input), self.value(kernel), self.value(bias))?;
        Ok(self.record(Box::new(Conv2dOp), &[input, kernel, bias], out))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = tensor::relu(self.value(x));
        self.record(Box::new(ReluOp), &[x], out)
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let out = tensor::softmax_channels(self.value(x))?;
        Ok(self.record(Box::new(SoftmaxOp), &[x], out))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.record(Box::new(SumOp), &[x], out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.record(Box::new(AddOp), &[a, b], out))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        Ok(self.record(Box::new(MulOp), &[a, b], out))
    }

    pub fn scale(&mut self, x: Var, k: S) -> Var {
        let out = self.value(x).scale(k);
        self.record(Box::new(ScaleOp(k)), &[x], out)
    }

    /// Weighted sum of scalar nodes, `sum_i w_i * x_i`.
    pub fn weighted_sum(&mut self, terms: &[(Var, S)]) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for &(v, w) in terms {
            let t = self.scale(v, w);
            acc = Some(match acc {
                None => t,
                Some(a) => self.add(a, t)?,
            });
        }
        acc.ok_or_else(|| Error::contract("weighted_sum of no terms"))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients<S>> {
        let root_value = self.value(root);
        if !root_value.is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar root, got dims {:?}",
                root_value.dims()
            )));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(root_value.dims(), S::one()));
        let mut by_leaf = BTreeMap::new();
        for idx in (0..=root.0).rev() {
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(op) = &node.op else {
                if node.trainable {
                    by_leaf.insert(Var(idx), grad);
                }
                continue;
            };
            let inputs: Vec<&Tensor<S>> =
                node.inputs.iter().map(|&i| &self.nodes[i].value).collect();
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|&i| self.nodes[i].requires_grad)
                .collect();
            let input_grads = op.backward(&inputs, &node.value, &grad, &needs)?;
            if input_grads.len() != node.inputs.len() {
                return Err(Error::contract(format!(
                    "{} returned {} gradients for {} inputs",
                    op.name(),
                    input_grads.len(),
                    node.inputs.len()
                )));
            }
            for ((&i, g), need) in node.inputs.iter().zip(input_grads).zip(needs) {
                let (Some(g), true) = (g, need) else {
                    continue;
                };
                match &mut grads[i] {
                    Some(acc) => acc.add_assign(&g)?,
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(Gradients { by_leaf })
    }
}

struct Conv2dOp;

impl<S: Scalar> Op<S> for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<S>],
        _output: &Tensor<S>,
        grad: &Tensor<S>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<S>>>> {
        let (gi, gk, gb) = tensor::conv2d_backward(inputs[0], inputs[1], inputs[2], grad)?;
        Ok(vec![
            needs[0].then_some(gi),
            needs[1].then_some(gk),
            needs[2].then_some(gb),
        ])
    }
}

struct ReluOp;

impl<S: Scalar> Op<S> for ReluOp {
    fn name(&self) -> &'static str {
        "relu"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<S>],
        _output: &Tensor<S>,
        grad: &Tensor<S>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<S>>>> {
        Ok(vec![Some(tensor::relu_backward(inputs[0], grad)?)])
    }
}

struct SoftmaxOp;

impl<S: Scalar> Op<S> for SoftmaxOp {
    fn name(&self) -> &'static str {
        "softmax"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor<S>],
        output: &Tensor<S>,
        grad: &Tensor<S>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<S>>>> {
        Ok(vec![Some(tensor::softmax_backward(output, grad)?)])
    }
}

struct SumOp;

impl<S: Scalar> Op<S> for SumOp {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<S>],
        _output: &Tensor<S>,
        grad: &Tensor<S>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<S>>>> {
        Ok(vec![Some(Tensor::full(inputs[0].dims(), grad.item()))])
    }
}

struct AddOp;

impl<S: Scalar> Op<S> for AddOp {
    fn name(&self) -> &'static str {
        "add"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor<S>],
        _output: &Tensor<S>,
        grad: &Tensor<S>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<S>>>> {
        Ok(vec![
            needs[0].then(|| grad.clone()),
            needs[1].then(|| grad.clone()),
        ])
    }
}

struct MulOp;

impl<S: Scalar> Op<S> for MulOp {
    fn name(&self) -> &'static str {
        "mul"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<S>],
        _output: &Tensor<S>,
        grad: &Tensor<S>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<S>>>> {
        let ga = if needs[0] { Some(grad.mul(inputs[1])?) } else { None };
        let gb = if needs[1] { Some(grad.mul(inputs[0])?) } else { None };
        Ok(vec![ga, gb])
    }
}

struct ScaleOp<S>(S);

impl<S: Scalar> Op<S> for ScaleOp<S> {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor<S>],
        _output: &Tensor<S>,
        grad: &Tensor<S>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<S>>>> {
        Ok(vec![Some(grad.scale(self.0))])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_fn(&[3, 4], |i| i as f64));
        let y = g.sum(x);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap(), &Tensor::full(&[3, 4], 1.0));
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::scalar(3.0));
        let xx = g.mul(x, x).unwrap();
        let y = g.sum(xx);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn relu_subgradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::new(&[2], vec![-1.0, 2.0]).unwrap());
        let r = g.relu(x);
        let y = g.sum(r);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::zeros(&[2, 2]));
        let r = g.relu(x);
        assert!(matches!(g.backward(r), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::<f64>::new();
        let a = g.param(Tensor::scalar(2.0));
        let b = g.constant(Tensor::scalar(5.0));
        let p = g.mul(a, b).unwrap();
        let y = g.sum(p);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.len(), 1);
        assert_eq!(grads.get(a).unwrap().item(), 5.0);
        assert!(grads.get(b).is_none());
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::scalar(1.5));
        let y = g.weighted_sum(&[(x, 2.0), (x, -0.5)]).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 1.5);
    }
}
