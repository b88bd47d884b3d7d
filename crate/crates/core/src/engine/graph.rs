use super::tensor::{Real, Tensor};
use crate::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Everything a backward rule can see.
pub struct BackwardCtx<'a, R: Real> {
    pub inputs: &'a [&'a Tensor<R>],
    pub output: &'a Tensor<R>,
    pub grad: &'a Tensor<R>,
    /// Which inputs need a gradient. Rules may skip the others and return `None`.
    pub needs: &'a [bool],
}

/// Vector-Jacobian product of a recorded op.
pub trait BackwardOp<R: Real> {
    fn backward(&self, ctx: &BackwardCtx<'_, R>) -> Result<Vec<Option<Tensor<R>>>>;
}

impl<R: Real, F> BackwardOp<R> for F
where
    F: Fn(&BackwardCtx<'_, R>) -> Result<Vec<Option<Tensor<R>>>>,
{
    fn backward(&self, ctx: &BackwardCtx<'_, R>) -> Result<Vec<Option<Tensor<R>>>> {
        self(ctx)
    }
}

struct Node<R: Real> {
    name: &'static str,
    value: Tensor<R>,
    requires_grad: bool,
    inputs: Vec<Var>,
    backward: Option<Box<dyn BackwardOp<R>>>,
}

/// Reverse-mode tape. Values are recorded eagerly; [`Graph::backward`]
/// replays the tape in reverse.
pub struct Graph<R: Real = f32> {
    nodes: Vec<Node<R>>,
}

impl<R: Real> Default for Graph<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> Graph<R> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<R>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<R>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<R>, requires_grad: bool) -> Var {
        self.nodes.push(Node { name: "leaf", value, requires_grad, inputs: Vec::new(), backward: None });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an op output. When none of the inputs require a gradient the
    /// backward rule is dropped. A `None` rule on a node that does need one
    /// makes [`Graph::backward`] fail with [`Error::UnsupportedOp`].
    pub fn record(
        &mut self,
        name: &'static str,
        inputs: &[Var],
        value: Tensor<R>,
        backward: Option<Box<dyn BackwardOp<R>>>,
    ) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            name,
            value,
            requires_grad,
            inputs: inputs.to_vec(),
            backward: if requires_grad { backward } else { None },
        });
        Var(self.nodes.len() - 1)
    }

    /// Gradient of a scalar `loss` with respect to every leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients<R>> {
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<R>>> = (0..=loss.0).map(|_| None).collect();
        if loss_node.requires_grad {
            grads[loss.0] = Some(Tensor::full(loss_node.value.shape(), R::one()));
        }
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if node.inputs.is_empty() || !node.requires_grad {
                continue;
            }
            let Some(grad) = grads[idx].take() else { continue };
            let rule = node.backward.as_ref().ok_or(Error::UnsupportedOp(node.name))?;
            let inputs: Vec<&Tensor<R>> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
            let ctx = BackwardCtx { inputs: &inputs, output: &node.value, grad: &grad, needs: &needs };
            let input_grads = rule.backward(&ctx)?;
            if input_grads.len() != node.inputs.len() {
                return Err(Error::Engine(format!("{}: backward returned wrong arity", node.name)));
            }
            for (v, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                if g.shape() != self.nodes[v.0].value.shape() {
                    return Err(Error::Shape(format!(
                        "{}: gradient shape {:?} does not match input {:?}",
                        node.name,
                        g.shape(),
                        self.nodes[v.0].value.shape()
                    )));
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

/// Gradients of a backward pass. Leaves that did not participate read as zero.
pub struct Gradients<R: Real> {
    grads: Vec<Option<Tensor<R>>>,
    shapes: Vec<Vec<usize>>,
}

impl<R: Real> Gradients<R> {
    pub fn get(&self, v: Var) -> Tensor<R> {
        match self.grads.get(v.0) {
            Some(Some(g)) => g.clone(),
            _ => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor<R> {
        match self.grads.get_mut(v.0).and_then(Option::take) {
            Some(g) => g,
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}
