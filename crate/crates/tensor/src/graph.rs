//! Define-by-run computation graph and reverse-mode differentiation.

use std::collections::BTreeMap;

use crate::error::{Result, TensorError};
use crate::params::{ParamId, ParamKey, ParamStore};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Graph`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Inputs available to a backward rule.
pub struct BackwardCtx<'a> {
    inputs: Vec<&'a Tensor>,
    needs: Vec<bool>,
    output: &'a Tensor,
    grad: &'a [f32],
}

impl<'a> BackwardCtx<'a> {
    pub fn input(&self, i: usize) -> &'a Tensor {
        self.inputs[i]
    }

    pub fn needs_grad(&self, i: usize) -> bool {
        self.needs[i]
    }

    pub fn output(&self) -> &'a Tensor {
        self.output
    }

    /// Gradient of the loss with respect to this node's output.
    pub fn grad_output(&self) -> &'a [f32] {
        self.grad
    }
}

/// Input gradients, one slot per recorded input.
pub type InputGrads = Vec<Option<Vec<f32>>>;

/// The chain-rule step of one recorded operation.
pub trait Backward: Send + Sync {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<InputGrads>;
}

enum Origin {
    Leaf,
    Param(ParamKey),
    Op(&'static str, Box<dyn Backward>),
}

struct Node {
    value: Tensor,
    inputs: Vec<Var>,
    requires_grad: bool,
    origin: Origin,
}

/// Ordered tape of recorded operations. Nodes are appended as operations run,
/// so inputs always precede the nodes that use them.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Result of one backward pass.
#[derive(Debug, Default)]
pub struct Gradients {
    leaves: Vec<(Var, Tensor)>,
    params: Vec<(ParamKey, Tensor)>,
}

impl Gradients {
    /// Gradient of a plain leaf created with `requires_grad = true`.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.leaves.iter().find(|(x, _)| *x == v).map(|(_, t)| t)
    }

    pub fn for_param(&self, store: &ParamStore, id: ParamId) -> Option<&Tensor> {
        let key = store.key(id);
        self.params.iter().find(|(k, _)| *k == key).map(|(_, t)| t)
    }

    pub(crate) fn param_grads(&self) -> impl Iterator<Item = (&ParamKey, &Tensor)> {
        self.params.iter().map(|(k, t)| (k, t))
    }

    /// True when no gradient reached any parameter of `store`.
    pub fn touches(&self, store: &ParamStore) -> bool {
        self.params.iter().any(|(k, _)| k.store == store.store_id())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    fn push(&mut self, node: Node) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Node { value, inputs: Vec::new(), requires_grad, origin: Origin::Leaf })
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Records a trainable parameter; its gradient is reported under the
    /// parameter's key.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(Node {
            value: store.get(id).clone(),
            inputs: Vec::new(),
            requires_grad: true,
            origin: Origin::Param(store.key(id)),
        })
    }

    /// Records a parameter's current value as a constant.
    pub fn frozen_param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.constant(store.get(id).clone())
    }

    fn node(&self, v: Var) -> Result<&Node> {
        self.nodes.get(v.0).ok_or(TensorError::UnknownVar(v.0))
    }

    pub fn try_value(&self, v: Var) -> Result<&Tensor> {
        self.node(v).map(|n| &n.value)
    }

    /// Value of a recorded variable.
    ///
    /// Panics if `v` was not produced by this graph since its last clear.
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Appends the result of an operation. The output must be finite.
    pub fn record(
        &mut self,
        op: &'static str,
        inputs: &[Var],
        output: Tensor,
        rule: impl Backward + 'static,
    ) -> Result<Var> {
        for &v in inputs {
            self.node(v)?;
        }
        output.ensure_finite(op)?;
        let requires_grad = inputs.iter().any(|&v| self.nodes[v.0].requires_grad);
        let origin = if requires_grad { Origin::Op(op, Box::new(rule)) } else { Origin::Leaf };
        Ok(self.push(Node { value: output, inputs: inputs.to_vec(), requires_grad, origin }))
    }

    /// Copies a value into a fresh constant leaf, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let value = self.try_value(v)?.clone();
        Ok(self.constant(value))
    }

    /// Reverse-mode pass from a scalar `loss`. Returns gradients for every
    /// reachable leaf and parameter that requires one, then clears the graph.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        let root = self.node(loss)?;
        if root.value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(root.value.shape().to_vec()));
        }
        if !root.requires_grad {
            return Err(TensorError::DetachedLoss);
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Origin::Op(op, rule) = &node.origin else {
                continue;
            };
            let Some(grad) = grads[i].take() else {
                continue;
            };
            let ctx = BackwardCtx {
                inputs: node.inputs.iter().map(|v| &self.nodes[v.0].value).collect(),
                needs: node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect(),
                output: &node.value,
                grad: &grad,
            };
            let input_grads = rule.backward(&ctx)?;
            for (slot, (v, g)) in node.inputs.iter().zip(input_grads).enumerate() {
                let Some(g) = g else { continue };
                if !ctx.needs[slot] {
                    continue;
                }
                debug_assert_eq!(g.len(), self.nodes[v.0].value.numel(), "{op}: grad length");
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(TensorError::NonFinite { op });
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }

        let mut out = Gradients::default();
        let mut params: BTreeMap<ParamKey, Vec<f32>> = BTreeMap::new();
        for (i, g) in grads.into_iter().enumerate() {
            let Some(g) = g else { continue };
            let node = &self.nodes[i];
            match node.origin {
                Origin::Leaf if node.requires_grad => {
                    out.leaves.push((Var(i), Tensor::from_parts(node.value.shape().to_vec(), g)))
                }
                Origin::Param(key) => match params.get_mut(&key) {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => {
                        params.insert(key, g);
                    }
                },
                _ => {}
            }
        }
        for (key, g) in params {
            let shape = self.param_shape(key);
            out.params.push((key, Tensor::from_parts(shape, g)));
        }
        self.clear();
        Ok(out)
    }

    fn param_shape(&self, key: ParamKey) -> Vec<usize> {
        self.nodes
            .iter()
            .find(|n| matches!(n.origin, Origin::Param(k) if k == key))
            .map(|n| n.value.shape().to_vec())
            .expect("param key recorded on graph")
    }
}
