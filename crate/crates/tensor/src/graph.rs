//! Operation tape and reverse-mode sweep.
//!
//! Every differentiable operation appends one node holding its forward value,
//! the indices of its inputs and a [`BackwardOp`] that maps the output
//! gradient to input gradients. [`Graph::backward`] walks the tape in reverse
//! order and accumulates gradients on fan-out.

use std::collections::HashMap;

use crate::error::{invalid, Result, TensorError};
use crate::params::ParamTree;
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`] tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Whether batch statistics or running statistics drive normalization layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Context handed to a [`BackwardOp`].
pub struct BackwardCtx<'a> {
    pub inputs: Vec<&'a Tensor>,
    pub output: &'a Tensor,
    pub grad: &'a Tensor,
    /// `needs[i]` is false when input `i` does not require a gradient; ops may
    /// return `None` for it.
    pub needs: Vec<bool>,
}

pub trait BackwardOp {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>>;
}

impl<F> BackwardOp for F
where
    F: Fn(&BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>>,
{
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        self(ctx)
    }
}

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    op: Option<Box<dyn BackwardOp>>,
    requires_grad: bool,
}

/// Running-statistics update produced by a batch-norm layer in train mode.
#[derive(Debug, Clone)]
pub struct StatUpdate {
    pub mean_name: String,
    pub var_name: String,
    pub batch_mean: Vec<f64>,
    pub batch_var_unbiased: Vec<f64>,
    pub momentum: f64,
}

/// A single forward/backward session.
///
/// Parameters are read from a borrowed [`ParamTree`] and bound lazily as
/// leaves the first time a layer asks for them, so a parameter used several
/// times (shared modules, repeated solver steps) maps to one leaf and its
/// gradient accumulates.
pub struct Graph<'p> {
    nodes: Vec<Node>,
    params: Option<&'p ParamTree>,
    bound: HashMap<String, Var>,
    mode: Mode,
    stat_updates: Vec<StatUpdate>,
    grads: Vec<Option<Tensor>>,
}

impl<'p> Graph<'p> {
    pub fn new(mode: Mode) -> Self {
        Self {
            nodes: Vec::new(),
            params: None,
            bound: HashMap::new(),
            mode,
            stat_updates: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn with_params(params: &'p ParamTree, mode: Mode) -> Self {
        let mut g = Self::new(mode);
        g.params = Some(params);
        g
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn params(&self) -> Result<&'p ParamTree> {
        self.params
            .ok_or_else(|| invalid("params", "graph has no parameter tree attached"))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives a gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push_leaf(t, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_leaf(t, false)
    }

    fn push_leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: t.detached(),
            parents: Vec::new(),
            op: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a named parameter as a leaf (once per graph).
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let p = self.params()?.get(name)?;
        let v = self.push_leaf(p.tensor.detached(), p.trainable);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Records a computed value. `op` is dropped when no input needs a
    /// gradient.
    pub fn push_op(&mut self, value: Tensor, inputs: &[Var], op: Box<dyn BackwardOp>) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            parents: inputs.iter().map(|v| v.0).collect(),
            op: if requires_grad { Some(op) } else { None },
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

    pub fn record_stat_update(&mut self, u: StatUpdate) {
        self.stat_updates.push(u);
    }

    pub fn take_stat_updates(&mut self) -> Vec<StatUpdate> {
        std::mem::take(&mut self.stat_updates)
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.nodes[loss.0].value.shape().to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(&shape, 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if let Some(op) = node.op.as_ref() {
                let ctx = BackwardCtx {
                    inputs: node.parents.iter().map(|&p| &self.nodes[p].value).collect(),
                    output: &node.value,
                    grad: &grad,
                    needs: node
                        .parents
                        .iter()
                        .map(|&p| self.nodes[p].requires_grad)
                        .collect(),
                };
                let input_grads = op.backward(&ctx)?;
                for (&p, g) in node.parents.iter().zip(input_grads) {
                    let Some(g) = g else { continue };
                    if !self.nodes[p].requires_grad {
                        continue;
                    }
                    if g.shape() != self.nodes[p].value.shape() {
                        return Err(invalid(
                            "backward",
                            format!(
                                "gradient shape {:?} does not match input shape {:?}",
                                g.shape(),
                                self.nodes[p].value.shape()
                            ),
                        ));
                    }
                    match grads[p].as_mut() {
                        Some(acc) => acc.add_assign_slice(g.data()),
                        None => grads[p] = Some(g),
                    }
                }
            }
            grads[idx] = Some(grad);
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the last backward sweep with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of every bound trainable parameter, by name.
    pub fn param_grads(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .bound
            .iter()
            .filter(|(_, v)| self.nodes[v.0].requires_grad)
            .map(|(name, v)| {
                let g = self
                    .grad(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.nodes[v.0].value.shape()));
                (name.clone(), g)
            })
            .collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }
}
