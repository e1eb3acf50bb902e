//! Define-by-run tape for reverse-mode differentiation.
//!
//! Every differentiable op pushes one node holding its output value and the
//! indices of its inputs. `Tape::backward` replays the record once in reverse,
//! accumulating gradients additively. Tensors are value-semantic; a tape and
//! the parameter store it reads from belong to a single thread.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::ops::Op;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Handle to a node on a tape. Only valid for the tape that produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

pub(crate) struct Node {
    pub op: Op,
    pub value: Tensor,
    pub needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
    consumed: bool,
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

    /// Forward value of a node.
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    /// Differentiable input that is not a named parameter (tests, probes).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// Loads a named parameter from the store. Repeated loads of the same
    /// name return the same node so gradient contributions accumulate.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store.get(name)?;
        let v = self.push_leaf(t.clone(), t.requires_grad());
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn param_vars(&self) -> impl Iterator<Item = (&str, Var)> {
        self.params.iter().map(|(n, v)| (n.as_str(), *v))
    }

    fn push_leaf(&mut self, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push(&mut self, op: Op, value: Tensor, op_name: &'static str) -> Result<Var> {
        value.check_finite(op_name)?;
        let needs_grad = op.parents().iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse pass from a scalar loss. Returns one gradient slot per node;
    /// nodes outside the loss's ancestry hold `None`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let loss_shape = self.nodes[loss.0].value.shape();
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::NonScalarLoss {
                shape: loss_shape.to_vec(),
            });
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            // Leaf gradients are kept for retrieval.
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            let (head, tail) = self.nodes.split_at(i);
            let node = &tail[0];
            let mut ctx = BackCtx {
                nodes: head,
                grads: &mut grads[..i],
            };
            node.op.backward(&node.value, &g, &mut ctx);
        }
        Ok(Gradients { grads })
    }
}

pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn of(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Runs the reverse pass and accumulates parameter gradients into the store.
/// Every `requires_grad` parameter ends up with a gradient slot; parameters
/// unreachable from the loss receive zeros.
pub fn backward(loss: Var, tape: &mut Tape, store: &mut ParamStore) -> Result<()> {
    let grads = tape.backward(loss)?;
    for (name, var) in tape.param_vars() {
        if let Some(g) = grads.of(var) {
            store.accumulate_grad(name, g)?;
        }
    }
    store.ensure_grad_slots();
    Ok(())
}

/// View of the earlier portion of the tape during the reverse pass.
pub(crate) struct BackCtx<'a> {
    nodes: &'a [Node],
    grads: &'a mut [Option<Vec<f64>>],
}

impl<'a> BackCtx<'a> {
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Accumulate into the gradient of `v` through a closure; skipped
    /// entirely when `v` does not require gradients.
    pub fn add<F: FnOnce(&mut [f64])>(&mut self, v: Var, f: F) {
        if !self.needs(v) {
            return;
        }
        let numel = self.nodes[v.0].value.numel();
        let slot = self.grads[v.0].get_or_insert_with(|| vec![0.0; numel]);
        f(slot);
    }
}
