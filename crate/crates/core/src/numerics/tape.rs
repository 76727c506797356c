use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use super::{Array, ParamId, ParamStore};
use crate::error::{Error, Result};

/// A differentiable operation recorded on the tape.
///
/// `eval` must be a pure function of its inputs so that replaying the tape
/// reproduces every node bit for bit.
pub trait Primitive {
    fn name(&self) -> &'static str;

    fn eval(&self, inputs: &[&Array]) -> Result<Array>;

    /// Vector-Jacobian product. Returns one entry per input; entries whose
    /// `needs[i]` is false may be `None`.
    fn vjp(&self, inputs: &[&Array], output: &Array, grad: &Array, needs: &[bool])
        -> Vec<Option<Array>>;

    /// How far the inputs sit from the nearest point where this operation is
    /// not differentiable (relu at zero, ties under max or sort). Smooth
    /// operations report infinity.
    fn kink_margin(&self, _inputs: &[&Array]) -> f64 {
        f64::INFINITY
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Source {
    Constant,
    Input,
    Param(ParamId),
    Op(Rc<dyn Primitive>),
}

struct Node {
    source: Source,
    inputs: Vec<Var>,
    value: Array,
    requires_grad: bool,
}

/// Ordered record of executed primitives.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.nodes.len()).finish()
    }
}

/// Gradients of one backward pass, indexed by tape node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Array> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
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

    /// A value that never receives gradient.
    pub fn constant(&mut self, value: Array) -> Var {
        self.push_leaf(Source::Constant, value, false)
    }

    /// A value whose gradient is tracked and reported by [`Gradients::wrt`].
    pub fn input(&mut self, value: Array) -> Var {
        self.push_leaf(Source::Input, value, true)
    }

    /// Loads a parameter onto the tape; repeated calls return the same handle.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push_leaf(Source::Param(id), store.value(id).clone(), true);
        self.param_vars.insert(id, v);
        v
    }

    /// Copies a value into a fresh constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    fn push_leaf(&mut self, source: Source, value: Array, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            source,
            inputs: Vec::new(),
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Names of the recorded primitives in execution order (leaves excluded).
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.source {
                Source::Op(p) => Some(p.name()),
                _ => None,
            })
            .collect()
    }

    pub fn apply(&mut self, op: impl Primitive + 'static, inputs: &[Var]) -> Result<Var> {
        self.apply_rc(Rc::new(op), inputs)
    }

    pub fn apply_rc(&mut self, op: Rc<dyn Primitive>, inputs: &[Var]) -> Result<Var> {
        let value = {
            let vals: Vec<&Array> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            op.eval(&vals)?
        };
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            source: Source::Op(op),
            inputs: inputs.to_vec(),
            value,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Re-evaluates every primitive from the recorded leaves.
    pub fn replay(&self) -> Result<Vec<Array>> {
        let mut values: Vec<Array> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match &node.source {
                Source::Op(op) => {
                    let vals: Vec<&Array> = node.inputs.iter().map(|v| &values[v.0]).collect();
                    op.eval(&vals)?
                }
                _ => node.value.clone(),
            };
            values.push(v);
        }
        Ok(values)
    }

    /// Reverse pass from `output` seeded with `cotangent`. Parameter gradients
    /// are added into `store` in tape order.
    pub fn backward(
        &self,
        output: Var,
        cotangent: &Array,
        store: &mut ParamStore,
    ) -> Result<Gradients> {
        let out_shape = self.nodes[output.0].value.shape();
        if out_shape != cotangent.shape() {
            return Err(Error::shape("backward", out_shape, cotangent.shape()));
        }
        let mut grads: Vec<Option<Array>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(cotangent.clone());

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            let Source::Op(op) = &node.source else {
                continue;
            };
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let vals: Vec<&Array> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|v| self.nodes[v.0].requires_grad)
                .collect();
            let input_grads = op.vjp(&vals, &node.value, &g, &needs);
            for ((input, grad), need) in node.inputs.iter().zip(input_grads).zip(&needs) {
                let (Some(grad), true) = (grad, *need) else {
                    continue;
                };
                debug_assert_eq!(grad.shape(), self.nodes[input.0].value.shape(), "{}", op.name());
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&grad),
                    slot @ None => *slot = Some(grad),
                }
            }
            grads[idx] = Some(g);
        }

        for (idx, node) in self.nodes.iter().enumerate() {
            if let (Source::Param(id), Some(g)) = (&node.source, &grads[idx]) {
                store.accumulate_grad(*id, g);
            }
        }
        Ok(Gradients { grads })
    }

    /// Smallest [`Primitive::kink_margin`] over every recorded operation.
    pub fn kink_margin(&self) -> f64 {
        self.nodes
            .iter()
            .filter_map(|node| match &node.source {
                Source::Op(op) => {
                    let vals: Vec<&Array> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                    Some(op.kink_margin(&vals))
                }
                _ => None,
            })
            .fold(f64::INFINITY, f64::min)
    }

    /// Backward pass for a scalar output with unit seed.
    pub fn backward_scalar(&self, output: Var, store: &mut ParamStore) -> Result<Gradients> {
        if self.nodes[output.0].value.len() != 1 {
            return Err(Error::contract(format!(
                "backward_scalar on non-scalar output of shape {:?}",
                self.shape(output)
            )));
        }
        let seed = Array::new(self.shape(output).to_vec(), vec![1.0])?;
        self.backward(output, &seed, store)
    }
}
