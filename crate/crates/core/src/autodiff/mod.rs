//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! A [`Graph`] owns every value produced during one forward pass, in the
//! order the operations were recorded. Inputs of a node are always earlier
//! nodes or leaves, so a single reverse sweep in [`Graph::backward`] visits
//! the tape in reverse topological order. Gradients accumulate additively
//! across fan-out.

mod kernels;
mod ops;

use std::collections::HashMap;
use std::sync::Arc;

pub use kernels::ConvGeom;

use crate::error::{shape_err, Error, Result};
use crate::params::{ParamId, ParamStore, RunningUpdate};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product for a user-defined op: given the output gradient
/// and the input values, returns one gradient per input.
pub type CustomBackward = Arc<dyn Fn(&Tensor, &[&Tensor]) -> Vec<Tensor> + Send + Sync>;

#[derive(Clone)]
pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Conv { x: Var, w: Var, geom: ConvGeom },
    Relu(Var),
    Sigmoid(Var),
    Softmax { x: Var, axis: usize },
    Mean { x: Var, keep_shape: Vec<usize>, count: usize },
    Sum(Var),
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    BatchNormEval { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    CrossEntropy { scores: Var, labels: Vec<usize>, probs: Vec<f64> },
    Custom { inputs: Vec<Var>, backward: CustomBackward },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by leaf.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    running: Vec<RunningUpdate>,
    probes: Option<Vec<(String, Var)>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph that also keeps named intermediate values (see [`Graph::probe`]).
    pub fn with_probes() -> Self {
        Self { probes: Some(Vec::new()), ..Self::default() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Registers a stored parameter as a leaf. Repeated calls with the same
    /// id return the same variable. Frozen and buffer entries do not track
    /// gradients.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let e = store.entry(id);
        let v = self.leaf(e.value.clone(), e.requires_grad());
        self.params.insert(id, v);
        v
    }

    /// Parameter leaves registered on this graph, sorted by id.
    pub fn param_vars(&self) -> Vec<(ParamId, Var)> {
        let mut v: Vec<_> = self.params.iter().map(|(&p, &v)| (p, v)).collect();
        v.sort();
        v
    }

    /// Adds every registered parameter's gradient into the store.
    pub fn accumulate_param_grads(&self, grads: &Gradients, store: &mut ParamStore) {
        for (id, var) in self.param_vars() {
            if let Some(g) = grads.get(var) {
                store.accumulate_grad(id, g);
            }
        }
    }

    pub fn push_running_update(&mut self, u: RunningUpdate) {
        self.running.push(u);
    }

    pub fn take_running_updates(&mut self) -> Vec<RunningUpdate> {
        std::mem::take(&mut self.running)
    }

    /// Records `v` under `name` when the graph was built with probes.
    pub fn probe(&mut self, name: impl Into<String>, v: Var) {
        if let Some(p) = &mut self.probes {
            p.push((name.into(), v));
        }
    }

    pub fn probing(&self) -> bool {
        self.probes.is_some()
    }

    pub fn probes(&self) -> Vec<(&str, &Tensor)> {
        match &self.probes {
            Some(p) => p.iter().map(|(n, v)| (n.as_str(), self.value(*v))).collect(),
            None => Vec::new(),
        }
    }

    /// Name of the first recorded value containing a non-finite entry.
    pub fn first_non_finite(&self) -> Option<String> {
        self.nodes.iter().enumerate().find(|(_, n)| !n.value.all_finite()).map(|(i, n)| {
            let probe = self
                .probes
                .as_ref()
                .and_then(|p| p.iter().find(|(_, v)| v.0 == i).map(|(name, _)| name.clone()));
            let param = self.params.iter().find(|(_, v)| v.0 == i).map(|(p, _)| p.0);
            match (probe, param) {
                (Some(name), _) => name,
                (None, Some(p)) => format!("parameter #{p}"),
                (None, None) => format!("node {i} ({})", n.op.name()),
            }
        })
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let n = self.nodes.len();
        if self.nodes[loss.0].value.numel() != 1 {
            return shape_err(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        grads[loss.0] = Some(Tensor::new(self.shape(loss), vec![1.0])?);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            for (v, gi) in self.vjp(i, &g)? {
                debug_assert!(v.0 < i, "tape order violated");
                debug_assert_eq!(gi.shape(), self.shape(v));
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&gi),
                    slot @ None => *slot = Some(gi),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::Conv { .. } => "conv",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softmax { .. } => "softmax",
            Op::Mean { .. } => "mean",
            Op::Sum(_) => "sum",
            Op::Reshape(_) => "reshape",
            Op::Permute { .. } => "permute",
            Op::BatchNorm { .. } => "batch_norm",
            Op::BatchNormEval { .. } => "batch_norm_eval",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Custom { .. } => "custom",
        }
    }
}

pub(crate) fn index_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Index(msg.into()))
}
