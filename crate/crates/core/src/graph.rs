//! Reverse-mode differentiation over a recorded op list.
//!
//! A [`Graph`] records every op application in evaluation order. Each op
//! stores its output value and, when any input requires a gradient, a
//! vector-Jacobian product closure. [`Graph::backward`] replays the list in
//! reverse; gradient contributions are accumulated in node order, so results
//! are bit-reproducible.

use std::collections::{BTreeMap, HashMap};
use std::hash::{DefaultHasher, Hasher};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product: `(input values, output value, output gradient)`
/// to one optional gradient per input.
pub type VjpFn = Box<dyn Fn(&[&Tensor], &Tensor, &Tensor) -> Vec<Option<Tensor>>>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NodeKind {
    Constant,
    Leaf { name: String, trainable: bool },
    Op { name: &'static str },
}

struct Node {
    value: Tensor,
    inputs: Vec<Var>,
    kind: NodeKind,
    requires_grad: bool,
    vjp: Option<VjpFn>,
}

/// Whether stochastic and batch-statistics ops run in training behaviour.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Phase {
    Train,
    #[default]
    Eval,
}

pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    phase: Phase,
    dropout_seed: u64,
    dropout_calls: u64,
    op_counts: BTreeMap<&'static str, usize>,
    first_non_finite: Option<&'static str>,
    kink_margins: BTreeMap<&'static str, f64>,
    branches: DefaultHasher,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
            phase: Phase::Eval,
            dropout_seed: 0,
            dropout_calls: 0,
            op_counts: BTreeMap::new(),
            first_non_finite: None,
            kink_margins: BTreeMap::new(),
            branches: DefaultHasher::new(),
        }
    }

    pub fn with_phase(phase: Phase, dropout_seed: u64) -> Self {
        Graph {
            phase,
            dropout_seed,
            ..Self::new()
        }
    }

    pub fn phase(&self) -> Phase {
        self.phase
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

    pub fn kind(&self, v: Var) -> &NodeKind {
        &self.nodes[v.0].kind
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Number of times each named op has been recorded.
    pub fn op_count(&self, name: &str) -> usize {
        self.op_counts.get(name).copied().unwrap_or(0)
    }

    /// Records how close a piecewise-smooth op came to a nondifferentiable
    /// boundary, in units of its own input.
    pub(crate) fn note_kink_margin(&mut self, op: &'static str, margin: f64) {
        let m = self.kink_margins.entry(op).or_insert(f64::INFINITY);
        *m = m.min(margin);
    }

    /// Folds the discrete choices of a piecewise-smooth op (cell indices,
    /// argmax positions, signs) into the branch signature.
    pub(crate) fn note_branches(&mut self, choices: impl IntoIterator<Item = i64>) {
        for c in choices {
            self.branches.write_i64(c);
        }
    }

    /// Hash of every branch taken by piecewise-smooth ops. Two evaluations
    /// with equal signatures ran on the same smooth piece.
    pub fn branch_signature(&self) -> u64 {
        self.branches.finish()
    }

    /// Smallest distance to a kink over all piecewise-smooth ops recorded
    /// so far, with the op that produced it.
    pub fn kink_margin(&self) -> Option<(&'static str, f64)> {
        self.kink_margins
            .iter()
            .map(|(&k, &v)| (k, v))
            .min_by(|a, b| a.1.total_cmp(&b.1))
    }

    /// Fails if any recorded op produced a NaN or infinity.
    pub fn check_finite(&self) -> Result<()> {
        match self.first_non_finite {
            Some(op) => Err(Error::NonFinite { op: op.to_string() }),
            None => Ok(()),
        }
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Node {
            value,
            inputs: Vec::new(),
            kind: NodeKind::Constant,
            requires_grad: false,
            vjp: None,
        })
    }

    /// A named leaf; `trainable` leaves receive gradients.
    pub fn leaf(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> Var {
        self.push(Node {
            value,
            inputs: Vec::new(),
            kind: NodeKind::Leaf {
                name: name.into(),
                trainable,
            },
            requires_grad: trainable,
            vjp: None,
        })
    }

    /// Registers (once) the named parameter from `store` as a leaf.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let p = store
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        let v = self.leaf(name, p.value.clone(), !p.frozen);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Binds `name` to a fresh leaf so later [`Graph::param`] lookups of that
    /// name resolve to it instead of the store.
    pub fn bind_param(&mut self, name: &str, value: Tensor, trainable: bool) -> Var {
        let v = self.leaf(name, value, trainable);
        self.params.insert(name.to_string(), v);
        v
    }

    /// Records an op. `vjp` is dropped when no input requires a gradient.
    pub fn record(&mut self, name: &'static str, inputs: &[Var], value: Tensor, vjp: VjpFn) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        *self.op_counts.entry(name).or_insert(0) += 1;
        if self.first_non_finite.is_none() && !value.all_finite() {
            self.first_non_finite = Some(name);
        }
        self.push(Node {
            value,
            inputs: inputs.to_vec(),
            kind: NodeKind::Op { name },
            requires_grad,
            vjp: requires_grad.then_some(vjp),
        })
    }

    fn push(&mut self, node: Node) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    /// Draws the next dropout seed from this graph's stream.
    pub(crate) fn next_dropout_seed(&mut self) -> u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(self.dropout_seed);
        rng.set_stream(self.dropout_calls);
        self.dropout_calls += 1;
        rng.random()
    }

    /// Reverse-mode accumulation from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::ones(lv.shape().to_vec()));
        }
        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if let Some(vjp) = &node.vjp {
                let inputs: Vec<&Tensor> =
                    node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                let gin = vjp(&inputs, &node.value, &gout);
                debug_assert_eq!(gin.len(), node.inputs.len());
                for (input, g) in node.inputs.iter().zip(gin) {
                    let Some(g) = g else { continue };
                    if !self.nodes[input.0].requires_grad {
                        continue;
                    }
                    debug_assert_eq!(g.shape(), self.nodes[input.0].value.shape());
                    match &mut grads[input.0] {
                        Some(acc) => acc.add_assign(&g),
                        slot @ None => *slot = Some(g),
                    }
                }
            }
            if matches!(node.kind, NodeKind::Leaf { .. }) {
                grads[idx] = Some(gout);
            }
        }
        let mut leaves = BTreeMap::new();
        for (idx, g) in grads.into_iter().enumerate() {
            if let (Some(g), NodeKind::Leaf { trainable: true, .. }) = (g, &self.nodes[idx].kind) {
                leaves.insert(Var(idx), g);
            }
        }
        let names = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(idx, n)| match &n.kind {
                NodeKind::Leaf { name, .. } => Some((Var(idx), name.clone())),
                _ => None,
            })
            .collect();
        Ok(Gradients { leaves, names })
    }
}

/// Gradients of trainable leaves reached from the loss.
#[derive(Debug, Clone)]
pub struct Gradients {
    leaves: BTreeMap<Var, Tensor>,
    names: BTreeMap<Var, String>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(&v)
    }

    /// Gradient for a leaf that must be connected to the loss.
    pub fn wrt(&self, v: Var) -> Result<&Tensor> {
        self.leaves.get(&v).ok_or_else(|| {
            Error::Disconnected(self.names.get(&v).cloned().unwrap_or(format!("#{}", v.0)))
        })
    }

    /// `(leaf name, gradient)` in node order.
    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.leaves
            .iter()
            .map(|(v, g)| (self.names[v].as_str(), g))
    }

    pub fn by_name(&self) -> BTreeMap<String, Tensor> {
        self.named().map(|(n, g)| (n.to_string(), g.clone())).collect()
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }
}
