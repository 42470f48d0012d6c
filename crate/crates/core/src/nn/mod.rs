//! Parameterized layers on top of the tensor graph.
//!
//! Parameters live in a [`ParamStore`]; layers only hold [`ParamId`]s, so one
//! parameter can be referenced from many network positions and is still
//! stored, updated and counted exactly once.

mod budget;
mod layers;

pub use budget::{count_weights, ComponentCount, ParamBudget};
pub use layers::{Layer, LayerKind};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{BnBatchStats, Graph, Tensor, Var};

/// Running-average momentum for batch normalization statistics: the old
/// value keeps this weight.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BufferId(usize);

/// How a parameter enters the closed-form counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    /// Multiplicative weights, plus element-wise affine scale and shift.
    Weight,
    Bias,
    /// Batch normalization scale and shift.
    NormAffine,
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub role: ParamRole,
}

/// Non-learnable state saved with the model (batch-norm running stats).
#[derive(Clone, Debug)]
pub struct Buffer {
    pub name: String,
    pub value: Vec<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    buffers: Vec<Buffer>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, role: ParamRole) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
            role,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Vec<f64>) -> BufferId {
        self.buffers.push(Buffer {
            name: name.into(),
            value,
        });
        BufferId(self.buffers.len() - 1)
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn buffer(&self, id: BufferId) -> &[f64] {
        &self.buffers[id.0].value
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Vec<f64> {
        &mut self.buffers[id.0].value
    }

    pub(crate) fn buffers_mut(&mut self) -> &mut [Buffer] {
        &mut self.buffers
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn buffers(&self) -> &[Buffer] {
        &self.buffers
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count over every parameter.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Round every parameter and buffer to the nearest `f32`, the checkpoint
    /// storage precision.
    pub fn round_to_f32(&mut self) {
        for p in &mut self.params {
            for v in p.value.data_mut() {
                *v = *v as f32 as f64;
            }
        }
        for b in &mut self.buffers {
            for v in &mut b.value {
                *v = *v as f32 as f64;
            }
        }
    }

    /// Fold one batch's statistics into the running averages.
    pub fn apply_bn_update(&mut self, update: &BnUpdate) {
        let mean = &mut self.buffers[update.mean.0].value;
        for (m, b) in mean.iter_mut().zip(&update.stats.mean) {
            *m = BN_MOMENTUM * *m + (1.0 - BN_MOMENTUM) * b;
        }
        let var = &mut self.buffers[update.var.0].value;
        for (v, b) in var.iter_mut().zip(&update.stats.var) {
            *v = BN_MOMENTUM * *v + (1.0 - BN_MOMENTUM) * b;
        }
    }
}

/// Pending running-statistics update from a train-mode forward pass.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub mean: BufferId,
    pub var: BufferId,
    pub stats: BnBatchStats,
}

/// One forward pass: a fresh graph plus the lazily bound parameters it reads.
pub struct Session<'a> {
    pub graph: Graph,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    track_grads: bool,
    train: bool,
    bn_updates: Vec<BnUpdate>,
}

impl<'a> Session<'a> {
    /// `train` selects batch statistics for normalization; `track_grads`
    /// binds parameters as gradient-carrying leaves.
    pub fn new(store: &'a ParamStore, train: bool, track_grads: bool) -> Self {
        Session {
            graph: Graph::new(),
            store,
            bound: vec![None; store.len()],
            track_grads,
            train,
            bn_updates: Vec::new(),
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    /// Graph handle for a parameter; bound once per session.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let value = self.store.params[id.0].value.clone();
        let v = if self.track_grads {
            self.graph.variable(value)
        } else {
            self.graph.constant(value)
        };
        self.bound[id.0] = Some(v);
        v
    }

    pub fn push_bn_update(&mut self, update: BnUpdate) {
        self.bn_updates.push(update);
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate> {
        std::mem::take(&mut self.bn_updates)
    }

    /// Parameter gradients after backward, in store order; parameters not
    /// reached by the loss get zeros.
    pub fn param_grads(&self) -> Vec<Vec<f64>> {
        self.store
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| match self.bound[i].and_then(|v| self.graph.grad(v)) {
                Some(g) => g.to_vec(),
                None => vec![0.0; p.value.numel()],
            })
            .collect()
    }

    pub fn param_grad(&self, id: ParamId) -> Option<&[f64]> {
        self.bound[id.0].and_then(|v| self.graph.grad(v))
    }
}

/// Uniform initialization in `[-bound, bound]`.
pub(crate) fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape, data).expect("shape")
}

pub(crate) fn check_divides(what: &str, n: usize, d: usize) -> Result<()> {
    if d == 0 || n % d != 0 {
        return Err(Error::config(format!("{what}: {d} does not divide {n}")));
    }
    Ok(())
}
