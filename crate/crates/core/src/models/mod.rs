//! Student encoders with structurally reparameterizable blocks, plus the
//! ensemble-embedding construction for teachers.

mod checkpoint;
mod clip;
mod image;
mod layers;
mod rep;
mod text;

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::numerics::{Graph, Matrix, NodeId, NumericsError, Scalar};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use clip::{ClipConfig, ClipModel};
pub use image::{ToyImageEncoder, ToyImageEncoderConfig};
pub use layers::{AttnBlock, BatchNorm, LayerNormAffine, Linear};
pub use rep::{
    fold_bn, identity_kernel, Branch, BranchKind, ConvBnBranch, ConvFfn, RepBlock, RepForm,
};
pub use text::{HybridTextEncoder, HybridTextEncoderConfig, Tokenizer, EOT, PAD, SOT, UNK};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("token {token} outside vocabulary of {vocab}")]
    TokenOutOfVocab { token: u32, vocab: usize },
    #[error("expected {expected:?} input, got {got:?}")]
    DimMismatch {
        expected: (u32, u32),
        got: (u32, u32),
    },
    #[error("branch kernel extent {got} differs from block extent {expected}")]
    KernelExtentMismatch { expected: usize, got: usize },
    #[error("input {index} has norm {norm}, expected 1")]
    NonUnitInput { index: usize, norm: f64 },
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    /// Trainable, weight-decayed.
    Weight,
    /// Trainable, excluded from weight decay (biases, norms, embeddings, logit scale).
    NoDecay,
    /// Stored state that is not trained (batch-norm running statistics).
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T: Scalar = f32> {
    pub name: String,
    pub value: Matrix<T>,
    pub kind: ParamKind,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, value: Matrix<T>, kind: ParamKind) -> Self {
        Self {
            name: name.into(),
            value,
            kind,
        }
    }

    pub fn trainable(&self) -> bool {
        self.kind != ParamKind::Buffer
    }

    pub fn cast<U: Scalar>(&self) -> Param<U> {
        Param {
            name: self.name.clone(),
            value: self.value.cast(),
            kind: self.kind,
        }
    }
}

/// Anything owning named parameters.
pub trait Module<T: Scalar> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>));

    /// Stored scalars, buffers included.
    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| n += p.value.len());
        n
    }

    fn trainable_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| {
            if p.trainable() {
                n += p.value.len()
            }
        });
        n
    }

    fn params(&self) -> Vec<&Param<T>> {
        let mut out = Vec::new();
        self.visit(&mut |p| out.push(p));
        out
    }
}

/// How batch-norm layers normalize during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics; running statistics are collected for later update.
    Batch,
    /// Stored running statistics.
    Running,
}

/// Forward-pass context: the graph plus name → node bindings of parameters.
pub struct Ctx<'g, T: Scalar = f32> {
    pub g: &'g mut Graph<T>,
    pub bn: BnMode,
    bound: HashMap<String, NodeId>,
    leaves: usize,
    start: usize,
    bn_nodes: Vec<(String, NodeId)>,
}

impl<'g, T: Scalar> Ctx<'g, T> {
    pub fn new(g: &'g mut Graph<T>, bn: BnMode) -> Self {
        let start = g.len();
        Self {
            g,
            bn,
            bound: HashMap::new(),
            leaves: 0,
            start,
            bn_nodes: Vec::new(),
        }
    }

    /// Node for `p`, created on first use.
    pub fn bind(&mut self, p: &Param<T>) -> NodeId {
        if let Some(&id) = self.bound.get(&p.name) {
            return id;
        }
        let id = match p.kind {
            ParamKind::Buffer => self.g.constant(p.value.clone()),
            _ => self.g.param(p.value.clone()),
        };
        self.leaves += 1;
        self.bound.insert(p.name.clone(), id);
        id
    }

    pub fn constant(&mut self, m: Matrix<T>) -> NodeId {
        self.leaves += 1;
        self.g.constant(m)
    }

    pub fn node_of(&self, name: &str) -> Option<NodeId> {
        self.bound.get(name).copied()
    }

    /// Non-leaf nodes recorded since this context was created.
    pub fn op_count(&self) -> usize {
        self.g.len() - self.start - self.leaves
    }

    pub(crate) fn record_bn(&mut self, prefix: &str, node: NodeId) {
        self.bn_nodes.push((prefix.to_string(), node));
    }

    /// Batch-norm nodes recorded in [`BnMode::Batch`], keyed by layer prefix.
    pub fn bn_nodes(&self) -> &[(String, NodeId)] {
        &self.bn_nodes
    }
}

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// Moves running statistics toward the batch statistics recorded during a
/// [`BnMode::Batch`] forward (unbiased variance).
pub fn update_bn_running<T: Scalar, M: Module<T> + ?Sized>(
    model: &mut M,
    g: &Graph<T>,
    bn_nodes: &[(String, NodeId)],
    rows: usize,
    momentum: f64,
) {
    let mut stats: HashMap<String, (Vec<T>, Vec<T>)> = HashMap::new();
    for (prefix, node) in bn_nodes {
        if let Some((mean, var)) = g.batch_stats(*node) {
            let correction = if rows > 1 {
                rows as f64 / (rows as f64 - 1.0)
            } else {
                1.0
            };
            let var = var.iter().map(|&v| v * T::from_f64(correction)).collect();
            stats.insert(prefix.clone(), (mean.to_vec(), var));
        }
    }
    let m = T::from_f64(momentum);
    model.visit_mut(&mut |p| {
        let (prefix, which) = match p.name.rsplit_once('.') {
            Some(x) => x,
            None => return,
        };
        if let Some((mean, var)) = stats.get(prefix) {
            let src = match which {
                "running_mean" => mean,
                "running_var" => var,
                _ => return,
            };
            for (r, &s) in p.value.data_mut().iter_mut().zip(src) {
                *r = (T::one() - m) * *r + m * s;
            }
        }
    });
}

/// Truncated normal at ±2σ.
pub fn trunc_normal<T: Scalar>(
    rng: &mut ChaCha8Rng,
    rows: usize,
    cols: usize,
    std: f64,
) -> Matrix<T> {
    Matrix::from_fn(rows, cols, |_, _| loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return T::from_f64(z * std);
        }
    })
}

pub const INIT_STD: f64 = 0.02;
pub const UNIT_INPUT_TOL: f64 = 1e-3;

/// Concatenates per-teacher unit vectors and rescales by 1/√K, giving a unit vector
/// whose inner products are the mean of the per-teacher inner products.
pub fn ensemble_embed<T: Scalar>(per_teacher: &[&[T]]) -> Result<Vec<T>, ModelError> {
    if per_teacher.is_empty() {
        return Err(ModelError::InvalidConfig("no teacher embeddings".into()));
    }
    for (index, v) in per_teacher.iter().enumerate() {
        let norm = v
            .iter()
            .map(|&x| Scalar::to_f64(x).powi(2))
            .sum::<f64>()
            .sqrt();
        if !((norm - 1.0).abs() <= UNIT_INPUT_TOL) {
            return Err(ModelError::NonUnitInput { index, norm });
        }
    }
    let scale = T::from_f64(1.0 / (per_teacher.len() as f64).sqrt());
    Ok(per_teacher
        .iter()
        .flat_map(|v| v.iter().map(move |&x| x * scale))
        .collect())
}
