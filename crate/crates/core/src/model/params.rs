use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{BatchStats, Tensor};

/// Learnable weights and batch-norm buffers keyed by stable path names.
///
/// Paths look like `encoder.block3.tcn.weight`. Buffers (running statistics)
/// are stored separately and never touched by the optimizer; frozen paths are
/// trainable tensors excluded from optimization.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    buffers: BTreeMap<String, Tensor>,
    frozen: BTreeSet<String>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert_param(&mut self, path: impl Into<String>, value: Tensor) {
        self.params.insert(path.into(), value);
    }

    pub fn insert_buffer(&mut self, path: impl Into<String>, value: Tensor) {
        self.buffers.insert(path.into(), value);
    }

    pub fn param(&self, path: &str) -> Result<&Tensor> {
        self.params
            .get(path)
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {path}")))
    }

    pub fn param_mut(&mut self, path: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(path)
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {path}")))
    }

    pub fn buffer(&self, path: &str) -> Result<&Tensor> {
        self.buffers
            .get(path)
            .ok_or_else(|| Error::InvalidArgument(format!("missing buffer {path}")))
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn buffers(&self) -> &BTreeMap<String, Tensor> {
        &self.buffers
    }

    pub fn is_frozen(&self, path: &str) -> bool {
        self.frozen.contains(path)
    }

    pub fn freeze(&mut self, path: &str) -> Result<()> {
        self.param(path)?;
        self.frozen.insert(path.to_string());
        Ok(())
    }

    /// Freezes every parameter whose path starts with `prefix`.
    pub fn freeze_prefix(&mut self, prefix: &str) {
        let hits: Vec<String> = self.params.keys().filter(|p| p.starts_with(prefix)).cloned().collect();
        self.frozen.extend(hits);
    }

    pub fn frozen(&self) -> impl Iterator<Item = &String> {
        self.frozen.iter()
    }

    /// Parameters the optimizer may update.
    pub fn trainable_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        let frozen = &self.frozen;
        self.params.iter_mut().filter(move |(p, _)| !frozen.contains(*p))
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|(p, _)| !self.frozen.contains(*p))
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Number of scalar parameters under `prefix` (buffers excluded).
    pub fn count(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(p, _)| p.starts_with(prefix))
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Copies every parameter and buffer under `prefix` from `other`.
    pub fn copy_prefix_from(&mut self, other: &ParamStore, prefix: &str) -> Result<()> {
        let mut copied = 0;
        for (p, t) in other.params.iter().filter(|(p, _)| p.starts_with(prefix)) {
            let slot = self.param_mut(p)?;
            if slot.shape() != t.shape() {
                return Err(Error::Shape(format!("{p}: {:?} vs {:?}", slot.shape(), t.shape())));
            }
            *slot = t.clone();
            copied += 1;
        }
        for (p, t) in other.buffers.iter().filter(|(p, _)| p.starts_with(prefix)) {
            self.buffers.insert(p.clone(), t.clone());
        }
        if copied == 0 {
            return Err(Error::InvalidArgument(format!("no parameters under {prefix}")));
        }
        Ok(())
    }

    /// Exponential moving update of batch-norm running statistics.
    ///
    /// The running variance tracks the unbiased batch variance.
    pub fn apply_bn_updates(&mut self, updates: &[(String, BatchStats)], momentum: f64) -> Result<()> {
        for (prefix, stats) in updates {
            let n = stats.count as f64;
            let unbias = if stats.count > 1 { n / (n - 1.0) } else { 1.0 };
            let mean_path = format!("{prefix}.running_mean");
            let var_path = format!("{prefix}.running_var");
            let rm = self
                .buffers
                .get_mut(&mean_path)
                .ok_or_else(|| Error::InvalidArgument(format!("missing buffer {mean_path}")))?;
            for (r, m) in rm.data_mut().iter_mut().zip(&stats.mean) {
                *r = (1.0 - momentum) * *r + momentum * m;
            }
            let rv = self
                .buffers
                .get_mut(&var_path)
                .ok_or_else(|| Error::InvalidArgument(format!("missing buffer {var_path}")))?;
            for (r, v) in rv.data_mut().iter_mut().zip(&stats.var) {
                *r = (1.0 - momentum) * *r + momentum * v * unbias;
            }
        }
        Ok(())
    }

    /// Sets every parameter under `prefix` to zero.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for (_, t) in self.params.iter_mut().filter(|(p, _)| p.starts_with(prefix)) {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// Deterministic initializer: fan-in scaled uniform weights, zero biases,
/// unit BN scale and zero BN shift.
pub(crate) struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Initializer {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn uniform(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let rng = &mut self.rng;
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-bound..bound))
    }

    pub fn batch_norm(&mut self, store: &mut ParamStore, prefix: &str, channels: usize) {
        store.insert_param(format!("{prefix}.gamma"), Tensor::ones([channels]));
        store.insert_param(format!("{prefix}.beta"), Tensor::zeros([channels]));
        store.insert_buffer(format!("{prefix}.running_mean"), Tensor::zeros([channels]));
        store.insert_buffer(format!("{prefix}.running_var"), Tensor::ones([channels]));
    }

    pub fn linear(&mut self, store: &mut ParamStore, prefix: &str, fan_in: usize, fan_out: usize) {
        store.insert_param(format!("{prefix}.weight"), self.uniform(&[fan_in, fan_out], fan_in));
        store.insert_param(format!("{prefix}.bias"), Tensor::zeros([fan_out]));
    }
}
