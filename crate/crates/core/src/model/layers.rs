use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::{Initializer, ParamStore};
use crate::error::{Error, Result};
use crate::numerics::{BatchStats, Tape, Tensor, Var};

/// Batch statistics in `Train`, running statistics in `Eval`. Dropout is
/// active only in `Train`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// One forward evaluation: a fresh tape plus the parameters it reads.
///
/// Parameters are bound to the tape lazily and once per path, so a module used
/// twice in the same pass (the encoder on `X` and on `Ŷ`) shares its weights
/// and accumulates both gradient contributions.
pub struct Forward<'p> {
    pub tape: Tape,
    params: &'p ParamStore,
    bound: HashMap<String, Var>,
    mode: Mode,
    track_grads: bool,
    bn_bypass: bool,
    dropout_rng: ChaCha8Rng,
    bn_updates: Vec<(String, BatchStats)>,
}

impl<'p> Forward<'p> {
    pub fn new(params: &'p ParamStore, mode: Mode) -> Self {
        Forward {
            tape: Tape::new(),
            params,
            bound: HashMap::new(),
            mode,
            track_grads: mode == Mode::Train,
            bn_bypass: false,
            dropout_rng: ChaCha8Rng::seed_from_u64(0),
            bn_updates: Vec::new(),
        }
    }

    /// Seeds the dropout mask generator.
    pub fn with_dropout_seed(mut self, seed: u64) -> Self {
        self.dropout_rng = ChaCha8Rng::seed_from_u64(seed);
        self
    }

    /// Whether trainable parameters become gradient leaves (default: only in `Train`).
    pub fn with_grads(mut self, on: bool) -> Self {
        self.track_grads = on;
        self
    }

    /// Replaces every batch normalization by the identity. Only meant for
    /// closed-form layer tests.
    pub fn with_bn_bypass(mut self) -> Self {
        self.bn_bypass = true;
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Tape variable for a parameter path.
    pub fn p(&mut self, path: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(path) {
            return Ok(v);
        }
        let value = self.params.param(path)?.clone();
        let v = if self.track_grads && !self.params.is_frozen(path) {
            self.tape.param(path, value)
        } else {
            self.tape.constant(value)
        };
        self.bound.insert(path.to_string(), v);
        Ok(v)
    }

    /// Running-statistic updates gathered from train-mode batch norms, in execution order.
    pub fn take_bn_updates(&mut self) -> Vec<(String, BatchStats)> {
        std::mem::take(&mut self.bn_updates)
    }

    pub fn batch_norm(&mut self, prefix: &str, x: Var) -> Result<Var> {
        if self.bn_bypass {
            return Ok(x);
        }
        let gamma = self.p(&format!("{prefix}.gamma"))?;
        let beta = self.p(&format!("{prefix}.beta"))?;
        match self.mode {
            Mode::Train => {
                let y = self.tape.batch_norm_train(x, gamma, beta, BN_EPS)?;
                let stats = self.tape.batch_stats(y).expect("train batch norm records statistics");
                self.bn_updates.push((prefix.to_string(), stats));
                Ok(y)
            }
            Mode::Eval => {
                let rm = self.params.buffer(&format!("{prefix}.running_mean"))?.data().to_vec();
                let rv = self.params.buffer(&format!("{prefix}.running_var"))?.data().to_vec();
                self.tape.batch_norm_eval(x, gamma, beta, &rm, &rv, BN_EPS)
            }
        }
    }

    /// Inverted dropout in `Train`, identity in `Eval`.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if self.mode == Mode::Eval || rate <= 0.0 {
            return Ok(x);
        }
        if rate >= 1.0 {
            return Err(Error::InvalidArgument(format!("dropout rate {rate} must be below 1")));
        }
        let keep = 1.0 - rate;
        let n = self.tape.value(x).numel();
        let rng = &mut self.dropout_rng;
        let mask = (0..n)
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        self.tape.mul_const(x, mask)
    }

    pub fn linear(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let w = self.p(&format!("{prefix}.weight"))?;
        let b = self.p(&format!("{prefix}.bias"))?;
        let y = self.tape.matmul(x, w)?;
        self.tape.add_bias(y, b)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }
}

/// Shape of one GCN→TCN residual block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
}

impl BlockSpec {
    pub fn has_shortcut(&self) -> bool {
        self.c_in != self.c_out
    }

    pub fn param_count(&self) -> usize {
        let (ci, co, ks) = (self.c_in, self.c_out, self.kernel);
        let gcn = ci * ci + 2 * ci;
        let tcn = ks * ci * co + co + 2 * co;
        let shortcut = if self.has_shortcut() { ci * co + co } else { 0 };
        gcn + tcn + shortcut
    }

    pub(crate) fn init(&self, init: &mut Initializer, store: &mut ParamStore, prefix: &str) {
        let (ci, co, ks) = (self.c_in, self.c_out, self.kernel);
        store.insert_param(format!("{prefix}.gcn.weight"), init.uniform(&[ci, ci], ci));
        init.batch_norm(store, &format!("{prefix}.gcn.bn"), ci);
        store.insert_param(format!("{prefix}.tcn.weight"), init.uniform(&[ks, ci, co], ks * ci));
        store.insert_param(format!("{prefix}.tcn.bias"), Tensor::zeros([co]));
        init.batch_norm(store, &format!("{prefix}.tcn.bn"), co);
        if self.has_shortcut() {
            init.linear(store, &format!("{prefix}.shortcut"), ci, co);
        }
    }
}

/// `σ(BN(Ã · h · W))` on `[B, T, J, C]`.
pub fn gcn_forward(fw: &mut Forward, prefix: &str, h: Var, adj: &Arc<Tensor>, slope: f64) -> Result<Var> {
    let w = fw.p(&format!("{prefix}.weight"))?;
    let c = fw.tape.value(h).last_dim();
    if fw.tape.shape(w) != [c, c] {
        return Err(Error::Shape(format!(
            "{prefix}: GCN weight {:?} for {c} channels",
            fw.tape.shape(w)
        )));
    }
    let mixed = fw.tape.graph_mix(h, adj.clone())?;
    let z = fw.tape.matmul(mixed, w)?;
    let z = fw.batch_norm(&format!("{prefix}.bn"), z)?;
    Ok(fw.tape.leaky_relu(z, slope))
}

/// `σ(BN(conv_T(h) + b))` with same padding along time.
pub fn tcn_forward(fw: &mut Forward, prefix: &str, h: Var, slope: f64) -> Result<Var> {
    let w = fw.p(&format!("{prefix}.weight"))?;
    let b = fw.p(&format!("{prefix}.bias"))?;
    let z = fw.tape.temporal_conv(h, w, b)?;
    let z = fw.batch_norm(&format!("{prefix}.bn"), z)?;
    Ok(fw.tape.leaky_relu(z, slope))
}

/// `TCN(GCN(h)) + shortcut(h)`; the shortcut is a 1×1 projection when channel counts differ.
pub fn block_forward(
    fw: &mut Forward,
    prefix: &str,
    spec: &BlockSpec,
    h: Var,
    adj: &Arc<Tensor>,
    slope: f64,
) -> Result<Var> {
    let c = fw.tape.value(h).last_dim();
    if c != spec.c_in {
        return Err(Error::Shape(format!(
            "{prefix}: expected {} channels, got {c}",
            spec.c_in
        )));
    }
    let g = gcn_forward(fw, &format!("{prefix}.gcn"), h, adj, slope)?;
    let t = tcn_forward(fw, &format!("{prefix}.tcn"), g, slope)?;
    let skip = if spec.has_shortcut() {
        fw.linear(&format!("{prefix}.shortcut"), h)?
    } else {
        h
    };
    fw.tape.add(t, skip)
}
