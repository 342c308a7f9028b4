use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::layers::{block_forward, BlockSpec, Forward, Mode};
use super::params::{Initializer, ParamStore};
use crate::error::{Error, Result};
use crate::numerics::{Tensor, Var};
use crate::posenc::{positional_embedding, PosEncConfig};
use crate::skeleton::{GraphType, KinematicTree};

/// Frame differences are orders of magnitude smaller than poses; the AR head
/// sees them amplified.
pub const AR_VELOCITY_GAIN: f64 = 10.0;

/// What the frame decoder sees at every joint.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderInput {
    /// `f_t` alone, identical at every joint.
    Tiled,
    /// `f_t` concatenated with the seed pose of each joint.
    #[default]
    SeedConcat,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// Encoder, frame-parallel decoder and action classifier.
    #[default]
    Nat,
    /// Encoder plus a step-by-step residual head.
    Ar,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Parent index per joint, `-1` for the root.
    pub parents: Vec<i64>,
    pub graph: GraphType,
    /// Temporal kernel size of the encoder blocks.
    pub kernel: usize,
    pub encoder_channels: Vec<usize>,
    pub decoder_channels: Vec<usize>,
    pub decoder_input: DecoderInput,
    pub arc_hidden: Vec<usize>,
    pub classes: usize,
    pub alpha: f64,
    pub beta: f64,
    pub dropout: f64,
    pub leaky_slope: f64,
    pub ar_hidden: usize,
    pub init_seed: u64,
}

impl ModelConfig {
    pub fn new(tree: &KinematicTree, classes: usize) -> Self {
        ModelConfig {
            kind: ModelKind::Nat,
            parents: tree.to_signed(),
            graph: GraphType::Bidirectional,
            kernel: 9,
            encoder_channels: vec![64, 64, 128, 128, 256, 256],
            decoder_channels: vec![256, 128, 128, 64, 64, 4],
            decoder_input: DecoderInput::SeedConcat,
            arc_hidden: vec![128, 64],
            classes,
            alpha: 10.0,
            beta: 500.0,
            dropout: 0.5,
            leaky_slope: 0.01,
            ar_hidden: 128,
            init_seed: 0,
        }
    }

    pub fn tree(&self) -> Result<KinematicTree> {
        KinematicTree::from_signed(&self.parents)
    }

    pub fn joints(&self) -> usize {
        self.parents.len()
    }

    /// Width of the context feature and of the positional embedding.
    pub fn context_dim(&self) -> usize {
        *self.encoder_channels.last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.encoder_channels.is_empty() || self.decoder_channels.is_empty() {
            return bad("encoder and decoder need at least one block".into());
        }
        if self.kernel.is_multiple_of(2) {
            return bad(format!("temporal kernel size must be odd, got {}", self.kernel));
        }
        if self.decoder_channels.last() != Some(&4) {
            return bad("decoder must end with 4 channels".into());
        }
        if self.kind == ModelKind::Nat && self.classes < 1 {
            return bad("at least one action class is required".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout rate {} outside [0, 1)", self.dropout));
        }
        self.posenc(1).validate()?;
        self.tree()?;
        Ok(())
    }

    pub fn posenc(&self, horizon: usize) -> PosEncConfig {
        PosEncConfig {
            d_model: self.context_dim(),
            alpha: self.alpha,
            beta: self.beta,
            horizon,
        }
    }

    pub fn encoder_blocks(&self) -> Vec<BlockSpec> {
        chain_blocks(4, &self.encoder_channels, self.kernel)
    }

    pub fn decoder_blocks(&self) -> Vec<BlockSpec> {
        let extra = match self.decoder_input {
            DecoderInput::Tiled => 0,
            DecoderInput::SeedConcat => 4,
        };
        chain_blocks(self.context_dim() + extra, &self.decoder_channels, 1)
    }

    fn arc_widths(&self) -> Vec<usize> {
        let mut w = vec![self.context_dim()];
        w.extend(&self.arc_hidden);
        w.push(self.classes);
        w
    }

    fn ar_widths(&self) -> [usize; 3] {
        let j4 = self.joints() * 4;
        [2 * j4 + self.context_dim(), self.ar_hidden, j4]
    }

    /// Closed-form number of learnable scalars.
    pub fn param_count(&self) -> usize {
        let blocks = |b: Vec<BlockSpec>| b.iter().map(BlockSpec::param_count).sum::<usize>();
        let dense = |w: &[usize]| w.windows(2).map(|p| p[0] * p[1] + p[1]).sum::<usize>();
        let enc = blocks(self.encoder_blocks());
        match self.kind {
            ModelKind::Nat => enc + blocks(self.decoder_blocks()) + dense(&self.arc_widths()),
            ModelKind::Ar => enc + dense(&self.ar_widths()),
        }
    }
}

fn chain_blocks(c_in: usize, channels: &[usize], kernel: usize) -> Vec<BlockSpec> {
    let mut prev = c_in;
    channels
        .iter()
        .map(|&c| {
            let b = BlockSpec {
                c_in: prev,
                c_out: c,
                kernel,
            };
            prev = c;
            b
        })
        .collect()
}

/// Output of an eval-mode prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// `[B, M, J, 4]`.
    pub frames: Tensor,
    /// `[B, C]` class probabilities (non-autoregressive models only).
    pub probs: Option<Tensor>,
}

/// Configuration plus learnable state.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    adjacency: Arc<Tensor>,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut init = Initializer::new(config.init_seed);
        for (i, spec) in config.encoder_blocks().iter().enumerate() {
            spec.init(&mut init, &mut params, &format!("encoder.block{i}"));
        }
        match config.kind {
            ModelKind::Nat => {
                let blocks = config.decoder_blocks();
                for (i, spec) in blocks.iter().enumerate() {
                    spec.init(&mut init, &mut params, &format!("decoder.block{i}"));
                }
                // the residual starts at zero, i.e. at the seed pose
                let last = format!("decoder.block{}", blocks.len() - 1);
                params.zero_prefix(&format!("{last}.tcn.bn.gamma"));
                params.zero_prefix(&format!("{last}.shortcut.weight"));
                for (i, w) in config.arc_widths().windows(2).enumerate() {
                    init.linear(&mut params, &format!("arc.fc{i}"), w[0], w[1]);
                }
            }
            ModelKind::Ar => {
                let w = config.ar_widths();
                init.linear(&mut params, "ar.fc0", w[0], w[1]);
                init.linear(&mut params, "ar.fc1", w[1], w[2]);
                params.zero_prefix("ar.fc1.weight");
            }
        }
        Self::from_parts(config, params)
    }

    /// Rebuilds a model around existing parameters (checkpoint loading).
    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let adjacency = Arc::new(config.tree()?.normalized_adjacency(config.graph)?);
        Ok(Model {
            config,
            params,
            adjacency,
        })
    }

    pub fn adjacency(&self) -> &Arc<Tensor> {
        &self.adjacency
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[3] != 4 || shape[1] == 0 {
            return Err(Error::Shape(format!(
                "observed frames must be [B, N>=1, J, 4], got {shape:?}"
            )));
        }
        if shape[2] != self.config.joints() {
            return Err(Error::Shape(format!(
                "input has {} joints, model expects {}",
                shape[2],
                self.config.joints()
            )));
        }
        Ok(())
    }

    /// Context features `[B, D]` from observed frames `[B, N, J, 4]`.
    pub fn encode(&self, fw: &mut Forward, x: Var) -> Result<Var> {
        self.check_input(fw.tape.shape(x))?;
        let slope = self.config.leaky_slope;
        let mut h = x;
        for (i, spec) in self.config.encoder_blocks().iter().enumerate() {
            h = block_forward(fw, &format!("encoder.block{i}"), spec, h, &self.adjacency, slope)?;
        }
        fw.tape.mean_middle(h)
    }

    /// Positional embeddings for the given 1-based frame indices.
    pub fn posenc_rows(&self, times: &[usize]) -> Tensor {
        let cfg = self.config.posenc(times.len().max(1));
        let data = times.iter().flat_map(|&t| positional_embedding(t, &cfg)).collect();
        Tensor::new([times.len(), cfg.d_model], data).expect("posenc rows")
    }

    /// Decoder residual `D(f_t)` of shape `[B, m, J, 4]` for the rows of `pe`.
    ///
    /// `y0` is the seed pose `[B, J, 4]`.
    pub fn decoder_residual(&self, fw: &mut Forward, c: Var, y0: Var, pe: Tensor) -> Result<Var> {
        let steps = pe.shape()[0];
        if steps == 0 {
            return Err(Error::InvalidArgument("prediction horizon must be at least 1".into()));
        }
        let joints = self.config.joints();
        let pe = fw.constant(pe);
        let mut h = fw.tape.tile_context(c, pe, joints)?;
        if self.config.decoder_input == DecoderInput::SeedConcat {
            let seed = fw.tape.repeat_time(y0, steps)?;
            h = fw.tape.concat_last(h, seed)?;
        }
        let slope = self.config.leaky_slope;
        for (i, spec) in self.config.decoder_blocks().iter().enumerate() {
            h = block_forward(fw, &format!("decoder.block{i}"), spec, h, &self.adjacency, slope)?;
        }
        Ok(h)
    }

    /// `ŷ_t = y0 + residual_t`.
    pub fn add_seed(&self, fw: &mut Forward, residual: Var, y0: Var) -> Result<Var> {
        let steps = fw.tape.shape(residual)[1];
        let seed = fw.tape.repeat_time(y0, steps)?;
        fw.tape.add(residual, seed)
    }

    /// Class log-probabilities `[B, C]` from context features.
    pub fn classify(&self, fw: &mut Forward, c: Var) -> Result<Var> {
        let layers = self.config.arc_widths().len() - 1;
        let mut h = c;
        for i in 0..layers {
            h = fw.linear(&format!("arc.fc{i}"), h)?;
            if i + 1 < layers {
                h = fw.tape.leaky_relu(h, self.config.leaky_slope);
                h = fw.dropout(h, self.config.dropout)?;
            }
        }
        Ok(fw.tape.log_softmax(h))
    }

    /// Seed pose `[B, J, 4]`: the last observed frame.
    pub fn seed_pose(x: &Tensor) -> Result<Tensor> {
        let s = x.shape();
        if s.len() != 4 || s[1] == 0 {
            return Err(Error::Shape(format!(
                "observed frames must be [B, N>=1, J, 4], got {s:?}"
            )));
        }
        let (b, n, per) = (s[0], s[1], s[2] * s[3]);
        let mut data = Vec::with_capacity(b * per);
        for bi in 0..b {
            let start = (bi * n + n - 1) * per;
            data.extend_from_slice(&x.data()[start..start + per]);
        }
        Tensor::new([b, s[2], s[3]], data)
    }

    fn require(&self, kind: ModelKind) -> Result<()> {
        if self.config.kind != kind {
            return Err(Error::InvalidArgument(format!(
                "operation needs a {kind:?} model, this one is {:?}",
                self.config.kind
            )));
        }
        Ok(())
    }

    /// Eval-mode context features `[B, D]`.
    pub fn context(&self, x: &Tensor) -> Result<Tensor> {
        let mut fw = Forward::new(&self.params, Mode::Eval);
        let xv = fw.constant(x.clone());
        let c = self.encode(&mut fw, xv)?;
        Ok(fw.tape.value(c).clone())
    }

    /// Eval-mode prediction of frames `1..=m` plus class probabilities.
    pub fn predict(&self, x: &Tensor, m: usize) -> Result<Prediction> {
        match self.config.kind {
            ModelKind::Nat => {
                let times: Vec<usize> = (1..=m).collect();
                self.predict_nat(x, self.posenc_rows(&times), None)
            }
            ModelKind::Ar => Ok(Prediction {
                frames: self.ar_predict(x, m, None)?,
                probs: None,
            }),
        }
    }

    /// Eval-mode decoding of arbitrary frame indices; row `k` of the result is frame `times[k]`.
    pub fn predict_frames(&self, x: &Tensor, times: &[usize]) -> Result<Tensor> {
        self.require(ModelKind::Nat)?;
        Ok(self.predict_nat(x, self.posenc_rows(times), None)?.frames)
    }

    /// Eval-mode decoding with caller-supplied positional embeddings `[m, D]`.
    pub fn predict_with_posenc(&self, x: &Tensor, pe: Tensor) -> Result<Tensor> {
        self.require(ModelKind::Nat)?;
        Ok(self.predict_nat(x, pe, None)?.frames)
    }

    /// Prediction with `delta` added to every component of the first generated
    /// frame's decoder output, before the seed pose is added.
    pub fn predict_perturbed(&self, x: &Tensor, m: usize, delta: f64) -> Result<Tensor> {
        match self.config.kind {
            ModelKind::Nat => {
                let times: Vec<usize> = (1..=m).collect();
                Ok(self.predict_nat(x, self.posenc_rows(&times), Some(delta))?.frames)
            }
            ModelKind::Ar => self.ar_predict(x, m, Some(delta)),
        }
    }

    fn predict_nat(&self, x: &Tensor, pe: Tensor, delta: Option<f64>) -> Result<Prediction> {
        self.require(ModelKind::Nat)?;
        let mut fw = Forward::new(&self.params, Mode::Eval);
        let xv = fw.constant(x.clone());
        let y0 = fw.constant(Self::seed_pose(x)?);
        let c = self.encode(&mut fw, xv)?;
        let logp = self.classify(&mut fw, c)?;
        let mut residual = self.decoder_residual(&mut fw, c, y0, pe)?;
        if let Some(delta) = delta {
            let s = fw.tape.shape(residual).to_vec();
            let per = s[2] * s[3];
            let bump = Tensor::from_fn(s.clone(), |i| if (i / per).is_multiple_of(s[1]) { delta } else { 0.0 });
            let bump = fw.constant(bump);
            residual = fw.tape.add(residual, bump)?;
        }
        let pred = self.add_seed(&mut fw, residual, y0)?;
        Ok(Prediction {
            frames: fw.tape.value(pred).clone(),
            probs: Some(fw.tape.value(logp).map(f64::exp)),
        })
    }

    /// One residual step of the autoregressive head: `[B, J, 4]` increment.
    pub fn ar_step(&self, fw: &mut Forward, prev: Var, prev2: Var, c: Var) -> Result<Var> {
        let s = fw.tape.shape(prev).to_vec();
        let flat = s[1] * s[2];
        let vel = fw.tape.sub(prev, prev2)?;
        let vel = fw.tape.scale(vel, AR_VELOCITY_GAIN);
        let p = fw.tape.reshape(prev, [s[0], flat])?;
        let v = fw.tape.reshape(vel, [s[0], flat])?;
        let input = fw.tape.concat_last(p, v)?;
        let input = fw.tape.concat_last(input, c)?;
        let h = fw.linear("ar.fc0", input)?;
        let h = fw.tape.leaky_relu(h, self.config.leaky_slope);
        let r = fw.linear("ar.fc1", h)?;
        fw.tape.reshape(r, s)
    }

    /// Sequential rollout `ŷ_t = ŷ_{t-1} + R(ŷ_{t-1}, ŷ_{t-1} - ŷ_{t-2}, c)` for `m`
    /// steps from the last two observed frames; `[B, m, J, 4]`.
    pub fn ar_rollout(
        &self,
        fw: &mut Forward,
        c: Var,
        last: Var,
        before_last: Var,
        m: usize,
        delta: Option<f64>,
    ) -> Result<Var> {
        if m == 0 {
            return Err(Error::InvalidArgument("prediction horizon must be at least 1".into()));
        }
        let (mut prev, mut prev2) = (last, before_last);
        let mut out = Vec::with_capacity(m);
        for step in 0..m {
            let mut r = self.ar_step(fw, prev, prev2, c)?;
            if step == 0 {
                if let Some(delta) = delta {
                    r = fw.tape.add_scalar(r, delta);
                }
            }
            let next = fw.tape.add(prev, r)?;
            out.push(next);
            prev2 = prev;
            prev = next;
        }
        fw.tape.stack(&out)
    }

    /// Teacher-forced steps: frame t is `y_{t-1} + R(y_{t-1}, y_{t-1} - y_{t-2}, c)` with ground
    /// truth `y` `[B, m, J, 4]` in place of earlier predictions; `[B, m, J, 4]`.
    pub fn ar_teacher_forced(
        &self,
        fw: &mut Forward,
        c: Var,
        last: &Tensor,
        before: &Tensor,
        y: &Tensor,
    ) -> Result<Var> {
        let s = y.shape();
        if s.len() != 4 || last.shape() != [s[0], s[2], s[3]] || before.shape() != last.shape() {
            return Err(Error::Shape(format!("teacher forcing {:?} from {:?}", s, last.shape())));
        }
        let (m, per) = (s[1], s[2] * s[3]);
        let frame = |t: usize| {
            let data = (0..s[0])
                .flat_map(|b| y.data()[(b * m + t) * per..][..per].iter().copied())
                .collect();
            Tensor::new([s[0], s[2], s[3]], data)
        };
        let (mut prev2, mut prev) = (before.clone(), last.clone());
        let mut out = Vec::with_capacity(m);
        for t in 0..m {
            let (pv, p2v) = (fw.constant(prev.clone()), fw.constant(prev2));
            let r = self.ar_step(fw, pv, p2v, c)?;
            out.push(fw.tape.add(pv, r)?);
            prev2 = std::mem::replace(&mut prev, frame(t)?);
        }
        fw.tape.stack(&out)
    }

    /// Last and second-to-last observed frames; with one observed frame both are the same.
    pub fn history(x: &Tensor) -> Result<(Tensor, Tensor)> {
        let last = Self::seed_pose(x)?;
        let s = x.shape();
        let (n, per) = (s[1], s[2] * s[3]);
        if n < 2 {
            return Ok((last.clone(), last));
        }
        let data = (0..s[0])
            .flat_map(|b| {
                let start = (b * n + n - 2) * per;
                x.data()[start..start + per].iter().copied()
            })
            .collect();
        Ok((last, Tensor::new([s[0], s[2], s[3]], data)?))
    }

    fn ar_predict(&self, x: &Tensor, m: usize, delta: Option<f64>) -> Result<Tensor> {
        self.require(ModelKind::Ar)?;
        let mut fw = Forward::new(&self.params, Mode::Eval);
        let xv = fw.constant(x.clone());
        let c = self.encode(&mut fw, xv)?;
        let (last, before) = Self::history(x)?;
        let last = fw.constant(last);
        let before = fw.constant(before);
        let y = self.ar_rollout(&mut fw, c, last, before, m, delta)?;
        Ok(fw.tape.value(y).clone())
    }
}
