use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::losses::{loss_cls, loss_pnlty, loss_recst, LossBreakdown};
use crate::data::{batch_of, Window, WindowSpec};
use crate::error::{Error, Result};
use crate::model::layers::BN_MOMENTUM;
use crate::model::{Forward, Mode, Model, ModelConfig, ModelKind};
use crate::numerics::{clip_grad_norm, AdamConfig, AdamState, BatchStats, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch: usize,
    pub adam: AdamConfig,
    /// Maximum global gradient norm.
    pub clip: f64,
    pub lambda_pnlty: f64,
    pub lambda_cls: f64,
    pub seed: u64,
    pub window: WindowSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 1000,
            batch: 60,
            adam: AdamConfig::default(),
            clip: 0.1,
            lambda_pnlty: 0.01,
            lambda_cls: 0.01,
            seed: 0,
            window: WindowSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.batch == 0 {
            return bad("batch size must be at least 1".into());
        }
        if !(self.lambda_pnlty >= 0.0) || !(self.lambda_cls >= 0.0) {
            return bad("loss weights must be nonnegative".into());
        }
        if !(self.clip > 0.0) {
            return bad(format!("clip norm must be positive, got {}", self.clip));
        }
        if !(self.adam.base_lr > 0.0) || !(self.adam.decay_per_epoch > 0.0) {
            return bad("learning rate and decay must be positive".into());
        }
        self.window.validate()
    }

    pub fn objective(&self) -> Objective {
        Objective {
            lambda_pnlty: self.lambda_pnlty,
            lambda_cls: self.lambda_cls,
            cycle_gradient: true,
        }
    }
}

/// Loss weights of one training step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Objective {
    pub lambda_pnlty: f64,
    pub lambda_cls: f64,
    /// Whether the cycle classification loss back-propagates (through the
    /// re-encoded prediction into the decoder and encoder).
    pub cycle_gradient: bool,
}

/// Losses, gradients and running-statistic updates of one step.
#[derive(Clone, Debug)]
pub struct StepResult {
    pub losses: LossBreakdown,
    /// One entry per trainable parameter; unused parameters get zeros.
    pub grads: BTreeMap<String, Tensor>,
    pub bn_updates: Vec<(String, BatchStats)>,
    /// Samples whose label probability hit the floor.
    pub clamped: usize,
}

/// Forward and backward pass of the multitask objective on one minibatch.
///
/// `x: [B, N, J, 4]`, `y: [B, M, J, 4]`. Classification terms need `labels`;
/// the cycle term is evaluated only when `lambda_cls > 0`.
pub fn nat_step(
    model: &Model,
    x: &Tensor,
    y: &Tensor,
    labels: Option<&[usize]>,
    obj: &Objective,
    dropout_seed: u64,
) -> Result<StepResult> {
    if model.config.kind != ModelKind::Nat {
        return Err(Error::InvalidArgument(
            "multitask training needs a non-autoregressive model".into(),
        ));
    }
    let m = y.shape().get(1).copied().unwrap_or(0);
    let mut fw = Forward::new(&model.params, Mode::Train).with_dropout_seed(dropout_seed);
    let xv = fw.constant(x.clone());
    let yv = fw.constant(y.clone());
    let y0 = fw.constant(Model::seed_pose(x)?);
    let c = model.encode(&mut fw, xv)?;
    let times: Vec<usize> = (1..=m).collect();
    let residual = model.decoder_residual(&mut fw, c, y0, model.posenc_rows(&times))?;
    let pred = model.add_seed(&mut fw, residual, y0)?;

    let recst = loss_recst(&mut fw.tape, pred, yv)?;
    let pnlty = loss_pnlty(&mut fw.tape, pred)?;
    let p = fw.tape.scale(pnlty, obj.lambda_pnlty);
    let mut total = fw.tape.add(recst, p)?;
    let (mut cls1_v, mut cls2_v, mut clamped) = (0.0, 0.0, 0);
    if let Some(labels) = labels {
        let logp1 = model.classify(&mut fw, c)?;
        let cls1 = loss_cls(&mut fw.tape, logp1, labels)?;
        cls1_v = fw.tape.value(cls1).item();
        clamped += fw.tape.clamped_rows(cls1);
        let w = fw.tape.scale(cls1, obj.lambda_cls);
        total = fw.tape.add(total, w)?;
        if obj.lambda_cls > 0.0 {
            let fed = if obj.cycle_gradient {
                pred
            } else {
                let v = fw.tape.value(pred).clone();
                fw.constant(v)
            };
            let c2 = model.encode(&mut fw, fed)?;
            let logp2 = model.classify(&mut fw, c2)?;
            let cls2 = loss_cls(&mut fw.tape, logp2, labels)?;
            cls2_v = fw.tape.value(cls2).item();
            clamped += fw.tape.clamped_rows(cls2);
            let w = fw.tape.scale(cls2, obj.lambda_cls);
            total = fw.tape.add(total, w)?;
        }
    } else if obj.lambda_cls > 0.0 {
        return Err(Error::Data("classification loss requested for unlabeled data".into()));
    }

    let losses = LossBreakdown {
        recst: fw.tape.value(recst).item(),
        pnlty: fw.tape.value(pnlty).item(),
        cls1: cls1_v,
        cls2: cls2_v,
        total: fw.tape.value(total).item(),
    };
    if !losses.total.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {losses:?}")));
    }
    let grads = complete_grads(model, fw.tape.backward(total)?.into_by_path());
    Ok(StepResult {
        losses,
        grads,
        bn_updates: fw.take_bn_updates(),
        clamped,
    })
}

fn complete_grads(model: &Model, mut grads: BTreeMap<String, Tensor>) -> BTreeMap<String, Tensor> {
    for (path, t) in model.params.params() {
        if !model.params.is_frozen(path) {
            grads
                .entry(path.clone())
                .or_insert_with(|| Tensor::zeros(t.shape().to_vec()));
        }
    }
    grads
}

/// One row of the loss log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    pub recst: f64,
    pub pnlty: f64,
    pub cls1: f64,
    pub cls2: f64,
    pub total: f64,
    pub lr: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io("<loss log>", e))?;
        Ok(())
    }

    pub fn last(&self) -> Option<&LogRow> {
        self.rows.last()
    }
}

/// Epoch-wise shuffled minibatches.
struct Sampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    batch: usize,
    per_epoch: usize,
}

impl Sampler {
    fn new(len: usize, batch: usize, seed: u64) -> Self {
        let batch = batch.min(len);
        Sampler {
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: (0..len).collect(),
            batch,
            per_epoch: (len / batch).max(1),
        }
    }

    /// Indices for `iteration`, reshuffling at every epoch start, plus the epoch number.
    fn batch(&mut self, iteration: usize) -> (Vec<usize>, u64) {
        let k = iteration % self.per_epoch;
        if k == 0 {
            self.order.shuffle(&mut self.rng);
        }
        let idx = self.order[k * self.batch..(k + 1) * self.batch].to_vec();
        (idx, (iteration / self.per_epoch) as u64)
    }

    fn next_seed(&mut self) -> u64 {
        self.rng.random()
    }
}

fn labels_of(windows: &[&Window]) -> Option<Vec<usize>> {
    windows.iter().map(|w| w.label).collect()
}

/// Multitask training of a non-autoregressive model.
///
/// Every iteration draws a minibatch, evaluates the combined objective with the
/// cycle path, clips the global gradient norm, takes one ADAM step at the
/// epoch's decayed learning rate, and folds the batch statistics into the
/// running ones. `observer` sees every log row as it is produced.
pub fn train(
    model: &mut Model,
    windows: &[Window],
    cfg: &TrainConfig,
    mut observer: impl FnMut(&LogRow),
) -> Result<TrainLog> {
    cfg.validate()?;
    if windows.is_empty() {
        return Err(Error::Data("no training windows".into()));
    }
    let labeled = windows.iter().all(|w| w.label.is_some());
    if cfg.lambda_cls > 0.0 && !labeled {
        return Err(Error::Data("classification loss needs labels on every window".into()));
    }
    let obj = cfg.objective();
    let mut sampler = Sampler::new(windows.len(), cfg.batch, cfg.seed);
    let mut adam = AdamState::new(cfg.adam);
    let mut log = TrainLog::default();
    for it in 0..cfg.iterations {
        let (idx, epoch) = sampler.batch(it);
        let picked: Vec<&Window> = idx.iter().map(|&i| &windows[i]).collect();
        let (x, y, _) = batch_of(picked.iter().copied())?;
        let labels = if labeled { labels_of(&picked) } else { None };
        let step =
            nat_step(model, &x, &y, labels.as_deref(), &obj, sampler.next_seed()).map_err(|e| annotate(e, it))?;
        let row = apply_step(model, &mut adam, step.grads, cfg.clip, epoch, it, step.losses)?;
        model.params.apply_bn_updates(&step.bn_updates, BN_MOMENTUM)?;
        observer(&row);
        log.rows.push(row);
    }
    Ok(log)
}

fn annotate(e: Error, it: usize) -> Error {
    match e {
        Error::Numeric(m) => Error::Numeric(format!("iteration {it}: {m}")),
        other => other,
    }
}

fn apply_step(
    model: &mut Model,
    adam: &mut AdamState,
    mut grads: BTreeMap<String, Tensor>,
    clip: f64,
    epoch: u64,
    iteration: usize,
    losses: LossBreakdown,
) -> Result<LogRow> {
    let grad_norm = clip_grad_norm(&mut grads, clip)?;
    if !grad_norm.is_finite() {
        return Err(Error::Numeric(format!(
            "iteration {iteration}: non-finite gradient norm"
        )));
    }
    adam.step(model.params.trainable_mut(), &grads, epoch)?;
    Ok(LogRow {
        iteration,
        recst: losses.recst,
        pnlty: losses.pnlty,
        cls1: losses.cls1,
        cls2: losses.cls2,
        total: losses.total,
        lr: adam.config.lr_at(epoch),
        grad_norm,
    })
}

/// Autoregressive model sharing `nat`'s encoder, which is copied and frozen.
pub fn ar_from_nat(nat: &Model, ar_hidden: usize, init_seed: u64) -> Result<Model> {
    let config = ModelConfig {
        kind: ModelKind::Ar,
        ar_hidden,
        init_seed,
        ..nat.config.clone()
    };
    let mut ar = Model::new(config)?;
    ar.params.copy_prefix_from(&nat.params, "encoder.")?;
    ar.params.freeze_prefix("encoder.");
    Ok(ar)
}

/// Teacher-forced training of the autoregressive head on `recst + λp·pnlty`.
///
/// Each step is conditioned on the ground-truth previous frames; only inference
/// feeds predictions back. Context features come from the frozen encoder in eval
/// mode and are computed once per window.
pub fn train_ar(
    model: &mut Model,
    windows: &[Window],
    cfg: &TrainConfig,
    mut observer: impl FnMut(&LogRow),
) -> Result<TrainLog> {
    cfg.validate()?;
    if model.config.kind != ModelKind::Ar {
        return Err(Error::InvalidArgument(
            "autoregressive training needs an autoregressive model".into(),
        ));
    }
    if windows.is_empty() {
        return Err(Error::Data("no training windows".into()));
    }
    let mut contexts = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(64) {
        let (x, _, _) = batch_of(chunk)?;
        let c = model.context(&x)?;
        contexts.extend(
            c.rows()
                .map(|r| Tensor::new([r.len()], r.to_vec()).expect("context row")),
        );
    }
    let mut sampler = Sampler::new(windows.len(), cfg.batch, cfg.seed);
    let mut adam = AdamState::new(cfg.adam);
    let mut log = TrainLog::default();
    for it in 0..cfg.iterations {
        let (idx, epoch) = sampler.batch(it);
        let (x, y, _) = batch_of(idx.iter().map(|&i| &windows[i]))?;
        let c = Tensor::stack(&idx.iter().map(|&i| contexts[i].clone()).collect::<Vec<_>>())?;
        let (last, before) = Model::history(&x)?;

        let mut fw = Forward::new(&model.params, Mode::Train);
        let cv = fw.constant(c);
        let pred = model.ar_teacher_forced(&mut fw, cv, &last, &before, &y)?;
        let yv = fw.constant(y);
        let recst = loss_recst(&mut fw.tape, pred, yv)?;
        let pnlty = loss_pnlty(&mut fw.tape, pred)?;
        let p = fw.tape.scale(pnlty, cfg.lambda_pnlty);
        let total = fw.tape.add(recst, p)?;
        let losses = LossBreakdown::combine(
            fw.tape.value(recst).item(),
            fw.tape.value(pnlty).item(),
            0.0,
            0.0,
            cfg.lambda_pnlty,
            0.0,
        );
        if !losses.total.is_finite() {
            return Err(Error::Numeric(format!("iteration {it}: non-finite loss {losses:?}")));
        }
        let grads = complete_grads(model, fw.tape.backward(total)?.into_by_path());
        drop(fw);
        let row = apply_step(model, &mut adam, grads, cfg.clip, epoch, it, losses)?;
        observer(&row);
        log.rows.push(row);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, windows_of, SyntheticSpec};

    fn tiny_model(kind: ModelKind, joints: usize) -> Model {
        let tree = crate::data::binary_tree(joints).unwrap();
        let mut cfg = ModelConfig::new(&tree, 3);
        cfg.kind = kind;
        cfg.kernel = 3;
        cfg.encoder_channels = vec![8, 8];
        cfg.decoder_channels = vec![8, 4];
        cfg.arc_hidden = vec![6];
        cfg.ar_hidden = 8;
        cfg.init_seed = 5;
        Model::new(cfg).unwrap()
    }

    fn tiny_windows() -> Vec<Window> {
        let spec = SyntheticSpec {
            joints: 3,
            seqs_per_class: 2,
            frames: 20,
            ..Default::default()
        };
        let seqs = generate_synthetic(&spec).unwrap();
        windows_of(&seqs, &WindowSpec { n: 6, m: 4, stride: 5 }).unwrap()
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            iterations: 6,
            batch: 4,
            window: WindowSpec { n: 6, m: 4, stride: 5 },
            ..Default::default()
        }
    }

    #[test]
    fn sampler_covers_each_epoch() {
        let mut s = Sampler::new(10, 3, 1);
        let mut seen: Vec<usize> = (0..3).flat_map(|i| s.batch(i).0).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 9);
        assert_eq!(s.batch(3).1, 1);
        let mut big = Sampler::new(4, 60, 1);
        assert_eq!(big.batch(0).0.len(), 4);
        assert_eq!(big.batch(1).1, 1);
    }

    #[test]
    fn total_matches_combination() {
        let model = tiny_model(ModelKind::Nat, 3);
        let ws = tiny_windows();
        let (x, y, l) = batch_of(&ws[..4]).unwrap();
        let labels: Vec<usize> = l.into_iter().map(Option::unwrap).collect();
        let obj = Objective {
            lambda_pnlty: 0.3,
            lambda_cls: 0.7,
            cycle_gradient: true,
        };
        let r = nat_step(&model, &x, &y, Some(&labels), &obj, 0).unwrap();
        let l = r.losses;
        let expect = LossBreakdown::combine(l.recst, l.pnlty, l.cls1, l.cls2, 0.3, 0.7);
        assert!((l.total - expect.total).abs() < 1e-12);
        assert!(l.recst >= 0.0 && l.pnlty >= 0.0 && l.cls1 >= 0.0 && l.cls2 > 0.0);
    }

    #[test]
    fn zero_weights_reduce_to_reconstruction_gradient() {
        let model = tiny_model(ModelKind::Nat, 3);
        let ws = tiny_windows();
        let (x, y, l) = batch_of(&ws[..4]).unwrap();
        let labels: Vec<usize> = l.into_iter().map(Option::unwrap).collect();
        let zero = Objective {
            lambda_pnlty: 0.0,
            lambda_cls: 0.0,
            cycle_gradient: true,
        };
        let full = nat_step(&model, &x, &y, Some(&labels), &zero, 9).unwrap();

        let mut fw = Forward::new(&model.params, Mode::Train);
        let (xv, yv) = (fw.constant(x.clone()), fw.constant(y.clone()));
        let y0 = fw.constant(Model::seed_pose(&x).unwrap());
        let c = model.encode(&mut fw, xv).unwrap();
        let r = model
            .decoder_residual(&mut fw, c, y0, model.posenc_rows(&[1, 2, 3, 4]))
            .unwrap();
        let pred = model.add_seed(&mut fw, r, y0).unwrap();
        let loss = loss_recst(&mut fw.tape, pred, yv).unwrap();
        let alone = fw.tape.backward(loss).unwrap().into_by_path();
        for (path, g) in &alone {
            assert_eq!(&full.grads[path], g, "{path}");
        }
        assert!(full
            .grads
            .keys()
            .filter(|p| p.starts_with("arc."))
            .all(|p| full.grads[p].sq_norm() == 0.0));
    }

    #[test]
    fn cycle_path_reaches_decoder() {
        let model = tiny_model(ModelKind::Nat, 3);
        let ws = tiny_windows();
        let (x, y, l) = batch_of(&ws[..4]).unwrap();
        let labels: Vec<usize> = l.into_iter().map(Option::unwrap).collect();
        let mut obj = Objective {
            lambda_pnlty: 0.01,
            lambda_cls: 0.5,
            cycle_gradient: true,
        };
        let with = nat_step(&model, &x, &y, Some(&labels), &obj, 2).unwrap();
        obj.cycle_gradient = false;
        let without = nat_step(&model, &x, &y, Some(&labels), &obj, 2).unwrap();
        assert_eq!(with.losses, without.losses);
        // the fresh residual head is zero, so the gradient enters at its scale
        let g = "decoder.block1.tcn.bn.gamma";
        assert!(with.grads[g].max_abs_diff(&without.grads[g]) > 0.0);
    }

    #[test]
    fn unlabeled_data_rejected_for_classification() {
        let mut model = tiny_model(ModelKind::Nat, 3);
        let mut ws = tiny_windows();
        ws[0].label = None;
        assert!(matches!(
            train(&mut model, &ws, &tiny_cfg(), |_| {}),
            Err(Error::Data(_))
        ));
        let cfg = TrainConfig {
            lambda_cls: 0.0,
            ..tiny_cfg()
        };
        assert!(train(&mut model, &ws, &cfg, |_| {}).is_ok());
    }

    #[test]
    fn training_is_deterministic_and_updates_statistics() {
        let ws = tiny_windows();
        let run = || {
            let mut m = tiny_model(ModelKind::Nat, 3);
            let log = train(&mut m, &ws, &tiny_cfg(), |_| {}).unwrap();
            (m, log)
        };
        let (m1, l1) = run();
        let (m2, l2) = run();
        assert_eq!(l1, l2);
        assert_eq!(m1.params, m2.params);
        let fresh = tiny_model(ModelKind::Nat, 3);
        assert_ne!(
            m1.params.buffer("encoder.block0.gcn.bn.running_mean").unwrap(),
            fresh.params.buffer("encoder.block0.gcn.bn.running_mean").unwrap()
        );
        let mut buf = Vec::new();
        l1.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("iteration,recst,pnlty,cls1,cls2,total,lr,grad_norm\n"));
        assert_eq!(text.lines().count(), 7);
    }

    #[test]
    fn learning_rate_decays_per_epoch() {
        let ws = tiny_windows();
        let mut m = tiny_model(ModelKind::Nat, 3);
        let cfg = TrainConfig {
            batch: ws.len(),
            ..tiny_cfg()
        };
        let log = train(&mut m, &ws, &cfg, |_| {}).unwrap();
        for w in log.rows.windows(2) {
            assert!((w[1].lr / w[0].lr - 0.9995).abs() < 1e-15);
        }
    }

    #[test]
    fn ar_training_keeps_encoder_fixed() {
        let ws = tiny_windows();
        let nat = tiny_model(ModelKind::Nat, 3);
        let mut ar = ar_from_nat(&nat, 8, 1).unwrap();
        let before = ar.params.clone();
        let cfg = TrainConfig {
            lambda_cls: 0.0,
            ..tiny_cfg()
        };
        let log = train_ar(&mut ar, &ws, &cfg, |_| {}).unwrap();
        assert_eq!(log.rows.len(), 6);
        for (p, t) in ar.params.params() {
            if p.starts_with("encoder.") {
                assert_eq!(t, before.param(p).unwrap());
            }
        }
        assert_ne!(
            ar.params.param("ar.fc0.weight").unwrap(),
            before.param("ar.fc0.weight").unwrap()
        );
        assert_eq!(ar.params.buffers(), before.buffers());
    }
}
