use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::metrics::{horizon_frame, mean_joint_error, recognition_accuracy, zero_velocity_predict};
use crate::data::{batch_of, windows_of, Dataset, Window, WindowSpec};
use crate::error::{Error, Result};
use crate::model::{Model, ModelKind};
use crate::numerics::Tensor;
use crate::skeleton::EulerOrder;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub horizons_ms: Vec<u32>,
    pub euler: EulerOrder,
    /// Observed frames per window.
    pub n: usize,
    pub stride: usize,
    pub checkpoint_sha256: Option<String>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            horizons_ms: super::DEFAULT_HORIZONS_MS.to_vec(),
            euler: EulerOrder::default(),
            n: 50,
            stride: 5,
            checkpoint_sha256: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub euler_order: EulerOrder,
    pub fps: f64,
    pub checkpoint_sha256: Option<String>,
    pub observed_frames: usize,
    pub predicted_frames: usize,
    pub stride: usize,
    pub windows: usize,
    /// How errors are pooled across windows.
    pub averaging: String,
    /// How ties between class probabilities are resolved.
    pub tie_break: String,
}

/// Mean joint errors keyed by horizon in milliseconds.
pub type HorizonErrors = BTreeMap<u32, f64>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean_joint_error: HorizonErrors,
    pub zero_velocity: HorizonErrors,
    pub per_action: BTreeMap<String, HorizonErrors>,
    pub accuracy_o1: Option<f64>,
    pub accuracy_o2: Option<f64>,
    pub metadata: ReportMetadata,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn keyed(horizons: &[u32], values: Vec<f64>) -> HorizonErrors {
    horizons.iter().copied().zip(values).collect()
}

/// Eval-mode predictions `[M, J, 4]`, one per window, in window order.
pub fn predict_windows(model: &Model, windows: &[Window], m: usize) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(32) {
        let (x, _, _) = batch_of(chunk)?;
        let pred = model.predict(&x, m)?.frames;
        out.extend((0..chunk.len()).map(|b| pred.select_first(b)));
    }
    Ok(out)
}

/// Common frame rate of a dataset.
pub fn dataset_fps(dataset: &Dataset) -> Result<f64> {
    let fps = dataset
        .sequences
        .first()
        .ok_or_else(|| Error::Data("empty dataset".into()))?
        .fps;
    if dataset.sequences.iter().any(|s| s.fps != fps) {
        return Err(Error::Data("sequences have different frame rates".into()));
    }
    Ok(fps)
}

/// Errors of the model and the zero-velocity baseline at every horizon, the
/// per-action breakdown and, for labeled data, recognition accuracy.
pub fn evaluate(model: &Model, dataset: &Dataset, opts: &EvalOptions) -> Result<EvalReport> {
    if opts.horizons_ms.is_empty() {
        return Err(Error::InvalidArgument("no horizons requested".into()));
    }
    let fps = dataset_fps(dataset)?;
    let m = opts
        .horizons_ms
        .iter()
        .map(|&h| horizon_frame(h, fps))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .max()
        .expect("nonempty horizons");
    let spec = WindowSpec {
        n: opts.n,
        m,
        stride: opts.stride,
    };
    let windows = windows_of(&dataset.sequences, &spec)?;
    if windows.is_empty() {
        return Err(Error::Data(format!(
            "no sequence is long enough for {} + {m} frames",
            opts.n
        )));
    }
    let truths: Vec<Tensor> = windows.iter().map(|w| w.y.clone()).collect();
    let preds = predict_windows(model, &windows, m)?;
    let zv: Vec<Tensor> = windows
        .iter()
        .map(|w| zero_velocity_predict(&w.x, m))
        .collect::<Result<_>>()?;
    let h = &opts.horizons_ms;
    let nat = mean_joint_error(&preds, &truths, h, fps, opts.euler)?;
    let base = mean_joint_error(&zv, &truths, h, fps, opts.euler)?;

    let mut per_action = BTreeMap::new();
    for (id, name) in dataset.actions.iter().enumerate() {
        let idx: Vec<usize> = (0..windows.len()).filter(|&i| windows[i].label == Some(id)).collect();
        if idx.is_empty() {
            continue;
        }
        let p: Vec<Tensor> = idx.iter().map(|&i| preds[i].clone()).collect();
        let t: Vec<Tensor> = idx.iter().map(|&i| truths[i].clone()).collect();
        per_action.insert(name.clone(), keyed(h, mean_joint_error(&p, &t, h, fps, opts.euler)?));
    }

    let labeled = windows.iter().all(|w| w.label.is_some());
    let (acc1, acc2) = if labeled && model.config.kind == ModelKind::Nat {
        let (a, b) = recognition_accuracy(model, &windows, m)?;
        (Some(a), Some(b))
    } else {
        (None, None)
    };
    Ok(EvalReport {
        mean_joint_error: keyed(h, nat),
        zero_velocity: keyed(h, base),
        per_action,
        accuracy_o1: acc1,
        accuracy_o2: acc2,
        metadata: ReportMetadata {
            euler_order: opts.euler,
            fps,
            checkpoint_sha256: opts.checkpoint_sha256.clone(),
            observed_frames: opts.n,
            predicted_frames: m,
            stride: opts.stride,
            windows: windows.len(),
            averaging: "per-window".into(),
            tie_break: "lowest class index".into(),
        },
    })
}
