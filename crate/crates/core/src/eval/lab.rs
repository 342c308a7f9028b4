use std::io::Write;

use super::report::predict_windows;
use crate::data::{batch_of, Window};
use crate::error::{Error, Result};
use crate::model::{Model, ModelKind};
use crate::numerics::Tensor;

/// Per-frame deviation caused by perturbing the first generated frame.
#[derive(Clone, Debug, PartialEq)]
pub struct AccumulationCurves {
    pub nat: Vec<f64>,
    pub ar: Vec<f64>,
}

impl AccumulationCurves {
    /// CSV with columns `frame,nat,ar`; frames start at 1.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["frame", "nat", "ar"])?;
        for (t, (n, a)) in self.nat.iter().zip(&self.ar).enumerate() {
            w.write_record([(t + 1).to_string(), n.to_string(), a.to_string()])?;
        }
        w.flush().map_err(|e| Error::io("<curves csv>", e))?;
        Ok(())
    }
}

fn perturbed(model: &Model, windows: &[Window], m: usize, delta: f64) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(32) {
        let (x, _, _) = batch_of(chunk)?;
        let pred = model.predict_perturbed(&x, m, delta)?;
        out.extend((0..chunk.len()).map(|b| pred.select_first(b)));
    }
    Ok(out)
}

/// Mean over windows of `(1/J) Σ_j ‖a_t^j − b_t^j‖₁` for each frame `t`.
pub fn deviation_curve(a: &[Tensor], b: &[Tensor]) -> Result<Vec<f64>> {
    let first = a.first().ok_or_else(|| Error::Data("no windows".into()))?;
    let (m, j) = (first.shape()[0], first.shape()[1]);
    let mut curve = vec![0.0; m];
    for (x, y) in a.iter().zip(b) {
        if x.shape() != y.shape() || x.shape() != first.shape() {
            return Err(Error::Shape(format!("{:?} vs {:?}", x.shape(), y.shape())));
        }
        for (t, (rx, ry)) in x
            .data()
            .chunks_exact(j * 4)
            .zip(y.data().chunks_exact(j * 4))
            .enumerate()
        {
            curve[t] += rx.iter().zip(ry).map(|(p, q)| (p - q).abs()).sum::<f64>() / j as f64;
        }
    }
    let n = a.len() as f64;
    Ok(curve.into_iter().map(|v| v / n).collect())
}

/// Runs both models with and without `delta` added to the first generated
/// frame's pre-residual output and reports how far each later frame moves.
pub fn error_accumulation_experiment(
    nat: &Model,
    ar: &Model,
    windows: &[Window],
    m: usize,
    delta: f64,
) -> Result<AccumulationCurves> {
    if nat.config.kind != ModelKind::Nat || ar.config.kind != ModelKind::Ar {
        return Err(Error::InvalidArgument(
            "expected a non-autoregressive and an autoregressive model".into(),
        ));
    }
    if windows.is_empty() {
        return Err(Error::Data("no windows for the experiment".into()));
    }
    let curve = |model: &Model| -> Result<Vec<f64>> {
        let clean = predict_windows(model, windows, m)?;
        let bumped = perturbed(model, windows, m, delta)?;
        deviation_curve(&clean, &bumped)
    };
    Ok(AccumulationCurves {
        nat: curve(nat)?,
        ar: curve(ar)?,
    })
}
