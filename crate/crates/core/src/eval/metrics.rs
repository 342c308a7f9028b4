use crate::data::{batch_of, Window};
use crate::error::{Error, Result};
use crate::model::{Forward, Mode, Model, ModelKind};
use crate::numerics::Tensor;
use crate::skeleton::{EulerOrder, Quaternion};

/// Horizons reported by default, in milliseconds.
pub const DEFAULT_HORIZONS_MS: [u32; 6] = [80, 160, 320, 400, 560, 1000];

/// Number of frames corresponding to `ms` at `fps`; only exact integers are accepted.
pub fn horizon_frame(ms: u32, fps: f64) -> Result<usize> {
    let frames = ms as f64 * fps / 1000.0;
    if !(frames >= 1.0) || frames.fract() != 0.0 {
        return Err(Error::InvalidArgument(format!(
            "{ms} ms at {fps} fps is not a whole positive number of frames"
        )));
    }
    Ok(frames as usize)
}

fn euler_pose(frame: &[f64], order: EulerOrder) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(frame.len() / 4 * 3);
    for q in frame.chunks_exact(4) {
        out.extend(Quaternion::new(q[0], q[1], q[2], q[3]).to_euler(order)?);
    }
    Ok(out)
}

/// Per-frame Euclidean distance between poses `[M, J, 4]` in Euler-angle space.
pub fn frame_errors(pred: &Tensor, truth: &Tensor, order: EulerOrder) -> Result<Vec<f64>> {
    if pred.shape() != truth.shape() || pred.rank() != 3 || pred.shape()[2] != 4 {
        return Err(Error::Shape(format!("poses {:?} vs {:?}", pred.shape(), truth.shape())));
    }
    let per = pred.shape()[1] * 4;
    pred.data()
        .chunks_exact(per)
        .zip(truth.data().chunks_exact(per))
        .map(|(p, t)| {
            let (ep, et) = (euler_pose(p, order)?, euler_pose(t, order)?);
            Ok(ep.iter().zip(&et).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
        })
        .collect()
}

/// Mean joint error at each horizon, averaged over windows with equal weight.
///
/// `preds` and `truths` hold one `[M, J, 4]` tensor per window.
pub fn mean_joint_error(
    preds: &[Tensor],
    truths: &[Tensor],
    horizons_ms: &[u32],
    fps: f64,
    order: EulerOrder,
) -> Result<Vec<f64>> {
    if preds.len() != truths.len() || preds.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} targets",
            preds.len(),
            truths.len()
        )));
    }
    let frames: Vec<usize> = horizons_ms
        .iter()
        .map(|&h| horizon_frame(h, fps))
        .collect::<Result<_>>()?;
    let mut sums = vec![0.0; frames.len()];
    for (p, t) in preds.iter().zip(truths) {
        let m = p.shape().first().copied().unwrap_or(0);
        if let Some(&f) = frames.iter().find(|&&f| f > m) {
            return Err(Error::InvalidArgument(format!(
                "horizon frame {f} beyond the {m} predicted frames"
            )));
        }
        let errs = frame_errors(p, t, order)?;
        for (s, &f) in sums.iter_mut().zip(&frames) {
            *s += errs[f - 1];
        }
    }
    Ok(sums.into_iter().map(|s| s / preds.len() as f64).collect())
}

/// Repeats the last observed frame of `x: [N, J, 4]` for `m` frames.
pub fn zero_velocity_predict(x: &Tensor, m: usize) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 3 || s[0] == 0 {
        return Err(Error::Shape(format!("observed frames must be [N>=1, J, 4], got {s:?}")));
    }
    if m == 0 {
        return Err(Error::InvalidArgument("prediction horizon must be at least 1".into()));
    }
    Tensor::stack(&vec![x.select_first(s[0] - 1); m])
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Eval-mode class probabilities from observed frames and from the model's own
/// prediction re-encoded (`o_1`, `o_2`), each `[B, C]`.
pub fn cycle_probs(model: &Model, x: &Tensor, m: usize) -> Result<(Tensor, Tensor)> {
    if model.config.kind != ModelKind::Nat {
        return Err(Error::InvalidArgument(
            "recognition needs a non-autoregressive model".into(),
        ));
    }
    let mut fw = Forward::new(&model.params, Mode::Eval);
    let xv = fw.constant(x.clone());
    let y0 = fw.constant(Model::seed_pose(x)?);
    let c = model.encode(&mut fw, xv)?;
    let o1 = model.classify(&mut fw, c)?;
    let times: Vec<usize> = (1..=m).collect();
    let r = model.decoder_residual(&mut fw, c, y0, model.posenc_rows(&times))?;
    let pred = model.add_seed(&mut fw, r, y0)?;
    let c2 = model.encode(&mut fw, pred)?;
    let o2 = model.classify(&mut fw, c2)?;
    Ok((fw.tape.value(o1).map(f64::exp), fw.tape.value(o2).map(f64::exp)))
}

/// Accuracy of `argmax o_1` and `argmax o_2` against window labels.
pub fn recognition_accuracy(model: &Model, windows: &[Window], m: usize) -> Result<(f64, f64)> {
    if windows.is_empty() {
        return Err(Error::Data("no windows to classify".into()));
    }
    let (mut hit1, mut hit2) = (0usize, 0usize);
    for chunk in windows.chunks(32) {
        let (x, _, labels) = batch_of(chunk)?;
        let (o1, o2) = cycle_probs(model, &x, m)?;
        for ((r1, r2), l) in o1.rows().zip(o2.rows()).zip(labels) {
            let l = l.ok_or_else(|| Error::Data("recognition accuracy needs labeled windows".into()))?;
            hit1 += (argmax(r1) == l) as usize;
            hit2 += (argmax(r2) == l) as usize;
        }
    }
    let n = windows.len() as f64;
    Ok((hit1 as f64 / n, hit2 as f64 / n))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pose(frames: usize, joints: usize) -> Tensor {
        Tensor::from_fn([frames, joints, 4], |i| {
            let k = i / 4;
            Quaternion::from_expmap([0.01 * k as f64, -0.02 * k as f64, 0.005 * k as f64]).to_array()[i % 4]
        })
    }

    #[test]
    fn horizon_mapping() {
        let frames: Vec<usize> = DEFAULT_HORIZONS_MS
            .iter()
            .map(|&h| horizon_frame(h, 25.0).unwrap())
            .collect();
        assert_eq!(frames, [2, 4, 8, 10, 14, 25]);
        assert!(horizon_frame(100, 25.0).is_err());
        assert!(horizon_frame(0, 25.0).is_err());
    }

    #[test]
    fn perfect_prediction_has_zero_error() {
        let p = pose(25, 3);
        let e = mean_joint_error(&[p.clone()], &[p], &DEFAULT_HORIZONS_MS, 25.0, EulerOrder::Zyx).unwrap();
        assert!(e.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_yaw_error() {
        let truth = Tensor::from_fn([2, 3, 4], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        let mut pred = truth.clone();
        let yaw = Quaternion::from_expmap([0.0, 0.0, 0.1]).to_array();
        pred.data_mut()[12 + 4..12 + 8].copy_from_slice(&yaw);
        let e = mean_joint_error(&[pred], &[truth], &[80], 25.0, EulerOrder::Zyx).unwrap();
        assert!((e[0] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn sign_flip_invariant() {
        let truth = pose(4, 2);
        let pred = truth.map(|v| v * 1.0 + 0.01);
        let flipped = Tensor::from_fn([4, 2, 4], |i| {
            if (i / 4) % 3 == 1 {
                -pred.data()[i]
            } else {
                pred.data()[i]
            }
        });
        let a = frame_errors(&pred, &truth, EulerOrder::Zyx).unwrap();
        let b = frame_errors(&flipped, &truth, EulerOrder::Zyx).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn horizon_beyond_prediction_rejected() {
        let p = pose(10, 2);
        assert!(mean_joint_error(&[p.clone()], &[p], &[560], 25.0, EulerOrder::Zyx).is_err());
    }

    #[test]
    fn zero_velocity_repeats_last_frame() {
        let x = pose(5, 3);
        let z = zero_velocity_predict(&x, 4).unwrap();
        assert_eq!(z.shape(), &[4, 3, 4]);
        for t in 0..4 {
            assert_eq!(z.select_first(t), x.select_first(4));
        }
        // a constant ground truth is predicted exactly
        let e = mean_joint_error(&[z.clone()], &[z], &[80, 160], 25.0, EulerOrder::Zyx).unwrap();
        assert_eq!(e, vec![0.0, 0.0]);
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.2, 0.5, 0.5]), 1);
        assert_eq!(argmax(&[1.0 / 3.0; 3]), 0);
    }
}
