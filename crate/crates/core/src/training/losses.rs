use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var, PROB_FLOOR};

/// Per-iteration loss values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recst: f64,
    pub pnlty: f64,
    pub cls1: f64,
    pub cls2: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Fills in `total = recst + λp·pnlty + λc·(cls1 + cls2)`.
    pub fn combine(recst: f64, pnlty: f64, cls1: f64, cls2: f64, lambda_pnlty: f64, lambda_cls: f64) -> Self {
        LossBreakdown {
            recst,
            pnlty,
            cls1,
            cls2,
            total: recst + lambda_pnlty * pnlty + lambda_cls * (cls1 + cls2),
        }
    }
}

fn joint_frames(shape: &[usize]) -> Result<f64> {
    if shape.len() < 2 || shape[shape.len() - 1] != 4 {
        return Err(Error::Shape(format!("expected [..., J, 4] quaternions, got {shape:?}")));
    }
    Ok(shape[..shape.len() - 1].iter().product::<usize>().max(1) as f64)
}

/// Mean over joint-frames (and batch) of the L1 distance between quaternions.
pub fn loss_recst(tape: &mut Tape, pred: Var, truth: Var) -> Result<Var> {
    if tape.shape(pred) != tape.shape(truth) {
        return Err(Error::Shape(format!(
            "prediction {:?} vs target {:?}",
            tape.shape(pred),
            tape.shape(truth)
        )));
    }
    let n = joint_frames(tape.shape(pred))?;
    let d = tape.sub(pred, truth)?;
    let a = tape.abs(d);
    let s = tape.sum(a);
    Ok(tape.scale(s, 1.0 / n))
}

/// Mean over joint-frames of `(‖q‖² − 1)²`.
pub fn loss_pnlty(tape: &mut Tape, pred: Var) -> Result<Var> {
    let n = joint_frames(tape.shape(pred))?;
    let sq = tape.mul(pred, pred)?;
    let norm2 = tape.sum_last(sq);
    let dev = tape.add_scalar(norm2, -1.0);
    let dev2 = tape.mul(dev, dev)?;
    let s = tape.sum(dev2);
    Ok(tape.scale(s, 1.0 / n))
}

/// Batch mean of `−log p_label` from log-probabilities `[B, C]`.
pub fn loss_cls(tape: &mut Tape, logp: Var, labels: &[usize]) -> Result<Var> {
    tape.nll(logp, labels)
}

/// [`loss_recst`] on plain tensors.
pub fn recst(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    let mut t = Tape::new();
    let (p, y) = (t.constant(pred.clone()), t.constant(truth.clone()));
    let l = loss_recst(&mut t, p, y)?;
    Ok(t.value(l).item())
}

/// [`loss_pnlty`] on a plain tensor.
pub fn pnlty(pred: &Tensor) -> Result<f64> {
    let mut t = Tape::new();
    let p = t.constant(pred.clone());
    let l = loss_pnlty(&mut t, p)?;
    Ok(t.value(l).item())
}

/// `−log probs[label]` with the probability floored at [`PROB_FLOOR`]; the flag
/// reports whether the floor was hit.
pub fn cls(probs: &[f64], label: usize) -> Result<(f64, bool)> {
    let p = *probs
        .get(label)
        .ok_or_else(|| Error::InvalidArgument(format!("label {label} out of {} classes", probs.len())))?;
    Ok((-p.max(PROB_FLOOR).ln(), p < PROB_FLOOR))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(shape: [usize; 3], f: impl FnMut(usize) -> f64) -> Tensor {
        Tensor::from_fn(shape, f)
    }

    #[test]
    fn recst_examples() {
        let y = q([3, 2, 4], |i| (i as f64 * 0.3).sin());
        assert_eq!(recst(&y, &y).unwrap(), 0.0);
        let shifted = y.map(|v| v + 0.1);
        assert!((recst(&shifted, &y).unwrap() - 0.4).abs() < 1e-12);
        assert!(recst(&y, &q([2, 2, 4], |_| 0.0)).is_err());
    }

    #[test]
    fn recst_is_invariant_to_joint_frame_permutation() {
        let p = q([2, 3, 4], |i| (i as f64).cos());
        let y = q([2, 3, 4], |i| (i as f64 * 0.7).sin());
        let perm = [4, 2, 0, 5, 1, 3];
        let permute = |t: &Tensor| {
            let rows: Vec<&[f64]> = t.data().chunks(4).collect();
            let data = perm.iter().flat_map(|&k| rows[k].to_vec()).collect();
            Tensor::new([2, 3, 4], data).unwrap()
        };
        let a = recst(&p, &y).unwrap();
        let b = recst(&permute(&p), &permute(&y)).unwrap();
        assert!((a - b).abs() < 1e-14);
    }

    #[test]
    fn pnlty_examples() {
        let unit = q([2, 3, 4], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        assert_eq!(pnlty(&unit).unwrap(), 0.0);
        let big = Tensor::new([1, 1, 4], vec![2.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(pnlty(&big).unwrap(), 9.0);
        assert_eq!(pnlty(&Tensor::zeros([3, 5, 4])).unwrap(), 1.0);
    }

    #[test]
    fn cls_examples() {
        assert_eq!(cls(&[0.0, 1.0], 1).unwrap(), (0.0, false));
        let uniform = vec![1.0 / 15.0; 15];
        assert!((cls(&uniform, 3).unwrap().0 - 15f64.ln()).abs() < 1e-12);
        let (l, flagged) = cls(&[1.0, 0.0], 1).unwrap();
        assert!(flagged);
        assert!((l - 1e12f64.ln()).abs() < 1e-9);
        assert!(cls(&[1.0], 2).is_err());
    }

    #[test]
    fn cls_decreases_with_label_probability() {
        let mut prev = f64::INFINITY;
        for k in 1..10 {
            let p = k as f64 / 10.0;
            let rest = (1.0 - p) / 2.0;
            let l = cls(&[rest, p, rest], 1).unwrap().0;
            assert!(l < prev);
            prev = l;
        }
    }

    #[test]
    fn tape_nll_matches_scalar_cls() {
        let mut t = Tape::new();
        let logits = t.constant(Tensor::new([2, 3], vec![0.1, 2.0, -1.0, 0.5, 0.5, 0.3]).unwrap());
        let logp = t.log_softmax(logits);
        let l = loss_cls(&mut t, logp, &[1, 2]).unwrap();
        let probs = t.value(logp).map(f64::exp);
        let rows: Vec<&[f64]> = probs.rows().collect();
        let expect = (cls(rows[0], 1).unwrap().0 + cls(rows[1], 2).unwrap().0) / 2.0;
        assert!((t.value(l).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn combine_is_linear() {
        let b = LossBreakdown::combine(1.0, 2.0, 3.0, 4.0, 0.01, 0.5);
        assert!((b.total - (1.0 + 0.02 + 3.5)).abs() < 1e-12);
    }
}
