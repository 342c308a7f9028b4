use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::skeleton::MotionSequence;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    /// Observed frames `N`.
    pub n: usize,
    /// Target frames `M`.
    pub m: usize,
    pub stride: usize,
}

impl Default for WindowSpec {
    fn default() -> Self {
        WindowSpec {
            n: 50,
            m: 10,
            stride: 5,
        }
    }
}

impl WindowSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.m == 0 || self.stride == 0 {
            return Err(Error::InvalidArgument(format!(
                "window sizes and stride must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

/// One training or test sample cut from a sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    /// `[N, J, 4]` observed frames; the last row is the seed pose.
    pub x: Tensor,
    /// `[M, J, 4]` frames to predict.
    pub y: Tensor,
    pub label: Option<usize>,
    /// Index of the source sequence and first frame of `x` within it.
    pub sequence: usize,
    pub start: usize,
}

/// Keeps every `fps / target_fps`-th frame starting at frame 0.
pub fn downsample(seq: &MotionSequence, target_fps: f64) -> Result<MotionSequence> {
    let ratio = seq.fps / target_fps;
    if !(target_fps > 0.0) || ratio < 1.0 || ratio.fract() != 0.0 {
        return Err(Error::InvalidArgument(format!(
            "cannot downsample {} fps to {target_fps} fps",
            seq.fps
        )));
    }
    let step = ratio as usize;
    if step == 1 {
        return Ok(seq.clone());
    }
    let kept: Vec<Tensor> = (0..seq.len())
        .step_by(step)
        .map(|t| seq.frame_range(t, t + 1))
        .collect();
    let data = kept.into_iter().flat_map(Tensor::into_data).collect();
    let frames = Tensor::new([seq.len().div_ceil(step), seq.joints(), 4], data)?;
    seq.replace_frames(frames, target_fps)
}

/// Sliding windows of `N` observed and `M` target frames. Too-short sequences yield none.
pub fn make_windows(seq: &MotionSequence, sequence: usize, spec: &WindowSpec) -> Result<Vec<Window>> {
    spec.validate()?;
    let need = spec.n + spec.m;
    if seq.len() < need {
        return Ok(Vec::new());
    }
    Ok((0..=seq.len() - need)
        .step_by(spec.stride)
        .map(|s| Window {
            x: seq.frame_range(s, s + spec.n),
            y: seq.frame_range(s + spec.n, s + need),
            label: seq.action_id,
            sequence,
            start: s,
        })
        .collect())
}

pub fn windows_of(seqs: &[MotionSequence], spec: &WindowSpec) -> Result<Vec<Window>> {
    let mut out = Vec::new();
    for (i, s) in seqs.iter().enumerate() {
        out.extend(make_windows(s, i, spec)?);
    }
    Ok(out)
}

/// Stacks windows into `[B, N, J, 4]`, `[B, M, J, 4]` and labels.
pub fn batch_of<'a>(windows: impl IntoIterator<Item = &'a Window>) -> Result<(Tensor, Tensor, Vec<Option<usize>>)> {
    let (mut xs, mut ys, mut labels) = (Vec::new(), Vec::new(), Vec::new());
    for w in windows {
        xs.push(w.x.clone());
        ys.push(w.y.clone());
        labels.push(w.label);
    }
    if xs.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    Ok((Tensor::stack(&xs)?, Tensor::stack(&ys)?, labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::{KinematicTree, Quaternion};

    fn seq(t: usize, fps: f64) -> MotionSequence {
        let data = (0..t)
            .flat_map(|i| Quaternion::from_expmap([0.01 * i as f64, 0.0, 0.0]).to_array())
            .collect();
        MotionSequence::new(
            Tensor::new([t, 1, 4], data).unwrap(),
            fps,
            KinematicTree::chain(1).unwrap(),
        )
        .unwrap()
        .with_action(Some(2), Some("x".into()))
    }

    #[test]
    fn halves_frame_rate() {
        let s = seq(100, 50.0);
        let d = downsample(&s, 25.0).unwrap();
        assert_eq!((d.len(), d.fps), (50, 25.0));
        for k in 0..50 {
            assert_eq!(d.quat(k, 0), s.quat(2 * k, 0));
        }
        assert_eq!(d.action_id, Some(2));
    }

    #[test]
    fn same_rate_is_unchanged() {
        let s = seq(7, 25.0);
        assert_eq!(downsample(&s, 25.0).unwrap(), s);
    }

    #[test]
    fn non_divisible_rate_rejected() {
        assert!(downsample(&seq(10, 50.0), 30.0).is_err());
        assert!(downsample(&seq(10, 25.0), 50.0).is_err());
        assert!(downsample(&seq(10, 25.0), 0.0).is_err());
    }

    #[test]
    fn window_counts() {
        let spec = WindowSpec { n: 4, m: 3, stride: 1 };
        assert_eq!(make_windows(&seq(7, 25.0), 0, &spec).unwrap().len(), 1);
        assert_eq!(make_windows(&seq(9, 25.0), 0, &spec).unwrap().len(), 3);
        assert!(make_windows(&seq(6, 25.0), 0, &spec).unwrap().is_empty());
        let strided = WindowSpec { stride: 2, ..spec };
        assert_eq!(make_windows(&seq(10, 25.0), 0, &strided).unwrap().len(), 2);
    }

    #[test]
    fn windows_are_contiguous_and_labeled() {
        let s = seq(12, 25.0);
        let spec = WindowSpec { n: 5, m: 2, stride: 3 };
        for w in make_windows(&s, 4, &spec).unwrap() {
            assert_eq!(w.x, s.frame_range(w.start, w.start + 5));
            assert_eq!(w.y, s.frame_range(w.start + 5, w.start + 7));
            assert_eq!(
                w.x.select_first(4),
                s.frame_range(w.start + 4, w.start + 5).select_first(0)
            );
            assert_eq!((w.label, w.sequence), (Some(2), 4));
        }
    }

    #[test]
    fn windows_do_not_alias() {
        let s = seq(9, 25.0);
        let spec = WindowSpec { n: 4, m: 3, stride: 1 };
        let mut ws = make_windows(&s, 0, &spec).unwrap();
        let before = ws[1].clone();
        ws[0].x.data_mut()[4..8].fill(9.0);
        assert_eq!(ws[1], before);
    }

    #[test]
    fn batching_stacks() {
        let ws = make_windows(&seq(9, 25.0), 0, &WindowSpec { n: 4, m: 3, stride: 1 }).unwrap();
        let (x, y, l) = batch_of(&ws).unwrap();
        assert_eq!(x.shape(), &[3, 4, 1, 4]);
        assert_eq!(y.shape(), &[3, 3, 1, 4]);
        assert_eq!(l, vec![Some(2); 3]);
        assert!(batch_of(&[]).is_err());
    }
}
