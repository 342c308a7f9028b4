use super::rotation::Quaternion;
use super::tree::KinematicTree;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Quaternion motion clip: `frames` is `[T, J, 4]` with `(w, x, y, z)` per joint.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionSequence {
    frames: Tensor,
    pub fps: f64,
    pub tree: KinematicTree,
    pub action_id: Option<usize>,
    pub action_name: Option<String>,
}

impl MotionSequence {
    pub fn new(frames: Tensor, fps: f64, tree: KinematicTree) -> Result<Self> {
        let s = frames.shape();
        if s.len() != 3 || s[2] != 4 {
            return Err(Error::Shape(format!("motion frames must be [T, J, 4], got {s:?}")));
        }
        if s[0] == 0 {
            return Err(Error::Data("motion sequence without frames".into()));
        }
        if s[1] != tree.joints() {
            return Err(Error::Data(format!(
                "frames carry {} joints but the tree has {}",
                s[1],
                tree.joints()
            )));
        }
        if !(fps > 0.0) || !fps.is_finite() {
            return Err(Error::Data(format!("invalid frame rate {fps}")));
        }
        if !frames.all_finite() {
            return Err(Error::Data("non-finite values in motion frames".into()));
        }
        Ok(MotionSequence {
            frames,
            fps,
            tree,
            action_id: None,
            action_name: None,
        })
    }

    pub fn with_action(mut self, id: Option<usize>, name: Option<String>) -> Self {
        self.action_id = id;
        self.action_name = name;
        self
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn joints(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn quat(&self, t: usize, j: usize) -> Quaternion {
        let base = (t * self.joints() + j) * 4;
        let d = &self.frames.data()[base..base + 4];
        Quaternion::new(d[0], d[1], d[2], d[3])
    }

    /// Copy of frames `[start, end)`.
    pub fn frame_range(&self, start: usize, end: usize) -> Tensor {
        let per = self.joints() * 4;
        let data = self.frames.data()[start * per..end * per].to_vec();
        Tensor::new([end - start, self.joints(), 4], data).expect("frame range shape")
    }

    pub(crate) fn replace_frames(&self, frames: Tensor, fps: f64) -> Result<Self> {
        Ok(MotionSequence::new(frames, fps, self.tree.clone())?.with_action(self.action_id, self.action_name.clone()))
    }

    /// Removes the double-cover ambiguity along each joint trajectory.
    ///
    /// The first frame of every joint gets `w >= 0` and each later quaternion is
    /// negated when needed so that consecutive quaternions have a nonnegative dot product.
    pub fn canonicalize_hemisphere(&self) -> Result<Self> {
        let (t, j) = (self.len(), self.joints());
        let mut data = self.frames.data().to_vec();
        for joint in 0..j {
            let mut prev: Option<[f64; 4]> = None;
            for frame in 0..t {
                let base = (frame * j + joint) * 4;
                let q = &mut data[base..base + 4];
                if q.iter().all(|&v| v == 0.0) {
                    return Err(Error::Numeric(format!(
                        "zero-norm quaternion at frame {frame}, joint {joint}"
                    )));
                }
                let flip = match prev {
                    None => q[0] < 0.0,
                    Some(p) => p.iter().zip(q.iter()).map(|(a, b)| a * b).sum::<f64>() < 0.0,
                };
                if flip {
                    q.iter_mut().for_each(|v| *v = -*v);
                }
                prev = Some([q[0], q[1], q[2], q[3]]);
            }
        }
        self.replace_frames(Tensor::new(self.frames.shape().to_vec(), data)?, self.fps)
    }

    /// True when every joint trajectory satisfies `dot(q_t, q_{t+1}) >= 0`.
    pub fn is_hemisphere_continuous(&self) -> bool {
        (1..self.len()).all(|t| (0..self.joints()).all(|j| self.quat(t - 1, j).dot(self.quat(t, j)) >= 0.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq_from(quats: &[[f64; 4]]) -> MotionSequence {
        let data = quats.iter().flatten().copied().collect();
        let frames = Tensor::new([quats.len(), 1, 4], data).unwrap();
        MotionSequence::new(frames, 25.0, KinematicTree::chain(1).unwrap()).unwrap()
    }

    fn rot(angle: f64) -> [f64; 4] {
        Quaternion::from_expmap([0.0, 0.0, angle]).to_array()
    }

    #[test]
    fn rejects_bad_shapes() {
        let tree = KinematicTree::chain(2).unwrap();
        assert!(MotionSequence::new(Tensor::zeros([3, 2, 3]), 25.0, tree.clone()).is_err());
        assert!(MotionSequence::new(Tensor::zeros([3, 1, 4]), 25.0, tree.clone()).is_err());
        assert!(MotionSequence::new(Tensor::zeros([0, 2, 4]), 25.0, tree.clone()).is_err());
        assert!(MotionSequence::new(Tensor::ones([1, 2, 4]), 0.0, tree).is_err());
    }

    #[test]
    fn canonical_sequence_unchanged() {
        let s = seq_from(&[rot(0.1), rot(0.2), rot(0.3)]);
        assert_eq!(s.canonicalize_hemisphere().unwrap(), s);
    }

    #[test]
    fn negated_frame_is_restored_with_same_rotation() {
        let mut q = [rot(0.1), rot(0.2), rot(0.3)];
        q[1] = q[1].map(|v| -v);
        let s = seq_from(&q);
        assert!(!s.is_hemisphere_continuous());
        let c = s.canonicalize_hemisphere().unwrap();
        assert!(c.is_hemisphere_continuous());
        assert_eq!(c.quat(1, 0).to_array(), rot(0.2));
        for t in 0..3 {
            let a = s.quat(t, 0).to_matrix().unwrap();
            let b = c.quat(t, 0).to_matrix().unwrap();
            for r in 0..3 {
                for k in 0..3 {
                    assert!((a[r][k] - b[r][k]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn first_frame_forced_to_positive_w() {
        let s = seq_from(&[rot(0.4).map(|v| -v), rot(0.5).map(|v| -v)]);
        let c = s.canonicalize_hemisphere().unwrap();
        assert!(c.quat(0, 0).w >= 0.0);
        assert!(c.is_hemisphere_continuous());
    }

    #[test]
    fn zero_quaternion_is_an_error() {
        let s = seq_from(&[rot(0.1), [0.0; 4]]);
        assert!(matches!(s.canonicalize_hemisphere(), Err(Error::Numeric(_))));
    }
}
