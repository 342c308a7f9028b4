//! Kinematic trees, joint adjacency and rotation representations.

mod rotation;
mod sequence;
mod tree;

pub use rotation::{matmul3, EulerOrder, Mat3, Quaternion};
pub use sequence::MotionSequence;
pub use tree::{normalize_adjacency, GraphType, KinematicTree};
