use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// How joint adjacency is derived from the kinematic tree.
///
/// Rows of the adjacency aggregate from columns, so `Forward` lets each child
/// read its parent and `Backward` lets each parent read its children.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "seed")]
pub enum GraphType {
    Bidirectional,
    Forward,
    Backward,
    None,
    Random(u64),
}

impl fmt::Display for GraphType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GraphType::Bidirectional => f.write_str("bidirectional"),
            GraphType::Forward => f.write_str("forward"),
            GraphType::Backward => f.write_str("backward"),
            GraphType::None => f.write_str("none"),
            GraphType::Random(seed) => write!(f, "random:{seed}"),
        }
    }
}

impl FromStr for GraphType {
    type Err = Error;

    /// Accepts `bidirectional`, `forward`, `backward`, `none`, `random` and `random:SEED`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bidirectional" => Ok(GraphType::Bidirectional),
            "forward" => Ok(GraphType::Forward),
            "backward" => Ok(GraphType::Backward),
            "none" => Ok(GraphType::None),
            "random" => Ok(GraphType::Random(0)),
            other => other
                .strip_prefix("random:")
                .and_then(|seed| seed.parse().ok())
                .map(GraphType::Random)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown graph type {other:?}"))),
        }
    }
}

/// Rooted tree of joints, each non-root joint rotating relative to its parent.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KinematicTree {
    parents: Vec<Option<usize>>,
}

impl KinematicTree {
    /// Validates that there is exactly one root and that parent links are acyclic.
    pub fn new(parents: Vec<Option<usize>>) -> Result<Self> {
        let j = parents.len();
        if j == 0 {
            return Err(Error::Data("kinematic tree without joints".into()));
        }
        let roots = parents.iter().filter(|p| p.is_none()).count();
        if roots != 1 {
            return Err(Error::Data(format!(
                "kinematic tree needs exactly one root, found {roots}"
            )));
        }
        for (i, p) in parents.iter().enumerate() {
            if let Some(p) = *p {
                if p >= j {
                    return Err(Error::Data(format!("joint {i} has out-of-range parent {p}")));
                }
            }
        }
        for start in 0..j {
            let mut cur = start;
            let mut hops = 0;
            while let Some(p) = parents[cur] {
                cur = p;
                hops += 1;
                if hops > j {
                    return Err(Error::Data(format!("cycle through joint {start}")));
                }
            }
        }
        Ok(KinematicTree { parents })
    }

    /// Parents in file form: `-1` marks the root.
    pub fn from_signed(parents: &[i64]) -> Result<Self> {
        let converted = parents
            .iter()
            .map(|&p| match p {
                -1 => Ok(None),
                p if p >= 0 => Ok(Some(p as usize)),
                p => Err(Error::Data(format!("invalid parent index {p}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(converted)
    }

    pub fn to_signed(&self) -> Vec<i64> {
        self.parents.iter().map(|p| p.map_or(-1, |p| p as i64)).collect()
    }

    /// A chain `0 ← 1 ← 2 ← …`.
    pub fn chain(joints: usize) -> Result<Self> {
        Self::new((0..joints).map(|i| i.checked_sub(1)).collect())
    }

    pub fn joints(&self) -> usize {
        self.parents.len()
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.parents
    }

    pub fn root(&self) -> usize {
        self.parents
            .iter()
            .position(Option::is_none)
            .expect("validated tree has a root")
    }

    pub fn children(&self, joint: usize) -> impl Iterator<Item = usize> + '_ {
        self.parents
            .iter()
            .enumerate()
            .filter_map(move |(i, p)| (*p == Some(joint)).then_some(i))
    }

    /// Removes the given joints, re-attaching their children to the nearest kept ancestor.
    pub fn without_joints(&self, drop: &[usize]) -> Result<(Self, Vec<usize>)> {
        let j = self.joints();
        if let Some(&bad) = drop.iter().find(|&&d| d >= j) {
            return Err(Error::Data(format!("cannot drop joint {bad} of {j}")));
        }
        let kept: Vec<usize> = (0..j).filter(|i| !drop.contains(i)).collect();
        let new_index = |old: usize| kept.iter().position(|&k| k == old);
        let mut parents = Vec::with_capacity(kept.len());
        for &k in &kept {
            let mut p = self.parents[k];
            while let Some(pp) = p {
                if !drop.contains(&pp) {
                    break;
                }
                p = self.parents[pp];
            }
            parents.push(p.and_then(new_index));
        }
        Ok((Self::new(parents)?, kept))
    }

    /// Raw adjacency `A` with unit diagonal for the given graph type.
    pub fn adjacency(&self, graph: GraphType) -> Tensor {
        let j = self.joints();
        let mut a = Tensor::eye(j);
        let d = a.data_mut();
        match graph {
            GraphType::None => {}
            GraphType::Bidirectional | GraphType::Forward | GraphType::Backward => {
                for (child, p) in self.parents.iter().enumerate() {
                    let Some(parent) = *p else { continue };
                    if matches!(graph, GraphType::Bidirectional | GraphType::Forward) {
                        d[child * j + parent] = 1.0;
                    }
                    if matches!(graph, GraphType::Bidirectional | GraphType::Backward) {
                        d[parent * j + child] = 1.0;
                    }
                }
            }
            GraphType::Random(seed) => {
                // Erdős–Rényi with the edge density of a tree.
                let p = (2.0 / j as f64).min(1.0);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                for r in 0..j {
                    for c in r + 1..j {
                        if rng.random::<f64>() < p {
                            d[r * j + c] = 1.0;
                            d[c * j + r] = 1.0;
                        }
                    }
                }
            }
        }
        a
    }

    /// `D^{-1/2} A D^{-1/2}` with `D_ii = Σ_j A_ij`.
    pub fn normalized_adjacency(&self, graph: GraphType) -> Result<Tensor> {
        normalize_adjacency(&self.adjacency(graph))
    }
}

pub fn normalize_adjacency(a: &Tensor) -> Result<Tensor> {
    let j = a.shape()[0];
    let deg: Vec<f64> = a.rows().map(|r| r.iter().sum()).collect();
    if let Some(i) = deg.iter().position(|&d| d <= 0.0) {
        return Err(Error::Numeric(format!("joint {i} has zero degree")));
    }
    let inv: Vec<f64> = deg.iter().map(|d| 1.0 / d.sqrt()).collect();
    Ok(Tensor::from_fn([j, j], |idx| {
        let (r, c) = (idx / j, idx % j);
        inv[r] * a.data()[idx] * inv[c]
    }))
}
