use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::skeleton::{KinematicTree, MotionSequence, Quaternion};

pub const SCHEMA: &str = "natmotion/1";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Repr {
    #[default]
    Quat,
    Expmap,
}

impl Repr {
    fn width(self) -> usize {
        match self {
            Repr::Quat => 4,
            Repr::Expmap => 3,
        }
    }
}

/// On-disk sequence document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceFile {
    pub schema: String,
    pub action: String,
    pub fps: f64,
    pub joints: usize,
    pub parents: Vec<i64>,
    pub repr: Repr,
    /// `T × J × K`, `K = 4` for quaternions and 3 for exponential maps.
    pub frames: Vec<Vec<Vec<f64>>>,
}

/// Ingestion options.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LoadOptions {
    /// Joint rows to discard (global translation or rotation channels).
    /// Children of a dropped joint are re-attached to its nearest kept ancestor.
    pub drop_joints: Vec<usize>,
}

impl SequenceFile {
    pub fn from_sequence(seq: &MotionSequence, repr: Repr) -> Result<Self> {
        let mut frames = Vec::with_capacity(seq.len());
        for t in 0..seq.len() {
            let mut row = Vec::with_capacity(seq.joints());
            for j in 0..seq.joints() {
                let q = seq.quat(t, j);
                row.push(match repr {
                    Repr::Quat => q.to_array().to_vec(),
                    Repr::Expmap => q.to_expmap()?.to_vec(),
                });
            }
            frames.push(row);
        }
        Ok(SequenceFile {
            schema: SCHEMA.into(),
            action: seq.action_name.clone().unwrap_or_default(),
            fps: seq.fps,
            joints: seq.joints(),
            parents: seq.tree.to_signed(),
            repr,
            frames,
        })
    }

    /// Validates the document and converts it to a canonical quaternion sequence.
    pub fn into_sequence(self, opts: &LoadOptions) -> Result<MotionSequence> {
        if self.schema != SCHEMA {
            return Err(Error::Data(format!(
                "unsupported schema {:?}, expected {SCHEMA:?}",
                self.schema
            )));
        }
        if self.parents.len() != self.joints {
            return Err(Error::Data(format!(
                "{} parents listed for {} joints",
                self.parents.len(),
                self.joints
            )));
        }
        let tree = KinematicTree::from_signed(&self.parents).map_err(|e| Error::Data(e.to_string()))?;
        let k = self.repr.width();
        let mut data = Vec::with_capacity(self.frames.len() * self.joints * 4);
        for (t, frame) in self.frames.iter().enumerate() {
            if frame.len() != self.joints {
                return Err(Error::Data(format!(
                    "frame {t} has {} joints, expected {}",
                    frame.len(),
                    self.joints
                )));
            }
            for (j, v) in frame.iter().enumerate() {
                if v.len() != k {
                    return Err(Error::Data(format!(
                        "frame {t} joint {j}: {} values, expected {k}",
                        v.len()
                    )));
                }
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Data(format!("non-finite value at frame {t} joint {j}")));
                }
                let q = match self.repr {
                    Repr::Quat => Quaternion::new(v[0], v[1], v[2], v[3]),
                    Repr::Expmap => Quaternion::from_expmap([v[0], v[1], v[2]]),
                };
                data.extend(q.to_array());
            }
        }
        let frames = Tensor::new([self.frames.len(), self.joints, 4], data)?;
        let seq = MotionSequence::new(frames, self.fps, tree).map_err(as_data)?;
        let seq = drop_joints(&seq, &opts.drop_joints)?;
        let action = (!self.action.is_empty()).then_some(self.action);
        Ok(seq.canonicalize_hemisphere()?.with_action(None, action))
    }
}

fn as_data(e: Error) -> Error {
    match e {
        Error::Shape(m) => Error::Data(m),
        other => other,
    }
}

fn drop_joints(seq: &MotionSequence, drop: &[usize]) -> Result<MotionSequence> {
    if drop.is_empty() {
        return Ok(seq.clone());
    }
    let (tree, kept) = seq.tree.without_joints(drop).map_err(|e| Error::Data(e.to_string()))?;
    let mut data = Vec::with_capacity(seq.len() * kept.len() * 4);
    for t in 0..seq.len() {
        for &j in &kept {
            data.extend(seq.quat(t, j).to_array());
        }
    }
    let frames = Tensor::new([seq.len(), kept.len(), 4], data)?;
    Ok(MotionSequence::new(frames, seq.fps, tree)?.with_action(seq.action_id, seq.action_name.clone()))
}

pub fn parse_sequence(json: &str, opts: &LoadOptions) -> Result<MotionSequence> {
    let file: SequenceFile = serde_json::from_str(json).map_err(|e| Error::Data(format!("sequence file: {e}")))?;
    file.into_sequence(opts)
}

pub fn load_sequence(path: impl AsRef<Path>, opts: &LoadOptions) -> Result<MotionSequence> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_sequence(&text, opts).map_err(|e| match e {
        Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn save_sequence(seq: &MotionSequence, path: impl AsRef<Path>, repr: Repr) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string(&SequenceFile::from_sequence(seq, repr)?)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Sequences of a directory with action names mapped to class indices.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub sequences: Vec<MotionSequence>,
    /// Class index `i` is `actions[i]`.
    pub actions: Vec<String>,
}

impl Dataset {
    /// Labels sequences from their sorted distinct action names.
    pub fn from_sequences(sequences: Vec<MotionSequence>) -> Self {
        let mut actions: Vec<String> = sequences.iter().filter_map(|s| s.action_name.clone()).collect();
        actions.sort();
        actions.dedup();
        Self::with_actions(sequences, actions).expect("every action is listed")
    }

    /// Labels sequences against a fixed action list (e.g. the one a model was trained on).
    pub fn with_actions(sequences: Vec<MotionSequence>, actions: Vec<String>) -> Result<Self> {
        let sequences = sequences
            .into_iter()
            .map(|s| {
                let id = match &s.action_name {
                    Some(name) => Some(
                        actions
                            .iter()
                            .position(|a| a == name)
                            .ok_or_else(|| Error::Data(format!("unknown action {name:?}")))?,
                    ),
                    None => None,
                };
                let name = s.action_name.clone();
                Ok(s.with_action(id, name))
            })
            .collect::<Result<_>>()?;
        Ok(Dataset { sequences, actions })
    }

    pub fn is_labeled(&self) -> bool {
        self.sequences.iter().all(|s| s.action_id.is_some())
    }
}

/// Every `*.json` file of `dir` except `index.json`, in file-name order.
pub fn load_dir(dir: impl AsRef<Path>, opts: &LoadOptions) -> Result<Vec<MotionSequence>> {
    let dir = dir.as_ref();
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json") && p.file_name().is_some_and(|n| n != "index.json"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Data(format!("no sequence files in {}", dir.display())));
    }
    paths.iter().map(|p| load_sequence(p, opts)).collect()
}

pub fn load_dataset(dir: impl AsRef<Path>, opts: &LoadOptions) -> Result<Dataset> {
    Ok(Dataset::from_sequences(load_dir(dir, opts)?))
}
