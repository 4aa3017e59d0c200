//! Point-frame ingestion, synthetic scene generation, seen/unseen
//! splitting, and batching.

pub mod batch;
pub mod io;
pub mod scene;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{GzslError, Result};

pub use batch::{inverse_frequency_weights, make_batches, Batch};
pub use io::{load_frame, write_frame, FRAME_MAGIC};
pub use scene::{generate_scene, SceneSpec};

pub type ClassId = u32;

/// The label taxonomy of the collaborative-robot scenes: label 0 is
/// "unlabeled" and is dropped before training or evaluation.
pub const CLASS_FLOOR: ClassId = 1;
pub const CLASS_WALL: ClassId = 2;
pub const CLASS_COBOT: ClassId = 3;
pub const CLASS_HUMAN: ClassId = 4;
pub const CLASS_AGV: ClassId = 5;

pub fn class_name(id: ClassId) -> String {
    match id {
        0 => "unlabeled".to_string(),
        CLASS_FLOOR => "floor".to_string(),
        CLASS_WALL => "wall".to_string(),
        CLASS_COBOT => "cobot".to_string(),
        CLASS_HUMAN => "human".to_string(),
        CLASS_AGV => "agv".to_string(),
        other => format!("class{other}"),
    }
}

pub fn default_classes() -> Vec<(ClassId, String)> {
    [CLASS_FLOOR, CLASS_WALL, CLASS_COBOT, CLASS_HUMAN, CLASS_AGV]
        .into_iter()
        .map(|id| (id, class_name(id)))
        .collect()
}

/// One labeled 3D scan: point coordinates in meters plus per-point labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PointFrame {
    pub points: Vec<[f64; 3]>,
    pub labels: Vec<ClassId>,
    pub frame_id: String,
}

impl PointFrame {
    pub fn new(points: Vec<[f64; 3]>, labels: Vec<ClassId>, frame_id: String) -> Result<Self> {
        if points.len() != labels.len() {
            return Err(GzslError::shape(format!(
                "frame {frame_id}: {} points but {} labels",
                points.len(),
                labels.len()
            )));
        }
        Ok(PointFrame {
            points,
            labels,
            frame_id,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn count_label(&self, label: ClassId) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }
}

/// Disjoint assignment of class ids to the seen and unseen sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    seen: BTreeSet<ClassId>,
    unseen: BTreeSet<ClassId>,
}

impl SplitConfig {
    pub fn new(seen: BTreeSet<ClassId>, unseen: BTreeSet<ClassId>) -> Result<Self> {
        if let Some(id) = seen.intersection(&unseen).next() {
            return Err(GzslError::arg(format!(
                "class {id} appears in both the seen and unseen sets"
            )));
        }
        Ok(SplitConfig { seen, unseen })
    }

    /// The default split: walls, cobots, and humans are seen; floor and AGV
    /// are unseen.
    pub fn covered_default() -> Self {
        SplitConfig {
            seen: [CLASS_WALL, CLASS_COBOT, CLASS_HUMAN].into(),
            unseen: [CLASS_FLOOR, CLASS_AGV].into(),
        }
    }

    pub fn seen(&self) -> &BTreeSet<ClassId> {
        &self.seen
    }

    pub fn unseen(&self) -> &BTreeSet<ClassId> {
        &self.unseen
    }

    pub fn is_seen(&self, id: ClassId) -> bool {
        self.seen.contains(&id)
    }

    pub fn is_unseen(&self, id: ClassId) -> bool {
        self.unseen.contains(&id)
    }

    pub fn contains(&self, id: ClassId) -> bool {
        self.is_seen(id) || self.is_unseen(id)
    }

    /// All classes in the split, ascending.
    pub fn classes(&self) -> Vec<ClassId> {
        self.seen.union(&self.unseen).copied().collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.seen.intersection(&self.unseen).next().is_some() {
            return Err(GzslError::Config(
                "seen and unseen class sets overlap".into(),
            ));
        }
        if self.seen.is_empty() && self.unseen.is_empty() {
            return Err(GzslError::Config("split has no classes".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitMode {
    /// Keep only seen-class points; unseen and unlabeled points are dropped.
    BackboneTraining,
    /// Keep all labeled points, tagged seen/unseen; unlabeled points dropped.
    GzslEval,
}

/// A frame filtered by [`split_frames`], with a per-point seen tag.
#[derive(Debug, Clone)]
pub struct TaggedFrame {
    pub frame: PointFrame,
    pub seen: Vec<bool>,
}

/// Partitions frames for a pipeline stage. In backbone-training mode the
/// output contains no unseen-class point; in eval mode every labeled point
/// survives with its seen/unseen tag.
pub fn split_frames(frames: &[PointFrame], split: &SplitConfig, mode: SplitMode) -> Vec<TaggedFrame> {
    frames
        .iter()
        .map(|frame| {
            let mut points = Vec::new();
            let mut labels = Vec::new();
            let mut seen = Vec::new();
            for (point, &label) in frame.points.iter().zip(&frame.labels) {
                let keep = match mode {
                    SplitMode::BackboneTraining => split.is_seen(label),
                    SplitMode::GzslEval => split.contains(label),
                };
                if keep {
                    points.push(*point);
                    labels.push(label);
                    seen.push(split.is_seen(label));
                }
            }
            TaggedFrame {
                frame: PointFrame {
                    points,
                    labels,
                    frame_id: frame.frame_id.clone(),
                },
                seen,
            }
        })
        .collect()
}
