//! Demonstration data model, pose labeling and the dataset file format.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Pose;
use crate::jsonfmt;
use crate::simenv::{SceneDescription, Variant};

pub const FORMAT_VERSION: u32 = 1;
pub const DEFAULT_UPSAMPLE: u32 = 10;

#[derive(Debug, Error)]
pub enum DemoError {
    #[error("validation error: {0}")]
    Validation(String),
    #[error("interval [{start}, {end}] s exceeds the demonstration duration of {duration} s")]
    Range { start: f64, end: f64, duration: f64 },
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("unsupported dataset format_version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<serde_json::Error> for DemoError {
    fn from(e: serde_json::Error) -> Self {
        DemoError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PoseLabel {
    /// Data-dependent: copied from the source after adaptation.
    D,
    /// Replanning: regenerated by the planner.
    R,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledPose {
    /// End-effector pose in the world frame.
    pub pose: Pose,
    /// 0 open, 1 closed.
    pub gripper: f64,
    pub label: PoseLabel,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubtaskSegment {
    /// Inclusive.
    pub start: usize,
    /// Exclusive.
    pub end: usize,
    pub target_object: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grasp_object: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentBoundary {
    pub end_index: usize,
    pub target_object: String,
    #[serde(default)]
    pub grasp_object: Option<String>,
}

/// A time interval in seconds, as returned by video analysis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demonstration {
    pub id: String,
    /// Where the demonstration came from (source ids of the reused segments).
    pub source_id: String,
    pub poses: Vec<LabeledPose>,
    pub segments: Vec<SubtaskSegment>,
    pub scene: SceneDescription,
    /// End-effector pose in the grasped object's frame at grasp time, per object.
    #[serde(default)]
    pub grasp_offsets: BTreeMap<String, Pose>,
}

impl Demonstration {
    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn segment_poses(&self, index: usize) -> &[LabeledPose] {
        let s = &self.segments[index];
        &self.poses[s.start..s.end]
    }

    pub fn validate(&self) -> Result<(), DemoError> {
        let n = self.poses.len();
        for (i, p) in self.poses.iter().enumerate() {
            if !(0.0..=1.0).contains(&p.gripper) {
                return Err(DemoError::Validation(format!(
                    "{}: gripper value {} at pose {i} outside [0, 1]",
                    self.id, p.gripper
                )));
            }
        }
        let mut cursor = 0;
        for (i, s) in self.segments.iter().enumerate() {
            if s.start != cursor || s.end <= s.start {
                return Err(DemoError::Validation(format!(
                    "{}: segment {i} [{}, {}) breaks the contiguous cover",
                    self.id, s.start, s.end
                )));
            }
            cursor = s.end;
            if let Some(g) = &s.grasp_object {
                if !self.grasp_offsets.contains_key(g) {
                    return Err(DemoError::Validation(format!(
                        "{}: segment {i} grasps '{g}' but no grasp offset is recorded",
                        self.id
                    )));
                }
            }
        }
        if !self.segments.is_empty() && cursor != n {
            return Err(DemoError::Validation(format!(
                "{}: segments cover [0, {cursor}) but the demonstration has {n} poses",
                self.id
            )));
        }
        Ok(())
    }
}

fn video_index(t: f64, fps: f64, upsample: u32) -> u64 {
    // half-up on the upsampled video index
    (t * fps * upsample as f64 + 0.5).floor().max(0.0) as u64
}

/// Pose index range `[start, end)` covered by `interval`.
pub fn interval_to_indices(interval: &Interval, fps: f64, upsample: u32) -> (usize, usize) {
    let up = upsample.max(1) as u64;
    let s = video_index(interval.start, fps, upsample) / up;
    let e = video_index(interval.end, fps, upsample) / up;
    (s as usize, e as usize)
}

/// Labels poses inside any interval `D` and all others `R`.
pub fn label_from_intervals(
    demo: &Demonstration,
    intervals: &[Interval],
    fps: f64,
    upsample: u32,
) -> Result<Demonstration, DemoError> {
    if !(fps > 0.0 && fps.is_finite()) {
        return Err(DemoError::Validation(format!("fps must be positive, got {fps}")));
    }
    if upsample == 0 {
        return Err(DemoError::Validation("upsample must be >= 1".into()));
    }
    let n = demo.poses.len();
    let duration = n as f64 / fps;
    for (k, iv) in intervals.iter().enumerate() {
        if !(iv.start.is_finite() && iv.end.is_finite()) || iv.start >= iv.end {
            return Err(DemoError::Validation(format!(
                "interval {k} must satisfy start < end, got [{}, {}]",
                iv.start, iv.end
            )));
        }
        if iv.start < 0.0 || iv.end > duration + 1e-9 {
            return Err(DemoError::Range {
                start: iv.start,
                end: iv.end,
                duration,
            });
        }
        if k > 0 && intervals[k - 1].end > iv.start {
            return Err(DemoError::Validation(format!(
                "intervals {} and {k} overlap or are unsorted",
                k - 1
            )));
        }
    }
    let mut out = demo.clone();
    for p in out.poses.iter_mut() {
        p.label = PoseLabel::R;
    }
    for iv in intervals {
        let (s, e) = interval_to_indices(iv, fps, upsample);
        for p in out.poses[s.min(n)..e.min(n)].iter_mut() {
            p.label = PoseLabel::D;
        }
    }
    Ok(out)
}

pub fn attach_segments(demo: &Demonstration, boundaries: &[SegmentBoundary]) -> Result<Demonstration, DemoError> {
    let n = demo.poses.len();
    let mut segments = Vec::with_capacity(boundaries.len());
    let mut start = 0;
    for (i, b) in boundaries.iter().enumerate() {
        if b.end_index <= start {
            return Err(DemoError::Validation(format!(
                "boundary {i} at {} is not after {start}",
                b.end_index
            )));
        }
        if b.end_index > n {
            return Err(DemoError::Validation(format!(
                "boundary {i} at {} exceeds {n} poses",
                b.end_index
            )));
        }
        segments.push(SubtaskSegment {
            start,
            end: b.end_index,
            target_object: b.target_object.clone(),
            grasp_object: b.grasp_object.clone(),
        });
        start = b.end_index;
    }
    if start != n {
        return Err(DemoError::Validation(format!(
            "last boundary must equal the pose count {n}, got {start}"
        )));
    }
    let mut out = demo.clone();
    out.segments = segments;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenerationStage {
    Source,
    Stage1,
    Stage2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMetadata {
    pub task: String,
    pub variant: Variant,
    pub stage: GenerationStage,
    pub seed: u64,
    /// Pose rate of the recordings, frames per second.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fps: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub format_version: u32,
    pub metadata: DatasetMetadata,
    pub demonstrations: Vec<Demonstration>,
}

#[derive(Deserialize)]
struct VersionProbe {
    format_version: u32,
}

impl Dataset {
    pub fn new(metadata: DatasetMetadata, demonstrations: Vec<Demonstration>) -> Self {
        Dataset {
            format_version: FORMAT_VERSION,
            metadata,
            demonstrations,
        }
    }

    pub fn len(&self) -> usize {
        self.demonstrations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.demonstrations.is_empty()
    }

    pub fn validate(&self) -> Result<(), DemoError> {
        if self.format_version != FORMAT_VERSION {
            return Err(DemoError::Version {
                found: self.format_version,
                expected: FORMAT_VERSION,
            });
        }
        for d in &self.demonstrations {
            d.validate()?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        jsonfmt::to_string(self, 4).expect("dataset serialization is infallible")
    }

    pub fn from_json(text: &str) -> Result<Dataset, DemoError> {
        let probe: VersionProbe = serde_json::from_str(text)?;
        if probe.format_version != FORMAT_VERSION {
            return Err(DemoError::Version {
                found: probe.format_version,
                expected: FORMAT_VERSION,
            });
        }
        let ds: Dataset = serde_json::from_str(text)?;
        ds.validate()?;
        Ok(ds)
    }
}

pub fn save(dataset: &Dataset, path: &Path) -> Result<(), DemoError> {
    std::fs::write(path, dataset.to_json())?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Dataset, DemoError> {
    let text = std::fs::read_to_string(path)?;
    Dataset::from_json(&text)
}
