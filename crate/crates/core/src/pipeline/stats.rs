//! Dataset statistics and re-execution checks.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{GenerationReport, PipelineError};
use crate::demos::{Dataset, GenerationStage};
use crate::geometry::{pose_distance, DistanceWeights};
use crate::selection::segment_grasp_pose;
use crate::simenv::{check_success, execute, TaskSpec, Variant};

/// Width of the trajectory-length histogram buckets, in poses.
pub const LENGTH_BUCKET: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub task: String,
    pub variant: Variant,
    pub stage: GenerationStage,
    pub demonstrations: usize,
    pub mean_length: f64,
    /// Bucket lower bound (poses) -> count.
    pub length_histogram: BTreeMap<usize, usize>,
    /// Mean pairwise pose distance between the grasp poses at the start of
    /// each demonstration's last segment.
    pub grasp_diversity: f64,
    /// Successes / attempts per generation stage, when a report is given.
    #[serde(default)]
    pub generation_success_rate: BTreeMap<String, f64>,
}

pub fn dataset_stats(ds: &Dataset, generation: Option<&GenerationReport>, w: &DistanceWeights) -> DatasetStats {
    let n = ds.demonstrations.len();
    let mut hist = BTreeMap::new();
    let mut total = 0usize;
    for d in &ds.demonstrations {
        *hist.entry(d.poses.len() / LENGTH_BUCKET * LENGTH_BUCKET).or_insert(0) += 1;
        total += d.poses.len();
    }
    let grasps: Vec<_> = ds
        .demonstrations
        .iter()
        .filter_map(|d| segment_grasp_pose(d, d.segments.len().checked_sub(1)?))
        .collect();
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..grasps.len() {
        for j in i + 1..grasps.len() {
            sum += pose_distance(&grasps[i], &grasps[j], w);
            pairs += 1;
        }
    }
    let generation_success_rate = generation
        .map(|g| {
            g.stages
                .iter()
                .map(|s| (format!("{:?}", s.stage).to_lowercase(), s.success_rate()))
                .collect()
        })
        .unwrap_or_default();
    DatasetStats {
        task: ds.metadata.task.clone(),
        variant: ds.metadata.variant,
        stage: ds.metadata.stage,
        demonstrations: n,
        mean_length: if n == 0 { 0.0 } else { total as f64 / n as f64 },
        length_histogram: hist,
        grasp_diversity: if pairs == 0 { 0.0 } else { sum / pairs as f64 },
        generation_success_rate,
    }
}

pub fn render_stats(s: &DatasetStats) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "task {} / {} / {:?}", s.task, s.variant, s.stage);
    let _ = writeln!(out, "demonstrations: {}", s.demonstrations);
    let _ = writeln!(out, "mean length: {:.1} poses", s.mean_length);
    for (b, c) in &s.length_histogram {
        let _ = writeln!(out, "  {:>4}-{:<4} {c}", b, b + LENGTH_BUCKET - 1);
    }
    let _ = writeln!(out, "grasp diversity: {:.4}", s.grasp_diversity);
    for (stage, r) in &s.generation_success_rate {
        let _ = writeln!(out, "{stage} generation success rate: {:.1}%", 100.0 * r);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationSummary {
    pub checked: usize,
    /// Ids of demonstrations that fail on re-execution.
    pub failed: Vec<String>,
}

/// Re-executes every demonstration in its own scene.
pub fn validate_dataset(ds: &Dataset, task: &TaskSpec) -> Result<ValidationSummary, PipelineError> {
    ds.validate()?;
    let mut failed = Vec::new();
    for d in &ds.demonstrations {
        task.check_scene(&d.scene)?;
        if !check_success(&execute(&d.poses, &d.scene), task)? {
            failed.push(d.id.clone());
        }
    }
    Ok(ValidationSummary {
        checked: ds.demonstrations.len(),
        failed,
    })
}
