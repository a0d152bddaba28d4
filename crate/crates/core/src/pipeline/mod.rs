//! Two-stage augmentation: stage 1 adapts data-dependent segments and
//! replans the rest under constraints; stage 2 scales up with pose-only
//! adaptation. Every kept demonstration is replayed and success-filtered.

mod generate;
mod label;
mod stats;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapt::AdaptError;
use crate::demos::{DemoError, GenerationStage};
use crate::gateway::{FetchError, TransportError};
use crate::geometry::DistanceWeights;
use crate::planner::{PlanOptions, PlanWeights};
use crate::simenv::{builtin, SamplingError, SimError, TaskSpec, Variant};

pub use generate::{attempt_seed, stage1, stage2, AttemptOutcome, Generator};
pub use label::{expert_sources, fetch_plan, label_dataset, plan_request, record_expert_responses};
pub use stats::{dataset_stats, render_stats, validate_dataset, DatasetStats, ValidationSummary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    /// Nearest grasp-object-relative-to-target top-k.
    #[default]
    Grt,
    /// Uniform over all candidates.
    Random,
}

fn default_task() -> String {
    "square".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Built-in task name; ignored when `task_spec` or `task_file` is given.
    pub task: String,
    pub task_spec: Option<TaskSpec>,
    /// JSON file holding a task definition.
    pub task_file: Option<PathBuf>,
    pub variant: Variant,
    pub seed: u64,
    pub stage1_attempt_target: usize,
    pub stage2_attempt_target: usize,
    /// Attempts allowed per stage, as a multiple of the target.
    pub attempt_budget_factor: usize,
    pub k: usize,
    pub selection: SelectionMode,
    /// Off: semantic weight and planner iterations are zeroed and infeasible
    /// plans are not rejected (straight interpolation).
    pub use_vlm: bool,
    pub weights: PlanWeights,
    pub planner: PlanOptions,
    pub distance: DistanceWeights,
    /// Max gap (m) allowed where replanned and data-dependent poses meet.
    pub boundary_gap: f64,
    /// Spacing (m) of the transition poses inserted between stage-2 segments.
    pub transition_step: f64,
    /// 0 = one per core.
    pub workers: usize,
    /// `recorded:<dir>` or `http:<url>`.
    pub vlm: Option<String>,
    /// Video frames per recorded pose.
    pub upsample: u32,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            task: default_task(),
            task_spec: None,
            task_file: None,
            variant: Variant::D1,
            seed: 0,
            stage1_attempt_target: 50,
            stage2_attempt_target: 1000,
            attempt_budget_factor: 10,
            k: 3,
            selection: SelectionMode::Grt,
            use_vlm: true,
            weights: PlanWeights::default(),
            planner: PlanOptions::default(),
            distance: DistanceWeights::default(),
            boundary_gap: 0.05,
            transition_step: 0.01,
            workers: 0,
            vlm: None,
            upsample: crate::demos::DEFAULT_UPSAMPLE,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::Validation(m.to_string()));
        if self.stage1_attempt_target == 0 || self.stage2_attempt_target == 0 {
            return bad("attempt targets must be >= 1");
        }
        if self.k == 0 {
            return bad("k must be >= 1");
        }
        if self.attempt_budget_factor == 0 {
            return bad("attempt_budget_factor must be >= 1");
        }
        if !(self.boundary_gap > 0.0) || !(self.transition_step > 0.0) {
            return bad("boundary_gap and transition_step must be > 0");
        }
        if self.upsample == 0 {
            return bad("upsample must be >= 1");
        }
        let w = &self.weights;
        if [w.lambda_p, w.lambda_c, w.lambda_l, w.lambda_ik]
            .iter()
            .any(|v| !(v.is_finite() && *v >= 0.0))
        {
            return bad("planner weights must be finite and >= 0");
        }
        self.task()?.validate()?;
        Ok(())
    }

    pub fn task(&self) -> Result<TaskSpec, PipelineError> {
        if let Some(t) = &self.task_spec {
            return Ok(t.clone());
        }
        match &self.task_file {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| PipelineError::Validation(format!("cannot read task file {}: {e}", p.display())))?;
                serde_json::from_str(&text)
                    .map_err(|e| PipelineError::Validation(format!("task file {}: {e}", p.display())))
            }
            None => Ok(builtin(&self.task)?),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        let cfg: PipelineConfig = serde_json::from_str(text)
            .map_err(|e| PipelineError::Validation(format!("config line {}, column {}: {e}", e.line(), e.column())))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Validation(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Ablation settings from a two-letter row: `vlm` on/off and GRT on/off.
    pub fn with_ablation(mut self, use_vlm: bool, grt: bool) -> Self {
        self.use_vlm = use_vlm;
        self.selection = if grt { SelectionMode::Grt } else { SelectionMode::Random };
        self
    }

    pub fn budget(&self, target: usize) -> usize {
        target.saturating_mul(self.attempt_budget_factor)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FailureKind {
    PlannerInfeasible,
    ExecutionCollision,
    PredicateFailed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FailureCounts {
    pub planner_infeasible: usize,
    pub execution_collision: usize,
    pub predicate_failed: usize,
}

impl FailureCounts {
    pub fn add(&mut self, kind: FailureKind) {
        match kind {
            FailureKind::PlannerInfeasible => self.planner_infeasible += 1,
            FailureKind::ExecutionCollision => self.execution_collision += 1,
            FailureKind::PredicateFailed => self.predicate_failed += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.planner_infeasible + self.execution_collision + self.predicate_failed
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: GenerationStage,
    pub target: usize,
    pub attempts: usize,
    pub successes: usize,
    pub failures: FailureCounts,
}

impl StageReport {
    pub fn success_rate(&self) -> f64 {
        if self.attempts == 0 {
            0.0
        } else {
            self.successes as f64 / self.attempts as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub task: String,
    pub variant: Variant,
    pub seed: u64,
    pub stages: Vec<StageReport>,
    /// Seconds; the only field that differs between identical runs.
    pub wall_time_s: f64,
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid input: {0}")]
    Validation(String),
    #[error("{stage:?}: no successful demonstration after {attempts} attempts ({failures:?})", stage = .0.stage, attempts = .0.attempts, failures = .0.failures)]
    Exhausted(Box<StageReport>),
    #[error(transparent)]
    Dataset(#[from] DemoError),
    #[error(transparent)]
    Task(#[from] SimError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Adapt(#[from] AdaptError),
    #[error(transparent)]
    Vlm(#[from] FetchError),
    #[error("model response for {what} is unusable: {violations}")]
    InvalidResponse { what: String, violations: String },
}

impl From<TransportError> for PipelineError {
    fn from(e: TransportError) -> Self {
        PipelineError::Vlm(FetchError::Transport(e))
    }
}

impl PipelineError {
    /// Whether the error stems from bad input rather than a failed run.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            PipelineError::Validation(_)
                | PipelineError::Dataset(_)
                | PipelineError::Task(_)
                | PipelineError::InvalidResponse { .. }
        )
    }
}
