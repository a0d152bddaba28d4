//! Model-backed inputs of the pipeline: pose labels from video analysis and
//! the constraint plan from the constraint proposal.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::PipelineError;
use crate::constraints::ConstraintPlan;
use crate::demos::{attach_segments, label_from_intervals, Dataset, DatasetMetadata, GenerationStage, PoseLabel};
use crate::gateway::{fetch, render_intervals, render_plan_response, RecordedTransport, Transport, VlmRequest};
use crate::simenv::{check_success, execute, expert_demo, sample_scene, TaskSpec, Variant};

/// Id of the keypoint-annotated scene image sent with the constraint proposal.
pub fn plan_request(task: &TaskSpec) -> VlmRequest {
    VlmRequest::constraint_proposal(&task.description, &format!("{}/annotated_scene", task.name), None)
}

pub fn fetch_plan(task: &TaskSpec, transport: &Transport) -> Result<ConstraintPlan, PipelineError> {
    let resp = fetch(&plan_request(task), transport)?;
    match resp.plan() {
        Some(p) if p.num_stages == task.subtasks.len() => Ok(p.clone()),
        Some(p) => Err(PipelineError::InvalidResponse {
            what: "constraint proposal".into(),
            violations: format!("{} stages proposed for {} subtasks", p.num_stages, task.subtasks.len()),
        }),
        None => Err(PipelineError::InvalidResponse {
            what: "constraint proposal".into(),
            violations: resp.violations.join("; "),
        }),
    }
}

/// Maximal runs of `D` labels as `[start, end)` pairs.
pub(crate) fn d_runs(labels: impl Iterator<Item = PoseLabel>) -> Vec<(usize, usize)> {
    let mut runs = Vec::new();
    let mut start = None;
    let mut n = 0;
    for (i, l) in labels.enumerate() {
        match (l, start) {
            (PoseLabel::D, None) => start = Some(i),
            (PoseLabel::R, Some(s)) => {
                runs.push((s, i));
                start = None;
            }
            _ => {}
        }
        n = i + 1;
    }
    if let Some(s) = start {
        runs.push((s, n));
    }
    runs
}

/// Labels every demonstration from its video-analysis response and splits
/// it into subtask segments, one per data-dependent interval.
pub fn label_dataset(
    raw: &Dataset,
    task: &TaskSpec,
    transport: &Transport,
    upsample: u32,
) -> Result<Dataset, PipelineError> {
    let fps = raw.metadata.fps.unwrap_or(task.fps);
    let mut out = raw.clone();
    out.metadata.fps = Some(fps);
    for demo in out.demonstrations.iter_mut() {
        let resp = fetch(&VlmRequest::video_analysis(&task.description, &demo.id), transport)?;
        let Some(intervals) = resp.intervals() else {
            return Err(PipelineError::InvalidResponse {
                what: format!("video analysis of '{}'", demo.id),
                violations: resp.violations.join("; "),
            });
        };
        let labeled = label_from_intervals(demo, intervals, fps, upsample)?;
        let runs = d_runs(labeled.poses.iter().map(|p| p.label));
        let boundaries = task.boundaries(&runs, labeled.poses.len())?;
        *demo = attach_segments(&labeled, &boundaries)?;
    }
    out.validate()?;
    Ok(out)
}

/// Unlabeled scripted-expert demonstrations in `count` scenes drawn from
/// `variant`. Scenes where the expert fails are redrawn.
pub fn expert_sources(task: &TaskSpec, variant: Variant, count: usize, seed: u64) -> Result<Dataset, PipelineError> {
    task.validate()?;
    let spec = task
        .variant_spec(variant)
        .ok_or_else(|| PipelineError::Validation(format!("task '{}' has no variant {variant}", task.name)))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut demos = Vec::with_capacity(count);
    let mut draws = 0;
    while demos.len() < count {
        draws += 1;
        if draws > count.saturating_mul(10).max(10) {
            return Err(PipelineError::Validation(format!(
                "scripted expert keeps failing in {variant} scenes of '{}'",
                task.name
            )));
        }
        let scene = sample_scene(&task.nominal, spec, &mut rng)?;
        let demo = expert_demo(task, &scene, &format!("{}_src_{:03}", task.name, demos.len()))?;
        if check_success(&execute(&demo.poses, &demo.scene), task)? {
            demos.push(demo);
        }
    }
    let meta = DatasetMetadata {
        task: task.name.clone(),
        variant,
        stage: GenerationStage::Source,
        seed,
        fps: Some(task.fps),
    };
    Ok(Dataset::new(meta, demos))
}

/// Writes the responses a model is expected to give for `raw`: the scripted
/// expert's timeline for every video and the task's constraint plan.
/// Returns the number of recordings written.
pub fn record_expert_responses(task: &TaskSpec, raw: &Dataset, rec: &RecordedTransport) -> std::io::Result<usize> {
    std::fs::create_dir_all(&rec.dir)?;
    let timeline = render_intervals(&task.expert_intervals());
    for d in &raw.demonstrations {
        rec.record(&VlmRequest::video_analysis(&task.description, &d.id), &timeline)?;
    }
    rec.record(&plan_request(task), &render_plan_response(&task.expert.plan))?;
    Ok(raw.demonstrations.len() + 1)
}
