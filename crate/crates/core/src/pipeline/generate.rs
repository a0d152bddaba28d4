use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{FailureCounts, FailureKind, GenerationReport, PipelineConfig, PipelineError, SelectionMode, StageReport};
use crate::adapt::{adapt_segment, segment_policy};
use crate::constraints::{ConstraintPlan, Keypoint, GRIPPER_CLOSED};
use crate::demos::{Dataset, DatasetMetadata, Demonstration, GenerationStage, LabeledPose, PoseLabel, SubtaskSegment};
use crate::geometry::{lerp_unchecked, Pose};
use crate::planner::kinematics::{ik_solve, KinematicChain};
use crate::planner::{replan, GraspState, PlanProblem, PlanWeights};
use crate::selection::{candidates_for_subtask, pick, relative_grasp, select_topk, GraspCandidate};
use crate::simenv::{check_success, execute, sample_scene, SceneDescription, TaskSpec, VariantSpec};

/// Seed of attempt `attempt` in `stage`; independent of worker count.
pub fn attempt_seed(seed: u64, stage: u64, attempt: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    mix(mix(mix(seed) ^ stage) ^ attempt)
}

pub type AttemptOutcome = Result<Demonstration, FailureKind>;

/// Everything an attempt needs, prepared once per stage.
pub struct Generator<'a> {
    cfg: &'a PipelineConfig,
    task: TaskSpec,
    spec: VariantSpec,
    stage: GenerationStage,
    sources: BTreeMap<&'a str, &'a Demonstration>,
    candidates: Vec<Vec<GraspCandidate>>,
    plan: ConstraintPlan,
    chain: KinematicChain,
    ik_seed: Vec<f64>,
}

fn empty_plan(stages: usize) -> ConstraintPlan {
    ConstraintPlan {
        num_stages: stages,
        atoms: Vec::new(),
        grasp_keypoints: vec![-1; stages],
        release_keypoints: vec![-1; stages],
    }
}

fn home_config(chain: &KinematicChain, home: &Pose, opts: &crate::planner::kinematics::IkOptions) -> Vec<f64> {
    // elbow-up guess for the desk arm, refined on the home pose
    let guess: Vec<f64> = [0.0, 0.6, 1.4, 0.0, 1.1, 0.0].into_iter().take(chain.dof()).collect();
    let guess: Vec<f64> = guess.into_iter().chain(std::iter::repeat(0.0)).take(chain.dof()).collect();
    ik_solve(chain, home, &guess, opts).config
}

impl<'a> Generator<'a> {
    /// `plan` is required for stage 1 with `use_vlm`; otherwise ignored.
    pub fn new(
        cfg: &'a PipelineConfig,
        stage: GenerationStage,
        input: &'a Dataset,
        plan: Option<ConstraintPlan>,
    ) -> Result<Self, PipelineError> {
        cfg.validate()?;
        let task = cfg.task()?;
        let spec = task
            .variant_spec(cfg.variant)
            .cloned()
            .ok_or_else(|| PipelineError::Validation(format!("task '{}' has no {} variant", task.name, cfg.variant)))?;
        if input.is_empty() {
            return Err(PipelineError::Validation("input dataset is empty".into()));
        }
        let n = task.subtasks.len();
        for d in &input.demonstrations {
            if d.segments.len() != n {
                return Err(PipelineError::Validation(format!(
                    "demonstration '{}' has {} segments; task '{}' has {n} subtasks (label the dataset first)",
                    d.id,
                    d.segments.len(),
                    task.name
                )));
            }
            task.check_scene(&d.scene)?;
        }
        let mut sources = BTreeMap::new();
        for d in &input.demonstrations {
            if sources.insert(d.id.as_str(), d).is_some() {
                return Err(PipelineError::Validation(format!("duplicate demonstration id '{}'", d.id)));
            }
        }
        let candidates: Vec<Vec<GraspCandidate>> =
            (0..n).map(|i| candidates_for_subtask(&input.demonstrations, i)).collect();
        if let Some(i) = candidates.iter().position(Vec::is_empty) {
            return Err(PipelineError::Validation(format!("no usable candidate for subtask {i}")));
        }
        let plan = match (stage, cfg.use_vlm, plan) {
            (GenerationStage::Stage1, true, Some(p)) => p,
            (GenerationStage::Stage1, true, None) => {
                return Err(PipelineError::Validation("stage 1 with use_vlm needs a constraint plan".into()))
            }
            _ => empty_plan(n),
        };
        if plan.num_stages != n {
            return Err(PipelineError::Validation(format!(
                "constraint plan has {} stages for {n} subtasks",
                plan.num_stages
            )));
        }
        let chain = task.chain();
        let ik_seed = home_config(&chain, &task.home, &cfg.planner.ik);
        Ok(Generator {
            cfg,
            task,
            spec,
            stage,
            sources,
            candidates,
            plan,
            chain,
            ik_seed,
        })
    }

    pub fn task(&self) -> &TaskSpec {
        &self.task
    }

    fn choose<R: Rng>(&self, subtask: usize, current_rel: &Pose, rng: &mut R) -> &GraspCandidate {
        let cands = &self.candidates[subtask];
        let idx = match self.cfg.selection {
            SelectionMode::Grt => {
                let top = select_topk(current_rel, cands, self.cfg.k, &self.cfg.distance).expect("non-empty, k >= 1");
                pick(&top, rng)
            }
            SelectionMode::Random => rng.random_range(0..cands.len()),
        };
        &cands[idx]
    }

    /// Keypoints of the grasped object, grasp keypoint first.
    fn held_keypoints(&self, object: &str, subtask: usize) -> Vec<usize> {
        let mut ids: Vec<usize> = self
            .task
            .keypoints
            .iter()
            .enumerate()
            .filter(|(_, a)| a.object == object)
            .map(|(i, _)| i + 1)
            .collect();
        if let Some(k) = self.plan.held_keypoint(subtask) {
            if let Some(pos) = ids.iter().position(|&i| i == k) {
                ids.swap(0, pos);
            }
        }
        ids
    }

    fn demo_id(&self, attempt: usize) -> String {
        let tag = match self.stage {
            GenerationStage::Source => "src",
            GenerationStage::Stage1 => "s1",
            GenerationStage::Stage2 => "s2",
        };
        format!("{}_{tag}_{attempt:05}", self.task.name)
    }

    fn stage_index(&self) -> u64 {
        match self.stage {
            GenerationStage::Source => 0,
            GenerationStage::Stage1 => 1,
            GenerationStage::Stage2 => 2,
        }
    }

    /// One generation attempt. `Err` on the outer result is a pipeline fault,
    /// not an unsuccessful attempt.
    pub fn attempt(&self, attempt: usize) -> Result<AttemptOutcome, PipelineError> {
        let mut rng = ChaCha8Rng::seed_from_u64(attempt_seed(self.cfg.seed, self.stage_index(), attempt as u64));
        let scene = sample_scene(&self.task.nominal, &self.spec, &mut rng)?;
        let keypoints = self.task.keypoints_in(&scene)?;
        let mut traj: Vec<LabeledPose> = Vec::new();
        let mut segments = Vec::new();
        let mut used = Vec::new();
        let mut grasp_offsets = BTreeMap::new();
        // offset of the object in hand and the end-effector pose at which it was grasped
        let mut held: Option<(Pose, Pose)> = None;

        for (i, sub) in self.task.subtasks.iter().enumerate() {
            let last = traj.last().map_or(self.task.home, |p| p.pose);
            let target = *scene
                .object_pose(&sub.target)
                .ok_or_else(|| PipelineError::Validation(format!("scene lacks '{}'", sub.target)))?;
            let current = match (&sub.grasp, held) {
                (Some(_), Some((offset, _))) => last.compose(&offset.inverse()),
                _ => last,
            };
            let cand = self.choose(i, &relative_grasp(&current, &target), &mut rng);
            let src = self.sources[cand.source_demo_id.as_str()];
            used.push(src.id.clone());
            let held_offset = if sub.grasp.is_some() { held.map(|h| h.0) } else { None };
            let policy = segment_policy(src, i, &scene, held_offset)?;
            let mut seg = adapt_segment(src.segment_poses(i), &policy);
            if let Some(g) = &sub.grasp {
                grasp_offsets.insert(g.clone(), policy.new_offset);
            }

            match self.stage {
                GenerationStage::Stage1 => {
                    seg = match self.replan_segment(i, seg, &keypoints, &scene, traj.last().map(|p| p.pose), held, &mut rng) {
                        Some(s) => s,
                        None => return Ok(Err(FailureKind::PlannerInfeasible)),
                    };
                }
                _ => {
                    if let Some(prev) = traj.last() {
                        let bridge = transition(prev, &seg[0], self.cfg.transition_step);
                        seg.splice(0..0, bridge);
                    }
                }
            }
            let start = traj.len();
            traj.extend(seg);
            segments.push(SubtaskSegment {
                start,
                end: traj.len(),
                target_object: sub.target.clone(),
                grasp_object: sub.grasp.clone(),
            });

            // the grasp made in this segment is held into the next one
            if let Some(next) = self.task.subtasks.get(i + 1) {
                if let Some(g) = &next.grasp {
                    if sub.grasp.as_ref() != Some(g) {
                        let offset = *src.grasp_offsets.get(g).ok_or_else(|| crate::adapt::AdaptError::MissingGraspOffset {
                            demo: src.id.clone(),
                            object: g.clone(),
                        })?;
                        let attach = grasp_pose(&traj[start..]).unwrap_or(traj[traj.len() - 1].pose);
                        held = Some((offset, attach));
                    }
                } else {
                    held = None;
                }
            }
        }

        let trace = execute(&traj, &scene);
        if trace.has_collision() {
            return Ok(Err(FailureKind::ExecutionCollision));
        }
        if !check_success(&trace, &self.task)? {
            return Ok(Err(FailureKind::PredicateFailed));
        }
        Ok(Ok(Demonstration {
            id: self.demo_id(attempt),
            source_id: used.join("+"),
            poses: traj,
            segments,
            scene,
            grasp_offsets,
        }))
    }

    #[allow(clippy::too_many_arguments)]
    fn replan_segment<R: Rng>(
        &self,
        subtask: usize,
        seg: Vec<LabeledPose>,
        keypoints: &[Keypoint],
        scene: &SceneDescription,
        prev: Option<Pose>,
        held: Option<(Pose, Pose)>,
        rng: &mut R,
    ) -> Option<Vec<LabeledPose>> {
        if !seg.iter().any(|p| p.label == PoseLabel::R) {
            return Some(seg);
        }
        let sub = &self.task.subtasks[subtask];
        let grasp = match (&sub.grasp, held) {
            (Some(obj), Some((_, attach))) => {
                let ids = self.held_keypoints(obj, subtask);
                ids.first().map(|&k| GraspState {
                    keypoint: k,
                    attach_pose: attach,
                    attached: ids[1..].to_vec(),
                })
            }
            _ => None,
        };
        let mut options = self.cfg.planner;
        options.seed = rng.next_u64();
        let mut weights = self.cfg.weights;
        if !self.cfg.use_vlm {
            options.max_iters = 0;
            weights = PlanWeights {
                lambda_p: 0.0,
                ..weights
            };
        }
        let start_anchor = prev.unwrap_or(self.task.home);
        let problem = PlanProblem {
            trajectory: seg,
            plan: self.plan.clone(),
            stage: subtask,
            env: scene.environment(),
            chain: self.chain.clone(),
            weights,
            keypoints: keypoints.to_vec(),
            grasp,
            start_anchor: Some(start_anchor),
            ik_seed: self.ik_seed.clone(),
            options,
        };
        let result = replan(&problem).ok()?;
        if self.cfg.use_vlm && !result.feasible {
            return None;
        }
        let out = result.trajectory;
        // seams between replanned and fixed poses, including the anchor
        let gap = |a: &Pose, b: &Pose| (a.translation() - b.translation()).norm();
        if gap(&start_anchor, &out[0].pose) > self.cfg.boundary_gap {
            return None;
        }
        if out
            .windows(2)
            .any(|w| w[0].label != w[1].label && gap(&w[0].pose, &w[1].pose) > self.cfg.boundary_gap)
        {
            return None;
        }
        Some(out)
    }
}

/// End-effector pose at the last gripper closing in `poses`.
fn grasp_pose(poses: &[LabeledPose]) -> Option<Pose> {
    poses
        .windows(2)
        .rev()
        .find(|w| w[0].gripper < GRIPPER_CLOSED && w[1].gripper >= GRIPPER_CLOSED)
        .map(|w| w[1].pose)
}

/// Poses strictly between `a` and `b`, at most `step` apart, labeled `R`
/// and holding `a`'s gripper command.
fn transition(a: &LabeledPose, b: &LabeledPose, step: f64) -> Vec<LabeledPose> {
    let d = (a.pose.translation() - b.pose.translation()).norm();
    let n = (d / step).ceil() as usize;
    (1..n)
        .map(|k| LabeledPose {
            pose: lerp_unchecked(&a.pose, &b.pose, k as f64 / n as f64),
            gripper: a.gripper,
            label: PoseLabel::R,
        })
        .collect()
}

fn run_stage(
    cfg: &PipelineConfig,
    stage: GenerationStage,
    input: &Dataset,
    plan: Option<ConstraintPlan>,
    target: usize,
) -> Result<(Dataset, StageReport), PipelineError> {
    let gen = Generator::new(cfg, stage, input, plan)?;
    let budget = cfg.budget(target);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| PipelineError::Validation(format!("worker pool: {e}")))?;
    let batch = pool.current_num_threads().max(1) * 4;
    let mut kept = Vec::new();
    let mut failures = FailureCounts::default();
    let mut attempts = 0;
    'outer: while attempts < budget && kept.len() < target {
        let hi = (attempts + batch).min(budget);
        let results: Vec<Result<AttemptOutcome, PipelineError>> =
            pool.install(|| (attempts..hi).into_par_iter().map(|a| gen.attempt(a)).collect());
        for r in results {
            attempts += 1;
            match r? {
                Ok(d) => kept.push(d),
                Err(kind) => failures.add(kind),
            }
            if kept.len() == target {
                break 'outer;
            }
        }
    }
    let report = StageReport {
        stage,
        target,
        attempts,
        successes: kept.len(),
        failures,
    };
    if kept.is_empty() {
        return Err(PipelineError::Exhausted(Box::new(report)));
    }
    let metadata = DatasetMetadata {
        task: gen.task().name.clone(),
        variant: cfg.variant,
        stage,
        seed: cfg.seed,
        fps: input.metadata.fps.or(Some(gen.task().fps)),
    };
    Ok((Dataset::new(metadata, kept), report))
}

fn wrap_report(cfg: &PipelineConfig, task: &str, report: StageReport, started: Instant) -> GenerationReport {
    GenerationReport {
        task: task.to_string(),
        variant: cfg.variant,
        seed: cfg.seed,
        stages: vec![report],
        wall_time_s: started.elapsed().as_secs_f64(),
    }
}

/// Adapt + replan from labeled source demonstrations.
pub fn stage1(
    src: &Dataset,
    cfg: &PipelineConfig,
    plan: Option<ConstraintPlan>,
) -> Result<(Dataset, GenerationReport), PipelineError> {
    let started = Instant::now();
    let (ds, report) = run_stage(cfg, GenerationStage::Stage1, src, plan, cfg.stage1_attempt_target)?;
    let task = ds.metadata.task.clone();
    Ok((ds, wrap_report(cfg, &task, report, started)))
}

/// Pose-only expansion of a stage-1 dataset.
pub fn stage2(stage1_out: &Dataset, cfg: &PipelineConfig) -> Result<(Dataset, GenerationReport), PipelineError> {
    let started = Instant::now();
    let (ds, report) = run_stage(cfg, GenerationStage::Stage2, stage1_out, None, cfg.stage2_attempt_target)?;
    let task = ds.metadata.task.clone();
    Ok((ds, wrap_report(cfg, &task, report, started)))
}
