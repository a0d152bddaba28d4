//! Constrained waypoint optimization over the free (replanning) poses of a
//! trajectory.
//!
//! The objective is `λp·Jp + λc·Jc + λl·Jl + λik·Jik`: semantic constraint
//! cost, SDF collision cost, smoothness and IK residual. Fixed poses are never
//! touched. The optimizer is L-BFGS on per-pose 6-vectors (translation plus a
//! world-frame rotation increment) with finite-difference gradients and an
//! Armijo backtracking line search, so every accepted iterate lowers the cost.

pub mod kinematics;
pub mod sdf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constraints::{validate_plan, AtomRole, ConstraintAtom, ConstraintPlan, Keypoint, KeypointTracker};
use crate::demos::{LabeledPose, PoseLabel};
use crate::geometry::{geodesic_angle, lerp_unchecked, Pose, Vec3};
use kinematics::{ik_solve, IkOptions, KinematicChain};
use sdf::SdfEnvironment;

pub const DEFAULT_SMOOTHNESS_BETA: f64 = 0.1;
pub const DEFAULT_BOUNDARY_DELTA: f64 = 0.05;

const FD_STEP: f64 = 1e-6;
const LBFGS_MEMORY: usize = 8;
const MAX_STEP: f64 = 0.05;
// Below this the IK term is treated as flat when forming gradients.
const IK_ACTIVE: f64 = 1e-7;
/// Interpolation steps per pose pair when checking swept clearance; the
/// simulator sub-samples motion the same way.
pub const SWEEP_SUBSTEPS: usize = 4;

#[derive(Debug, Error, PartialEq)]
pub enum PlanError {
    #[error("plan problem has no free poses")]
    NoFreePoses,
    #[error("invalid plan problem: {0}")]
    Validation(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanWeights {
    pub lambda_p: f64,
    pub lambda_c: f64,
    pub lambda_l: f64,
    pub lambda_ik: f64,
}

impl Default for PlanWeights {
    fn default() -> Self {
        PlanWeights {
            lambda_p: 100.0,
            lambda_c: 1.0,
            lambda_l: 0.1,
            lambda_ik: 20.0,
        }
    }
}

impl PlanWeights {
    pub const ZERO: PlanWeights = PlanWeights {
        lambda_p: 0.0,
        lambda_c: 0.0,
        lambda_l: 0.0,
        lambda_ik: 0.0,
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlanOptions {
    pub max_iters: usize,
    /// Relative total-cost change below which a run has converged.
    pub tol: f64,
    /// Extra runs from perturbed starts when the first is infeasible.
    pub restarts: usize,
    pub collision_margin: f64,
    /// Hard-constraint slack for the feasibility flag.
    pub feasibility_eps: f64,
    pub smoothness_beta: f64,
    /// Amplitude (m) of the random detour used to seed restarts.
    pub restart_amplitude: f64,
    pub seed: u64,
    pub ik: IkOptions,
}

impl Default for PlanOptions {
    fn default() -> Self {
        PlanOptions {
            max_iters: 500,
            tol: 1e-6,
            restarts: 3,
            collision_margin: 0.02,
            feasibility_eps: 1e-3,
            smoothness_beta: DEFAULT_SMOOTHNESS_BETA,
            restart_amplitude: 0.15,
            seed: 0,
            ik: IkOptions::default(),
        }
    }
}

/// Grasp held throughout the planned window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraspState {
    pub keypoint: usize,
    /// End-effector pose when the keypoint was grasped.
    pub attach_pose: Pose,
    /// Other keypoints on the grasped object.
    #[serde(default)]
    pub attached: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanProblem {
    /// `D` poses are frozen, `R` poses are optimized.
    pub trajectory: Vec<LabeledPose>,
    pub plan: ConstraintPlan,
    pub stage: usize,
    pub env: SdfEnvironment,
    pub chain: KinematicChain,
    #[serde(default)]
    pub weights: PlanWeights,
    pub keypoints: Vec<Keypoint>,
    #[serde(default)]
    pub grasp: Option<GraspState>,
    /// Fixed pose preceding the window (e.g. the robot's home pose).
    #[serde(default)]
    pub start_anchor: Option<Pose>,
    /// Joint configuration used to warm-start the first IK solve.
    #[serde(default)]
    pub ik_seed: Vec<f64>,
    #[serde(default)]
    pub options: PlanOptions,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub semantic: f64,
    pub collision: f64,
    pub smoothness: f64,
    pub ik: f64,
    pub total: f64,
}

impl CostBreakdown {
    fn weighted(semantic: f64, collision: f64, smoothness: f64, ik: f64, w: &PlanWeights) -> Self {
        CostBreakdown {
            semantic,
            collision,
            smoothness,
            ik,
            total: w.lambda_p * semantic + w.lambda_c * collision + w.lambda_l * smoothness + w.lambda_ik * ik,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanResult {
    pub trajectory: Vec<LabeledPose>,
    pub costs: CostBreakdown,
    pub iterations: usize,
    pub converged: bool,
    pub feasible: bool,
    /// Total cost of every accepted iterate of the returned run.
    pub cost_history: Vec<f64>,
    /// Index of the run that produced the result (0 = unperturbed start).
    pub run: usize,
}

fn hinge_sq(v: f64) -> f64 {
    let h = v.max(0.0);
    h * h
}

/// `Σ hinge(margin - sdf(p))²` over pose translations.
pub fn collision_cost(traj: &[LabeledPose], env: &SdfEnvironment, margin: f64) -> f64 {
    traj.iter()
        .map(|p| hinge_sq(margin - env.sdf(p.pose.translation())))
        .sum()
}

fn pair_smoothness(a: &Pose, b: &Pose, beta: f64) -> f64 {
    let th = geodesic_angle(a.rotation(), b.rotation());
    (a.translation() - b.translation()).norm_squared() + beta * th * th
}

/// `Σ |Δt|² + β·θ²` over consecutive pose pairs.
pub fn smoothness_cost(traj: &[LabeledPose], beta: f64) -> f64 {
    traj.windows(2)
        .map(|w| pair_smoothness(&w[0].pose, &w[1].pose, beta))
        .sum()
}

/// `Σ residual²` over `poses`, each IK solve warm-started from the previous one.
pub fn ik_cost(poses: &[Pose], chain: &KinematicChain, seed: &[f64], opts: &IkOptions) -> f64 {
    kinematics::ik_cost_with_configs(poses, chain, seed, opts).0
}

/// Evaluates the planning objective.
struct Objective<'a> {
    p: &'a PlanProblem,
    tracker: KeypointTracker,
    free: Vec<usize>,
    path: Vec<&'a ConstraintAtom>,
    sub: Vec<&'a ConstraintAtom>,
    sub_idx: Option<usize>,
    /// Keypoints carried by the end-effector; they must clear obstacles too.
    held: Vec<usize>,
}

impl<'a> Objective<'a> {
    fn new(p: &'a PlanProblem) -> Self {
        let mut base = vec![Vec3::zeros(); p.keypoints.iter().map(|k| k.id + 1).max().unwrap_or(1)];
        for k in &p.keypoints {
            base[k.id] = k.position;
        }
        let mut tracker = KeypointTracker::new(base);
        if let Some(g) = &p.grasp {
            tracker = tracker.with_grasp(g.keypoint, g.attach_pose).with_attached(g.attached.clone());
        }
        let free: Vec<usize> = p
            .trajectory
            .iter()
            .enumerate()
            .filter(|(_, lp)| lp.label == PoseLabel::R)
            .map(|(i, _)| i)
            .collect();
        let held = p
            .grasp
            .as_ref()
            .map(|g| std::iter::once(g.keypoint).chain(g.attached.iter().copied()).filter(|&k| k > 0).collect())
            .unwrap_or_default();
        Objective {
            p,
            tracker,
            held,
            sub_idx: crate::constraints::subgoal_index(&p.trajectory),
            free,
            path: p.plan.atoms_for(p.stage, AtomRole::Path).collect(),
            sub: p.plan.atoms_for(p.stage, AtomRole::Subgoal).collect(),
        }
    }

    fn semantic_at(&self, i: usize, lp: &LabeledPose) -> f64 {
        let is_free = lp.label == PoseLabel::R;
        let is_sub = self.sub_idx == Some(i);
        if !(is_free && !self.path.is_empty()) && !(is_sub && !self.sub.is_empty()) {
            return 0.0;
        }
        let kp = self.tracker.positions(&lp.pose);
        let ee = lp.pose.translation();
        let mut c = 0.0;
        if is_free {
            for a in &self.path {
                c += hinge_sq(a.kind.eval_unchecked(ee, &kp, lp.gripper));
            }
        }
        if is_sub {
            for a in &self.sub {
                c += hinge_sq(a.kind.eval_unchecked(ee, &kp, lp.gripper));
            }
        }
        c
    }

    fn collision_at(&self, pose: &Pose) -> f64 {
        let m = self.p.options.collision_margin;
        let mut c = hinge_sq(m - self.p.env.sdf(pose.translation()));
        if !self.held.is_empty() {
            let kp = self.tracker.positions(pose);
            for &k in &self.held {
                c += hinge_sq(m - self.p.env.sdf(&kp[k]));
            }
        }
        c
    }

    /// Smallest clearance of the end-effector and held keypoints at `pose`.
    fn clearance(&self, pose: &Pose) -> f64 {
        let mut d = self.p.env.sdf(pose.translation());
        if !self.held.is_empty() {
            let kp = self.tracker.positions(pose);
            for &k in &self.held {
                d = d.min(self.p.env.sdf(&kp[k]));
            }
        }
        d
    }

    /// Clearance along the motion `a -> b`, excluding `a`.
    fn swept_clearance(&self, a: &Pose, b: &Pose) -> f64 {
        (1..=SWEEP_SUBSTEPS)
            .map(|k| self.clearance(&lerp_unchecked(a, b, k as f64 / SWEEP_SUBSTEPS as f64)))
            .fold(f64::INFINITY, f64::min)
    }

    fn prev_pose<'t>(&'t self, traj: &'t [LabeledPose], i: usize) -> Option<&'t Pose> {
        if i == 0 {
            self.p.start_anchor.as_ref()
        } else {
            Some(&traj[i - 1].pose)
        }
    }

    /// Full cost; refreshes `configs` (one per free pose) as warm starts.
    fn evaluate(&self, traj: &[LabeledPose], configs: &mut [Vec<f64>], residuals: &mut [f64]) -> CostBreakdown {
        let beta = self.p.options.smoothness_beta;
        let w = &self.p.weights;
        let mut semantic = 0.0;
        let mut collision = 0.0;
        let mut smooth = 0.0;
        for (i, lp) in traj.iter().enumerate() {
            semantic += self.semantic_at(i, lp);
            collision += self.collision_at(&lp.pose);
            if let Some(prev) = self.prev_pose(traj, i) {
                smooth += pair_smoothness(prev, &lp.pose, beta);
            }
        }
        let mut ik = 0.0;
        if w.lambda_ik > 0.0 {
            for (slot, &i) in self.free.iter().enumerate() {
                let seed = configs[slot].clone();
                let sol = ik_solve(&self.p.chain, &traj[i].pose, &seed, &self.p.options.ik);
                ik += sol.residual * sol.residual;
                residuals[slot] = sol.residual;
                configs[slot] = sol.config;
            }
        }
        CostBreakdown::weighted(semantic, collision, smooth, ik, w)
    }

    /// Weighted cost terms that depend on free pose `slot` taking value `pose`.
    fn local(&self, traj: &[LabeledPose], slot: usize, pose: &Pose, config: &[f64], residual: f64) -> f64 {
        let i = self.free[slot];
        let w = &self.p.weights;
        let beta = self.p.options.smoothness_beta;
        let lp = LabeledPose { pose: *pose, ..traj[i] };
        let mut c = w.lambda_p * self.semantic_at(i, &lp) + w.lambda_c * self.collision_at(pose);
        let mut s = 0.0;
        if let Some(prev) = self.prev_pose(traj, i) {
            s += pair_smoothness(prev, pose, beta);
        }
        if let Some(next) = traj.get(i + 1) {
            s += pair_smoothness(pose, &next.pose, beta);
        }
        c += w.lambda_l * s;
        if w.lambda_ik > 0.0 && residual > IK_ACTIVE {
            let r = ik_solve(&self.p.chain, pose, config, &self.p.options.ik).residual;
            c += w.lambda_ik * r * r;
        }
        c
    }

    fn gradient(&self, traj: &[LabeledPose], configs: &[Vec<f64>], residuals: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; 6 * self.free.len()];
        for (slot, &i) in self.free.iter().enumerate() {
            let base = traj[i].pose;
            for c in 0..6 {
                let mut d = [0.0; 6];
                d[c] = FD_STEP;
                let plus = apply(&base, &d, 1.0);
                let minus = apply(&base, &d, -1.0);
                let fp = self.local(traj, slot, &plus, &configs[slot], residuals[slot]);
                let fm = self.local(traj, slot, &minus, &configs[slot], residuals[slot]);
                g[6 * slot + c] = (fp - fm) / (2.0 * FD_STEP);
            }
        }
        g
    }

    fn is_feasible(&self, traj: &[LabeledPose]) -> bool {
        let eps = self.p.options.feasibility_eps;
        for &i in &self.free {
            let lp = &traj[i];
            if self.clearance(&lp.pose) < 0.0 {
                return false;
            }
            if let Some(prev) = self.prev_pose(traj, i) {
                if self.swept_clearance(prev, &lp.pose) < 0.0 {
                    return false;
                }
            }
            if let Some(next) = traj.get(i + 1) {
                if self.swept_clearance(&lp.pose, &next.pose) < 0.0 {
                    return false;
                }
            }
            let kp = self.tracker.positions(&lp.pose);
            if self
                .path
                .iter()
                .any(|a| a.kind.eval_unchecked(lp.pose.translation(), &kp, lp.gripper) > eps)
            {
                return false;
            }
        }
        if let Some(s) = self.sub_idx {
            let lp = &traj[s];
            let kp = self.tracker.positions(&lp.pose);
            if self
                .sub
                .iter()
                .any(|a| a.kind.eval_unchecked(lp.pose.translation(), &kp, lp.gripper) > eps)
            {
                return false;
            }
        }
        true
    }
}

fn apply(pose: &Pose, d: &[f64], alpha: f64) -> Pose {
    pose.perturbed(
        &(Vec3::new(d[0], d[1], d[2]) * alpha),
        &(Vec3::new(d[3], d[4], d[5]) * alpha),
    )
}

fn step_traj(traj: &[LabeledPose], free: &[usize], d: &[f64], alpha: f64) -> Vec<LabeledPose> {
    let mut out = traj.to_vec();
    for (slot, &i) in free.iter().enumerate() {
        out[i].pose = apply(&traj[i].pose, &d[6 * slot..6 * slot + 6], alpha);
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Interpolates every maximal run of free poses between the fixed poses that
/// bound it. A run without a fixed pose on one side holds the other side's pose.
pub fn initialize(traj: &[LabeledPose], start_anchor: Option<&Pose>) -> Vec<LabeledPose> {
    let mut out = traj.to_vec();
    let n = traj.len();
    let mut i = 0;
    while i < n {
        if traj[i].label != PoseLabel::R {
            i += 1;
            continue;
        }
        let a = i;
        while i < n && traj[i].label == PoseLabel::R {
            i += 1;
        }
        let b = i;
        let before = if a == 0 { start_anchor.copied() } else { Some(traj[a - 1].pose) };
        let after = traj.get(b).map(|p| p.pose);
        let len = (b - a) as f64;
        for k in a..b {
            out[k].pose = match (before, after) {
                (Some(s), Some(e)) => lerp_unchecked(&s, &e, (k - a + 1) as f64 / (len + 1.0)),
                (Some(s), None) => s,
                (None, Some(e)) => e,
                (None, None) => traj[k].pose,
            };
        }
    }
    out
}

/// Adds a smooth random detour to each free run (zero at the run's ends).
fn detour<R: Rng>(traj: &[LabeledPose], amplitude: f64, rng: &mut R) -> Vec<LabeledPose> {
    let mut out = traj.to_vec();
    let n = traj.len();
    let mut i = 0;
    while i < n {
        if traj[i].label != PoseLabel::R {
            i += 1;
            continue;
        }
        let a = i;
        while i < n && traj[i].label == PoseLabel::R {
            i += 1;
        }
        let b = i;
        let mut u = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        if u.norm() < 1e-6 {
            u = Vec3::z();
        }
        u = u.normalize() * amplitude;
        let len = (b - a) as f64;
        for k in a..b {
            let s = (std::f64::consts::PI * (k - a + 1) as f64 / (len + 1.0)).sin();
            out[k].pose = out[k].pose.perturbed(&(u * s), &Vec3::zeros());
        }
    }
    out
}

struct RunOutcome {
    traj: Vec<LabeledPose>,
    costs: CostBreakdown,
    iterations: usize,
    converged: bool,
    history: Vec<f64>,
}

fn optimize(obj: &Objective, init: Vec<LabeledPose>) -> RunOutcome {
    let p = obj.p;
    let nfree = obj.free.len();
    let dof = p.chain.dof();
    let seed: Vec<f64> = p.ik_seed.iter().copied().chain(std::iter::repeat(0.0)).take(dof).collect();
    let mut configs = vec![seed; nfree];
    let mut residuals = vec![f64::INFINITY; nfree];
    let mut traj = init;
    // sequential warm start for the initial solve
    if p.weights.lambda_ik > 0.0 {
        for slot in 1..nfree {
            let prev = ik_solve(&p.chain, &traj[obj.free[slot - 1]].pose, &configs[slot - 1], &p.options.ik);
            configs[slot - 1] = prev.config.clone();
            configs[slot] = prev.config;
        }
    }
    let mut costs = obj.evaluate(&traj, &mut configs, &mut residuals);
    let mut history = vec![costs.total];
    let mut iterations = 0;
    let mut converged = false;
    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut g = Vec::new();

    while iterations < p.options.max_iters {
        iterations += 1;
        if costs.total == 0.0 {
            converged = true;
            break;
        }
        if g.is_empty() {
            g = obj.gradient(&traj, &configs, &residuals);
        }
        let gnorm = dot(&g, &g).sqrt();
        if !(gnorm > 0.0) {
            converged = true;
            break;
        }

        let mut accepted = None;
        for attempt in 0..2 {
            let use_memory = attempt == 0 && !s_hist.is_empty();
            let mut d = if use_memory {
                lbfgs_direction(&g, &s_hist, &y_hist)
            } else {
                g.iter().map(|v| -v / gnorm).collect()
            };
            let mut slope = dot(&g, &d);
            if slope >= 0.0 {
                d = g.iter().map(|v| -v / gnorm).collect();
                slope = dot(&g, &d);
            }
            let dmax = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let mut alpha = if use_memory { 1.0 } else { MAX_STEP };
            if alpha * dmax > MAX_STEP {
                alpha = MAX_STEP / dmax;
            }
            for _ in 0..40 {
                let trial = step_traj(&traj, &obj.free, &d, alpha);
                let mut c_try = configs.clone();
                let mut r_try = residuals.clone();
                let c = obj.evaluate(&trial, &mut c_try, &mut r_try);
                if c.total <= costs.total + 1e-4 * alpha * slope && c.total <= costs.total {
                    accepted = Some((trial, c, c_try, r_try, d.iter().map(|v| v * alpha).collect::<Vec<f64>>()));
                    break;
                }
                alpha *= 0.5;
            }
            if accepted.is_some() {
                break;
            }
            s_hist.clear();
            y_hist.clear();
        }

        let Some((trial, c, c_try, r_try, s)) = accepted else {
            converged = true;
            break;
        };
        let rel = (costs.total - c.total) / costs.total.abs().max(1e-300);
        traj = trial;
        configs = c_try;
        residuals = r_try;
        costs = c;
        history.push(costs.total);
        let g_new = obj.gradient(&traj, &configs, &residuals);
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        if dot(&s, &y) > 1e-12 {
            s_hist.push(s);
            y_hist.push(y);
            if s_hist.len() > LBFGS_MEMORY {
                s_hist.remove(0);
                y_hist.remove(0);
            }
        }
        g = g_new;
        if rel < p.options.tol {
            converged = true;
            break;
        }
    }
    RunOutcome {
        traj,
        costs,
        iterations,
        converged,
        history,
    }
}

fn lbfgs_direction(g: &[f64], s_hist: &[Vec<f64>], y_hist: &[Vec<f64>]) -> Vec<f64> {
    let m = s_hist.len();
    let mut q = g.to_vec();
    let mut alphas = vec![0.0; m];
    for k in (0..m).rev() {
        let rho = 1.0 / dot(&y_hist[k], &s_hist[k]);
        alphas[k] = rho * dot(&s_hist[k], &q);
        for (qi, yi) in q.iter_mut().zip(&y_hist[k]) {
            *qi -= alphas[k] * yi;
        }
    }
    let gamma = dot(&s_hist[m - 1], &y_hist[m - 1]) / dot(&y_hist[m - 1], &y_hist[m - 1]);
    for qi in q.iter_mut() {
        *qi *= gamma;
    }
    for k in 0..m {
        let rho = 1.0 / dot(&y_hist[k], &s_hist[k]);
        let beta = rho * dot(&y_hist[k], &q);
        for (qi, si) in q.iter_mut().zip(&s_hist[k]) {
            *qi += (alphas[k] - beta) * si;
        }
    }
    q.iter().map(|v| -v).collect()
}

impl PlanProblem {
    pub fn validate(&self) -> Result<(), PlanError> {
        if !self.trajectory.iter().any(|p| p.label == PoseLabel::R) {
            return Err(PlanError::NoFreePoses);
        }
        let w = &self.weights;
        if [w.lambda_p, w.lambda_c, w.lambda_l, w.lambda_ik]
            .iter()
            .any(|v| !(v.is_finite() && *v >= 0.0))
        {
            return Err(PlanError::Validation("weights must be finite and >= 0".into()));
        }
        if self.stage >= self.plan.num_stages {
            return Err(PlanError::Validation(format!(
                "stage {} out of range for {} stages",
                self.stage, self.plan.num_stages
            )));
        }
        if let Some(v) = validate_plan(&self.plan).first() {
            return Err(PlanError::Validation(v.to_string()));
        }
        let mut ids: Vec<usize> = self.keypoints.iter().map(|k| k.id).collect();
        ids.sort_unstable();
        if ids.iter().enumerate().any(|(i, &id)| i != id) {
            return Err(PlanError::Validation("keypoint ids must be unique and contiguous from 0".into()));
        }
        if let Some(m) = self.plan.max_keypoint_id() {
            if m >= ids.len() {
                return Err(PlanError::Validation(format!(
                    "plan references keypoint {m} but only {} keypoints exist",
                    ids.len()
                )));
            }
        }
        if let Some(g) = &self.grasp {
            if g.keypoint >= ids.len() || g.attached.iter().any(|&a| a >= ids.len()) {
                return Err(PlanError::Validation("grasp references a missing keypoint".into()));
            }
        }
        self.chain.validate().map_err(PlanError::Validation)?;
        if !self.env.is_valid() {
            return Err(PlanError::Validation("environment has invalid primitives".into()));
        }
        if self.trajectory.iter().any(|p| !p.pose.is_finite()) {
            return Err(PlanError::Validation("trajectory contains non-finite poses".into()));
        }
        if !(self.options.collision_margin >= 0.0) {
            return Err(PlanError::Validation("collision margin must be >= 0".into()));
        }
        Ok(())
    }

    /// Cost breakdown of an arbitrary trajectory under this problem.
    pub fn evaluate(&self, traj: &[LabeledPose]) -> CostBreakdown {
        let obj = Objective::new(self);
        let dof = self.chain.dof();
        let seed: Vec<f64> = self.ik_seed.iter().copied().chain(std::iter::repeat(0.0)).take(dof).collect();
        let mut configs = vec![seed; obj.free.len()];
        for slot in 1..obj.free.len() {
            let prev = ik_solve(&self.chain, &traj[obj.free[slot - 1]].pose, &configs[slot - 1], &self.options.ik);
            configs[slot] = prev.config;
        }
        let mut residuals = vec![0.0; obj.free.len()];
        obj.evaluate(traj, &mut configs, &mut residuals)
    }

    /// Hard-constraint check over the free poses.
    pub fn is_feasible(&self, traj: &[LabeledPose]) -> bool {
        Objective::new(self).is_feasible(traj)
    }

    /// The optimizer's finite-difference gradient at `traj`, 6 entries per
    /// free pose (translation, then rotation increment).
    pub fn gradient(&self, traj: &[LabeledPose]) -> Vec<f64> {
        let obj = Objective::new(self);
        let dof = self.chain.dof();
        let seed: Vec<f64> = self.ik_seed.iter().copied().chain(std::iter::repeat(0.0)).take(dof).collect();
        let mut configs = vec![seed; obj.free.len()];
        let mut residuals = vec![0.0; obj.free.len()];
        obj.evaluate(traj, &mut configs, &mut residuals);
        obj.gradient(traj, &configs, &residuals)
    }

    pub fn free_indices(&self) -> Vec<usize> {
        Objective::new(self).free
    }
}

pub fn replan(problem: &PlanProblem) -> Result<PlanResult, PlanError> {
    problem.validate()?;
    let obj = Objective::new(problem);
    let init = initialize(&problem.trajectory, problem.start_anchor.as_ref());
    let mut rng = ChaCha8Rng::seed_from_u64(problem.options.seed);
    let mut best: Option<PlanResult> = None;
    for run in 0..=problem.options.restarts {
        let start = if run == 0 {
            init.clone()
        } else {
            detour(&init, problem.options.restart_amplitude, &mut rng)
        };
        let out = optimize(&obj, start);
        let feasible = obj.is_feasible(&out.traj);
        let candidate = PlanResult {
            trajectory: out.traj,
            costs: out.costs,
            iterations: out.iterations,
            converged: out.converged,
            feasible,
            cost_history: out.history,
            run,
        };
        let better = match &best {
            None => true,
            Some(b) => (candidate.feasible, -candidate.costs.total) > (b.feasible, -b.costs.total),
        };
        if better {
            best = Some(candidate);
        }
        if feasible || problem.options.max_iters == 0 {
            break;
        }
    }
    Ok(best.expect("at least one run"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subsegment {
    /// Inclusive.
    pub start: usize,
    /// Exclusive.
    pub end: usize,
    /// No run met the requirements; the range is the full trajectory.
    pub flagged: bool,
}

/// Longest run of collision-free poses whose first and last poses lie within
/// `delta` (translation) of the required boundary poses. Ties go to the
/// earliest run.
pub fn select_subsegment(
    traj: &[LabeledPose],
    env: &SdfEnvironment,
    start_boundary: Option<&Pose>,
    end_boundary: Option<&Pose>,
    delta: f64,
) -> Subsegment {
    let n = traj.len();
    let near = |p: &LabeledPose, b: Option<&Pose>| match b {
        Some(b) => (p.pose.translation() - b.translation()).norm() <= delta,
        None => true,
    };
    let mut best: Option<(usize, usize)> = None;
    let mut i = 0;
    while i < n {
        if env.sdf(traj[i].pose.translation()) < 0.0 {
            i += 1;
            continue;
        }
        let a = i;
        while i < n && env.sdf(traj[i].pose.translation()) >= 0.0 {
            i += 1;
        }
        let b = i;
        let s = (a..b).find(|&k| near(&traj[k], start_boundary));
        let e = (a..b).rev().find(|&k| near(&traj[k], end_boundary));
        if let (Some(s), Some(e)) = (s, e) {
            if s <= e && best.map_or(true, |(bs, be)| e + 1 - s > be - bs) {
                best = Some((s, e + 1));
            }
        }
    }
    match best {
        Some((start, end)) => Subsegment {
            start,
            end,
            flagged: false,
        },
        None => Subsegment {
            start: 0,
            end: n,
            flagged: true,
        },
    }
}

