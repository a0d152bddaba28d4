//! Declarative keypoint constraints.
//!
//! A [`ConstraintPlan`] is the machine-readable form of a constraint proposal:
//! per stage, a set of sub-goal atoms (must hold when the stage ends) and path
//! atoms (must hold throughout), plus the `grasp_keypoints` /
//! `release_keypoints` arrays. Every atom evaluates to a cost that is `<= 0`
//! exactly when the constraint is satisfied.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::demos::{LabeledPose, PoseLabel};
use crate::geometry::{Pose, Vec3};

/// Max end-effector to keypoint distance for a grasp to count as maintained (m).
pub const GRASP_EPSILON: f64 = 0.01;
/// Gripper command at or above which the gripper counts as closed.
pub const GRIPPER_CLOSED: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum ConstraintError {
    #[error("atom references keypoint {id} but only {available} keypoints exist")]
    DanglingKeypoint { id: usize, available: usize },
    #[error("stage {stage} out of range for a plan with {num_stages} stages")]
    StageOutOfRange { stage: usize, num_stages: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub id: usize,
    pub position: Vec3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AtomRole {
    Subgoal,
    Path,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AtomKind {
    /// `|k_i - (k_j + offset)| - tolerance`
    PointOffset {
        i: usize,
        j: usize,
        offset: Vec3,
        tolerance: f64,
    },
    /// `angle(k_i - k_j, axis) - max_angle`
    AxisAngle {
        i: usize,
        j: usize,
        axis: Vec3,
        max_angle: f64,
    },
    /// `min_height - (k_i.z - k_j.z)`
    HeightAbove { i: usize, j: usize, min_height: f64 },
    /// `max(|ee - k_m| - GRASP_EPSILON, GRIPPER_CLOSED - gripper)`
    GraspMaintained { keypoint: usize },
    /// `|k_i - point| - radius`
    WithinRadius { i: usize, point: Vec3, radius: f64 },
}

impl AtomKind {
    pub fn keypoint_ids(&self) -> Vec<usize> {
        match *self {
            AtomKind::PointOffset { i, j, .. }
            | AtomKind::AxisAngle { i, j, .. }
            | AtomKind::HeightAbove { i, j, .. } => vec![i, j],
            AtomKind::GraspMaintained { keypoint } => vec![keypoint],
            AtomKind::WithinRadius { i, .. } => vec![i],
        }
    }

    fn tolerance_ok(&self) -> bool {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        match self {
            AtomKind::PointOffset { offset, tolerance, .. } => {
                ok(*tolerance) && offset.iter().all(|v| v.is_finite())
            }
            AtomKind::AxisAngle { axis, max_angle, .. } => {
                ok(*max_angle) && axis.norm() > 0.0 && axis.iter().all(|v| v.is_finite())
            }
            AtomKind::HeightAbove { min_height, .. } => min_height.is_finite(),
            AtomKind::GraspMaintained { .. } => true,
            AtomKind::WithinRadius { point, radius, .. } => {
                ok(*radius) && point.iter().all(|v| v.is_finite())
            }
        }
    }

    /// Cost without bounds checks; callers guarantee ids are in range.
    pub(crate) fn eval_unchecked(&self, ee: &Vec3, kp: &[Vec3], gripper: f64) -> f64 {
        match self {
            AtomKind::PointOffset { i, j, offset, tolerance } => {
                (kp[*i] - (kp[*j] + offset)).norm() - tolerance
            }
            AtomKind::AxisAngle { i, j, axis, max_angle } => {
                let v = kp[*i] - kp[*j];
                // coincident keypoints: atan2(0, -0) would read as a half turn
                let ang = if v == Vec3::zeros() { 0.0 } else { v.cross(axis).norm().atan2(v.dot(axis)) };
                ang - max_angle
            }
            AtomKind::HeightAbove { i, j, min_height } => min_height - (kp[*i].z - kp[*j].z),
            AtomKind::GraspMaintained { keypoint } => {
                ((ee - kp[*keypoint]).norm() - GRASP_EPSILON).max(GRIPPER_CLOSED - gripper)
            }
            AtomKind::WithinRadius { i, point, radius } => (kp[*i] - point).norm() - radius,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintAtom {
    /// Zero-based stage index.
    pub stage: usize,
    pub role: AtomRole,
    #[serde(flatten)]
    pub kind: AtomKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintPlan {
    pub num_stages: usize,
    #[serde(default)]
    pub atoms: Vec<ConstraintAtom>,
    /// Per stage, the keypoint grasped in that stage or `-1`.
    pub grasp_keypoints: Vec<i64>,
    /// Per stage, the keypoint released at the end of that stage or `-1`.
    pub release_keypoints: Vec<i64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub rule: String,
    pub stage: Option<usize>,
    pub message: String,
}

impl Violation {
    fn new(rule: &str, stage: Option<usize>, message: impl Into<String>) -> Self {
        Violation {
            rule: rule.to_string(),
            stage,
            message: message.into(),
        }
    }
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.stage {
            Some(s) => write!(f, "stage {s}: {} ({})", self.rule, self.message),
            None => write!(f, "{} ({})", self.rule, self.message),
        }
    }
}

impl ConstraintPlan {
    pub fn atoms_for(&self, stage: usize, role: AtomRole) -> impl Iterator<Item = &ConstraintAtom> {
        self.atoms
            .iter()
            .filter(move |a| a.stage == stage && a.role == role)
    }

    /// The keypoint held by the gripper while `stage` executes, if any.
    pub fn held_keypoint(&self, stage: usize) -> Option<usize> {
        let mut held = None;
        for s in 0..stage.min(self.num_stages) {
            if let Some(&g) = self.grasp_keypoints.get(s) {
                if g >= 0 {
                    held = Some(g as usize);
                }
            }
            if let Some(&r) = self.release_keypoints.get(s) {
                if r >= 0 && held == Some(r as usize) {
                    held = None;
                }
            }
        }
        held
    }

    pub fn max_keypoint_id(&self) -> Option<usize> {
        self.atoms
            .iter()
            .flat_map(|a| a.kind.keypoint_ids())
            .chain(
                self.grasp_keypoints
                    .iter()
                    .chain(&self.release_keypoints)
                    .filter(|&&k| k >= 0)
                    .map(|&k| k as usize),
            )
            .max()
    }
}

/// Structural checks. An empty result means the plan is well formed.
pub fn validate_plan(plan: &ConstraintPlan) -> Vec<Violation> {
    let mut out = Vec::new();
    let n = plan.num_stages;
    if n == 0 {
        out.push(Violation::new("num_stages >= 1", None, "plan has no stages"));
    }
    if plan.grasp_keypoints.len() != n {
        out.push(Violation::new(
            "grasp_keypoints length",
            None,
            format!("expected {n} entries, found {}", plan.grasp_keypoints.len()),
        ));
    }
    if plan.release_keypoints.len() != n {
        out.push(Violation::new(
            "release_keypoints length",
            None,
            format!("expected {n} entries, found {}", plan.release_keypoints.len()),
        ));
    }
    for (idx, a) in plan.atoms.iter().enumerate() {
        if a.stage >= n {
            out.push(Violation::new(
                "atom stage in range",
                Some(a.stage),
                format!("atom {idx} targets stage {} of {n}", a.stage),
            ));
        }
        if !a.kind.tolerance_ok() {
            out.push(Violation::new(
                "tolerances >= 0",
                Some(a.stage),
                format!("atom {idx} has a negative or non-finite parameter"),
            ));
        }
    }
    for (s, &k) in plan.grasp_keypoints.iter().enumerate() {
        if k < -1 {
            out.push(Violation::new("keypoint index >= -1", Some(s), format!("grasp keypoint {k}")));
        }
    }
    for (s, &k) in plan.release_keypoints.iter().enumerate() {
        if k < -1 {
            out.push(Violation::new("keypoint index >= -1", Some(s), format!("release keypoint {k}")));
        }
    }

    let mut held: Option<i64> = None;
    for s in 0..n {
        let g = plan.grasp_keypoints.get(s).copied().unwrap_or(-1);
        let r = plan.release_keypoints.get(s).copied().unwrap_or(-1);
        if g >= 0 {
            let subgoals = plan.atoms_for(s, AtomRole::Subgoal).count();
            let paths = plan.atoms_for(s, AtomRole::Path).count();
            if subgoals != 1 {
                out.push(Violation::new(
                    "only one sub-goal constraint",
                    Some(s),
                    format!("grasp stage has {subgoals} sub-goal atoms"),
                ));
            }
            if paths != 0 {
                out.push(Violation::new(
                    "no path constraints in grasp stages",
                    Some(s),
                    format!("grasp stage has {paths} path atoms"),
                ));
            }
            if let Some(h) = held {
                out.push(Violation::new(
                    "one object at a time",
                    Some(s),
                    format!("grasping keypoint {g} while keypoint {h} is held"),
                ));
            }
        }
        if r >= 0 {
            let grasped_before = (0..s).any(|p| plan.grasp_keypoints.get(p) == Some(&r));
            if !grasped_before {
                out.push(Violation::new(
                    "release only after grasp",
                    Some(s),
                    format!("keypoint {r} released without an earlier grasp"),
                ));
            } else if held != Some(r) {
                out.push(Violation::new(
                    "release only after grasp",
                    Some(s),
                    format!("keypoint {r} is not held at stage {s}"),
                ));
            }
        }
        if g >= 0 {
            held = Some(g);
        }
        if r >= 0 && held == Some(r) {
            held = None;
        }
    }
    out
}

pub fn eval_atom(atom: &ConstraintAtom, ee_pose: &Pose, keypoints: &[Vec3], gripper: f64) -> Result<f64, ConstraintError> {
    for id in atom.kind.keypoint_ids() {
        if id >= keypoints.len() {
            return Err(ConstraintError::DanglingKeypoint {
                id,
                available: keypoints.len(),
            });
        }
    }
    Ok(atom.kind.eval_unchecked(ee_pose.translation(), keypoints, gripper))
}

/// Keypoint positions for a given end-effector pose. Keypoint 0 is the
/// end-effector; a grasped keypoint moves rigidly with the end-effector from
/// the pose at which it was attached.
pub fn moved_keypoints(base: &[Vec3], ee_pose: &Pose, grasped: Option<usize>, attach_pose: &Pose) -> Vec<Vec3> {
    let mut out = base.to_vec();
    if let Some(first) = out.first_mut() {
        *first = *ee_pose.translation();
    }
    if let Some(g) = grasped {
        if g > 0 && g < out.len() {
            let local = attach_pose.inverse().transform_point(&base[g]);
            out[g] = ee_pose.transform_point(&local);
        }
    }
    out
}

/// Scene keypoints plus the grasp state needed to move them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointTracker {
    pub base: Vec<Vec3>,
    /// Grasped keypoint and the end-effector pose at which it was attached.
    #[serde(default)]
    pub grasped: Option<(usize, Pose)>,
    /// Further keypoints on the grasped object; they move with it.
    #[serde(default)]
    pub attached: Vec<usize>,
}

impl KeypointTracker {
    pub fn new(base: Vec<Vec3>) -> Self {
        KeypointTracker {
            base,
            grasped: None,
            attached: Vec::new(),
        }
    }

    pub fn with_grasp(mut self, keypoint: usize, attach_pose: Pose) -> Self {
        self.grasped = Some((keypoint, attach_pose));
        self
    }

    pub fn with_attached(mut self, keypoints: Vec<usize>) -> Self {
        self.attached = keypoints;
        self
    }

    pub fn positions(&self, ee_pose: &Pose) -> Vec<Vec3> {
        match self.grasped {
            Some((k, attach)) => {
                let mut out = moved_keypoints(&self.base, ee_pose, Some(k), &attach);
                if !self.attached.is_empty() {
                    let rel = ee_pose.compose(&attach.inverse());
                    for &a in &self.attached {
                        if a > 0 && a < out.len() && a != k {
                            out[a] = rel.transform_point(&self.base[a]);
                        }
                    }
                }
                out
            }
            None => moved_keypoints(&self.base, ee_pose, None, &Pose::identity()),
        }
    }
}

fn hinge_sq(c: f64) -> f64 {
    let h = c.max(0.0);
    h * h
}

/// Index of the pose at which sub-goal atoms are evaluated: the last
/// replanning pose, or the last pose when none is free.
pub fn subgoal_index(traj: &[LabeledPose]) -> Option<usize> {
    traj.iter()
        .rposition(|p| p.label == PoseLabel::R)
        .or_else(|| traj.len().checked_sub(1))
}

/// Semantic cost: squared hinge of every path atom of `stage` at every
/// replanning pose, plus squared hinge of the stage's sub-goal atoms at the
/// final replanning pose.
pub fn semantic_cost(
    traj: &[LabeledPose],
    plan: &ConstraintPlan,
    stage: usize,
    tracker: &KeypointTracker,
) -> Result<f64, ConstraintError> {
    if stage >= plan.num_stages {
        return Err(ConstraintError::StageOutOfRange {
            stage,
            num_stages: plan.num_stages,
        });
    }
    let path: Vec<&ConstraintAtom> = plan.atoms_for(stage, AtomRole::Path).collect();
    let sub: Vec<&ConstraintAtom> = plan.atoms_for(stage, AtomRole::Subgoal).collect();
    let mut total = 0.0;
    if !path.is_empty() {
        for lp in traj.iter().filter(|p| p.label == PoseLabel::R) {
            let kp = tracker.positions(&lp.pose);
            for a in &path {
                total += hinge_sq(eval_atom(a, &lp.pose, &kp, lp.gripper)?);
            }
        }
    }
    if let Some(last) = subgoal_index(traj) {
        let lp = &traj[last];
        let kp = tracker.positions(&lp.pose);
        for a in &sub {
            total += hinge_sq(eval_atom(a, &lp.pose, &kp, lp.gripper)?);
        }
    }
    Ok(total)
}
