//! Desk-scale task definitions, the scripted expert that produces source
//! demonstrations, and the success predicates.

use std::collections::BTreeMap;
use std::f64::consts::{FRAC_PI_4, FRAC_PI_8, PI};

use nalgebra::{UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ExecutionTrace, ObjectVariant, SceneDescription, SceneObject, Variant, VariantSpec};
use crate::constraints::{AtomKind, AtomRole, ConstraintAtom, ConstraintPlan, Keypoint};
use crate::demos::{Demonstration, Interval, LabeledPose, PoseLabel, SegmentBoundary};
use crate::geometry::{lerp_unchecked, Pose, Vec3};
use crate::planner::kinematics::{desk_arm, KinematicChain};
use crate::planner::sdf::{Aabb, SdfPrimitive};

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("unknown task '{0}' (built-in tasks: square, threading)")]
    UnknownTask(String),
    #[error("task '{task}' references object '{object}' which is not in the scene")]
    MissingObject { task: String, object: String },
    #[error("invalid task '{task}': {message}")]
    Invalid { task: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubtaskSpec {
    pub target: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grasp: Option<String>,
}

/// A keypoint fixed to an object, given in that object's frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointAnchor {
    pub name: String,
    pub object: String,
    pub local: Vec3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SuccessPredicate {
    /// Ring center within `radius_xy` of the peg axis, at most `max_height`
    /// above the peg base, and released.
    RingOnPeg {
        ring: String,
        peg: String,
        radius_xy: f64,
        max_height: f64,
    },
    /// Needle tip within `radius` of the hole center with the needle axis
    /// within `max_angle` of the hole axis.
    Threading {
        needle: String,
        tip_local: Vec3,
        axis_local: Vec3,
        holder: String,
        hole_local: Vec3,
        hole_axis_local: Vec3,
        radius: f64,
        max_angle: f64,
    },
}

/// Parameters of the scripted pick-and-place expert.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertSpec {
    pub pregrasp_height: f64,
    pub lift_height: f64,
    /// Height of the arc the held object follows between lift and pre-place.
    pub transport_clearance: f64,
    /// Held-object pose in the target frame before the final approach.
    pub pre_place: Pose,
    /// Held-object pose in the target frame at release.
    pub place: Pose,
    /// Rotational symmetry order of the held object about its z axis.
    pub yaw_symmetry: u32,
    pub retreat_height: f64,
    /// The constraint plan a model is expected to propose for this task;
    /// used to author recorded responses.
    pub plan: ConstraintPlan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    /// Natural-language task description used in prompts.
    pub description: String,
    pub nominal: SceneDescription,
    pub variants: Vec<VariantSpec>,
    pub subtasks: Vec<SubtaskSpec>,
    /// Keypoints 1..=n; keypoint 0 is the end-effector.
    pub keypoints: Vec<KeypointAnchor>,
    pub success: SuccessPredicate,
    pub home: Pose,
    pub arm_base: Vec3,
    pub fps: f64,
    pub expert: ExpertSpec,
}

/// Pose index ranges of the scripted expert's trajectory.
pub const EXPERT_LEN: usize = 90;
const APPROACH_END: usize = 30;
const GRASP_END: usize = 40;
const TRANSPORT_END: usize = 70;
const GRASP_STEP: usize = 35;
const PLACE_STEP: usize = 80;

fn down() -> UnitQuaternion<f64> {
    UnitQuaternion::from_axis_angle(&Vector3::x_axis(), PI)
}

fn workspace() -> Aabb {
    Aabb::new(Vec3::new(-0.6, -0.4, -0.05), Vec3::new(0.6, 0.4, 0.6))
}

fn region(cx: f64, cy: f64, z: f64, half: f64) -> Aabb {
    Aabb::new(Vec3::new(cx - half, cy - half, z), Vec3::new(cx + half, cy + half, z))
}

fn ov(region: Aabb, yaw: f64, fixed: bool) -> ObjectVariant {
    ObjectVariant {
        region,
        yaw_range: [-yaw, yaw],
        fixed,
    }
}

fn variant(variant: Variant, objects: [(&str, ObjectVariant); 2]) -> VariantSpec {
    VariantSpec {
        variant,
        objects: objects.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
    }
}

fn offset_atom(stage: usize, role: AtomRole, i: usize, j: usize, offset: Vec3, tolerance: f64) -> ConstraintAtom {
    ConstraintAtom {
        stage,
        role,
        kind: AtomKind::PointOffset { i, j, offset, tolerance },
    }
}

fn obstacle() -> SdfPrimitive {
    SdfPrimitive::Sphere {
        center: Vec3::new(0.0, 0.0, 0.07),
        radius: 0.07,
    }
}

fn object(pose: Pose, shape: SdfPrimitive, grasp_point: Option<Vec3>) -> SceneObject {
    SceneObject { pose, shape, grasp_point }
}

/// Ring ("nut") onto a peg, with a spherical obstacle between their regions.
pub fn square() -> TaskSpec {
    let nut_home = Vec3::new(-0.22, 0.0, 0.01);
    let peg_home = Vec3::new(0.22, 0.0, 0.0);
    let mut objects = BTreeMap::new();
    objects.insert(
        "nut".to_string(),
        object(
            Pose::from_translation(nut_home),
            SdfPrimitive::Sphere {
                center: Vec3::zeros(),
                radius: 0.04,
            },
            Some(Vec3::new(0.03, 0.0, 0.0)),
        ),
    );
    objects.insert(
        "peg".to_string(),
        object(
            Pose::from_translation(peg_home),
            SdfPrimitive::Capsule {
                a: Vec3::zeros(),
                b: Vec3::new(0.0, 0.0, 0.1),
                radius: 0.01,
            },
            None,
        ),
    );
    let nominal = SceneDescription {
        objects,
        obstacles: vec![obstacle()],
        workspace: workspace(),
        variant: Variant::D0,
    };
    let variants = vec![
        variant(
            Variant::D0,
            [
                ("nut", ov(region(-0.22, 0.0, 0.01, 0.02), FRAC_PI_4, false)),
                ("peg", ov(region(0.22, 0.0, 0.0, 0.0), 0.0, true)),
            ],
        ),
        variant(
            Variant::D1,
            [
                ("nut", ov(region(-0.22, 0.0, 0.01, 0.1), FRAC_PI_4, false)),
                ("peg", ov(region(0.22, 0.0, 0.0, 0.1), 0.0, false)),
            ],
        ),
        variant(
            Variant::D2,
            [
                ("nut", ov(region(-0.22, 0.0, 0.01, 0.1), PI, false)),
                ("peg", ov(region(0.22, 0.0, 0.0, 0.1), PI, false)),
            ],
        ),
    ];
    let plan = ConstraintPlan {
        num_stages: 2,
        atoms: vec![
            offset_atom(0, AtomRole::Subgoal, 0, 1, Vec3::new(0.0, 0.0, 0.08), 0.02),
            ConstraintAtom {
                stage: 1,
                role: AtomRole::Path,
                kind: AtomKind::GraspMaintained { keypoint: 1 },
            },
            ConstraintAtom {
                stage: 1,
                role: AtomRole::Path,
                kind: AtomKind::HeightAbove {
                    i: 2,
                    j: 3,
                    min_height: 0.0,
                },
            },
            offset_atom(1, AtomRole::Subgoal, 2, 3, Vec3::new(0.0, 0.0, 0.03), 0.02),
        ],
        grasp_keypoints: vec![1, -1],
        release_keypoints: vec![-1, 1],
    };
    TaskSpec {
        name: "square".into(),
        description: "pick up the nut by its handle and place it onto the peg".into(),
        nominal,
        variants,
        subtasks: vec![
            SubtaskSpec {
                target: "nut".into(),
                grasp: None,
            },
            SubtaskSpec {
                target: "peg".into(),
                grasp: Some("nut".into()),
            },
        ],
        keypoints: vec![
            KeypointAnchor {
                name: "nut handle".into(),
                object: "nut".into(),
                local: Vec3::new(0.03, 0.0, 0.0),
            },
            KeypointAnchor {
                name: "nut center".into(),
                object: "nut".into(),
                local: Vec3::zeros(),
            },
            KeypointAnchor {
                name: "peg top".into(),
                object: "peg".into(),
                local: Vec3::new(0.0, 0.0, 0.1),
            },
        ],
        success: SuccessPredicate::RingOnPeg {
            ring: "nut".into(),
            peg: "peg".into(),
            radius_xy: 0.01,
            max_height: 0.05,
        },
        home: Pose::new(down(), Vec3::new(-0.2, 0.0, 0.3)),
        arm_base: Vec3::new(-0.5, 0.0, 0.0),
        fps: 10.0,
        expert: ExpertSpec {
            pregrasp_height: 0.08,
            lift_height: 0.12,
            transport_clearance: 0.14,
            pre_place: Pose::from_translation(Vec3::new(0.0, 0.0, 0.13)),
            place: Pose::from_translation(Vec3::new(0.0, 0.0, 0.02)),
            yaw_symmetry: 4,
            retreat_height: 0.1,
            plan,
        },
    }
}

/// Needle threaded through a hole on a holder ("tripod").
pub fn threading() -> TaskSpec {
    let hole = Vec3::new(0.0, 0.0, 0.16);
    let mut objects = BTreeMap::new();
    objects.insert(
        "needle".to_string(),
        object(
            Pose::from_translation(Vec3::new(-0.22, 0.0, 0.01)),
            SdfPrimitive::Capsule {
                a: Vec3::new(-0.05, 0.0, 0.0),
                b: Vec3::new(0.06, 0.0, 0.0),
                radius: 0.008,
            },
            Some(Vec3::new(-0.03, 0.0, 0.0)),
        ),
    );
    objects.insert(
        "tripod".to_string(),
        object(
            Pose::from_translation(Vec3::new(0.24, 0.0, 0.0)),
            SdfPrimitive::Capsule {
                a: Vec3::zeros(),
                b: hole,
                radius: 0.02,
            },
            None,
        ),
    );
    let nominal = SceneDescription {
        objects,
        obstacles: vec![obstacle()],
        workspace: workspace(),
        variant: Variant::D0,
    };
    let variants = vec![
        variant(
            Variant::D0,
            [
                ("needle", ov(region(-0.22, 0.0, 0.01, 0.02), FRAC_PI_8, false)),
                ("tripod", ov(region(0.24, 0.0, 0.0, 0.0), 0.0, true)),
            ],
        ),
        variant(
            Variant::D1,
            [
                ("needle", ov(region(-0.22, 0.0, 0.01, 0.1), FRAC_PI_4, false)),
                ("tripod", ov(region(0.24, 0.0, 0.0, 0.08), FRAC_PI_4, false)),
            ],
        ),
        // sides swapped; the tripod turns around so the hole faces the needle
        variant(
            Variant::D2,
            [
                ("needle", ov(region(0.22, 0.0, 0.01, 0.08), FRAC_PI_4, false)),
                (
                    "tripod",
                    ObjectVariant {
                        region: region(-0.24, 0.0, 0.0, 0.08),
                        yaw_range: [PI - FRAC_PI_4, PI + FRAC_PI_4],
                        fixed: false,
                    },
                ),
            ],
        ),
    ];
    let plan = ConstraintPlan {
        num_stages: 2,
        atoms: vec![
            offset_atom(0, AtomRole::Subgoal, 0, 1, Vec3::new(0.0, 0.0, 0.08), 0.02),
            ConstraintAtom {
                stage: 1,
                role: AtomRole::Path,
                kind: AtomKind::GraspMaintained { keypoint: 1 },
            },
            offset_atom(1, AtomRole::Subgoal, 2, 4, Vec3::zeros(), 0.02),
        ],
        grasp_keypoints: vec![1, -1],
        release_keypoints: vec![-1, 1],
    };
    TaskSpec {
        name: "threading".into(),
        description: "pick up the needle and thread its tip through the hole of the tripod".into(),
        nominal,
        variants,
        subtasks: vec![
            SubtaskSpec {
                target: "needle".into(),
                grasp: None,
            },
            SubtaskSpec {
                target: "tripod".into(),
                grasp: Some("needle".into()),
            },
        ],
        keypoints: vec![
            KeypointAnchor {
                name: "needle handle".into(),
                object: "needle".into(),
                local: Vec3::new(-0.03, 0.0, 0.0),
            },
            KeypointAnchor {
                name: "needle tip".into(),
                object: "needle".into(),
                local: Vec3::new(0.06, 0.0, 0.0),
            },
            KeypointAnchor {
                name: "tripod hole".into(),
                object: "tripod".into(),
                local: hole,
            },
            KeypointAnchor {
                name: "hole entry".into(),
                object: "tripod".into(),
                local: hole - Vec3::new(0.05, 0.0, 0.0),
            },
        ],
        success: SuccessPredicate::Threading {
            needle: "needle".into(),
            tip_local: Vec3::new(0.06, 0.0, 0.0),
            axis_local: Vec3::x(),
            holder: "tripod".into(),
            hole_local: hole,
            hole_axis_local: Vec3::x(),
            radius: 0.015,
            max_angle: 0.2,
        },
        home: Pose::new(down(), Vec3::new(-0.2, 0.0, 0.3)),
        arm_base: Vec3::new(-0.5, 0.0, 0.0),
        fps: 10.0,
        expert: ExpertSpec {
            pregrasp_height: 0.08,
            lift_height: 0.1,
            transport_clearance: 0.12,
            // tip 5 cm short of the hole, then 1 cm through
            pre_place: Pose::from_translation(hole - Vec3::new(0.11, 0.0, 0.0)),
            place: Pose::from_translation(hole - Vec3::new(0.05, 0.0, 0.0)),
            yaw_symmetry: 1,
            retreat_height: 0.1,
            plan,
        },
    }
}

pub fn builtin(name: &str) -> Result<TaskSpec, SimError> {
    match name {
        "square" => Ok(square()),
        "threading" => Ok(threading()),
        other => Err(SimError::UnknownTask(other.to_string())),
    }
}

impl TaskSpec {
    pub fn variant_spec(&self, v: Variant) -> Option<&VariantSpec> {
        self.variants.iter().find(|s| s.variant == v)
    }

    pub fn chain(&self) -> KinematicChain {
        desk_arm(self.arm_base)
    }

    fn missing(&self, object: &str) -> SimError {
        SimError::MissingObject {
            task: self.name.clone(),
            object: object.to_string(),
        }
    }

    /// Checks that every object the task refers to exists in `scene`.
    pub fn check_scene(&self, scene: &SceneDescription) -> Result<(), SimError> {
        let mut refs: Vec<&str> = Vec::new();
        for s in &self.subtasks {
            refs.push(&s.target);
            refs.extend(s.grasp.as_deref());
        }
        refs.extend(self.keypoints.iter().map(|k| k.object.as_str()));
        match &self.success {
            SuccessPredicate::RingOnPeg { ring, peg, .. } => refs.extend([ring.as_str(), peg.as_str()]),
            SuccessPredicate::Threading { needle, holder, .. } => refs.extend([needle.as_str(), holder.as_str()]),
        }
        match refs.into_iter().find(|r| !scene.objects.contains_key(*r)) {
            Some(r) => Err(self.missing(r)),
            None => Ok(()),
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let invalid = |message: String| SimError::Invalid {
            task: self.name.clone(),
            message,
        };
        self.nominal.validate().map_err(invalid)?;
        self.check_scene(&self.nominal)?;
        if self.subtasks.is_empty() {
            return Err(invalid("at least one subtask is required".into()));
        }
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return Err(invalid(format!("fps must be positive, got {}", self.fps)));
        }
        for v in &self.variants {
            for (id, o) in &v.objects {
                if !self.nominal.workspace.contains_box(&o.region) {
                    return Err(invalid(format!("{} region of '{id}' leaves the workspace", v.variant)));
                }
            }
        }
        Ok(())
    }

    /// Keypoints for `scene`: id 0 is the end-effector (placed at home), then
    /// the anchors in order.
    pub fn keypoints_in(&self, scene: &SceneDescription) -> Result<Vec<Keypoint>, SimError> {
        let mut out = vec![Keypoint {
            id: 0,
            position: *self.home.translation(),
        }];
        for (i, a) in self.keypoints.iter().enumerate() {
            let pose = scene.object_pose(&a.object).ok_or_else(|| self.missing(&a.object))?;
            out.push(Keypoint {
                id: i + 1,
                position: pose.transform_point(&a.local),
            });
        }
        Ok(out)
    }

    /// Subtask boundaries for a trajectory whose data-dependent runs are
    /// `d_runs` (one per subtask): each subtask ends where its run ends, the
    /// last one at `len`.
    pub fn boundaries(&self, d_runs: &[(usize, usize)], len: usize) -> Result<Vec<SegmentBoundary>, SimError> {
        if d_runs.len() != self.subtasks.len() {
            return Err(SimError::Invalid {
                task: self.name.clone(),
                message: format!(
                    "{} data-dependent intervals for {} subtasks",
                    d_runs.len(),
                    self.subtasks.len()
                ),
            });
        }
        Ok(self
            .subtasks
            .iter()
            .zip(d_runs)
            .enumerate()
            .map(|(i, (s, &(_, end)))| SegmentBoundary {
                end_index: if i + 1 == self.subtasks.len() { len } else { end },
                target_object: s.target.clone(),
                grasp_object: s.grasp.clone(),
            })
            .collect())
    }

    /// Seconds at which the scripted expert's data-dependent phases run.
    pub fn expert_intervals(&self) -> Vec<Interval> {
        let t = |i: usize| i as f64 / self.fps;
        vec![
            Interval {
                start: t(APPROACH_END),
                end: t(GRASP_END),
            },
            Interval {
                start: t(TRANSPORT_END),
                end: t(EXPERT_LEN),
            },
        ]
    }
}

fn raise(p: &Pose, dz: f64) -> Pose {
    Pose::new(*p.rotation(), p.translation() + Vec3::new(0.0, 0.0, dz))
}

fn yaw_of(p: &Pose) -> f64 {
    let x = p.rotation() * Vec3::x();
    x.y.atan2(x.x)
}

fn wrap(a: f64) -> f64 {
    (a + PI).rem_euclid(2.0 * PI) - PI
}

/// Scripted pick-and-place demonstration in `scene`. Poses are unlabeled
/// (all `R`) and unsegmented; labeling comes from video analysis.
pub fn expert_demo(task: &TaskSpec, scene: &SceneDescription, id: &str) -> Result<Demonstration, SimError> {
    task.check_scene(scene)?;
    let (held_id, target_id) = match task.subtasks.as_slice() {
        [
            SubtaskSpec { target: a, grasp: None },
            SubtaskSpec {
                target: b,
                grasp: Some(g),
            },
        ] if a == g => (a.clone(), b.clone()),
        _ => {
            return Err(SimError::Invalid {
                task: task.name.clone(),
                message: "the scripted expert handles a grasp subtask followed by a place subtask".into(),
            })
        }
    };
    let e = &task.expert;
    let held = &scene.objects[&held_id];
    let target = scene.objects[&target_id].pose;
    let gp = held.grasp_point.ok_or_else(|| SimError::Invalid {
        task: task.name.clone(),
        message: format!("object '{held_id}' has no grasp point"),
    })?;
    let offset = Pose::new(down(), gp);
    let ee_grasp = held.pose.compose(&offset);
    let pregrasp = raise(&ee_grasp, e.pregrasp_height);
    let lifted = raise(&ee_grasp, e.lift_height);

    // pick the symmetric placement closest to the held object's current yaw
    let sym = e.yaw_symmetry.max(1);
    let base_yaw = yaw_of(&target.compose(&e.pre_place));
    let cur = yaw_of(&held.pose);
    let k = (0..sym)
        .map(|k| k as f64 * 2.0 * PI / sym as f64)
        .min_by(|a, b| {
            wrap(base_yaw + a - cur)
                .abs()
                .total_cmp(&wrap(base_yaw + b - cur).abs())
        })
        .unwrap_or(0.0);
    let spin = Pose::from_yaw(k, Vec3::zeros());
    let ee_pre = target.compose(&e.pre_place).compose(&spin).compose(&offset);
    let ee_place = target.compose(&e.place).compose(&spin).compose(&offset);

    let mut poses = Vec::with_capacity(EXPERT_LEN);
    let mut push = |pose: Pose, gripper: f64| {
        poses.push(LabeledPose {
            pose,
            gripper,
            label: PoseLabel::R,
        })
    };
    for k in 0..APPROACH_END {
        push(lerp_unchecked(&task.home, &pregrasp, k as f64 / APPROACH_END as f64), 0.0);
    }
    let descend = (GRASP_STEP - APPROACH_END) as f64;
    for k in APPROACH_END..GRASP_STEP {
        push(lerp_unchecked(&pregrasp, &ee_grasp, (k - APPROACH_END) as f64 / descend), 0.0);
    }
    push(ee_grasp, 1.0);
    let rise = (GRASP_END - 1 - GRASP_STEP) as f64;
    for k in GRASP_STEP + 1..GRASP_END {
        push(lerp_unchecked(&ee_grasp, &lifted, (k - GRASP_STEP) as f64 / rise), 1.0);
    }
    let span = (TRANSPORT_END - GRASP_END + 1) as f64;
    for k in GRASP_END..TRANSPORT_END {
        let s = (k - GRASP_END + 1) as f64 / span;
        let p = lerp_unchecked(&lifted, &ee_pre, s);
        push(raise(&p, e.transport_clearance * (PI * s).sin()), 1.0);
    }
    let lower = (PLACE_STEP - 1 - TRANSPORT_END) as f64;
    for k in TRANSPORT_END..PLACE_STEP {
        push(lerp_unchecked(&ee_pre, &ee_place, (k - TRANSPORT_END) as f64 / lower), 1.0);
    }
    push(ee_place, 0.0);
    let up = (EXPERT_LEN - 1 - PLACE_STEP) as f64;
    for k in PLACE_STEP + 1..EXPERT_LEN {
        push(raise(&ee_place, e.retreat_height * (k - PLACE_STEP) as f64 / up), 0.0);
    }

    let mut grasp_offsets = BTreeMap::new();
    grasp_offsets.insert(held_id, offset);
    Ok(Demonstration {
        id: id.to_string(),
        source_id: id.to_string(),
        poses,
        segments: Vec::new(),
        scene: scene.clone(),
        grasp_offsets,
    })
}

fn angle_between(a: &Vec3, b: &Vec3) -> f64 {
    a.cross(b).norm().atan2(a.dot(b))
}

/// Task predicate at the final step of `trace`. Any collision event fails.
pub fn check_success(trace: &ExecutionTrace, task: &TaskSpec) -> Result<bool, SimError> {
    let Some(last) = trace.final_step() else {
        return Ok(false);
    };
    let pose = |id: &str| last.objects.get(id).copied().ok_or_else(|| task.missing(id));
    if trace.has_collision() {
        return Ok(false);
    }
    match &task.success {
        SuccessPredicate::RingOnPeg {
            ring,
            peg,
            radius_xy,
            max_height,
        } => {
            let r = pose(ring)?;
            let p = pose(peg)?;
            let local = p.inverse().transform_point(r.translation());
            Ok(trace.was_attached(ring)
                && last.attached.as_deref() != Some(ring.as_str())
                && local.xy().norm() <= *radius_xy
                && local.z >= 0.0
                && local.z <= *max_height)
        }
        SuccessPredicate::Threading {
            needle,
            tip_local,
            axis_local,
            holder,
            hole_local,
            hole_axis_local,
            radius,
            max_angle,
        } => {
            let n = pose(needle)?;
            let h = pose(holder)?;
            let tip = n.transform_point(tip_local);
            let hole = h.transform_point(hole_local);
            let axis = n.rotation() * axis_local;
            let hole_axis = h.rotation() * hole_axis_local;
            Ok(trace.was_attached(needle)
                && (tip - hole).norm() <= *radius
                && angle_between(&axis, &hole_axis) <= *max_angle)
        }
    }
}
