//! Kinematic playback of end-effector trajectories.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::SceneDescription;
use crate::constraints::{GRASP_EPSILON, GRIPPER_CLOSED};
use crate::demos::LabeledPose;
use crate::geometry::{lerp_unchecked, Pose, Vec3};
use crate::planner::SWEEP_SUBSTEPS;

/// What collided with a static obstacle.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Collider {
    EndEffector,
    Object(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TraceEvent {
    Attach { step: usize, object: String },
    Detach { step: usize, object: String },
    Collision { step: usize, collider: Collider, obstacle: usize, depth: f64 },
}

impl TraceEvent {
    pub fn step(&self) -> usize {
        match self {
            TraceEvent::Attach { step, .. } | TraceEvent::Detach { step, .. } | TraceEvent::Collision { step, .. } => {
                *step
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub ee: Pose,
    pub gripper: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attached: Option<String>,
    pub objects: BTreeMap<String, Pose>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionTrace {
    pub steps: Vec<TraceStep>,
    pub events: Vec<TraceEvent>,
    /// Filled in by [`super::check_success`]-aware callers; `None` until checked.
    #[serde(default)]
    pub success: Option<bool>,
}

impl ExecutionTrace {
    pub fn collisions(&self) -> impl Iterator<Item = &TraceEvent> {
        self.events.iter().filter(|e| matches!(e, TraceEvent::Collision { .. }))
    }

    pub fn has_collision(&self) -> bool {
        self.collisions().next().is_some()
    }

    pub fn was_attached(&self, object: &str) -> bool {
        self.events
            .iter()
            .any(|e| matches!(e, TraceEvent::Attach { object: o, .. } if o == object))
    }

    pub fn final_step(&self) -> Option<&TraceStep> {
        self.steps.last()
    }
}

/// Deepest penetration of `p` into any static obstacle, if any.
fn penetration(scene: &SceneDescription, p: &Vec3) -> Option<(usize, f64)> {
    scene
        .obstacles
        .iter()
        .enumerate()
        .map(|(i, o)| (i, o.distance(p)))
        .filter(|(_, d)| *d < 0.0)
        .min_by(|a, b| a.1.total_cmp(&b.1))
}

/// Plays `traj` back in `scene`. Closing the gripper (crossing 0.5 upwards)
/// within [`GRASP_EPSILON`] of an object's grasp point attaches that object;
/// opening it detaches. Between consecutive steps the motion is sub-sampled
/// and the end-effector point and the attached object's center are checked
/// against the static obstacles; each step records at most one collision per
/// collider.
pub fn execute(traj: &[LabeledPose], scene: &SceneDescription) -> ExecutionTrace {
    let mut objects: BTreeMap<String, Pose> = scene.objects.iter().map(|(k, o)| (k.clone(), o.pose)).collect();
    let mut attached: Option<(String, Pose)> = None;
    let mut steps = Vec::with_capacity(traj.len());
    let mut events = Vec::new();
    let mut prev: Option<&LabeledPose> = None;

    for (t, lp) in traj.iter().enumerate() {
        // motion from the previous step with the previous grasp state
        let mut hit_ee = None;
        let mut hit_obj = None;
        let subs = if prev.is_some() { SWEEP_SUBSTEPS } else { 0 };
        for k in 1..=subs.max(1) {
            let ee = match prev {
                Some(p) if k < subs => lerp_unchecked(&p.pose, &lp.pose, k as f64 / subs as f64),
                _ => lp.pose,
            };
            if hit_ee.is_none() {
                hit_ee = penetration(scene, ee.translation());
            }
            if let Some((id, rel)) = &attached {
                if hit_obj.is_none() {
                    let pose = ee.compose(&rel.inverse());
                    let center = scene.objects[id].shape.transformed(&pose).center();
                    hit_obj = penetration(scene, &center).map(|h| (id.clone(), h));
                }
            }
        }
        if let Some((obstacle, depth)) = hit_ee {
            events.push(TraceEvent::Collision {
                step: t,
                collider: Collider::EndEffector,
                obstacle,
                depth: -depth,
            });
        }
        if let Some((id, (obstacle, depth))) = hit_obj {
            events.push(TraceEvent::Collision {
                step: t,
                collider: Collider::Object(id),
                obstacle,
                depth: -depth,
            });
        }

        let was_closed = prev.is_some_and(|p| p.gripper >= GRIPPER_CLOSED);
        let closed = lp.gripper >= GRIPPER_CLOSED;
        if closed && !was_closed && attached.is_none() {
            let ee = lp.pose.translation();
            let nearest = scene
                .objects
                .iter()
                .filter_map(|(id, o)| {
                    let g = objects[id].transform_point(o.grasp_point.as_ref()?);
                    Some((id, (g - ee).norm()))
                })
                .filter(|(_, d)| *d <= GRASP_EPSILON)
                .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(b.0)));
            if let Some((id, _)) = nearest {
                let rel = objects[id].inverse().compose(&lp.pose);
                attached = Some((id.clone(), rel));
                events.push(TraceEvent::Attach {
                    step: t,
                    object: id.clone(),
                });
            }
        } else if !closed && was_closed {
            if let Some((id, _)) = attached.take() {
                events.push(TraceEvent::Detach { step: t, object: id });
            }
        }
        if let Some((id, rel)) = &attached {
            objects.insert(id.clone(), lp.pose.compose(&rel.inverse()));
        }
        steps.push(TraceStep {
            ee: lp.pose,
            gripper: lp.gripper,
            attached: attached.as_ref().map(|(id, _)| id.clone()),
            objects: objects.clone(),
        });
        prev = Some(lp);
    }
    ExecutionTrace {
        steps,
        events,
        success: None,
    }
}
