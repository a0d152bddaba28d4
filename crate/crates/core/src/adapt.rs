//! Object-centric pose adaptation.
//!
//! A source pose recorded relative to some target object is carried over to a
//! scene where that object sits elsewhere, keeping the grasped object's pose
//! relative to the target unchanged:
//!
//! ```text
//! T_W^G = T_W^O * inv(T_W'^O') * T_W'^G'
//! T_W^E = T_W^G * T_G^E
//! ```

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::demos::{Demonstration, LabeledPose};
use crate::geometry::Pose;
use crate::selection::GraspCandidate;
use crate::simenv::SceneDescription;

#[derive(Debug, Error, PartialEq)]
pub enum AdaptError {
    #[error("demonstration '{demo}' has no grasp offset for object '{object}'")]
    MissingGraspOffset { demo: String, object: String },
    #[error("object '{0}' is missing from the scene")]
    MissingObject(String),
    #[error("segment {index} does not exist in demonstration '{demo}'")]
    MissingSegment { demo: String, index: usize },
    #[error("candidate refers to '{candidate}' but demonstration '{demo}' was given")]
    WrongDemo { candidate: String, demo: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptationContext {
    pub src_target_world: Pose,
    pub src_grasp_world: Pose,
    pub new_target_world: Pose,
    /// End-effector pose in the grasped object's frame.
    pub grasp_offset: Pose,
}

impl AdaptationContext {
    /// Context for one source pose: the grasped object's source pose is
    /// recovered from `src_ee` and `src_offset`; `new_offset` is the grasp
    /// held in the new scene.
    pub fn for_pose(src_target: Pose, new_target: Pose, src_ee: &Pose, src_offset: &Pose, new_offset: Pose) -> Self {
        AdaptationContext {
            src_target_world: src_target,
            src_grasp_world: src_ee.compose(&src_offset.inverse()),
            new_target_world: new_target,
            grasp_offset: new_offset,
        }
    }
}

pub fn transform_grasp(ctx: &AdaptationContext) -> Pose {
    ctx.new_target_world
        .compose(&ctx.src_target_world.inverse())
        .compose(&ctx.src_grasp_world)
}

pub fn transform_endeffector(ctx: &AdaptationContext) -> Pose {
    transform_grasp(ctx).compose(&ctx.grasp_offset)
}

/// How one segment maps into the new scene.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentPolicy {
    pub src_target: Pose,
    pub new_target: Pose,
    /// Grasp offset the source poses were recorded with.
    pub src_offset: Pose,
    /// Grasp offset held in the new scene; equal to `src_offset` unless the
    /// grasp came from a different demonstration.
    pub new_offset: Pose,
}

impl SegmentPolicy {
    pub fn rigid(src_target: Pose, new_target: Pose) -> Self {
        SegmentPolicy {
            src_target,
            new_target,
            src_offset: Pose::identity(),
            new_offset: Pose::identity(),
        }
    }

    pub fn apply(&self, src_ee: &Pose) -> Pose {
        let ctx = AdaptationContext::for_pose(self.src_target, self.new_target, src_ee, &self.src_offset, self.new_offset);
        transform_endeffector(&ctx)
    }
}

/// Transforms every pose of a segment; gripper commands and labels are kept.
pub fn adapt_segment(poses: &[LabeledPose], policy: &SegmentPolicy) -> Vec<LabeledPose> {
    poses
        .iter()
        .map(|lp| LabeledPose {
            pose: policy.apply(&lp.pose),
            ..*lp
        })
        .collect()
}

/// Builds the policy that carries segment `index` of `src` into `new_scene`.
/// `held_offset` overrides the grasp offset when the grasp in the new scene
/// was made by a segment from another demonstration.
pub fn segment_policy(
    src: &Demonstration,
    index: usize,
    new_scene: &SceneDescription,
    held_offset: Option<Pose>,
) -> Result<SegmentPolicy, AdaptError> {
    let seg = src.segments.get(index).ok_or_else(|| AdaptError::MissingSegment {
        demo: src.id.clone(),
        index,
    })?;
    let src_target = *src
        .scene
        .object_pose(&seg.target_object)
        .ok_or_else(|| AdaptError::MissingObject(seg.target_object.clone()))?;
    let new_target = *new_scene
        .object_pose(&seg.target_object)
        .ok_or_else(|| AdaptError::MissingObject(seg.target_object.clone()))?;
    let src_offset = match &seg.grasp_object {
        Some(g) => *src.grasp_offsets.get(g).ok_or_else(|| AdaptError::MissingGraspOffset {
            demo: src.id.clone(),
            object: g.clone(),
        })?,
        None => Pose::identity(),
    };
    let new_offset = match &seg.grasp_object {
        Some(_) => held_offset.unwrap_or(src_offset),
        None => Pose::identity(),
    };
    Ok(SegmentPolicy {
        src_target,
        new_target,
        src_offset,
        new_offset,
    })
}

/// Adapts a whole demonstration to `new_scene`, segment by segment, ignoring
/// pose labels for the transformation (they are preserved in the output).
pub fn adapt_demo_stage2(
    demo: &Demonstration,
    new_scene: &SceneDescription,
    selected: &GraspCandidate,
) -> Result<Demonstration, AdaptError> {
    if selected.source_demo_id != demo.id {
        return Err(AdaptError::WrongDemo {
            candidate: selected.source_demo_id.clone(),
            demo: demo.id.clone(),
        });
    }
    let mut poses = Vec::with_capacity(demo.poses.len());
    for (i, seg) in demo.segments.iter().enumerate() {
        let policy = segment_policy(demo, i, new_scene, None)?;
        poses.extend(adapt_segment(&demo.poses[seg.start..seg.end], &policy));
    }
    Ok(Demonstration {
        id: demo.id.clone(),
        source_id: selected.source_demo_id.clone(),
        poses,
        segments: demo.segments.clone(),
        scene: new_scene.clone(),
        grasp_offsets: demo.grasp_offsets.clone(),
    })
}
