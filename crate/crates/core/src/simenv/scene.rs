use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Pose, Vec3};
use crate::planner::sdf::{Aabb, SdfEnvironment, SdfPrimitive};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Variant {
    D0,
    D1,
    D2,
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "D0" | "d0" => Ok(Variant::D0),
            "D1" | "d1" => Ok(Variant::D1),
            "D2" | "d2" => Ok(Variant::D2),
            other => Err(format!("unknown variant '{other}' (expected D0, D1 or D2)")),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub pose: Pose,
    /// Shape in the object frame.
    pub shape: SdfPrimitive,
    /// Where the gripper closes on the object, in the object frame.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grasp_point: Option<Vec3>,
}

impl SceneObject {
    pub fn world_shape(&self) -> SdfPrimitive {
        self.shape.transformed(&self.pose)
    }

    pub fn world_grasp_point(&self) -> Option<Vec3> {
        self.grasp_point.map(|g| self.pose.transform_point(&g))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneDescription {
    pub objects: BTreeMap<String, SceneObject>,
    /// Static obstacles in the world frame.
    #[serde(default)]
    pub obstacles: Vec<SdfPrimitive>,
    pub workspace: Aabb,
    pub variant: Variant,
}

impl SceneDescription {
    pub fn object_pose(&self, id: &str) -> Option<&Pose> {
        self.objects.get(id).map(|o| &o.pose)
    }

    pub fn environment(&self) -> SdfEnvironment {
        SdfEnvironment::new(self.obstacles.clone(), self.workspace)
    }

    pub fn validate(&self) -> Result<(), String> {
        if !self.workspace.is_valid() {
            return Err("workspace bounds are invalid".into());
        }
        for (id, o) in &self.objects {
            if !o.shape.is_valid() || !o.pose.is_finite() {
                return Err(format!("object '{id}' has an invalid shape or pose"));
            }
            if !self.workspace.contains(o.pose.translation()) {
                return Err(format!("object '{id}' lies outside the workspace"));
            }
        }
        if let Some(i) = self.obstacles.iter().position(|p| !p.is_valid()) {
            return Err(format!("obstacle {i} is invalid"));
        }
        Ok(())
    }
}

/// Sampling rule for one object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectVariant {
    /// Region the object origin is drawn from (uniform per axis).
    pub region: Aabb,
    /// `[lo, hi]` yaw about world z, radians, applied on top of the nominal rotation.
    pub yaw_range: [f64; 2],
    #[serde(default)]
    pub fixed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSpec {
    pub variant: Variant,
    pub objects: BTreeMap<String, ObjectVariant>,
}

#[derive(Debug, Error, PartialEq)]
pub enum SamplingError {
    #[error("no penetration-free placement after {0} attempts (region over-dense)")]
    Exhausted(usize),
    #[error("variant spec does not cover object '{0}'")]
    MissingObject(String),
    #[error("region for object '{0}' is not inside the workspace")]
    RegionOutsideWorkspace(String),
}

pub const MAX_SAMPLING_ATTEMPTS: usize = 100;

fn overlaps(a: &SdfPrimitive, b: &SdfPrimitive) -> bool {
    a.distance(&b.center()) < b.bounding_radius() || b.distance(&a.center()) < a.bounding_radius()
}

/// Draws a scene from `spec`, starting from the nominal object set in `nominal`.
pub fn sample_scene<R: Rng + ?Sized>(
    nominal: &SceneDescription,
    spec: &VariantSpec,
    rng: &mut R,
) -> Result<SceneDescription, SamplingError> {
    for id in nominal.objects.keys() {
        let ov = spec
            .objects
            .get(id)
            .ok_or_else(|| SamplingError::MissingObject(id.clone()))?;
        if !nominal.workspace.contains_box(&ov.region) {
            return Err(SamplingError::RegionOutsideWorkspace(id.clone()));
        }
    }
    for _ in 0..MAX_SAMPLING_ATTEMPTS {
        let mut scene = nominal.clone();
        scene.variant = spec.variant;
        for (id, obj) in scene.objects.iter_mut() {
            let ov = &spec.objects[id];
            if ov.fixed {
                continue;
            }
            let mut t = Vec3::zeros();
            for i in 0..3 {
                let (lo, hi) = (ov.region.min[i], ov.region.max[i]);
                t[i] = if hi > lo { rng.random_range(lo..=hi) } else { lo };
            }
            let [ylo, yhi] = ov.yaw_range;
            let yaw = if yhi > ylo { rng.random_range(ylo..=yhi) } else { ylo };
            let nominal_rot = *obj.pose.rotation();
            obj.pose = Pose::from_yaw(yaw, t).compose(&Pose::from_rotation(nominal_rot));
        }
        let shapes: Vec<SdfPrimitive> = scene.objects.values().map(SceneObject::world_shape).collect();
        let clash = shapes.iter().enumerate().any(|(i, a)| {
            shapes[i + 1..].iter().any(|b| overlaps(a, b)) || scene.obstacles.iter().any(|o| overlaps(a, o))
        });
        if !clash {
            return Ok(scene);
        }
    }
    Err(SamplingError::Exhausted(MAX_SAMPLING_ATTEMPTS))
}
