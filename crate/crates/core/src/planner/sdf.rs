//! Signed distance fields for the primitive obstacle shapes.

use serde::{Deserialize, Serialize};

use crate::geometry::{Pose, Vec3};

/// Axis-aligned bounds in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Self {
        Aabb { min, max }
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn contains_box(&self, other: &Aabb) -> bool {
        self.contains(&other.min) && self.contains(&other.max)
    }

    pub fn is_valid(&self) -> bool {
        (0..3).all(|i| self.min[i].is_finite() && self.max[i].is_finite() && self.min[i] <= self.max[i])
    }

    pub fn extent(&self) -> Vec3 {
        self.max - self.min
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SdfPrimitive {
    Sphere { center: Vec3, radius: f64 },
    /// `pose` places the box center and orientation.
    Box { pose: Pose, half_extents: Vec3 },
    Capsule { a: Vec3, b: Vec3, radius: f64 },
}

impl SdfPrimitive {
    pub fn distance(&self, p: &Vec3) -> f64 {
        match self {
            SdfPrimitive::Sphere { center, radius } => (p - center).norm() - radius,
            SdfPrimitive::Box { pose, half_extents } => {
                let local = pose.inverse().transform_point(p);
                let q = local.abs() - half_extents;
                let outside = q.map(|v| v.max(0.0)).norm();
                let inside = q.x.max(q.y).max(q.z).min(0.0);
                outside + inside
            }
            SdfPrimitive::Capsule { a, b, radius } => {
                let ab = b - a;
                let len2 = ab.norm_squared();
                let t = if len2 > 0.0 {
                    ((p - a).dot(&ab) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                (p - (a + ab * t)).norm() - radius
            }
        }
    }

    pub fn is_valid(&self) -> bool {
        match self {
            SdfPrimitive::Sphere { center, radius } => {
                *radius > 0.0 && radius.is_finite() && center.iter().all(|v| v.is_finite())
            }
            SdfPrimitive::Box { pose, half_extents } => {
                pose.is_finite() && half_extents.iter().all(|v| *v > 0.0 && v.is_finite())
            }
            SdfPrimitive::Capsule { a, b, radius } => {
                *radius > 0.0
                    && radius.is_finite()
                    && a.iter().chain(b.iter()).all(|v| v.is_finite())
            }
        }
    }

    pub fn center(&self) -> Vec3 {
        match self {
            SdfPrimitive::Sphere { center, .. } => *center,
            SdfPrimitive::Box { pose, .. } => *pose.translation(),
            SdfPrimitive::Capsule { a, b, .. } => (a + b) * 0.5,
        }
    }

    /// Radius of a sphere about [`Self::center`] enclosing the shape.
    pub fn bounding_radius(&self) -> f64 {
        match self {
            SdfPrimitive::Sphere { radius, .. } => *radius,
            SdfPrimitive::Box { half_extents, .. } => half_extents.norm(),
            SdfPrimitive::Capsule { a, b, radius } => (b - a).norm() * 0.5 + radius,
        }
    }

    /// The same shape expressed in the frame that `pose` maps from.
    pub fn transformed(&self, pose: &Pose) -> SdfPrimitive {
        match self {
            SdfPrimitive::Sphere { center, radius } => SdfPrimitive::Sphere {
                center: pose.transform_point(center),
                radius: *radius,
            },
            SdfPrimitive::Box { pose: local, half_extents } => SdfPrimitive::Box {
                pose: pose.compose(local),
                half_extents: *half_extents,
            },
            SdfPrimitive::Capsule { a, b, radius } => SdfPrimitive::Capsule {
                a: pose.transform_point(a),
                b: pose.transform_point(b),
                radius: *radius,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdfEnvironment {
    pub primitives: Vec<SdfPrimitive>,
    pub workspace: Aabb,
}

impl SdfEnvironment {
    pub fn new(primitives: Vec<SdfPrimitive>, workspace: Aabb) -> Self {
        SdfEnvironment {
            primitives,
            workspace,
        }
    }

    /// Minimum signed distance over all primitives; `+inf` when empty.
    pub fn sdf(&self, p: &Vec3) -> f64 {
        self.primitives
            .iter()
            .map(|s| s.distance(p))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn is_valid(&self) -> bool {
        self.workspace.is_valid() && self.primitives.iter().all(SdfPrimitive::is_valid)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sphere_center_and_shell() {
        let s = SdfPrimitive::Sphere {
            center: Vec3::new(1.0, 2.0, 3.0),
            radius: 0.5,
        };
        assert_eq!(s.distance(&Vec3::new(1.0, 2.0, 3.0)), -0.5);
        assert!((s.distance(&Vec3::new(2.0, 2.0, 3.0)) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn rotated_box() {
        let b = SdfPrimitive::Box {
            pose: Pose::from_yaw(std::f64::consts::FRAC_PI_2, Vec3::zeros()),
            half_extents: Vec3::new(1.0, 0.1, 0.1),
        };
        // long axis now along world y
        assert!((b.distance(&Vec3::new(0.0, 0.9, 0.0)) + 0.1).abs() < 1e-12);
        assert!((b.distance(&Vec3::new(0.3, 0.0, 0.0)) - 0.2).abs() < 1e-12);
        // corner region
        let d = b.distance(&Vec3::new(1.1, 1.1, 0.0));
        assert!((d - (1.0f64 + 0.01).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn capsule_segment_distance() {
        let c = SdfPrimitive::Capsule {
            a: Vec3::zeros(),
            b: Vec3::new(0.0, 0.0, 1.0),
            radius: 0.1,
        };
        assert!((c.distance(&Vec3::new(0.5, 0.0, 0.5)) - 0.4).abs() < 1e-12);
        assert!((c.distance(&Vec3::new(0.0, 0.0, -0.5)) - 0.4).abs() < 1e-12);
        assert!((c.distance(&Vec3::new(0.0, 0.0, 0.5)) + 0.1).abs() < 1e-12);
    }

    #[test]
    fn environment_takes_minimum() {
        let env = SdfEnvironment::new(
            vec![
                SdfPrimitive::Sphere { center: Vec3::zeros(), radius: 1.0 },
                SdfPrimitive::Sphere { center: Vec3::new(3.0, 0.0, 0.0), radius: 1.0 },
            ],
            Aabb::new(Vec3::repeat(-5.0), Vec3::repeat(5.0)),
        );
        assert!((env.sdf(&Vec3::new(1.5, 0.0, 0.0)) - 0.5).abs() < 1e-12);
        let empty = SdfEnvironment::new(vec![], env.workspace);
        assert_eq!(empty.sdf(&Vec3::zeros()), f64::INFINITY);
    }

    #[test]
    fn transformed_shape_follows_pose() {
        let local = SdfPrimitive::Capsule {
            a: Vec3::zeros(),
            b: Vec3::new(0.1, 0.0, 0.0),
            radius: 0.01,
        };
        let pose = Pose::from_yaw(std::f64::consts::FRAC_PI_2, Vec3::new(1.0, 0.0, 0.0));
        let world = local.transformed(&pose);
        let p = Vec3::new(1.0, 0.05, 0.0);
        assert!((world.distance(&p) + 0.01).abs() < 1e-12);
    }
}
