//! Rigid-body pose algebra.
//!
//! A [`Pose`] is an element of SE(3) stored as a unit quaternion plus a
//! translation in meters. The stored quaternion is always renormalized and
//! canonicalized to `w >= 0`, so two poses describing the same transform
//! serialize identically.
//!
//! Composition follows the homogeneous-matrix convention: `a.compose(&b)`
//! is the matrix product `A * B`, i.e. `b` is applied first.

use std::fmt;

use nalgebra::{Quaternion, Unit, UnitQuaternion, Vector3};
use serde::de::{self, SeqAccess, Visitor};
use serde::ser::SerializeTuple;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("interpolation parameter {0} outside [0, 1]")]
    Domain(f64),
    #[error("invalid distance weights: {0}")]
    Weights(String),
    #[error("non-finite pose component")]
    NonFinite,
}

#[derive(Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: UnitQuaternion<f64>,
    translation: Vec3,
}

fn canonical(q: Quaternion<f64>) -> UnitQuaternion<f64> {
    // already-unit input is kept bit-exact so serialization round-trips
    let q = if (q.norm_squared() - 1.0).abs() <= 4.0 * f64::EPSILON {
        UnitQuaternion::new_unchecked(q)
    } else {
        UnitQuaternion::from_quaternion(q)
    };
    if q.w < 0.0 {
        UnitQuaternion::new_unchecked(-q.into_inner())
    } else {
        q
    }
}

impl Pose {
    pub const IDENTITY: Pose = Pose {
        rotation: UnitQuaternion::new_unchecked(Quaternion::new(1.0, 0.0, 0.0, 0.0)),
        translation: Vector3::new(0.0, 0.0, 0.0),
    };

    pub fn identity() -> Self {
        Self::IDENTITY
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vec3) -> Self {
        Pose {
            rotation: canonical(rotation.into_inner()),
            translation,
        }
    }

    /// Builds a pose from raw `[qw, qx, qy, qz]`; the quaternion is normalized.
    pub fn from_wxyz(q: [f64; 4], t: [f64; 3]) -> Self {
        Pose {
            rotation: canonical(Quaternion::new(q[0], q[1], q[2], q[3])),
            translation: Vector3::new(t[0], t[1], t[2]),
        }
    }

    pub fn from_translation(t: Vec3) -> Self {
        Pose {
            rotation: UnitQuaternion::identity(),
            translation: t,
        }
    }

    pub fn from_rotation(rotation: UnitQuaternion<f64>) -> Self {
        Self::new(rotation, Vec3::zeros())
    }

    /// Rotation about the world z axis followed by a translation.
    pub fn from_yaw(yaw: f64, t: Vec3) -> Self {
        Self::new(UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw), t)
    }

    pub fn rotation(&self) -> &UnitQuaternion<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    /// `[qw, qx, qy, qz, tx, ty, tz]`
    pub fn to_array(&self) -> [f64; 7] {
        let q = self.rotation.quaternion();
        let t = &self.translation;
        [q.w, q.i, q.j, q.k, t.x, t.y, t.z]
    }

    pub fn from_array(a: [f64; 7]) -> Result<Self, GeometryError> {
        if a.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        let n = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2] + a[3] * a[3]).sqrt();
        if n == 0.0 {
            return Err(GeometryError::NonFinite);
        }
        Ok(Self::from_wxyz([a[0], a[1], a[2], a[3]], [a[4], a[5], a[6]]))
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: canonical((self.rotation * other.rotation).into_inner()),
            translation: self.translation + self.rotation * other.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let inv = self.rotation.inverse();
        Pose {
            rotation: canonical(inv.into_inner()),
            translation: -(inv * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// Applies a world-frame increment: translation `dt` is added, rotation
    /// `dr` (axis * angle) is pre-multiplied.
    pub fn perturbed(&self, dt: &Vec3, dr: &Vec3) -> Pose {
        let rot = UnitQuaternion::from_scaled_axis(*dr) * self.rotation;
        Pose {
            rotation: canonical(rot.into_inner()),
            translation: self.translation + dt,
        }
    }
}

impl Default for Pose {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl fmt::Debug for Pose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let a = self.to_array();
        write!(
            f,
            "Pose(q=[{:.6}, {:.6}, {:.6}, {:.6}], t=[{:.6}, {:.6}, {:.6}])",
            a[0], a[1], a[2], a[3], a[4], a[5], a[6]
        )
    }
}

impl Serialize for Pose {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut tup = serializer.serialize_tuple(7)?;
        for v in self.to_array() {
            tup.serialize_element(&v)?;
        }
        tup.end()
    }
}

impl<'de> Deserialize<'de> for Pose {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct PoseVisitor;

        impl<'de> Visitor<'de> for PoseVisitor {
            type Value = Pose;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("an array [qw, qx, qy, qz, tx, ty, tz]")
            }

            fn visit_seq<A: SeqAccess<'de>>(self, mut seq: A) -> Result<Pose, A::Error> {
                let mut a = [0.0; 7];
                for (i, slot) in a.iter_mut().enumerate() {
                    *slot = seq
                        .next_element()?
                        .ok_or_else(|| de::Error::invalid_length(i, &self))?;
                }
                if seq.next_element::<de::IgnoredAny>()?.is_some() {
                    return Err(de::Error::invalid_length(8, &self));
                }
                Pose::from_array(a).map_err(de::Error::custom)
            }
        }

        deserializer.deserialize_tuple(7, PoseVisitor)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceWeights {
    /// 1/m
    pub w_translation: f64,
    /// 1/rad
    pub w_rotation: f64,
}

impl DistanceWeights {
    pub fn new(w_translation: f64, w_rotation: f64) -> Result<Self, GeometryError> {
        let w = DistanceWeights {
            w_translation,
            w_rotation,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.w_translation) || !ok(self.w_rotation) {
            return Err(GeometryError::Weights("weights must be finite and >= 0".into()));
        }
        if self.w_translation == 0.0 && self.w_rotation == 0.0 {
            return Err(GeometryError::Weights("weights must not both be zero".into()));
        }
        Ok(())
    }
}

impl Default for DistanceWeights {
    fn default() -> Self {
        DistanceWeights {
            w_translation: 1.0,
            w_rotation: 0.1,
        }
    }
}

/// Angle of the relative rotation between `a` and `b`, in `[0, pi]`.
/// Insensitive to quaternion sign.
pub fn geodesic_angle(a: &UnitQuaternion<f64>, b: &UnitQuaternion<f64>) -> f64 {
    let rel = a.inverse() * b;
    let q = rel.quaternion();
    let v = q.imag().norm();
    2.0 * v.atan2(q.w.abs())
}

pub fn pose_distance(a: &Pose, b: &Pose, w: &DistanceWeights) -> f64 {
    w.w_translation * (a.translation - b.translation).norm()
        + w.w_rotation * geodesic_angle(&a.rotation, &b.rotation)
}

/// Linear blend of translations and shortest-arc slerp of rotations.
pub fn interpolate(a: &Pose, b: &Pose, t: f64) -> Result<Pose, GeometryError> {
    if !(0.0..=1.0).contains(&t) {
        return Err(GeometryError::Domain(t));
    }
    if t == 0.0 {
        return Ok(*a);
    }
    if t == 1.0 {
        return Ok(*b);
    }
    Ok(lerp_unchecked(a, b, t))
}

pub(crate) fn lerp_unchecked(a: &Pose, b: &Pose, t: f64) -> Pose {
    let mut qb = *b.rotation.quaternion();
    if a.rotation.quaternion().dot(&qb) < 0.0 {
        qb = -qb;
    }
    let qb = Unit::new_unchecked(qb);
    let rot = a
        .rotation
        .try_slerp(&qb, t, 1e-12)
        .unwrap_or_else(|| a.rotation.nlerp(&qb, t));
    Pose::new(rot, a.translation.lerp(&b.translation, t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

    fn rz(angle: f64) -> UnitQuaternion<f64> {
        UnitQuaternion::from_axis_angle(&Vector3::z_axis(), angle)
    }

    #[test]
    fn construction_canonicalizes_sign() {
        let p = Pose::from_wxyz([-1.0, 0.0, 0.0, 0.0], [0.0; 3]);
        assert_eq!(p.to_array()[0], 1.0);
        let p = Pose::from_wxyz([-2.0, 0.0, 0.0, 2.0], [0.0; 3]);
        let a = p.to_array();
        assert!(a[0] >= 0.0);
        assert!((a[0] * a[0] + a[3] * a[3] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn inverse_of_translation() {
        let t = Vec3::new(0.3, -1.0, 2.0);
        let inv = Pose::from_translation(t).inverse();
        assert_eq!(*inv.translation(), -t);
        assert_eq!(inv.to_array()[..4], [1.0, 0.0, 0.0, 0.0]);
        assert_eq!(Pose::identity().inverse(), Pose::identity());
    }

    #[test]
    fn geodesic_cases() {
        let q = UnitQuaternion::from_euler_angles(0.3, -0.2, 1.1);
        assert!(geodesic_angle(&q, &q).abs() < 1e-12);
        assert!((geodesic_angle(&UnitQuaternion::identity(), &rz(FRAC_PI_2)) - FRAC_PI_2).abs() < 1e-12);
        let neg = UnitQuaternion::new_unchecked(-q.into_inner());
        assert!(geodesic_angle(&q, &neg).abs() < 1e-12);
        assert!((geodesic_angle(&UnitQuaternion::identity(), &rz(PI)) - PI).abs() < 1e-12);
    }

    #[test]
    fn distance_translation_only() {
        let w = DistanceWeights::new(1.0, 0.0).unwrap();
        let a = Pose::identity();
        let b = Pose::from_translation(Vec3::new(0.1, 0.0, 0.0));
        assert!((pose_distance(&a, &b, &w) - 0.1).abs() < 1e-15);
        assert_eq!(pose_distance(&a, &a, &DistanceWeights::default()), 0.0);
    }

    #[test]
    fn weights_validation() {
        assert!(DistanceWeights::new(0.0, 0.0).is_err());
        assert!(DistanceWeights::new(-1.0, 1.0).is_err());
        assert!(DistanceWeights::new(0.0, 1.0).is_ok());
    }

    #[test]
    fn interpolation_endpoints_and_midpoints() {
        let a = Pose::identity();
        let b = Pose::from_translation(Vec3::new(1.0, 0.0, 0.0));
        assert_eq!(interpolate(&a, &b, 0.0).unwrap(), a);
        assert_eq!(interpolate(&a, &b, 1.0).unwrap(), b);
        let mid = interpolate(&a, &b, 0.5).unwrap();
        assert!((mid.translation().x - 0.5).abs() < 1e-15);

        let r = Pose::from_rotation(rz(FRAC_PI_2));
        let mid = interpolate(&a, &r, 0.5).unwrap();
        assert!(geodesic_angle(mid.rotation(), &rz(FRAC_PI_4)) < 1e-9);

        assert_eq!(interpolate(&a, &b, 1.5), Err(GeometryError::Domain(1.5)));
        assert!(interpolate(&a, &b, -0.1).is_err());
    }

    #[test]
    fn interpolation_takes_short_arc() {
        let a = Pose::from_rotation(rz(3.0));
        let b = Pose::from_rotation(rz(-3.0));
        let mid = interpolate(&a, &b, 0.5).unwrap();
        assert!(geodesic_angle(mid.rotation(), &rz(PI)) < 1e-9);
    }

    #[test]
    fn serde_layout_is_quaternion_first() {
        let p = Pose::from_yaw(FRAC_PI_2, Vec3::new(1.0, 2.0, 3.0));
        let s = serde_json::to_string(&p).unwrap();
        let v: Vec<f64> = serde_json::from_str(&s).unwrap();
        assert_eq!(v.len(), 7);
        assert_eq!(&v[4..], &[1.0, 2.0, 3.0]);
        let back: Pose = serde_json::from_str(&s).unwrap();
        assert_eq!(back, p);
        assert!(serde_json::from_str::<Pose>("[1,0,0,0,1,2]").is_err());
        assert!(serde_json::from_str::<Pose>("[0,0,0,0,1,2,3]").is_err());
        assert!(serde_json::from_str::<Pose>("[1,0,0,0,1,2,3,4]").is_err());
    }
}
