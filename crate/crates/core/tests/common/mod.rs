//! Helpers shared by the integration tests.
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use hybridgen::demos::{self, Dataset};
use hybridgen::geometry::{Pose, Vec3};
use proptest::prelude::*;

pub fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

/// The committed labeled source demonstrations of a built-in task.
pub fn source_fixture(task: &str) -> Dataset {
    demos::load(&root().join(format!("fixtures/{task}/source.json"))).unwrap()
}

pub fn recordings(task: &str) -> PathBuf {
    root().join(format!("fixtures/{task}/recordings"))
}

pub fn max_pose_diff(a: &Pose, b: &Pose) -> f64 {
    max_diff(&matrix(a), &matrix(b))
}

pub type M4 = [[f64; 4]; 4];

/// Homogeneous matrix from raw quaternion components, written out by hand.
pub fn matrix(p: &Pose) -> M4 {
    let [w, x, y, z, tx, ty, tz] = p.to_array();
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y), tx],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x), ty],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y), tz],
        [0.0, 0.0, 0.0, 1.0],
    ]
}

pub fn mul(a: &M4, b: &M4) -> M4 {
    let mut c = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            c[i][j] = (0..4).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

/// Rigid inverse: [R^T, -R^T t].
pub fn rigid_inv(a: &M4) -> M4 {
    let mut c = [[0.0; 4]; 4];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = a[j][i];
        }
        c[i][3] = -(0..3).map(|k| a[k][i] * a[k][3]).sum::<f64>();
    }
    c[3][3] = 1.0;
    c
}

pub fn max_diff(a: &M4, b: &M4) -> f64 {
    (0..4).flat_map(|i| (0..4).map(move |j| (a[i][j] - b[i][j]).abs())).fold(0.0, f64::max)
}

pub fn apply(a: &M4, p: &Vec3) -> Vec3 {
    Vec3::new(
        a[0][0] * p.x + a[0][1] * p.y + a[0][2] * p.z + a[0][3],
        a[1][0] * p.x + a[1][1] * p.y + a[1][2] * p.z + a[1][3],
        a[2][0] * p.x + a[2][1] * p.y + a[2][2] * p.z + a[2][3],
    )
}

pub fn pose() -> impl Strategy<Value = Pose> {
    (prop::array::uniform4(-1.0f64..1.0), prop::array::uniform3(-2.0f64..2.0))
        .prop_filter("degenerate quaternion", |(q, _)| q.iter().map(|v| v * v).sum::<f64>() > 1e-3)
        .prop_map(|(q, t)| Pose::from_wxyz(q, t))
}

pub fn point() -> impl Strategy<Value = Vec3> {
    prop::array::uniform3(-2.0f64..2.0).prop_map(|a| Vec3::new(a[0], a[1], a[2]))
}

