//! Serial revolute chains, forward kinematics and damped-least-squares IK.

use nalgebra::{Matrix3, Matrix6, UnitQuaternion, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::geometry::{Pose, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum JointType {
    #[default]
    Revolute,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Joint {
    /// Rotation axis in the joint frame.
    pub axis: Vec3,
    /// Transform from the previous joint frame (or the base) to this joint.
    pub origin: Pose,
    #[serde(default, rename = "type")]
    pub joint_type: JointType,
    /// `[lo, hi]` radians.
    pub limits: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KinematicChain {
    pub base: Pose,
    pub joints: Vec<Joint>,
    /// Flange to tool-center transform.
    #[serde(default)]
    pub tool: Pose,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IkOptions {
    pub damping: f64,
    pub max_iters: usize,
    /// Stop once the residual drops below this.
    pub tolerance: f64,
    /// Ignore orientation error (for chains with fewer than six joints).
    pub position_only: bool,
}

impl Default for IkOptions {
    fn default() -> Self {
        IkOptions {
            damping: 1e-3,
            max_iters: 100,
            tolerance: 1e-12,
            position_only: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IkSolution {
    pub config: Vec<f64>,
    /// Euclidean norm of `[position error (m); rotation error (rad)]`.
    pub residual: f64,
    pub iterations: usize,
}

impl KinematicChain {
    pub fn dof(&self) -> usize {
        self.joints.len()
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.joints.is_empty() {
            return Err("chain needs at least one joint".into());
        }
        for (i, j) in self.joints.iter().enumerate() {
            if !(j.limits[0] < j.limits[1]) {
                return Err(format!("joint {i}: limits must satisfy lo < hi"));
            }
            if (j.axis.norm() - 1.0).abs() > 1e-9 {
                return Err(format!("joint {i}: axis must be a unit vector"));
            }
        }
        Ok(())
    }

    /// Clamps to the limits; joints whose range spans a full turn wrap instead.
    pub fn clamp(&self, q: &mut [f64]) {
        use std::f64::consts::TAU;
        for (v, j) in q.iter_mut().zip(&self.joints) {
            let [lo, hi] = j.limits;
            if *v < lo || *v > hi {
                *v = if hi - lo >= TAU { lo + (*v - lo).rem_euclid(TAU) } else { v.clamp(lo, hi) };
            }
        }
    }

    pub fn fk(&self, q: &[f64]) -> Pose {
        let mut t = self.base;
        for (j, &angle) in self.joints.iter().zip(q) {
            let rot = UnitQuaternion::from_scaled_axis(j.axis * angle);
            t = t.compose(&j.origin).compose(&Pose::from_rotation(rot));
        }
        t.compose(&self.tool)
    }

    /// World-frame joint axes and origins plus the tool pose.
    fn frames(&self, q: &[f64], axes: &mut Vec<(Vec3, Vec3)>) -> Pose {
        axes.clear();
        let mut t = self.base;
        for (j, &angle) in self.joints.iter().zip(q) {
            t = t.compose(&j.origin);
            axes.push((t.rotation() * j.axis, *t.translation()));
            let rot = UnitQuaternion::from_scaled_axis(j.axis * angle);
            t = t.compose(&Pose::from_rotation(rot));
        }
        t.compose(&self.tool)
    }
}

fn pose_error(target: &Pose, current: &Pose, position_only: bool) -> Vector6<f64> {
    let dp = target.translation() - current.translation();
    let dr = if position_only {
        Vector3::zeros()
    } else {
        (target.rotation() * current.rotation().inverse()).scaled_axis()
    };
    Vector6::new(dp.x, dp.y, dp.z, dr.x, dr.y, dr.z)
}

/// Damped-least-squares IK from `seed`. Never fails: a target that cannot be
/// reached is reported through a large `residual`.
pub fn ik_solve(chain: &KinematicChain, target: &Pose, seed: &[f64], opts: &IkOptions) -> IkSolution {
    let n = chain.dof();
    let mut q: Vec<f64> = seed.iter().copied().chain(std::iter::repeat(0.0)).take(n).collect();
    chain.clamp(&mut q);
    let mut axes = Vec::with_capacity(n);
    let mut ee = chain.frames(&q, &mut axes);
    let mut err = pose_error(target, &ee, opts.position_only);
    let mut residual = err.norm();
    let base = opts.damping * opts.damping;
    let mut lambda2 = base;
    let mut iterations = 0;
    let mut trial = vec![0.0; n];

    while iterations < opts.max_iters && residual > opts.tolerance {
        iterations += 1;
        // limit the task-space step so linearization stays meaningful
        let mut e = err;
        let pn = e.fixed_rows::<3>(0).norm();
        if pn > 0.1 {
            e.fixed_rows_mut::<3>(0).scale_mut(0.1 / pn);
        }
        let rn = e.fixed_rows::<3>(3).norm();
        if rn > 0.5 {
            e.fixed_rows_mut::<3>(3).scale_mut(0.5 / rn);
        }

        let cols: Vec<Vector6<f64>> = axes
            .iter()
            .map(|(z, o)| {
                let v = z.cross(&(ee.translation() - o));
                if opts.position_only {
                    Vector6::new(v.x, v.y, v.z, 0.0, 0.0, 0.0)
                } else {
                    Vector6::new(v.x, v.y, v.z, z.x, z.y, z.z)
                }
            })
            .collect();

        // Levenberg-Marquardt: raise the damping until the step helps, relax it after
        let mut accepted = false;
        for _ in 0..20 {
            let Some(dq) = dls_step(&cols, &e, lambda2, opts.position_only) else { break };
            for i in 0..n {
                trial[i] = q[i] + dq[i];
            }
            chain.clamp(&mut trial);
            let ee_t = chain.fk(&trial);
            let err_t = pose_error(target, &ee_t, opts.position_only);
            let res_t = err_t.norm();
            if res_t < residual {
                q.copy_from_slice(&trial);
                ee = chain.frames(&q, &mut axes);
                err = err_t;
                residual = res_t;
                accepted = true;
                lambda2 = (lambda2 * 0.1).max(base);
                break;
            }
            lambda2 *= 10.0;
        }
        if !accepted {
            break;
        }
    }

    IkSolution {
        config: q,
        residual,
        iterations,
    }
}

fn dls_step(cols: &[Vector6<f64>], e: &Vector6<f64>, lambda2: f64, position_only: bool) -> Option<Vec<f64>> {
    if position_only {
        let mut a = Matrix3::identity() * lambda2;
        for c in cols {
            let v = c.fixed_rows::<3>(0);
            a += v * v.transpose();
        }
        let y = a.cholesky()?.solve(&e.fixed_rows::<3>(0).into_owned());
        Some(cols.iter().map(|c| c.fixed_rows::<3>(0).dot(&y)).collect())
    } else {
        let mut a = Matrix6::identity() * lambda2;
        for c in cols {
            a += c * c.transpose();
        }
        let y = a.cholesky()?.solve(e);
        Some(cols.iter().map(|c| c.dot(&y)).collect())
    }
}

/// Sum of squared IK residuals over `poses`, each solve warm-started from the
/// previous solution. Returns the per-pose configurations alongside.
pub fn ik_cost_with_configs(
    poses: &[Pose],
    chain: &KinematicChain,
    seed: &[f64],
    opts: &IkOptions,
) -> (f64, Vec<Vec<f64>>) {
    let mut q = seed.to_vec();
    let mut total = 0.0;
    let mut configs = Vec::with_capacity(poses.len());
    for p in poses {
        let sol = ik_solve(chain, p, &q, opts);
        total += sol.residual * sol.residual;
        q = sol.config;
        configs.push(q.clone());
    }
    (total, configs)
}

/// A six-joint desk arm used by the built-in tasks. Tool z is the approach axis.
pub fn desk_arm(base: Vec3) -> KinematicChain {
    use std::f64::consts::PI;
    let y = Vec3::y();
    let x = Vec3::x();
    let z = Vec3::z();
    let j = |axis: Vec3, origin: Vec3, lim: f64| Joint {
        axis,
        origin: Pose::from_translation(origin),
        joint_type: JointType::Revolute,
        limits: [-lim, lim],
    };
    KinematicChain {
        base: Pose::from_translation(base),
        joints: vec![
            j(z, Vec3::new(0.0, 0.0, 0.35), PI),
            j(y, Vec3::zeros(), 2.6),
            j(y, Vec3::new(0.45, 0.0, 0.0), 2.8),
            j(x, Vec3::new(0.45, 0.0, 0.0), 2.0 * PI),
            j(y, Vec3::zeros(), 2.6),
            j(x, Vec3::zeros(), 2.0 * PI),
        ],
        tool: Pose::new(
            UnitQuaternion::from_axis_angle(&Vector3::y_axis(), PI / 2.0),
            Vec3::new(0.12, 0.0, 0.0),
        ),
    }
}

/// A two-link planar chain in the xy plane.
pub fn planar_two_link(l1: f64, l2: f64) -> KinematicChain {
    use std::f64::consts::PI;
    let z = Vec3::z();
    KinematicChain {
        base: Pose::identity(),
        joints: vec![
            Joint {
                axis: z,
                origin: Pose::identity(),
                joint_type: JointType::Revolute,
                limits: [-PI, PI],
            },
            Joint {
                axis: z,
                origin: Pose::from_translation(Vec3::new(l1, 0.0, 0.0)),
                joint_type: JointType::Revolute,
                limits: [-PI, PI],
            },
        ],
        tool: Pose::from_translation(Vec3::new(l2, 0.0, 0.0)),
    }
}
