use hybridgen::constraints::*;
use hybridgen::demos::{LabeledPose, PoseLabel};
use hybridgen::geometry::{Pose, Vec3};
use hybridgen::simenv::builtin;
use proptest::prelude::*;

mod common;
use common::*;

const KP: usize = 4;

fn kind() -> impl Strategy<Value = AtomKind> {
    let id = 0..KP;
    prop_oneof![
        (id.clone(), id.clone(), point(), 0.0f64..0.1).prop_map(|(i, j, offset, tolerance)| AtomKind::PointOffset {
            i,
            j,
            offset: offset * 0.1,
            tolerance
        }),
        (id.clone(), id.clone(), point(), 0.0f64..1.0).prop_filter_map("zero axis", |(i, j, axis, max_angle)| {
            (axis.norm() > 1e-3).then_some(AtomKind::AxisAngle { i, j, axis, max_angle })
        }),
        (id.clone(), id.clone(), -0.1f64..0.1).prop_map(|(i, j, min_height)| AtomKind::HeightAbove { i, j, min_height }),
        id.clone().prop_map(|keypoint| AtomKind::GraspMaintained { keypoint }),
        (id, point(), 0.0f64..0.3).prop_map(|(i, point, radius)| AtomKind::WithinRadius { i, point, radius }),
    ]
}

fn atoms() -> impl Strategy<Value = Vec<ConstraintAtom>> {
    prop::collection::vec((kind(), any::<bool>(), 0usize..2), 0..6).prop_map(|v| {
        v.into_iter()
            .map(|(kind, path, stage)| ConstraintAtom {
                stage,
                role: if path { AtomRole::Path } else { AtomRole::Subgoal },
                kind,
            })
            .collect()
    })
}

fn trajectory() -> impl Strategy<Value = Vec<LabeledPose>> {
    prop::collection::vec((pose(), 0.0f64..=1.0, any::<bool>()), 1..15).prop_map(|v| {
        v.into_iter()
            .map(|(pose, gripper, r)| LabeledPose {
                pose,
                gripper,
                label: if r { PoseLabel::R } else { PoseLabel::D },
            })
            .collect()
    })
}

/// Cost of one atom, written out from the definitions.
fn oracle_cost(k: &AtomKind, ee: &[f64; 3], kp: &[[f64; 3]], gripper: f64) -> f64 {
    let sub = |a: &[f64; 3], b: &[f64; 3]| [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    let norm = |a: [f64; 3]| (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
    match k {
        AtomKind::PointOffset { i, j, offset, tolerance } => {
            let t = [kp[*j][0] + offset.x, kp[*j][1] + offset.y, kp[*j][2] + offset.z];
            norm(sub(&kp[*i], &t)) - tolerance
        }
        AtomKind::AxisAngle { i, j, axis, max_angle } => {
            let v = sub(&kp[*i], &kp[*j]);
            let (nv, na) = (norm(v), axis.norm());
            let ang = if nv == 0.0 {
                0.0
            } else {
                ((v[0] * axis.x + v[1] * axis.y + v[2] * axis.z) / (nv * na)).clamp(-1.0, 1.0).acos()
            };
            ang - max_angle
        }
        AtomKind::HeightAbove { i, j, min_height } => min_height - (kp[*i][2] - kp[*j][2]),
        AtomKind::GraspMaintained { keypoint } => {
            (norm(sub(ee, &kp[*keypoint])) - GRASP_EPSILON).max(GRIPPER_CLOSED - gripper)
        }
        AtomKind::WithinRadius { i, point, radius } => norm(sub(&kp[*i], &[point.x, point.y, point.z])) - radius,
    }
}

/// Keypoints for an end-effector matrix: 0 is the ee, `held` follows it from `attach`.
fn oracle_keypoints(base: &[Vec3], ee: &M4, held: Option<(usize, &M4)>) -> Vec<[f64; 3]> {
    let mut out: Vec<[f64; 3]> = base.iter().map(|p| [p.x, p.y, p.z]).collect();
    out[0] = [ee[0][3], ee[1][3], ee[2][3]];
    if let Some((k, attach)) = held {
        let rel = mul(ee, &rigid_inv(attach));
        let p = apply(&rel, &base[k]);
        out[k] = [p.x, p.y, p.z];
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn semantic_cost_matches_per_pose_sum(
        traj in trajectory(),
        atoms in atoms(),
        base in prop::collection::vec(point(), KP),
        grasp in prop::option::of((1usize..KP, pose())),
        stage in 0usize..2,
    ) {
        let plan = ConstraintPlan { num_stages: 2, atoms, grasp_keypoints: vec![-1, -1], release_keypoints: vec![-1, -1] };
        let mut tracker = KeypointTracker::new(base.clone());
        if let Some((k, at)) = grasp {
            tracker = tracker.with_grasp(k, at);
        }
        let got = semantic_cost(&traj, &plan, stage, &tracker).unwrap();

        let attach = grasp.map(|(k, at)| (k, matrix(&at)));
        let held = attach.as_ref().map(|(k, m)| (*k, m));
        let hinge = |c: f64| c.max(0.0).powi(2);
        let mut want = 0.0;
        for lp in &traj {
            if lp.label != PoseLabel::R {
                continue;
            }
            let m = matrix(&lp.pose);
            let kp = oracle_keypoints(&base, &m, held);
            let ee = kp[0];
            for a in plan.atoms.iter().filter(|a| a.stage == stage && a.role == AtomRole::Path) {
                want += hinge(oracle_cost(&a.kind, &ee, &kp, lp.gripper));
            }
        }
        let last = traj.iter().rposition(|p| p.label == PoseLabel::R).unwrap_or(traj.len() - 1);
        let lp = &traj[last];
        let kp = oracle_keypoints(&base, &matrix(&lp.pose), held);
        for a in plan.atoms.iter().filter(|a| a.stage == stage && a.role == AtomRole::Subgoal) {
            want += hinge(oracle_cost(&a.kind, &kp[0], &kp, lp.gripper));
        }
        prop_assert!((got - want).abs() <= 1e-12 * want.max(1.0), "{} vs {}", got, want);
        prop_assert!(got >= 0.0);
    }

    #[test]
    fn grasped_keypoint_follows_rigidly(base in prop::collection::vec(point(), KP), attach in pose(), ee in pose(), k in 1usize..KP) {
        let got = moved_keypoints(&base, &ee, Some(k), &attach);
        let want = oracle_keypoints(&base, &matrix(&ee), Some((k, &matrix(&attach))));
        for (g, w) in got.iter().zip(&want) {
            prop_assert!((g - Vec3::new(w[0], w[1], w[2])).norm() < 1e-10);
        }
        // at the attach pose nothing but keypoint 0 moves
        let still = moved_keypoints(&base, &attach, Some(k), &attach);
        prop_assert!((still[k] - base[k]).norm() < 1e-10);
    }

    #[test]
    fn attached_keypoints_keep_their_mutual_distances(base in prop::collection::vec(point(), KP), attach in pose(), ee in pose()) {
        let t = KeypointTracker::new(base.clone()).with_grasp(1, attach).with_attached(vec![2, 3]);
        let p = t.positions(&ee);
        for (a, b) in [(1, 2), (1, 3), (2, 3)] {
            prop_assert!(((p[a] - p[b]).norm() - (base[a] - base[b]).norm()).abs() < 1e-9);
        }
    }

    #[test]
    fn atom_costs_are_continuous(k in kind(), base in prop::collection::vec(point(), KP), ee in pose(), g in 0.0f64..=1.0, dir in point()) {
        let atom = ConstraintAtom { stage: 0, role: AtomRole::Path, kind: k };
        let kp = moved_keypoints(&base, &ee, None, &Pose::identity());
        let c0 = eval_atom(&atom, &ee, &kp, g).unwrap();
        let eps = 1e-7;
        let shifted: Vec<Vec3> = kp.iter().map(|p| p + dir * eps).collect();
        let moved_ee = Pose::new(*ee.rotation(), ee.translation() + dir * eps);
        let c1 = eval_atom(&atom, &moved_ee, &shifted, g).unwrap();
        // axis_angle is only Lipschitz away from coincident keypoints
        let bound = if matches!(atom.kind, AtomKind::AxisAngle { .. }) { 1e-2 } else { 1e-5 };
        prop_assert!((c0 - c1).abs() < bound, "{} vs {}", c0, c1);
    }

    /// Plans built by the grasp/place/release recipe are always well formed.
    #[test]
    fn recipe_plans_validate(stages in 1usize..6, offsets in prop::collection::vec(point(), 6), kp in 1i64..5) {
        let mut atoms = Vec::new();
        let mut grasp = vec![-1; stages];
        let mut release = vec![-1; stages];
        for s in 0..stages {
            if s % 2 == 0 {
                grasp[s] = kp;
                atoms.push(ConstraintAtom { stage: s, role: AtomRole::Subgoal, kind: AtomKind::PointOffset { i: 0, j: kp as usize, offset: offsets[s], tolerance: 0.01 } });
            } else {
                release[s] = kp;
                atoms.push(ConstraintAtom { stage: s, role: AtomRole::Path, kind: AtomKind::GraspMaintained { keypoint: kp as usize } });
            }
        }
        let plan = ConstraintPlan { num_stages: stages, atoms, grasp_keypoints: grasp, release_keypoints: release };
        prop_assert_eq!(validate_plan(&plan), vec![]);
        let json = serde_json::to_string(&plan).unwrap();
        prop_assert_eq!(serde_json::from_str::<ConstraintPlan>(&json).unwrap(), plan.clone());

        // releasing in the first stage is always wrong
        let mut early = plan;
        early.release_keypoints[0] = kp;
        prop_assert!(validate_plan(&early).iter().any(|v| v.rule == "release only after grasp" && v.stage == Some(0)));
    }

    #[test]
    fn plan_parser_never_panics(s in ".{0,300}") {
        let _ = serde_json::from_str::<ConstraintPlan>(&s).map(|p| validate_plan(&p));
    }
}

#[test]
fn built_in_plans_are_well_formed() {
    for name in ["square", "threading"] {
        let task = builtin(name).unwrap();
        let plan = &task.expert.plan;
        assert_eq!(validate_plan(plan), vec![], "{name}");
        assert_eq!(plan.num_stages, task.subtasks.len());
        assert!(plan.max_keypoint_id().unwrap() <= task.keypoints.len());
    }
}

#[test]
fn violations_name_rule_and_stage() {
    let plan = ConstraintPlan {
        num_stages: 2,
        atoms: vec![
            ConstraintAtom {
                stage: 0,
                role: AtomRole::Subgoal,
                kind: AtomKind::HeightAbove { i: 0, j: 1, min_height: 0.1 },
            },
            ConstraintAtom {
                stage: 0,
                role: AtomRole::Subgoal,
                kind: AtomKind::HeightAbove { i: 0, j: 1, min_height: 0.2 },
            },
            ConstraintAtom {
                stage: 5,
                role: AtomRole::Path,
                kind: AtomKind::WithinRadius { i: 0, point: Vec3::zeros(), radius: -1.0 },
            },
        ],
        grasp_keypoints: vec![1, -1],
        release_keypoints: vec![-1, 2],
    };
    let v = validate_plan(&plan);
    let rules: Vec<(&str, Option<usize>)> = v.iter().map(|v| (v.rule.as_str(), v.stage)).collect();
    assert!(rules.contains(&("only one sub-goal constraint", Some(0))));
    assert!(rules.contains(&("atom stage in range", Some(5))));
    assert!(rules.contains(&("tolerances >= 0", Some(5))));
    assert!(rules.contains(&("release only after grasp", Some(1))));
    assert!(v[0].to_string().starts_with("stage"));
}

#[test]
fn out_of_range_stage_and_dangling_ids() {
    let plan = builtin("square").unwrap().expert.plan;
    let t = KeypointTracker::new(vec![Vec3::zeros(); 4]);
    let traj = [LabeledPose {
        pose: Pose::identity(),
        gripper: 0.0,
        label: PoseLabel::R,
    }];
    assert!(matches!(semantic_cost(&traj, &plan, 2, &t), Err(ConstraintError::StageOutOfRange { .. })));
    let short = KeypointTracker::new(vec![Vec3::zeros(); 2]);
    assert!(matches!(semantic_cost(&traj, &plan, 1, &short), Err(ConstraintError::DanglingKeypoint { .. })));
}
