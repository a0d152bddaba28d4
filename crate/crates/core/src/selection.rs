//! Subtask selection by nearest grasp-object-relative-to-target pose.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::demos::Demonstration;
use crate::geometry::{pose_distance, DistanceWeights, Pose};

#[derive(Debug, Error, PartialEq)]
pub enum SelectionError {
    #[error("no candidates to select from")]
    Empty,
    #[error("k must be >= 1")]
    ZeroK,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraspCandidate {
    pub source_demo_id: String,
    pub segment_index: usize,
    /// Grasped object (or end-effector) pose relative to the segment's target.
    pub rel_grasp: Pose,
}

/// `inverse(target) * grasp`
pub fn relative_grasp(grasp_pose_world: &Pose, target_pose_world: &Pose) -> Pose {
    target_pose_world.inverse().compose(grasp_pose_world)
}

/// Indices of the `k` candidates closest to `current_rel`, nearest first.
pub fn select_topk(
    current_rel: &Pose,
    candidates: &[GraspCandidate],
    k: usize,
    w: &DistanceWeights,
) -> Result<Vec<usize>, SelectionError> {
    if k == 0 {
        return Err(SelectionError::ZeroK);
    }
    if candidates.is_empty() {
        return Err(SelectionError::Empty);
    }
    let mut scored: Vec<(f64, usize)> = candidates
        .iter()
        .enumerate()
        .map(|(i, c)| (pose_distance(current_rel, &c.rel_grasp, w), i))
        .collect();
    scored.sort_by(|a, b| {
        a.0.total_cmp(&b.0).then_with(|| {
            let (ca, cb) = (&candidates[a.1], &candidates[b.1]);
            ca.source_demo_id
                .cmp(&cb.source_demo_id)
                .then(ca.segment_index.cmp(&cb.segment_index))
                .then(a.1.cmp(&b.1))
        })
    });
    Ok(scored.into_iter().take(k).map(|(_, i)| i).collect())
}

/// Uniform draw from a non-empty index list.
pub fn pick<R: Rng + ?Sized>(topk: &[usize], rng: &mut R) -> usize {
    assert!(!topk.is_empty(), "pick from an empty list");
    topk[rng.random_range(0..topk.len())]
}

/// Pose of the thing being moved at the start of segment `index`: the
/// grasped object if the segment carries one, else the end-effector.
pub fn segment_grasp_pose(demo: &Demonstration, index: usize) -> Option<Pose> {
    let seg = demo.segments.get(index)?;
    let ee = demo.poses.get(seg.start)?.pose;
    match &seg.grasp_object {
        Some(g) => {
            let offset = demo.grasp_offsets.get(g)?;
            Some(ee.compose(&offset.inverse()))
        }
        None => Some(ee),
    }
}

pub fn candidate_for(demo: &Demonstration, index: usize) -> Option<GraspCandidate> {
    let seg = demo.segments.get(index)?;
    let target = demo.scene.object_pose(&seg.target_object)?;
    let grasp = segment_grasp_pose(demo, index)?;
    Some(GraspCandidate {
        source_demo_id: demo.id.clone(),
        segment_index: index,
        rel_grasp: relative_grasp(&grasp, target),
    })
}

/// All candidates for subtask `index` across `demos`.
pub fn candidates_for_subtask(demos: &[Demonstration], index: usize) -> Vec<GraspCandidate> {
    demos.iter().filter_map(|d| candidate_for(d, index)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cand(id: &str, seg: usize, x: f64) -> GraspCandidate {
        GraspCandidate {
            source_demo_id: id.into(),
            segment_index: seg,
            rel_grasp: Pose::from_translation(Vec3::new(x, 0.0, 0.0)),
        }
    }

    #[test]
    fn relative_grasp_trivial_cases() {
        let g = Pose::from_yaw(0.3, Vec3::new(0.1, 0.2, 0.3));
        assert_eq!(relative_grasp(&g, &Pose::identity()).to_array(), g.to_array());
        let r = relative_grasp(&g, &g);
        assert!(r.translation().norm() < 1e-12);
    }

    #[test]
    fn k1_is_argmin_and_ties_are_ordered() {
        let w = DistanceWeights::default();
        let cs = vec![cand("b", 0, 0.2), cand("a", 1, 0.1), cand("a", 0, 0.1), cand("c", 0, 0.5)];
        let id = Pose::identity();
        assert_eq!(select_topk(&id, &cs, 1, &w).unwrap(), vec![2]);
        assert_eq!(select_topk(&id, &cs, 3, &w).unwrap(), vec![2, 1, 0]);
        assert_eq!(select_topk(&id, &cs, 10, &w).unwrap().len(), 4);
        assert_eq!(select_topk(&id, &[], 1, &w), Err(SelectionError::Empty));
    }

    #[test]
    fn pick_is_uniform_and_reproducible() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(pick(&[7], &mut rng), 7);
        let mut counts = [0usize; 3];
        for _ in 0..10000 {
            counts[pick(&[0, 1, 2], &mut rng)] += 1;
        }
        for c in counts {
            assert!((c as f64 / 10000.0 - 1.0 / 3.0).abs() < 0.02, "{counts:?}");
        }
        let a: Vec<usize> = {
            let mut r = ChaCha8Rng::seed_from_u64(9);
            (0..20).map(|_| pick(&[0, 1, 2], &mut r)).collect()
        };
        let b: Vec<usize> = {
            let mut r = ChaCha8Rng::seed_from_u64(9);
            (0..20).map(|_| pick(&[0, 1, 2], &mut r)).collect()
        };
        assert_eq!(a, b);
    }
}
