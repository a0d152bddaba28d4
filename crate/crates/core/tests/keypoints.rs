use hybridgen::geometry::Vec3;
use hybridgen::keypoints::*;
use hybridgen::planner::sdf::Aabb;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

mod common;
use common::*;

const PEAKS: [(f64, f64, f64); 3] = [(3.0, 3.0, 1.0), (8.0, 12.0, 0.9), (12.0, 5.0, 0.8)];

fn table() -> Aabb {
    Aabb::new(Vec3::new(-0.1, -0.1, -0.1), Vec3::new(0.5, 0.5, 0.1))
}

fn committed_map() -> ResponseMap {
    load_response_map(&root().join("fixtures/maps/three_peaks.json")).unwrap()
}

fn near(e: &Extracted, (r, c, _): (f64, f64, f64)) -> bool {
    (e.row as f64 - r).abs() <= 1.0 && (e.col as f64 - c).abs() <= 1.0
}

fn assert_recovers(out: &[Extracted], peaks: &[(f64, f64, f64)]) {
    assert_eq!(out.len(), peaks.len(), "{out:?}");
    for p in peaks {
        assert_eq!(out.iter().filter(|e| near(e, *p)).count(), 1, "peak {p:?} in {out:?}");
    }
    let ids: Vec<usize> = out.iter().map(|e| e.keypoint.id).collect();
    assert_eq!(ids, (1..=peaks.len()).collect::<Vec<_>>());
}

#[test]
fn three_planted_peaks_are_recovered() {
    let map = committed_map();
    assert_eq!(map, synthetic_map(16, 16, 0.02, &PEAKS, 1.2));
    let cfg = ExtractionConfig::new(table());
    for seed in 0..20 {
        let out = extract_detailed(&map, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        assert_recovers(&out, &PEAKS);
        for e in &out {
            assert_eq!(Some(e.keypoint.position), map.points[e.row * map.w + e.col]);
        }
    }
}

#[test]
fn peak_outside_the_workspace_is_dropped() {
    // a fourth, strongest bump whose cells are lifted off the table
    let mut peaks = PEAKS.to_vec();
    peaks.push((13.0, 13.0, 1.0));
    let mut map = synthetic_map(16, 16, 0.02, &peaks, 1.2);
    for r in 11..16 {
        for c in 11..16 {
            if let Some(p) = map.points[r * 16 + c].as_mut() {
                p.z = 0.5;
            }
        }
    }
    let cfg = ExtractionConfig::new(table());
    for seed in 0..20 {
        let out = extract_detailed(&map, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        assert_recovers(&out, &PEAKS);
    }
}

#[test]
fn extraction_is_seeded() {
    let map = synthetic_map(20, 20, 0.01, &[(4.0, 4.0, 1.0), (6.0, 15.0, 0.7), (15.0, 9.0, 0.9)], 2.0);
    let cfg = ExtractionConfig {
        num_clusters: 7,
        ..ExtractionConfig::new(table())
    };
    let run = |s| extract_detailed(&map, &cfg, &mut ChaCha8Rng::seed_from_u64(s)).unwrap();
    assert_eq!(run(3), run(3));
}

#[test]
fn more_clusters_than_cells_is_clamped() {
    let map = synthetic_map(2, 2, 0.01, &[(0.0, 0.0, 1.0)], 0.5);
    let cfg = ExtractionConfig {
        num_clusters: 50,
        top_fraction: 1.0,
        ..ExtractionConfig::new(table())
    };
    let out = extract(&map, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(!out.is_empty() && out.len() <= 4);
}

#[test]
fn bad_files_and_configs_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    let mut map = synthetic_map(3, 3, 0.01, &[(1.0, 1.0, 1.0)], 1.0);
    map.values[4] = 1.2;
    std::fs::write(&path, serde_json::to_string(&map).unwrap()).unwrap();
    let err = load_response_map(&path).unwrap_err();
    assert!(err.to_string().contains("outside [0, 1]"), "{err}");
    assert!(matches!(load_response_map(&dir.path().join("absent.json")), Err(KeypointError::Io(_))));

    let good = synthetic_map(3, 3, 0.01, &[], 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for cfg in [
        ExtractionConfig { num_clusters: 0, ..ExtractionConfig::new(table()) },
        ExtractionConfig { top_fraction: 0.0, ..ExtractionConfig::new(table()) },
        ExtractionConfig { top_fraction: 1.5, ..ExtractionConfig::new(table()) },
        ExtractionConfig { merge_bandwidth: -1.0, ..ExtractionConfig::new(table()) },
    ] {
        assert!(extract(&good, &cfg, &mut rng).is_err());
    }
    // an all-zero map has nothing to offer
    assert!(extract(&good, &ExtractionConfig::new(table()), &mut rng).unwrap().is_empty());
}

fn random_map() -> impl Strategy<Value = (ResponseMap, ExtractionConfig, u64)> {
    let peaks = prop::collection::vec((0.0f64..12.0, 0.0f64..12.0, 0.1f64..=1.0), 1..6);
    (peaks, 0.5f64..3.0, 1usize..8, 0.05f64..=1.0, 0.005f64..0.1, any::<u64>(), 0.0f64..0.2).prop_map(
        |(peaks, sigma, k, frac, bw, seed, cut)| {
            let map = synthetic_map(12, 12, 0.01, &peaks, sigma);
            // part of the grid falls outside the workspace
            let ws = Aabb::new(Vec3::new(cut, -1.0, -1.0), Vec3::new(1.0, 1.0, 1.0));
            let cfg = ExtractionConfig {
                num_clusters: k,
                top_fraction: frac,
                merge_bandwidth: bw,
                workspace: ws,
            };
            (map, cfg, seed)
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(150))]

    #[test]
    fn extraction_invariants((map, cfg, seed) in random_map()) {
        let out = extract_detailed(&map, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let again = extract_detailed(&map, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(&out, &again);

        let mut sorted = map.values.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        let keep = ((cfg.top_fraction * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
        let threshold = sorted[keep - 1];
        for (n, e) in out.iter().enumerate() {
            prop_assert_eq!(e.keypoint.id, n + 1);
            prop_assert!(cfg.workspace.contains(&e.keypoint.position));
            prop_assert!(e.response >= threshold && e.response > 0.0);
            prop_assert_eq!(e.response, map.values[e.row * map.w + e.col]);
        }
        for i in 0..out.len() {
            for j in i + 1..out.len() {
                let d = (out[i].keypoint.position - out[j].keypoint.position).norm();
                prop_assert!(d >= cfg.merge_bandwidth);
            }
        }
    }

    #[test]
    fn map_json_never_panics(s in ".{0,200}") {
        let _ = ResponseMap::from_json(&s);
    }

    #[test]
    fn map_json_round_trips((map, _, _) in random_map()) {
        prop_assert_eq!(ResponseMap::from_json(&map.to_json()).unwrap(), map);
    }
}
