//! Keypoint extraction from a patch-level response map.
//!
//! High-response cells are clustered with weighted K-means in image space,
//! each cluster is snapped to its strongest cell, lifted to 3D, filtered to
//! the workspace and finally merged with a flat-kernel mean shift.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::constraints::Keypoint;
use crate::geometry::Vec3;
use crate::planner::sdf::Aabb;

const KMEANS_RESTARTS: usize = 20;
const KMEANS_ITERS: usize = 100;
const MEANSHIFT_ITERS: usize = 100;

#[derive(Debug, Error)]
pub enum KeypointError {
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid response map: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MapMeta {
    #[serde(default)]
    pub text: String,
    #[serde(default)]
    pub image_id: String,
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseMap {
    pub h: usize,
    pub w: usize,
    /// Row-major, each in `[0, 1]`.
    pub values: Vec<f64>,
    /// Row-major world point per cell, `null` where depth is missing.
    pub points: Vec<Option<Vec3>>,
    #[serde(default)]
    pub meta: MapMeta,
}

impl ResponseMap {
    pub fn validate(&self) -> Result<(), KeypointError> {
        if self.h == 0 || self.w == 0 {
            return Err(KeypointError::Invalid("dimensions must be >= 1".into()));
        }
        let n = self
            .h
            .checked_mul(self.w)
            .ok_or_else(|| KeypointError::Invalid("dimensions overflow".into()))?;
        if self.values.len() != n {
            return Err(KeypointError::Invalid(format!(
                "values has {} entries, expected h*w = {n}",
                self.values.len()
            )));
        }
        if self.points.len() != n {
            return Err(KeypointError::Invalid(format!(
                "points has {} entries, expected h*w = {n}",
                self.points.len()
            )));
        }
        if let Some(i) = self.values.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(KeypointError::Invalid(format!(
                "value {} at cell ({}, {}) is outside [0, 1]",
                self.values[i],
                i / self.w,
                i % self.w
            )));
        }
        if let Some(i) = self
            .points
            .iter()
            .position(|p| p.is_some_and(|p| !p.iter().all(|v| v.is_finite())))
        {
            return Err(KeypointError::Invalid(format!("point at cell {i} is not finite")));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, KeypointError> {
        let map: ResponseMap = serde_json::from_str(text).map_err(|e| KeypointError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        map.validate()?;
        Ok(map)
    }

    pub fn to_json(&self) -> String {
        crate::jsonfmt::to_string(self, 1).expect("response map serializes")
    }
}

pub fn load_response_map(path: &Path) -> Result<ResponseMap, KeypointError> {
    ResponseMap::from_json(&std::fs::read_to_string(path)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtractionConfig {
    pub num_clusters: usize,
    pub top_fraction: f64,
    pub merge_bandwidth: f64,
    pub workspace: Aabb,
}

impl ExtractionConfig {
    pub fn new(workspace: Aabb) -> Self {
        ExtractionConfig {
            num_clusters: 5,
            top_fraction: 0.2,
            merge_bandwidth: 0.04,
            workspace,
        }
    }

    pub fn validate(&self) -> Result<(), KeypointError> {
        if self.num_clusters == 0 {
            return Err(KeypointError::Invalid("num_clusters must be >= 1".into()));
        }
        if !(self.top_fraction > 0.0 && self.top_fraction <= 1.0) {
            return Err(KeypointError::Invalid("top_fraction must be in (0, 1]".into()));
        }
        if !(self.merge_bandwidth > 0.0) {
            return Err(KeypointError::Invalid("merge_bandwidth must be > 0".into()));
        }
        Ok(())
    }
}

/// A keypoint with the cell it came from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Extracted {
    pub keypoint: Keypoint,
    pub row: usize,
    pub col: usize,
    pub response: f64,
}

/// Cells kept as high-response: the top `top_fraction` by value (ties by
/// index), excluding cells with no response at all.
fn candidates(map: &ResponseMap, top_fraction: f64) -> Vec<usize> {
    let n = map.values.len();
    let keep = ((top_fraction * n as f64).ceil() as usize).clamp(1, n);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| map.values[b].total_cmp(&map.values[a]).then(a.cmp(&b)));
    idx.truncate(keep);
    idx.retain(|&i| map.values[i] > 0.0);
    idx.sort_unstable();
    idx
}

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

/// Weighted K-means with k-means++ seeding; returns the best labeling.
fn kmeans<R: Rng + ?Sized>(pts: &[[f64; 2]], w: &[f64], k: usize, rng: &mut R) -> Vec<usize> {
    let mut best: Option<(f64, Vec<usize>)> = None;
    for _ in 0..KMEANS_RESTARTS {
        let mut centers = Vec::with_capacity(k);
        let total: f64 = w.iter().sum();
        let mut pick = rng.random_range(0.0..total);
        let first = w.iter().position(|&wi| {
            pick -= wi;
            pick < 0.0
        });
        centers.push(pts[first.unwrap_or(pts.len() - 1)]);
        let mut d2: Vec<f64> = pts.iter().map(|p| dist2(*p, centers[0])).collect();
        while centers.len() < k {
            let mass: f64 = d2.iter().zip(w).map(|(d, wi)| d * wi).sum();
            let next = if mass > 0.0 {
                let mut r = rng.random_range(0.0..mass);
                d2.iter()
                    .zip(w)
                    .position(|(d, wi)| {
                        r -= d * wi;
                        r < 0.0
                    })
                    .unwrap_or(pts.len() - 1)
            } else {
                rng.random_range(0..pts.len())
            };
            centers.push(pts[next]);
            for (d, p) in d2.iter_mut().zip(pts) {
                *d = d.min(dist2(*p, pts[next]));
            }
        }
        let mut labels = vec![0usize; pts.len()];
        for _ in 0..KMEANS_ITERS {
            let mut changed = false;
            for (l, p) in labels.iter_mut().zip(pts) {
                let nl = (0..k)
                    .min_by(|&a, &b| dist2(*p, centers[a]).total_cmp(&dist2(*p, centers[b])))
                    .unwrap_or(0);
                if nl != *l {
                    *l = nl;
                    changed = true;
                }
            }
            let mut sums = vec![[0.0f64; 3]; k];
            for ((p, wi), &l) in pts.iter().zip(w).zip(&labels) {
                sums[l][0] += wi * p[0];
                sums[l][1] += wi * p[1];
                sums[l][2] += wi;
            }
            for (c, s) in centers.iter_mut().zip(&sums) {
                if s[2] > 0.0 {
                    *c = [s[0] / s[2], s[1] / s[2]];
                }
            }
            if !changed {
                break;
            }
        }
        let inertia: f64 = pts
            .iter()
            .zip(w)
            .zip(&labels)
            .map(|((p, wi), &l)| wi * dist2(*p, centers[l]))
            .sum();
        if best.as_ref().is_none_or(|(b, _)| inertia < *b) {
            best = Some((inertia, labels));
        }
    }
    best.map(|(_, l)| l).unwrap_or_default()
}

/// Flat-kernel mean shift; returns the mode index each point converges to.
fn mean_shift(points: &[Vec3], bandwidth: f64) -> Vec<usize> {
    let mut modes: Vec<Vec3> = Vec::new();
    let mut assign = Vec::with_capacity(points.len());
    for p in points {
        let mut x = *p;
        for _ in 0..MEANSHIFT_ITERS {
            let (sum, n) = points
                .iter()
                .filter(|q| (*q - x).norm() <= bandwidth)
                .fold((Vec3::zeros(), 0usize), |(s, n), q| (s + q, n + 1));
            let next = if n > 0 { sum / n as f64 } else { x };
            let moved = (next - x).norm();
            x = next;
            if moved < 1e-9 {
                break;
            }
        }
        match modes.iter().position(|m| (m - x).norm() < bandwidth / 2.0) {
            Some(m) => assign.push(m),
            None => {
                modes.push(x);
                assign.push(modes.len() - 1);
            }
        }
    }
    assign
}

pub fn extract_detailed<R: Rng + ?Sized>(
    map: &ResponseMap,
    cfg: &ExtractionConfig,
    rng: &mut R,
) -> Result<Vec<Extracted>, KeypointError> {
    map.validate()?;
    cfg.validate()?;
    let cells = candidates(map, cfg.top_fraction);
    if cells.is_empty() {
        return Ok(Vec::new());
    }
    let pts: Vec<[f64; 2]> = cells.iter().map(|&i| [(i / map.w) as f64, (i % map.w) as f64]).collect();
    let weights: Vec<f64> = cells.iter().map(|&i| map.values[i]).collect();
    let k = cfg.num_clusters.min(cells.len());
    let labels = kmeans(&pts, &weights, k, rng);

    // snap each cluster to its strongest cell
    let mut snapped: Vec<usize> = Vec::new();
    for c in 0..k {
        let best = cells
            .iter()
            .zip(&labels)
            .filter(|(_, &l)| l == c)
            .map(|(&i, _)| i)
            .max_by(|&a, &b| map.values[a].total_cmp(&map.values[b]).then(b.cmp(&a)));
        if let Some(b) = best {
            if !snapped.contains(&b) {
                snapped.push(b);
            }
        }
    }

    let lifted: Vec<(usize, Vec3)> = snapped
        .into_iter()
        .filter_map(|i| map.points[i].map(|p| (i, p)))
        .filter(|(_, p)| cfg.workspace.contains(p))
        .collect();
    if lifted.is_empty() {
        return Ok(Vec::new());
    }

    let positions: Vec<Vec3> = lifted.iter().map(|(_, p)| *p).collect();
    let modes = mean_shift(&positions, cfg.merge_bandwidth);
    let mut reps: BTreeMap<usize, usize> = BTreeMap::new();
    for (j, &m) in modes.iter().enumerate() {
        let cell = lifted[j].0;
        reps.entry(m)
            .and_modify(|r| {
                let cur = lifted[*r].0;
                if map.values[cell] > map.values[cur] || (map.values[cell] == map.values[cur] && cell < cur) {
                    *r = j;
                }
            })
            .or_insert(j);
    }
    let mut order: Vec<usize> = reps.into_values().collect();
    order.sort_by(|&a, &b| {
        map.values[lifted[b].0]
            .total_cmp(&map.values[lifted[a].0])
            .then(lifted[a].0.cmp(&lifted[b].0))
    });
    // modes can still sit closer than the bandwidth; keep the stronger one
    let mut kept: Vec<usize> = Vec::new();
    for j in order {
        if kept
            .iter()
            .all(|&q| (lifted[q].1 - lifted[j].1).norm() >= cfg.merge_bandwidth)
        {
            kept.push(j);
        }
    }
    Ok(kept
        .into_iter()
        .enumerate()
        .map(|(n, j)| {
            let (cell, p) = lifted[j];
            Extracted {
                keypoint: Keypoint { id: n + 1, position: p },
                row: cell / map.w,
                col: cell % map.w,
                response: map.values[cell],
            }
        })
        .collect())
}

/// Keypoints with ids `1..=n` (id 0 is reserved for the end-effector).
pub fn extract<R: Rng + ?Sized>(
    map: &ResponseMap,
    cfg: &ExtractionConfig,
    rng: &mut R,
) -> Result<Vec<Keypoint>, KeypointError> {
    Ok(extract_detailed(map, cfg, rng)?.into_iter().map(|e| e.keypoint).collect())
}

/// A map of Gaussian bumps on an `h`×`w` grid whose cells sit on a planar
/// grid with `spacing` meters between neighbours, origin at cell (0, 0).
pub fn synthetic_map(h: usize, w: usize, spacing: f64, peaks: &[(f64, f64, f64)], sigma: f64) -> ResponseMap {
    let mut values = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let v: f64 = peaks
                .iter()
                .map(|&(pr, pc, amp)| {
                    amp * (-((r as f64 - pr).powi(2) + (c as f64 - pc).powi(2)) / (2.0 * sigma * sigma)).exp()
                })
                .fold(0.0, f64::max);
            values[r * w + c] = v.clamp(0.0, 1.0);
        }
    }
    let points = (0..h * w)
        .map(|i| Some(Vec3::new((i % w) as f64 * spacing, (i / w) as f64 * spacing, 0.0)))
        .collect();
    ResponseMap {
        h,
        w,
        values,
        points,
        meta: MapMeta::default(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn workspace() -> Aabb {
        Aabb::new(Vec3::new(-1.0, -1.0, -1.0), Vec3::new(1.0, 1.0, 1.0))
    }

    #[test]
    fn single_peak() {
        let map = synthetic_map(24, 24, 0.01, &[(10.0, 12.0, 1.0)], 1.5);
        let mut cfg = ExtractionConfig::new(workspace());
        cfg.num_clusters = 1;
        let out = extract_detailed(&map, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!((out[0].row, out[0].col), (10, 12));
        assert_eq!(out[0].keypoint.position, map.points[10 * 24 + 12].unwrap());
        assert_eq!(out[0].keypoint.id, 1);
    }

    #[test]
    fn outside_workspace_is_dropped() {
        let map = synthetic_map(16, 16, 0.01, &[(5.0, 5.0, 1.0)], 1.0);
        let cfg = ExtractionConfig::new(Aabb::new(Vec3::new(0.5, 0.5, -1.0), Vec3::new(1.0, 1.0, 1.0)));
        assert!(extract(&map, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap().is_empty());
    }

    #[test]
    fn close_peaks_merge() {
        // one cell = 1 cm, peaks one cell apart
        let map = synthetic_map(24, 24, 0.01, &[(10.0, 10.0, 1.0), (10.0, 11.0, 0.95)], 0.6);
        let mut cfg = ExtractionConfig::new(workspace());
        cfg.merge_bandwidth = 0.05;
        cfg.num_clusters = 2;
        let out = extract(&map, &cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(out.len(), 1);
    }

    #[test]
    fn null_points_and_validation() {
        let mut map = synthetic_map(4, 4, 0.01, &[(1.0, 1.0, 1.0)], 1.0);
        map.points.iter_mut().for_each(|p| *p = None);
        let cfg = ExtractionConfig::new(workspace());
        assert!(extract(&map, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap().is_empty());
        map.values[3] = 1.2;
        assert!(matches!(map.validate(), Err(KeypointError::Invalid(_))));
        let mut short = synthetic_map(4, 4, 0.01, &[], 1.0);
        short.points.pop();
        assert!(short.validate().is_err());
    }

    #[test]
    fn json_round_trip() {
        let mut map = synthetic_map(3, 2, 0.01, &[(1.0, 1.0, 0.7)], 1.0);
        map.points[2] = None;
        map.meta.text = "the nut".into();
        let back = ResponseMap::from_json(&map.to_json()).unwrap();
        assert_eq!(back, map);
        assert!(matches!(ResponseMap::from_json("{\"h\": 1"), Err(KeypointError::Parse { .. })));
    }
}
