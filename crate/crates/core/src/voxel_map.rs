//! Hashed voxel map with per-voxel capacity, point spacing and staleness expiry.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};

use crate::error::Result;
use crate::icp::plane_weight;

pub type VoxelKey = (i64, i64, i64);

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VoxelMapConfig {
    pub voxel_size: f64,
    pub max_points_per_voxel: usize,
    pub min_point_distance: f64,
    /// Frames a voxel may go unobserved before removal; `None` keeps everything.
    pub expiry_frames: Option<usize>,
    /// Collapse keys onto the `z = 0` layer (radar).
    pub planar: bool,
}

impl Default for VoxelMapConfig {
    fn default() -> Self {
        Self {
            voxel_size: 1.0,
            max_points_per_voxel: 20,
            min_point_distance: 0.1,
            expiry_frames: Some(10),
            planar: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Voxel {
    pub points: Vec<Vector3<f64>>,
    pub last_seen: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct InsertCounts {
    pub added: usize,
    pub rejected_cap: usize,
    pub rejected_near: usize,
}

#[derive(Clone, Debug, Default)]
pub struct VoxelMap {
    cfg: VoxelMapConfig,
    voxels: HashMap<VoxelKey, Voxel>,
    len: usize,
}

impl VoxelMap {
    pub fn new(cfg: VoxelMapConfig) -> Self {
        Self {
            cfg,
            voxels: HashMap::new(),
            len: 0,
        }
    }

    pub fn config(&self) -> &VoxelMapConfig {
        &self.cfg
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn voxel_count(&self) -> usize {
        self.voxels.len()
    }

    pub fn key(&self, p: &Vector3<f64>) -> VoxelKey {
        let s = self.cfg.voxel_size;
        let k = |v: f64| (v / s).floor() as i64;
        if self.cfg.planar {
            (k(p.x), k(p.y), 0)
        } else {
            (k(p.x), k(p.y), k(p.z))
        }
    }

    pub fn voxels(&self) -> impl Iterator<Item = (&VoxelKey, &Voxel)> {
        self.voxels.iter()
    }

    pub fn points(&self) -> impl Iterator<Item = &Vector3<f64>> {
        self.voxels.values().flat_map(|v| v.points.iter())
    }

    pub fn insert(&mut self, points: &[Vector3<f64>], frame_idx: usize) -> InsertCounts {
        let mut counts = InsertCounts::default();
        let min_d2 = self.cfg.min_point_distance.powi(2);
        for p in points {
            let key = self.key(p);
            let voxel = self.voxels.entry(key).or_insert_with(|| Voxel {
                points: Vec::new(),
                last_seen: frame_idx,
            });
            voxel.last_seen = voxel.last_seen.max(frame_idx);
            if voxel.points.len() >= self.cfg.max_points_per_voxel {
                counts.rejected_cap += 1;
            } else if voxel.points.iter().any(|q| (q - p).norm_squared() < min_d2) {
                counts.rejected_near += 1;
            } else {
                voxel.points.push(*p);
                counts.added += 1;
                self.len += 1;
            }
        }
        counts
    }

    /// Removes voxels unobserved for more than `expiry_frames` frames.
    pub fn expire(&mut self, frame_idx: usize) -> usize {
        let Some(max_age) = self.cfg.expiry_frames else {
            return 0;
        };
        let before = self.voxels.len();
        let mut removed_points = 0;
        self.voxels.retain(|_, v| {
            let keep = frame_idx.saturating_sub(v.last_seen) <= max_age;
            if !keep {
                removed_points += v.points.len();
            }
            keep
        });
        self.len -= removed_points;
        before - self.voxels.len()
    }

    /// Exact k nearest neighbours among the 27 voxels around `p`, limited to
    /// `max_dist`. Sorted by increasing distance.
    pub fn nearest_neighbors(&self, p: &Vector3<f64>, k: usize, max_dist: f64) -> Vec<(Vector3<f64>, f64)> {
        let (kx, ky, kz) = self.key(p);
        let max_d2 = max_dist * max_dist;
        let mut found: Vec<(Vector3<f64>, f64)> = Vec::new();
        let dz_range = if self.cfg.planar { 0..=0 } else { -1..=1 };
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in dz_range.clone() {
                    if let Some(v) = self.voxels.get(&(kx + dx, ky + dy, kz + dz)) {
                        for q in &v.points {
                            let d2 = (q - p).norm_squared();
                            if d2 <= max_d2 {
                                found.push((*q, d2));
                            }
                        }
                    }
                }
            }
        }
        if found.len() > k {
            found.select_nth_unstable_by(k - 1, |a, b| a.1.total_cmp(&b.1));
            found.truncate(k);
        }
        found.sort_by(|a, b| a.1.total_cmp(&b.1));
        found.into_iter().map(|(q, d2)| (q, d2.sqrt())).collect()
    }

    /// Writes all points as little-endian `f32` xyz triples.
    pub fn write_snapshot(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        for p in self.points() {
            for c in p.iter() {
                w.write_all(&(*c as f32).to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Local plane fitted to a neighbourhood.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlaneFit {
    pub centroid: Vector3<f64>,
    pub normal: Vector3<f64>,
    pub alpha: f64,
}

pub const MIN_NORMAL_NEIGHBORS: usize = 5;

/// Normal (smallest-eigenvalue direction of the covariance) and planarity
/// weight. Returns `None` below [`MIN_NORMAL_NEIGHBORS`] points. The normal is
/// flipped to face `viewpoint` when given.
pub fn estimate_normal(neighbors: &[Vector3<f64>], viewpoint: Option<&Vector3<f64>>) -> Option<PlaneFit> {
    if neighbors.len() < MIN_NORMAL_NEIGHBORS {
        return None;
    }
    let n = neighbors.len() as f64;
    let centroid = neighbors.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    for p in neighbors {
        let d = p - centroid;
        cov += d * d.transpose();
    }
    cov /= n;
    let eig = SymmetricEigen::new(cov);
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let sigma = idx.map(|i| eig.eigenvalues[i].max(0.0));
    let mut normal = eig.eigenvectors.column(idx[2]).into_owned().normalize();
    if let Some(v) = viewpoint {
        if normal.dot(&(v - centroid)) < 0.0 {
            normal = -normal;
        }
    }
    Some(PlaneFit {
        centroid,
        normal,
        alpha: plane_weight(sigma),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn insert_counts() {
        let mut map = VoxelMap::new(VoxelMapConfig::default());
        let pts: Vec<_> = (0..5).map(|i| Vector3::new(i as f64 * 3.0, 0.5, 0.5)).collect();
        let c = map.insert(&pts, 0);
        assert_eq!(c.added, 5);
        assert_eq!(map.len(), 5);

        let mut map = VoxelMap::new(VoxelMapConfig::default());
        // 20 points spaced 0.2 m on a grid inside one voxel
        let full: Vec<_> = (0..20)
            .map(|i| Vector3::new(0.05 + 0.2 * (i % 5) as f64, 0.05 + 0.2 * (i / 5) as f64, 0.5))
            .collect();
        assert_eq!(map.insert(&full, 0).added, 20);
        let c = map.insert(&[Vector3::new(0.95, 0.95, 0.95)], 1);
        assert_eq!(c.rejected_cap, 1);

        let mut map = VoxelMap::new(VoxelMapConfig::default());
        map.insert(&[Vector3::new(0.5, 0.5, 0.5)], 0);
        let c = map.insert(&[Vector3::new(0.55, 0.5, 0.5)], 0);
        assert_eq!(c.rejected_near, 1);
    }

    #[test]
    fn knn_examples() {
        let mut map = VoxelMap::new(VoxelMapConfig::default());
        assert!(map.nearest_neighbors(&Vector3::zeros(), 5, 1.0).is_empty());
        map.insert(&[Vector3::new(0.2, 0.3, 0.4)], 0);
        let nn = map.nearest_neighbors(&Vector3::new(0.5, 0.5, 0.5), 5, 1.0);
        assert_eq!(nn.len(), 1);
        assert_eq!(nn[0].0, Vector3::new(0.2, 0.3, 0.4));
        assert!(map.nearest_neighbors(&Vector3::new(5.0, 5.0, 5.0), 5, 1.0).is_empty());
    }

    #[test]
    fn knn_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = VoxelMapConfig {
            min_point_distance: 0.0,
            max_points_per_voxel: 1000,
            ..Default::default()
        };
        let mut map = VoxelMap::new(cfg);
        let pts: Vec<_> = (0..1000)
            .map(|_| Vector3::from_fn(|_, _| rng.random_range(-4.0..4.0)))
            .collect();
        map.insert(&pts, 0);
        for _ in 0..100 {
            let q = Vector3::from_fn(|_, _| rng.random_range(-4.0..4.0));
            let got = map.nearest_neighbors(&q, 7, 1.0);
            let mut brute: Vec<_> = pts
                .iter()
                .map(|p| (*p, (p - q).norm()))
                .filter(|x| x.1 <= 1.0)
                .collect();
            brute.sort_by(|a, b| a.1.total_cmp(&b.1));
            brute.truncate(7);
            assert_eq!(got.len(), brute.len());
            for (a, b) in got.iter().zip(&brute) {
                assert_eq!(a.1, b.1);
            }
        }
    }

    #[test]
    fn normal_examples() {
        let plane: Vec<_> = (0..25)
            .map(|i| Vector3::new((i % 5) as f64, (i / 5) as f64, 0.0))
            .collect();
        let fit = estimate_normal(&plane, Some(&Vector3::new(0.0, 0.0, 5.0))).unwrap();
        assert!((fit.normal - Vector3::z()).norm() < 1e-12);
        assert!((fit.alpha - 1.0).abs() < 1e-12);
        assert!(estimate_normal(&plane[..4], None).is_none());

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let blob: Vec<Vector3<f64>> = (0..5000)
            .map(|_| Vector3::from_fn(|_, _| StandardNormal.sample(&mut rng)))
            .collect();
        let fit = estimate_normal(&blob, None).unwrap();
        assert!(fit.alpha < 0.1, "{}", fit.alpha);
    }

    #[test]
    fn expiry() {
        let mut map = VoxelMap::new(VoxelMapConfig {
            expiry_frames: Some(3),
            ..Default::default()
        });
        map.insert(&[Vector3::new(0.5, 0.5, 0.5)], 0);
        map.insert(&[Vector3::new(5.5, 0.5, 0.5)], 4);
        assert_eq!(map.expire(3), 0);
        assert_eq!(map.expire(4), 1);
        assert_eq!(map.len(), 1);
        assert_eq!(map.voxel_count(), 1);

        let mut map = VoxelMap::new(VoxelMapConfig {
            expiry_frames: None,
            ..Default::default()
        });
        map.insert(&[Vector3::new(0.5, 0.5, 0.5)], 0);
        assert_eq!(map.expire(1000), 0);
    }

    #[test]
    fn rejected_point_still_marks_voxel_observed() {
        let mut map = VoxelMap::new(VoxelMapConfig {
            expiry_frames: Some(2),
            ..Default::default()
        });
        map.insert(&[Vector3::new(0.5, 0.5, 0.5)], 0);
        map.insert(&[Vector3::new(0.52, 0.5, 0.5)], 5);
        assert_eq!(map.expire(6), 0);
    }

    #[test]
    fn planar_keys() {
        let map = VoxelMap::new(VoxelMapConfig {
            planar: true,
            ..Default::default()
        });
        assert_eq!(map.key(&Vector3::new(1.5, -0.5, 7.0)), (1, -1, 0));
    }

    #[test]
    fn snapshot_roundtrip() {
        let mut map = VoxelMap::new(VoxelMapConfig::default());
        map.insert(&[Vector3::new(1.0, 2.0, 3.0), Vector3::new(-4.0, 5.0, 6.0)], 0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.bin");
        map.write_snapshot(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(bytes.len(), 2 * 3 * 4);
    }

    proptest! {
        #[test]
        fn invariants_hold_under_random_operations(
            ops in proptest::collection::vec((proptest::collection::vec((-3.0f64..3.0, -3.0f64..3.0, -3.0f64..3.0), 0..40), any::<bool>()), 1..20)
        ) {
            let cfg = VoxelMapConfig { expiry_frames: Some(2), ..Default::default() };
            let mut map = VoxelMap::new(cfg);
            for (frame, (pts, expire)) in ops.iter().enumerate() {
                let pts: Vec<_> = pts.iter().map(|&(x, y, z)| Vector3::new(x, y, z)).collect();
                let before = map.len();
                map.insert(&pts, frame);
                prop_assert!(map.len() >= before);
                if *expire {
                    map.expire(frame);
                }
                let mut total = 0;
                for (key, v) in map.voxels() {
                    prop_assert!(v.points.len() <= cfg.max_points_per_voxel);
                    total += v.points.len();
                    for (i, a) in v.points.iter().enumerate() {
                        prop_assert_eq!(map.key(a), *key);
                        for b in &v.points[i + 1..] {
                            prop_assert!((a - b).norm() >= cfg.min_point_distance);
                        }
                    }
                }
                prop_assert_eq!(total, map.len());
            }
        }
    }
}
