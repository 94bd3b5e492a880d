//! Trajectory metrics: KITTI relative error, Umeyama-aligned ATE, relative
//! pose error with compounded covariance, NEES and planar projection.
//!
//! Trajectories hold world-from-vehicle poses `T_iv`; the odometry output
//! `T_vi` is converted with [`Trajectory::from_vehicle_poses`].

use nalgebra::{Matrix3, Matrix6, Vector3, Vector6};

use crate::error::{Error, Result};
use crate::liegroup::{rot_axis, Pose};

/// Time-sorted world-from-vehicle poses.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory {
    pub stamps: Vec<f64>,
    pub poses: Vec<Pose>,
}

impl Trajectory {
    pub fn new(stamps: Vec<f64>, poses: Vec<Pose>) -> Result<Self> {
        if stamps.len() != poses.len() {
            return Err(Error::Format(format!("{} stamps for {} poses", stamps.len(), poses.len())));
        }
        if stamps.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Format("trajectory timestamps are not sorted".into()));
        }
        Ok(Self { stamps, poses })
    }

    /// From `(t, T_vi)` pairs.
    pub fn from_vehicle_poses(items: impl IntoIterator<Item = (f64, Pose)>) -> Result<Self> {
        let (stamps, poses) = items.into_iter().map(|(t, p)| (t, p.inverse())).unzip();
        Self::new(stamps, poses)
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.poses.iter().map(|p| p.translation).collect()
    }

    /// Cumulative distance travelled at each pose.
    pub fn distances(&self) -> Vec<f64> {
        let mut d = Vec::with_capacity(self.len());
        let mut acc = 0.0;
        for (i, p) in self.poses.iter().enumerate() {
            if i > 0 {
                acc += (p.translation - self.poses[i - 1].translation).norm();
            }
            d.push(acc);
        }
        d
    }

    pub fn path_length(&self) -> f64 {
        self.distances().last().copied().unwrap_or(0.0)
    }

    /// Applies `T` on the world side: `T T_iv`.
    pub fn transformed(&self, t: &Pose) -> Self {
        Self {
            stamps: self.stamps.clone(),
            poses: self.poses.iter().map(|p| t * p).collect(),
        }
    }
}

/// Index pairs `(est, gt)` matched by nearest timestamp within `max_dt`.
pub fn associate(est: &Trajectory, gt: &Trajectory, max_dt: f64) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    if gt.is_empty() {
        return out;
    }
    for (i, &t) in est.stamps.iter().enumerate() {
        let j = gt.stamps.partition_point(|&s| s < t);
        let best = [j.checked_sub(1), (j < gt.len()).then_some(j)]
            .into_iter()
            .flatten()
            .min_by(|&a, &b| (gt.stamps[a] - t).abs().total_cmp(&(gt.stamps[b] - t).abs()));
        if let Some(j) = best {
            if (gt.stamps[j] - t).abs() <= max_dt {
                out.push((i, j));
            }
        }
    }
    out
}

/// Both trajectories restricted to associated poses, in matching order.
pub fn matched(est: &Trajectory, gt: &Trajectory, max_dt: f64) -> (Trajectory, Trajectory) {
    let pairs = associate(est, gt, max_dt);
    let pick = |tr: &Trajectory, idx: &mut dyn Iterator<Item = usize>| {
        let (s, p) = idx.map(|i| (tr.stamps[i], tr.poses[i])).unzip();
        Trajectory { stamps: s, poses: p }
    };
    (
        pick(est, &mut pairs.iter().map(|p| p.0)),
        pick(gt, &mut pairs.iter().map(|p| p.1)),
    )
}

pub const KITTI_LENGTHS: [f64; 8] = [100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegmentError {
    pub first: usize,
    pub length: f64,
    /// Translation error per metre.
    pub translation: f64,
    /// Rotation error in radians per metre.
    pub rotation: f64,
}

/// Errors of every subsequence of the given lengths, anchored at every pose.
/// `est` and `gt` must be associated pose-by-pose.
pub fn kitti_segment_errors(est: &[Pose], gt: &[Pose], lengths: &[f64]) -> Vec<SegmentError> {
    assert_eq!(est.len(), gt.len(), "trajectories must be associated");
    let gt_tr = Trajectory {
        stamps: vec![0.0; gt.len()],
        poses: gt.to_vec(),
    };
    let dist = gt_tr.distances();
    let mut out = Vec::new();
    for first in 0..gt.len() {
        for &len in lengths {
            let target = dist[first] + len;
            let last = first + dist[first..].partition_point(|&d| d < target);
            if last >= gt.len() {
                continue;
            }
            let d_gt = gt[first].inverse() * gt[last];
            let d_est = est[first].inverse() * est[last];
            let e = d_est.inverse() * d_gt;
            out.push(SegmentError {
                first,
                length: len,
                translation: e.translation.norm() / len,
                rotation: rotation_angle(&e.rotation) / len,
            });
        }
    }
    out
}

fn rotation_angle(c: &Matrix3<f64>) -> f64 {
    (0.5 * (c.trace() - 1.0)).clamp(-1.0, 1.0).acos()
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Rte {
    /// Percent.
    pub translation: f64,
    /// Degrees per 100 m.
    pub rotation: f64,
    pub segments: usize,
}

fn summarize(errors: &[SegmentError]) -> Rte {
    if errors.is_empty() {
        return Rte::default();
    }
    let n = errors.len() as f64;
    Rte {
        translation: 100.0 * errors.iter().map(|e| e.translation).sum::<f64>() / n,
        rotation: 100.0 * errors.iter().map(|e| e.rotation).sum::<f64>().to_degrees() / n,
        segments: errors.len(),
    }
}

/// KITTI relative translational (%) and rotational (deg/100 m) error over
/// 100-800 m subsequences.
pub fn kitti_rte(est: &[Pose], gt: &[Pose]) -> Rte {
    summarize(&kitti_segment_errors(est, gt, &KITTI_LENGTHS))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Averaging {
    /// Mean over the concatenated subsequence errors of all sequences.
    Overall,
    /// Mean of the per-sequence means.
    PerSequence,
}

pub fn kitti_rte_sequences(sequences: &[(&[Pose], &[Pose])], averaging: Averaging) -> Rte {
    let per: Vec<Vec<SegmentError>> = sequences
        .iter()
        .map(|(e, g)| kitti_segment_errors(e, g, &KITTI_LENGTHS))
        .collect();
    match averaging {
        Averaging::Overall => summarize(&per.concat()),
        Averaging::PerSequence => {
            let s: Vec<Rte> = per.iter().filter(|e| !e.is_empty()).map(|e| summarize(e)).collect();
            if s.is_empty() {
                return Rte::default();
            }
            let n = s.len() as f64;
            Rte {
                translation: s.iter().map(|r| r.translation).sum::<f64>() / n,
                rotation: s.iter().map(|r| r.rotation).sum::<f64>() / n,
                segments: s.iter().map(|r| r.segments).sum(),
            }
        }
    }
}

/// Rigid transform `(R, t)` minimizing `sum |gt_i - (R est_i + t)|^2`.
pub fn umeyama(est: &[Vector3<f64>], gt: &[Vector3<f64>]) -> Result<Pose> {
    if est.len() != gt.len() || est.len() < 3 {
        return Err(Error::Format(format!("Umeyama alignment needs >= 3 pairs, got {}", est.len().min(gt.len()))));
    }
    let n = est.len() as f64;
    let mu_e = est.iter().sum::<Vector3<f64>>() / n;
    let mu_g = gt.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    for (e, g) in est.iter().zip(gt) {
        cov += (g - mu_g) * (e - mu_e).transpose();
    }
    cov /= n;
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let mut s = Matrix3::identity();
    if (u.determinant() * vt.determinant()) < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let r = u * s * vt;
    Ok(Pose::new(r, mu_g - r * mu_e))
}

/// RMSE of positions after rigid Umeyama alignment of `est` onto `gt`, with
/// poses associated by nearest timestamp within 10 ms.
pub fn ate_umeyama(est: &Trajectory, gt: &Trajectory) -> Result<f64> {
    let (e, g) = matched(est, gt, 0.01);
    let (pe, pg) = (e.positions(), g.positions());
    let t = umeyama(&pe, &pg)?;
    let sq: f64 = pe.iter().zip(&pg).map(|(a, b)| (t.transform_point(a) - b).norm_squared()).sum();
    Ok((sq / pe.len() as f64).sqrt())
}

/// Translational drift at the final pose as a percentage of the ground-truth
/// path length. Poses are world-from-vehicle and associated index by index.
pub fn final_drift_percent(est: &[Pose], gt: &[Pose]) -> f64 {
    assert_eq!(est.len(), gt.len(), "trajectories must be associated");
    let tr = Trajectory {
        stamps: vec![0.0; gt.len()],
        poses: gt.to_vec(),
    };
    let len = tr.path_length();
    match (est.last(), gt.last()) {
        (Some(a), Some(b)) if len > 0.0 => 100.0 * (a.translation - b.translation).norm() / len,
        _ => 0.0,
    }
}

/// `ln(T_est T_gt^-1)` for the vehicle-from-world relative poses
/// `T_{k,k-1} = T_k T_{k-1}^-1` of consecutive `T_vi` estimates.
pub fn relative_error(est_prev: &Pose, est: &Pose, gt_prev: &Pose, gt: &Pose) -> Vector6<f64> {
    let e = *est * est_prev.inverse();
    let g = *gt * gt_prev.inverse();
    (e * g.inverse()).log()
}

/// Covariance of the relative pose from the absolute covariances of two
/// `T_vi` estimates, ignoring their cross-covariance.
pub fn compound_covariance(p_k: &Matrix6<f64>, p_prev: &Matrix6<f64>, relative: &Pose) -> Matrix6<f64> {
    let ad = relative.adjoint();
    p_k + ad * p_prev * ad.transpose()
}

/// Mean of `e^T S^-1 e / dim` over all samples.
pub fn nees(errors: &[Vector6<f64>], covariances: &[Matrix6<f64>]) -> Result<f64> {
    if errors.len() != covariances.len() {
        return Err(Error::Format(format!("{} errors for {} covariances", errors.len(), covariances.len())));
    }
    if errors.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (i, (e, s)) in errors.iter().zip(covariances).enumerate() {
        let c = s.cholesky().ok_or(Error::NotPositiveDefinite(i))?;
        total += e.dot(&c.solve(e)) / 6.0;
    }
    Ok(total / errors.len() as f64)
}

/// Keeps x, y and yaw of a world-from-vehicle pose.
pub fn project_se2(pose: &Pose) -> Pose {
    let c = &pose.rotation;
    let yaw = c[(1, 0)].atan2(c[(0, 0)]);
    Pose::new(
        rot_axis(&Vector3::z(), yaw),
        Vector3::new(pose.translation.x, pose.translation.y, 0.0),
    )
}

pub fn project_trajectory_se2(tr: &Trajectory) -> Trajectory {
    Trajectory {
        stamps: tr.stamps.clone(),
        poses: tr.poses.iter().map(project_se2).collect(),
    }
}

/// One row of the error-vs-time report.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ErrorSample {
    pub time: f64,
    pub translation: f64,
    pub rotation_deg: f64,
}

/// Position and heading error at each associated pose.
pub fn error_vs_time(est: &Trajectory, gt: &Trajectory, max_dt: f64) -> Vec<ErrorSample> {
    associate(est, gt, max_dt)
        .into_iter()
        .map(|(i, j)| {
            let e = gt.poses[j].inverse() * est.poses[i];
            ErrorSample {
                time: est.stamps[i],
                translation: e.translation.norm(),
                rotation_deg: rotation_angle(&e.rotation).to_degrees(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::Cholesky;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn line(n: usize, step: f64, scale: f64) -> Vec<Pose> {
        (0..n).map(|i| Pose::from_translation(Vector3::new(i as f64 * step * scale, 0.0, 0.0))).collect()
    }

    fn wiggly(n: usize, seed: u64) -> Vec<Pose> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Pose::identity();
        (0..n)
            .map(|_| {
                let d = Vector6::new(1.0, rng.random_range(-0.1..0.1), 0.0, 0.0, 0.0, rng.random_range(-0.05..0.05));
                p = p * Pose::exp(&d);
                p
            })
            .collect()
    }

    #[test]
    fn rte_zero_on_identical() {
        let gt = wiggly(1000, 1);
        let r = kitti_rte(&gt, &gt);
        assert!(r.segments > 0);
        assert!(r.translation.abs() < 1e-9 && r.rotation.abs() < 1e-6);
    }

    #[test]
    fn rte_scaled_line_is_one_percent() {
        let gt = line(1001, 1.0, 1.0);
        let est = line(1001, 1.0, 1.01);
        let r = kitti_rte(&est, &gt);
        assert_relative_eq!(r.translation, 1.0, epsilon = 1e-9);
        assert!(r.rotation.abs() < 1e-9);
    }

    #[test]
    fn rte_averaging_modes() {
        let gt_a = line(301, 1.0, 1.0);
        let est_a = line(301, 1.0, 1.01);
        let gt_b = line(901, 1.0, 1.0);
        let est_b = line(901, 1.0, 1.03);
        let seqs: [(&[Pose], &[Pose]); 2] = [(&est_a, &gt_a), (&est_b, &gt_b)];
        let per = kitti_rte_sequences(&seqs, Averaging::PerSequence);
        assert_relative_eq!(per.translation, 2.0, epsilon = 1e-9);
        let overall = kitti_rte_sequences(&seqs, Averaging::Overall);
        let na = kitti_segment_errors(&est_a, &gt_a, &KITTI_LENGTHS).len() as f64;
        let nb = kitti_segment_errors(&est_b, &gt_b, &KITTI_LENGTHS).len() as f64;
        assert_relative_eq!(overall.translation, (na + 3.0 * nb) / (na + nb), epsilon = 1e-9);
    }

    #[test]
    fn umeyama_recovers_rigid_offset() {
        let gt = Trajectory::new((0..200).map(f64::from).collect(), wiggly(200, 2)).unwrap();
        let t = Pose::exp(&Vector6::new(3.0, -2.0, 1.0, 0.1, -0.3, 0.7));
        let est = gt.transformed(&t);
        assert!(ate_umeyama(&est, &gt).unwrap() < 1e-9);
    }

    #[test]
    fn ate_known_offsets() {
        // Each position appears twice with offsets +d and -d along z, so no
        // rigid motion can reduce the error.
        let gt = Trajectory::new(
            (0..100).map(f64::from).collect(),
            (0..100)
                .map(|i| Pose::from_translation(Vector3::new((i / 2) as f64, ((i / 2) % 7) as f64, 0.0)))
                .collect(),
        )
        .unwrap();
        let d = 0.3;
        let mut est = gt.clone();
        for (i, p) in est.poses.iter_mut().enumerate() {
            p.translation.z += if i % 2 == 0 { d } else { -d };
        }
        assert_relative_eq!(ate_umeyama(&est, &gt).unwrap(), d, epsilon = 1e-9);
    }

    #[test]
    fn association_within_ten_ms() {
        let gt = Trajectory::new(vec![0.0, 1.0, 2.0], vec![Pose::identity(); 3]).unwrap();
        let est = Trajectory::new(vec![0.005, 1.02, 1.995], vec![Pose::identity(); 3]).unwrap();
        assert_eq!(associate(&est, &gt, 0.01), vec![(0, 0), (2, 2)]);
    }

    #[test]
    fn relative_error_recovers_injected_twist() {
        let gt0 = Pose::exp(&Vector6::new(1.0, 2.0, 3.0, 0.1, 0.2, 0.3));
        let gt1 = Pose::exp(&Vector6::new(0.5, 0.1, 0.0, 0.0, 0.0, 0.2)) * gt0;
        assert!(relative_error(&gt0, &gt1, &gt0, &gt1).norm() < 1e-12);
        let xi = Vector6::new(0.01, -0.02, 0.03, 0.001, 0.002, -0.003);
        let est1 = Pose::exp(&xi) * gt1;
        assert_relative_eq!(relative_error(&gt0, &est1, &gt0, &gt1), xi, epsilon = 1e-12);
    }

    #[test]
    fn relative_error_antisymmetric_to_first_order() {
        let a0 = Pose::identity();
        let a1 = Pose::exp(&Vector6::new(1.0, 0.0, 0.0, 0.0, 0.0, 0.1));
        let b1 = Pose::exp(&Vector6::new(1e-4, -2e-4, 1e-4, 1e-5, 0.0, 2e-5)) * a1;
        let e = relative_error(&a0, &b1, &a0, &a1);
        let f = relative_error(&a0, &a1, &a0, &b1);
        assert!((e + f).norm() < 1e-7);
    }

    #[test]
    fn compound_covariance_examples() {
        let z = Matrix6::zeros();
        let t = Pose::exp(&Vector6::new(1.0, 2.0, 0.0, 0.0, 0.3, 0.1));
        assert_eq!(compound_covariance(&z, &z, &t), z);
        let a = Matrix6::from_diagonal(&Vector6::new(1.0, 2.0, 3.0, 4.0, 5.0, 6.0));
        let b = Matrix6::identity() * 0.5;
        assert_relative_eq!(compound_covariance(&a, &b, &Pose::identity()), a + b, epsilon = 1e-15);
    }

    #[test]
    fn compound_covariance_matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mean_prev = Pose::exp(&Vector6::new(2.0, 1.0, 0.0, 0.0, 0.0, 0.4));
        let rel = Pose::exp(&Vector6::new(1.5, 0.2, 0.1, 0.02, 0.01, 0.3));
        let mean_k = rel * mean_prev;
        let p_prev = Matrix6::from_diagonal(&Vector6::new(4e-4, 1e-4, 2e-4, 1e-5, 2e-5, 4e-5));
        let p_k = Matrix6::from_diagonal(&Vector6::new(1e-4, 3e-4, 1e-4, 3e-5, 1e-5, 2e-5));
        let (l_prev, l_k) = (Cholesky::new(p_prev).unwrap().l(), Cholesky::new(p_k).unwrap().l());
        let n = 20000;
        let mut cov = Matrix6::zeros();
        for _ in 0..n {
            let s = |rng: &mut ChaCha8Rng| Vector6::from_fn(|_, _| StandardNormal.sample(rng));
            let e_prev = Pose::exp(&(l_prev * s(&mut rng))) * mean_prev;
            let e_k = Pose::exp(&(l_k * s(&mut rng))) * mean_k;
            let xi = relative_error(&e_prev, &e_k, &mean_prev, &mean_k);
            cov += xi * xi.transpose();
        }
        cov /= n as f64;
        let predicted = compound_covariance(&p_k, &p_prev, &rel);
        assert!((cov - predicted).norm() / predicted.norm() < 0.15);
    }

    #[test]
    fn nees_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = Matrix6::from_diagonal(&Vector6::new(1.0, 2.0, 0.5, 0.1, 0.2, 0.3));
        let l = Cholesky::new(s).unwrap().l();
        let errs: Vec<Vector6<f64>> = (0..20000)
            .map(|_| l * Vector6::from_fn(|_, _| StandardNormal.sample(&mut rng)))
            .collect();
        let covs = vec![s; errs.len()];
        assert!((nees(&errs, &covs).unwrap() - 1.0).abs() < 0.03);
        assert_eq!(nees(&[Vector6::zeros()], &[s]).unwrap(), 0.0);
    }

    #[test]
    fn se2_projection_examples() {
        let planar = Pose::new(rot_axis(&Vector3::z(), 0.7), Vector3::new(1.0, 2.0, 0.0));
        let p = project_se2(&planar);
        assert!((p.matrix() - planar.matrix()).norm() < 1e-12);
        let pitch = Pose::new(rot_axis(&Vector3::y(), 0.4), Vector3::new(0.0, 0.0, 3.0));
        let p = project_se2(&pitch);
        assert!((p.rotation - Matrix3::identity()).norm() < 1e-12);
        assert_eq!(p.translation, Vector3::zeros());
    }

    fn arb_pose() -> impl Strategy<Value = Pose> {
        prop::array::uniform6(-1.0f64..1.0).prop_map(|a| Pose::exp(&Vector6::from_row_slice(&a)))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn rte_invariant_to_global_transform(t in arb_pose(), seed in 0u64..100) {
            let gt = wiggly(400, seed);
            let est: Vec<Pose> = wiggly(400, seed + 1000);
            let a = kitti_rte(&est, &gt);
            let est_t: Vec<Pose> = est.iter().map(|p| t * *p).collect();
            let gt_t: Vec<Pose> = gt.iter().map(|p| t * *p).collect();
            let b = kitti_rte(&est_t, &gt_t);
            prop_assert!((a.translation - b.translation).abs() < 1e-6);
            prop_assert!((a.rotation - b.rotation).abs() < 1e-6);
        }

        #[test]
        fn nees_scale_invariant(s in 0.1f64..10.0, e in prop::array::uniform6(-1.0f64..1.0)) {
            let e = Vector6::from_row_slice(&e);
            let c = Matrix6::from_diagonal(&Vector6::new(1.0, 2.0, 3.0, 0.5, 0.4, 0.3));
            let a = nees(&[e], &[c]).unwrap();
            let b = nees(&[e * s], &[c * s * s]).unwrap();
            prop_assert!((a - b).abs() < 1e-9 * a.max(1.0));
        }

        #[test]
        fn metrics_zero_on_identical(seed in 0u64..100) {
            let gt = wiggly(50, seed);
            for w in gt.windows(2) {
                prop_assert!(relative_error(&w[0], &w[1], &w[0], &w[1]).norm() < 1e-12);
            }
            let tr = Trajectory::new((0..50).map(f64::from).collect(), gt.clone()).unwrap();
            prop_assert!(ate_umeyama(&tr, &tr).unwrap() < 1e-9);
            prop_assert_eq!(final_drift_percent(&gt, &gt), 0.0);
        }
    }
}
