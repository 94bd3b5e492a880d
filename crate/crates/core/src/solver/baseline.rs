//! Constant-velocity baseline: the body velocity is the finite difference of
//! the two previous frame poses, points are deskewed with it, and only the
//! frame pose is solved by point-to-plane ICP without a motion prior.

use std::time::Instant;

use nalgebra::{Matrix6, Vector3, Vector6};

use super::odometry::{associate, preprocess, FrameDiagnostics, FrameResult, OdometryConfig, SensorKind};
use super::window::Factor;
use crate::error::{Error, Result};
use crate::frontend::{LidarFrame, SensorPoint};
use crate::icp::{doppler_correction, p2p_radar_linearized, p2plane_linearized};
use crate::liegroup::{between, Pose, Twist};
use crate::voxel_map::VoxelMap;

#[derive(Clone, Debug)]
pub struct CvBaseline {
    cfg: OdometryConfig,
    map: VoxelMap,
    history: Vec<(f64, Pose)>,
}

/// `ln(T_b T_a^-1) / (t_b - t_a)`.
pub fn finite_difference_velocity(a: (f64, &Pose), b: (f64, &Pose)) -> Twist {
    let dt = b.0 - a.0;
    if dt <= 0.0 {
        return Twist::zeros();
    }
    between(b.1, a.1) / dt
}

fn pose_at(pose: &Pose, velocity: &Twist, dt: f64) -> (Pose, Pose) {
    let e = Pose::exp(&(velocity * dt));
    (e * *pose, e)
}

fn deskew_cv(points: &[SensorPoint], pose: &Pose, velocity: &Twist, t_ref: f64, cfg: &OdometryConfig) -> Vec<Vector3<f64>> {
    let ext = &cfg.window.extrinsics;
    points
        .iter()
        .map(|sp| {
            let (t, _) = pose_at(pose, velocity, sp.time - t_ref);
            let q = if cfg.sensor == SensorKind::Radar {
                sp.p + doppler_correction(&sp.p, velocity, ext)
            } else {
                sp.p
            };
            t.inverse_transform_point(&ext.t_vs.transform_point(&q))
        })
        .collect()
}

impl CvBaseline {
    pub fn new(cfg: OdometryConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            map: VoxelMap::new(cfg.map),
            cfg,
            history: Vec::new(),
        })
    }

    pub fn map(&self) -> &VoxelMap {
        &self.map
    }

    fn velocity(&self) -> Twist {
        match self.history.as_slice() {
            [.., a, b] => finite_difference_velocity((a.0, &a.1), (b.0, &b.1)),
            _ => self.cfg.init_velocity,
        }
    }

    pub fn process_frame(&mut self, frame: &LidarFrame) -> Result<FrameResult> {
        let wall = Instant::now();
        if !(frame.t_end > frame.t_start) {
            return Err(Error::DegenerateInterval(frame.t_end - frame.t_start));
        }
        let idx = self.history.len();
        let (pts, dense) = preprocess(frame, &self.cfg, idx);
        let t_k = frame.mid_time();
        let velocity = self.velocity();
        let mut pose = match self.history.last() {
            Some((t, p)) => pose_at(p, &velocity, t_k - t).0,
            None => Pose::identity(),
        };
        let mut diag = FrameDiagnostics {
            time: t_k,
            ..Default::default()
        };
        if !self.map.is_empty() {
            for outer in 0..self.cfg.outer_max {
                let world = deskew_cv(&pts.points, &pose, &velocity, t_k, &self.cfg);
                let gate = if outer == 0 { 1.0 } else { 0.5 };
                let factors = associate(&world, &self.map, &pts, &self.cfg, gate, idx);
                diag.correspondences = factors.len();
                diag.outer_iterations = outer + 1;
                let before = pose;
                for _ in 0..self.cfg.inner.max_iterations {
                    let (step, cost) = self.gauss_newton_step(&factors, &pose, &velocity, t_k);
                    diag.inner_iterations += 1;
                    diag.cost = cost;
                    let Some(step) = step else {
                        break;
                    };
                    pose = Pose::exp(&step) * pose;
                    if step.norm() < self.cfg.inner.step_tol {
                        break;
                    }
                }
                let d = between(&pose, &before);
                if d.fixed_rows::<3>(0).norm().max(0.1 * d.fixed_rows::<3>(3).norm()) < self.cfg.outer_tol {
                    break;
                }
            }
        }
        diag.degenerate = diag.correspondences == 0;
        let world = deskew_cv(&dense.points, &pose, &velocity, t_k, &self.cfg);
        self.map.insert(&world, idx);
        self.map.expire(idx);
        self.history.push((t_k, pose.normalized()));
        diag.wall_time = wall.elapsed().as_secs_f64();
        Ok(FrameResult {
            time: t_k,
            pose,
            velocity,
            covariance: None,
            diagnostics: diag,
        })
    }

    /// One Gauss-Newton step on the frame pose; `None` if the system is singular.
    fn gauss_newton_step(&self, factors: &[Factor], pose: &Pose, velocity: &Twist, t_k: f64) -> (Option<Vector6<f64>>, f64) {
        let ext = &self.cfg.window.extrinsics;
        let mut h = Matrix6::zeros();
        let mut g = Vector6::zeros();
        let mut cost = 0.0;
        for f in factors {
            match f {
                Factor::PointToPlane(m) => {
                    let (t, e) = pose_at(pose, velocity, m.time - t_k);
                    let (r, j) = p2plane_linearized(&m.corr, &m.q, &t, ext);
                    let j = j * e.adjoint();
                    let rn = m.info.sqrt() * r.abs();
                    let w = m.loss.weight(rn) * m.info;
                    h += j.transpose() * j * w;
                    g += j.transpose() * (w * r);
                    cost += m.loss.cost(rn);
                }
                Factor::Radar(m) => {
                    let (t, e) = pose_at(pose, velocity, m.time - t_k);
                    let (r, jp, _) = p2p_radar_linearized(&m.p, &m.q, &t, velocity, ext);
                    let j = jp * e.adjoint();
                    let rn = (r.transpose() * m.info * r)[0].max(0.0).sqrt();
                    let w = m.info * m.loss.weight(rn);
                    h += j.transpose() * w * j;
                    g += j.transpose() * w * r;
                    cost += m.loss.cost(rn);
                }
                _ => {}
            }
        }
        (h.cholesky().map(|c| -c.solve(&g)), cost)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::final_drift_percent;
    use crate::sim::{simulate, Profile, Sensor, SimConfig, World};
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn finite_difference_recovers_constant_twist(v in prop::array::uniform6(-2.0f64..2.0), dt in 0.05f64..0.5) {
            let varpi = Twist::from_row_slice(&v);
            let a = Pose::exp(&Twist::new(0.3, -0.2, 0.1, 0.05, 0.1, -0.2));
            let b = Pose::exp(&(varpi * dt)) * a;
            let got = finite_difference_velocity((1.0, &a), (1.0 + dt, &b));
            prop_assert!((got - varpi).norm() < 1e-9);
        }
    }

    #[test]
    fn radar_baseline_tracks_constant_velocity_with_doppler() {
        let profile = Profile::ConstantVelocity {
            start: Pose::identity(),
            velocity: Twist::new(-15.0, 0.0, 0.0, 0.0, 0.0, -0.05),
        };
        let world = World::landmark_ring(200.0, 40.0, 6.0, 1);
        let sim = SimConfig { duration: 5.0, ..SimConfig::default() }.noiseless();
        let data = simulate(&profile, &world, &sim, Sensor::Radar);
        let mut cfg = OdometryConfig::radar();
        cfg.use_imu = false;
        cfg.window.extrinsics = sim.extrinsics;
        cfg.init_velocity = Twist::new(-15.0, 0.0, 0.0, 0.0, 0.0, -0.05);
        let mut cv = CvBaseline::new(cfg).unwrap();
        let (mut est, mut gt) = (Vec::new(), Vec::new());
        for f in &data.radar {
            let r = cv.process_frame(f).unwrap();
            est.push(r.pose.inverse());
            gt.push(data.truth(r.time).inverse());
        }
        // the estimate starts at identity at the first frame's mid time
        let align = est[0] * gt[0].inverse();
        let gt: Vec<Pose> = gt.iter().map(|p| align * *p).collect();
        let drift = final_drift_percent(&est, &gt);
        assert!(drift < 0.05, "drift {drift}%");
    }
}
