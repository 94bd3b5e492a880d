//! Frame-by-frame odometry: knot insertion, window sliding, deskewing,
//! data association and the outer/inner Gauss-Newton loops.

use std::time::Instant;

use log::{debug, warn};
use nalgebra::{Matrix3, Matrix6, Vector3, Vector6};

use super::window::{
    prior_information, Factor, InnerConfig, PointToPlaneFactor, RadarFactor, SlidingWindow,
    WindowConfig,
};
use crate::error::{Error, Result};
use crate::frontend::{bin_timestamps, crop_range, downsample_lidar, LidarFrame, SensorPoint};
use crate::gp_prior::TrajectoryKnot;
use crate::icp::{doppler_correction, Correspondence, RobustLoss};
use crate::imu::{estimate_gravity, GravityConfig, GravityEstimate, ImuNoise, ImuSample};
use crate::liegroup::{Pose, Twist};
use crate::voxel_map::{estimate_normal, VoxelMap, VoxelMapConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SensorKind {
    Lidar,
    Radar,
}

/// Source of point correspondences.
#[derive(Clone, Debug, PartialEq)]
pub enum Association {
    /// k-NN plane fits (lidar) or nearest points (radar) in the voxel map.
    Map,
    /// Exact infinite planes `(point, unit normal)`; used for consistency tests.
    KnownPlanes(Vec<(Vector3<f64>, Vector3<f64>)>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct OdometryConfig {
    pub sensor: SensorKind,
    pub use_imu: bool,
    pub window: WindowConfig,
    pub inner: InnerConfig,
    pub outer_max: usize,
    /// Outer-loop threshold on `max(translation, 0.1 * rotation)` change.
    pub outer_tol: f64,
    /// Frames spanned by the sliding window.
    pub window_frames: usize,
    /// Additional evenly spaced knots inside each frame.
    pub extra_knots: usize,
    pub map: VoxelMapConfig,
    pub crop: Option<(f64, f64)>,
    pub downsample_voxel: Option<f64>,
    pub timestamp_freq: Option<f64>,
    pub knn: usize,
    /// Correspondence gate in voxel sizes on the first outer iteration; halved afterwards.
    pub max_corr_voxels: f64,
    /// Point-to-plane measurement variance (m^2).
    pub p2plane_var: f64,
    pub lidar_loss: RobustLoss,
    /// Radar point-to-point variance per axis (m^2).
    pub radar_var: f64,
    pub radar_loss: RobustLoss,
    pub imu_noise: ImuNoise,
    pub gravity: GravityConfig,
    pub association: Association,
    /// Standard deviations of the first-knot prior.
    pub init_pose_sigma: f64,
    pub init_velocity_sigma: f64,
    pub init_accel_bias_sigma: f64,
    pub init_gyro_bias_sigma: f64,
    pub init_velocity: Twist,
    /// Skip map insertion until the vehicle has moved this far.
    pub keyframe_distance: Option<f64>,
    pub compute_covariance: bool,
    pub seed: u64,
}

impl Default for OdometryConfig {
    fn default() -> Self {
        Self {
            sensor: SensorKind::Lidar,
            use_imu: true,
            window: WindowConfig::default(),
            inner: InnerConfig::default(),
            outer_max: 10,
            outer_tol: 1e-4,
            window_frames: 2,
            extra_knots: 0,
            map: VoxelMapConfig::default(),
            crop: Some((1.0, 120.0)),
            downsample_voxel: Some(1.5),
            timestamp_freq: Some(5000.0),
            knn: 20,
            max_corr_voxels: 2.0,
            p2plane_var: 0.01,
            lidar_loss: RobustLoss::None,
            radar_var: 0.25,
            radar_loss: RobustLoss::Cauchy(1.0),
            imu_noise: ImuNoise::default(),
            gravity: GravityConfig::default(),
            association: Association::Map,
            init_pose_sigma: 1e-3,
            init_velocity_sigma: 1.0,
            init_accel_bias_sigma: 0.1,
            init_gyro_bias_sigma: 0.01,
            init_velocity: Twist::zeros(),
            keyframe_distance: None,
            compute_covariance: false,
            seed: 0,
        }
    }
}

impl OdometryConfig {
    /// Defaults for a 2D spinning radar.
    pub fn radar() -> Self {
        let mut cfg = Self {
            sensor: SensorKind::Radar,
            crop: None,
            downsample_voxel: None,
            timestamp_freq: None,
            ..Self::default()
        };
        cfg.map.planar = true;
        cfg.map.voxel_size = 2.0;
        cfg.map.min_point_distance = 0.2;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.window.prior.validate()?;
        if self.window_frames == 0 || self.outer_max == 0 || self.inner.max_iterations == 0 {
            return Err(Error::Config("window_frames, outer_max and inner_max must be positive".into()));
        }
        if self.knn < crate::voxel_map::MIN_NORMAL_NEIGHBORS {
            return Err(Error::Config(format!("knn must be at least {}", crate::voxel_map::MIN_NORMAL_NEIGHBORS)));
        }
        if !(self.p2plane_var > 0.0 && self.radar_var > 0.0) {
            return Err(Error::Config("measurement variances must be positive".into()));
        }
        if self.map.voxel_size <= 0.0 {
            return Err(Error::Config("map voxel size must be positive".into()));
        }
        Ok(())
    }
}

/// Per-frame solver diagnostics.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FrameDiagnostics {
    pub time: f64,
    pub inner_iterations: usize,
    pub outer_iterations: usize,
    pub cost: f64,
    pub correspondences: usize,
    pub condition: f64,
    pub wall_time: f64,
    /// No correspondences: the trajectory follows the prior.
    pub degenerate: bool,
    pub damping: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameResult {
    /// Middle of the frame.
    pub time: f64,
    /// `T_vi` at `time`.
    pub pose: Pose,
    pub velocity: Twist,
    pub covariance: Option<Matrix6<f64>>,
    pub diagnostics: FrameDiagnostics,
}

/// Continuous-time lidar/radar(-inertial) odometry.
#[derive(Clone, Debug)]
pub struct Odometry {
    cfg: OdometryConfig,
    window: Option<SlidingWindow>,
    map: VoxelMap,
    frame_starts: Vec<f64>,
    imu_buffer: Vec<ImuSample>,
    gravity: GravityEstimate,
    accel_bias: Vector3<f64>,
    last_keyframe: Option<Vector3<f64>>,
}

impl Odometry {
    pub fn new(cfg: OdometryConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            map: VoxelMap::new(cfg.map),
            cfg,
            window: None,
            frame_starts: Vec::new(),
            imu_buffer: Vec::new(),
            gravity: GravityEstimate::level(),
            accel_bias: Vector3::zeros(),
            last_keyframe: None,
        })
    }

    pub fn config(&self) -> &OdometryConfig {
        &self.cfg
    }

    pub fn map(&self) -> &VoxelMap {
        &self.map
    }

    pub fn window(&self) -> Option<&SlidingWindow> {
        self.window.as_ref()
    }

    pub fn gravity(&self) -> &GravityEstimate {
        &self.gravity
    }

    pub fn frames_processed(&self) -> usize {
        self.frame_starts.len()
    }

    /// Aligns the map frame with gravity from stationary startup samples.
    pub fn initialize_gravity(&mut self, samples: &[ImuSample]) -> Result<()> {
        let (g, b) = estimate_gravity(samples, &self.cfg.imu_noise.r_accel, &self.cfg.gravity)?;
        self.gravity = g;
        self.accel_bias = b;
        self.cfg.window.gravity = g.gravity_in_map();
        if let Some(w) = &mut self.window {
            w.config_mut().gravity = g.gravity_in_map();
        }
        Ok(())
    }

    fn start_window(&mut self, t0: f64) {
        let mut first = TrajectoryKnot::new(t0, Pose::identity(), self.cfg.init_velocity);
        first.bias.fixed_rows_mut::<3>(0).copy_from(&self.accel_bias);
        let c = &self.cfg;
        let info = prior_information(
            &Vector6::repeat(c.init_pose_sigma),
            &Vector6::repeat(c.init_velocity_sigma),
            &Vector6::new(
                c.init_accel_bias_sigma,
                c.init_accel_bias_sigma,
                c.init_accel_bias_sigma,
                c.init_gyro_bias_sigma,
                c.init_gyro_bias_sigma,
                c.init_gyro_bias_sigma,
            ),
        );
        self.window = Some(SlidingWindow::new(c.window, first, info));
    }

    /// Processes one frame. `imu` holds the samples since the previous call.
    pub fn process_frame(&mut self, frame: &LidarFrame, imu: &[ImuSample]) -> Result<FrameResult> {
        let wall = Instant::now();
        if !(frame.t_end > frame.t_start) {
            return Err(Error::DegenerateInterval(frame.t_end - frame.t_start));
        }
        let frame_idx = self.frame_starts.len();
        let (pts, dense) = preprocess(frame, &self.cfg, frame_idx);
        if self.window.is_none() {
            self.start_window(frame.t_start);
        }
        self.frame_starts.push(frame.t_start);
        if self.cfg.use_imu {
            self.imu_buffer.extend_from_slice(imu);
            self.imu_buffer.sort_by(|a, b| a.time.total_cmp(&b.time));
        }

        let cfg = self.cfg.clone();
        let window = self.window.as_mut().expect("window initialized");

        // New knots.
        let prev_end = window.end_time();
        let mut new_times: Vec<f64> = (1..=cfg.extra_knots)
            .map(|i| frame.t_start + (frame.t_end - frame.t_start) * i as f64 / (cfg.extra_knots + 1) as f64)
            .filter(|&t| t > prev_end)
            .collect();
        if frame.t_end > prev_end {
            new_times.push(frame.t_end);
        }
        let mut interval_start = prev_end;
        for &t in &new_times {
            window.push_knot(t)?;
        }

        // Slide so that the window spans the most recent frames.
        if frame_idx + 1 >= cfg.window_frames {
            let t_s = self.frame_starts[frame_idx + 1 - cfg.window_frames];
            window.slide_to(t_s);
        }

        // Inertial factors over the new intervals.
        if cfg.use_imu {
            let mut any = false;
            for &t in &new_times {
                let seg: Vec<ImuSample> = self
                    .imu_buffer
                    .iter()
                    .copied()
                    .filter(|s| s.time >= interval_start && s.time < t)
                    .collect();
                for s in &seg {
                    window.add_gyro(*s, &cfg.imu_noise.r_omega);
                }
                if window.add_velocity(seg, t, cfg.imu_noise.r_accel, cfg.sensor == SensorKind::Radar) {
                    any = true;
                } else {
                    warn!("no IMU samples in [{interval_start}, {t}]; continuing on the prior");
                }
                interval_start = t;
            }
            if !any && !new_times.is_empty() {
                debug!("frame {frame_idx}: inertial dropout");
            }
            let start = window.start_time();
            self.imu_buffer.retain(|s| s.time >= start);
        }

        let mut diag = FrameDiagnostics {
            time: frame.mid_time(),
            ..Default::default()
        };
        let has_map = !self.map.is_empty() || matches!(cfg.association, Association::KnownPlanes(_));

        for outer in 0..cfg.outer_max {
            window.refresh_preintegration();
            let before: Vec<Pose> = window.knots().iter().map(|k| k.pose).collect();
            if has_map {
                let gate_scale = if outer == 0 { 1.0 } else { 0.5 };
                let world = deskew(window, &pts.points, &cfg);
                let factors = associate(&world, &self.map, &pts, &cfg, gate_scale, frame_idx);
                diag.correspondences = factors.len();
                window.retain_factors(|f| f.tag() != Some(frame_idx));
                for f in factors {
                    window.add_factor(f);
                }
            }
            let stats = window.optimize(&cfg.inner)?;
            diag.inner_iterations += stats.iterations;
            diag.outer_iterations = outer + 1;
            diag.cost = stats.cost;
            diag.damping = diag.damping.max(stats.damping);
            let dist = window
                .knots()
                .iter()
                .zip(&before)
                .map(|(k, b)| {
                    let d = (k.pose * b.inverse()).log();
                    d.fixed_rows::<3>(0).norm().max(0.1 * d.fixed_rows::<3>(3).norm())
                })
                .fold(0.0, f64::max);
            if !has_map || dist < cfg.outer_tol {
                break;
            }
        }
        diag.degenerate = diag.correspondences == 0;
        if diag.degenerate && frame_idx > 0 {
            warn!("frame {frame_idx}: no correspondences, trajectory follows the prior");
        }
        diag.condition = SlidingWindow::condition_proxy(&window.linearize());

        // Map maintenance.
        if matches!(cfg.association, Association::Map) {
            let world = deskew(window, &dense.points, &cfg);
            let mid_pose = window.state_at(frame.mid_time()).pose;
            let position = mid_pose.inverse().translation;
            let insert = match (cfg.keyframe_distance, self.last_keyframe) {
                (Some(d), Some(last)) => (position - last).norm() >= d,
                _ => true,
            };
            if insert {
                let points = if cfg.sensor == SensorKind::Radar {
                    world.iter().map(|p| Vector3::new(p.x, p.y, 0.0)).collect::<Vec<_>>()
                } else {
                    world
                };
                self.map.insert(&points, frame_idx);
                self.last_keyframe = Some(position);
            }
            self.map.expire(frame_idx);
        }

        let mid = frame.mid_time();
        let state = window.state_at(mid);
        let covariance = if cfg.compute_covariance {
            Some(window.query_pose_covariance(mid)?)
        } else {
            None
        };
        diag.wall_time = wall.elapsed().as_secs_f64();
        Ok(FrameResult {
            time: mid,
            pose: state.pose,
            velocity: state.velocity,
            covariance,
            diagnostics: diag,
        })
    }
}

/// Cropping and timestamp binning, then seeded downsampling. Returns the
/// registration points and the denser cloud used for map insertion.
pub fn preprocess(frame: &LidarFrame, cfg: &OdometryConfig, frame_idx: usize) -> (LidarFrame, LidarFrame) {
    let mut f = frame.clone();
    if let Some((lo, hi)) = cfg.crop {
        f = crop_range(&f, lo, hi);
    }
    let dense = bin_timestamps(&f, cfg.timestamp_freq);
    let sparse = match cfg.downsample_voxel {
        Some(v) => downsample_lidar(&dense, v, cfg.seed.wrapping_add(frame_idx as u64)),
        None => dense.clone(),
    };
    (sparse, dense)
}

/// Map-frame points `T_vi(t)^-1 T_vs (q + dq)` under the current trajectory.
pub fn deskew(window: &SlidingWindow, points: &[SensorPoint], cfg: &OdometryConfig) -> Vec<Vector3<f64>> {
    let ext = &window.config().extrinsics;
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| points[a].time.total_cmp(&points[b].time));
    let mut out = vec![Vector3::zeros(); points.len()];
    let mut cached: Option<(f64, Pose, Twist)> = None;
    for i in order {
        let sp = &points[i];
        let (pose, vel) = match cached {
            Some((t, p, v)) if t == sp.time => (p, v),
            _ => {
                let s = window.state_at(sp.time);
                cached = Some((sp.time, s.pose, s.velocity));
                (s.pose, s.velocity)
            }
        };
        let q = if cfg.sensor == SensorKind::Radar {
            sp.p + doppler_correction(&sp.p, &vel, ext)
        } else {
            sp.p
        };
        out[i] = pose.inverse_transform_point(&ext.t_vs.transform_point(&q));
    }
    out
}

/// Builds tagged measurement factors for deskewed map-frame points `world`.
pub(crate) fn associate(
    world: &[Vector3<f64>],
    map: &VoxelMap,
    frame: &LidarFrame,
    cfg: &OdometryConfig,
    gate_scale: f64,
    tag: usize,
) -> Vec<Factor> {
    let voxel = map.config().voxel_size;
    let gate = cfg.max_corr_voxels * voxel * gate_scale;
    let mut out = Vec::new();
    for (sp, x) in frame.points.iter().zip(world) {
        match (&cfg.association, cfg.sensor) {
            (Association::KnownPlanes(planes), _) => {
                let best = planes
                    .iter()
                    .map(|(p, n)| (p, n, n.dot(&(x - p)).abs()))
                    .min_by(|a, b| a.2.total_cmp(&b.2));
                if let Some((p, n, d)) = best {
                    if d <= gate {
                        out.push(Factor::PointToPlane(PointToPlaneFactor {
                            time: sp.time,
                            q: sp.p,
                            corr: Correspondence { p: *p, n: *n, alpha: 1.0 },
                            info: 1.0 / cfg.p2plane_var,
                            loss: cfg.lidar_loss,
                            tag,
                        }));
                    }
                }
            }
            (Association::Map, SensorKind::Lidar) => {
                let nn = map.nearest_neighbors(x, cfg.knn, voxel);
                let pts: Vec<Vector3<f64>> = nn.iter().map(|(p, _)| *p).collect();
                let Some(fit) = estimate_normal(&pts, None) else {
                    continue;
                };
                if fit.normal.dot(&(x - fit.centroid)).abs() > gate || fit.alpha <= 0.0 {
                    continue;
                }
                out.push(Factor::PointToPlane(PointToPlaneFactor {
                    time: sp.time,
                    q: sp.p,
                    corr: Correspondence { p: fit.centroid, n: fit.normal, alpha: fit.alpha },
                    info: 1.0 / cfg.p2plane_var,
                    loss: cfg.lidar_loss,
                    tag,
                }));
            }
            (Association::Map, SensorKind::Radar) => {
                let xp = Vector3::new(x.x, x.y, 0.0);
                let nn = map.nearest_neighbors(&xp, 1, gate.min(voxel));
                let Some((p, _)) = nn.first() else {
                    continue;
                };
                out.push(Factor::Radar(RadarFactor {
                    time: sp.time,
                    q: sp.p,
                    p: *p,
                    info: Matrix3::identity() / cfg.radar_var,
                    loss: cfg.radar_loss,
                    tag,
                }));
            }
        }
    }
    out
}
