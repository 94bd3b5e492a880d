//! Synthetic sensor simulator: ground-truth trajectories, IMU streams,
//! scanning lidar and spinning radar with Doppler range distortion.

mod trajectory;
mod world;

pub use trajectory::{sample_gp_knots, Profile, TruthState};
pub use world::{Plane, World};

use nalgebra::{Matrix3, Vector3, Vector6};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::frontend::{LidarFrame, PolarScan, SensorPoint};
use crate::icp::{doppler_correction, Extrinsics};
use crate::imu::{ImuSample, GRAVITY};
use crate::liegroup::Pose;

/// How lidar measurement noise is applied.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LidarNoise {
    /// Along the beam.
    Range,
    /// Independent per sensor axis.
    Isotropic,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    pub duration: f64,
    pub imu_rate: f64,
    /// Include gravity in the accelerometer; off for planar radar platforms.
    pub imu_gravity: bool,
    pub gyro_sigma: f64,
    pub accel_sigma: f64,
    pub initial_bias: Vector6<f64>,
    /// Bias random-walk power spectral densities.
    pub qb_diag: Vector6<f64>,
    pub lidar_rate: f64,
    pub lidar_beams: usize,
    pub lidar_columns: usize,
    /// Lowest and highest beam elevation (rad).
    pub lidar_elevation: (f64, f64),
    pub lidar_max_range: f64,
    pub lidar_sigma: f64,
    pub lidar_noise: LidarNoise,
    pub radar_rate: f64,
    pub radar_azimuths: usize,
    pub radar_range_bins: usize,
    pub radar_resolution: f64,
    pub radar_range_sigma: f64,
    /// Bearing noise (rad); defaults to the azimuth quantization error.
    pub radar_azimuth_sigma: f64,
    pub extrinsics: Extrinsics,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            duration: 10.0,
            imu_rate: 200.0,
            imu_gravity: true,
            gyro_sigma: 0.01,
            accel_sigma: 0.1,
            initial_bias: Vector6::zeros(),
            qb_diag: Vector6::new(1e-3, 1e-3, 1e-3, 1e-5, 1e-5, 1e-5),
            lidar_rate: 10.0,
            lidar_beams: 64,
            lidar_columns: 720,
            lidar_elevation: (-24.8f64.to_radians(), 2f64.to_radians()),
            lidar_max_range: 120.0,
            lidar_sigma: 0.02,
            lidar_noise: LidarNoise::Range,
            radar_rate: 4.0,
            radar_azimuths: 400,
            radar_range_bins: 1000,
            radar_resolution: 0.08,
            radar_range_sigma: 0.05,
            radar_azimuth_sigma: 2.0 * std::f64::consts::PI / 400.0 / 12f64.sqrt(),
            extrinsics: Extrinsics {
                t_vs: Pose::identity(),
                beta: 0.049,
            },
            seed: 0,
        }
    }
}

impl SimConfig {
    /// Zero measurement noise and bias drift.
    pub fn noiseless(mut self) -> Self {
        self.gyro_sigma = 0.0;
        self.accel_sigma = 0.0;
        self.qb_diag = Vector6::zeros();
        self.lidar_sigma = 0.0;
        self.radar_range_sigma = 0.0;
        self.radar_azimuth_sigma = 0.0;
        self
    }
}

fn gaussian3(rng: &mut ChaCha8Rng, sigma: f64) -> Vector3<f64> {
    if sigma == 0.0 {
        return Vector3::zeros();
    }
    Vector3::from_fn(|_, _| StandardNormal.sample(rng)) * sigma
}

/// IMU stream at `imu_rate` over `[0, duration]`.
///
/// The accelerometer reports the mean body-frame velocity rate over the
/// sample interval plus the gravity reaction, so that summing samples
/// reproduces body-velocity differences exactly.
pub fn sample_imu(profile: &Profile, cfg: &SimConfig) -> (Vec<ImuSample>, Vec<Vector6<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x1_0000);
    let dt = 1.0 / cfg.imu_rate;
    let n = (cfg.duration * cfg.imu_rate).round() as usize;
    let gravity = if cfg.imu_gravity { GRAVITY } else { Vector3::zeros() };
    let mut bias = cfg.initial_bias;
    let mut samples = Vec::with_capacity(n + 1);
    let mut biases = Vec::with_capacity(n + 1);
    let mut next = profile.state(0.0);
    for i in 0..=n {
        let t = i as f64 * dt;
        let cur = next;
        next = profile.state((i + 1) as f64 * dt);
        let nu0 = -cur.velocity.fixed_rows::<3>(0).into_owned();
        let nu1 = -next.velocity.fixed_rows::<3>(0).into_owned();
        let c_vi: Matrix3<f64> = cur.pose.rotation;
        let omega = -cur.velocity.fixed_rows::<3>(3).into_owned();
        let accel = (nu1 - nu0) / dt - c_vi * gravity;
        samples.push(ImuSample {
            time: t,
            omega: omega + bias.fixed_rows::<3>(3) + gaussian3(&mut rng, cfg.gyro_sigma),
            accel: accel + bias.fixed_rows::<3>(0) + gaussian3(&mut rng, cfg.accel_sigma),
        });
        biases.push(bias);
        for k in 0..6 {
            let s = (cfg.qb_diag[k] * dt).sqrt();
            if s > 0.0 {
                let w: f64 = StandardNormal.sample(&mut rng);
                bias[k] += s * w;
            }
        }
    }
    (samples, biases)
}

/// One lidar sweep starting at `t_scan`; column `j` fires at
/// `t_scan + j / (columns * rate)`.
pub fn render_lidar(profile: &Profile, world: &World, t_scan: f64, cfg: &SimConfig, rng: &mut ChaCha8Rng) -> LidarFrame {
    let period = 1.0 / cfg.lidar_rate;
    let (lo, hi) = cfg.lidar_elevation;
    let dirs: Vec<Vector3<f64>> = (0..cfg.lidar_beams)
        .map(|b| {
            let el = if cfg.lidar_beams > 1 {
                lo + (hi - lo) * b as f64 / (cfg.lidar_beams - 1) as f64
            } else {
                0.0
            };
            Vector3::new(el.cos(), 0.0, el.sin())
        })
        .collect();
    let t_vs = cfg.extrinsics.t_vs;
    let mut points = Vec::new();
    for j in 0..cfg.lidar_columns {
        let frac = j as f64 / cfg.lidar_columns as f64;
        let t = t_scan + frac * period;
        let az = 2.0 * std::f64::consts::PI * frac;
        let (sa, ca) = az.sin_cos();
        // sensor-to-world
        let t_is = profile.state(t).pose.inverse() * t_vs;
        for d in &dirs {
            let ds = Vector3::new(d.x * ca, d.x * sa, d.z);
            let dw = t_is.rotation * ds;
            if let Some(range) = world.cast(&t_is.translation, &dw, cfg.lidar_max_range) {
                let mut q = ds * range;
                if cfg.lidar_sigma > 0.0 {
                    match cfg.lidar_noise {
                        LidarNoise::Range => {
                            let w: f64 = StandardNormal.sample(rng);
                            q += ds * (w * cfg.lidar_sigma);
                        }
                        LidarNoise::Isotropic => q += gaussian3(rng, cfg.lidar_sigma),
                    }
                }
                points.push(SensorPoint { p: q, intensity: 1.0, time: t });
            }
        }
    }
    LidarFrame::new(points, t_scan, t_scan + period)
}

/// Time in `[t_scan, t_scan + period)` at which the beam sweeping
/// counter-clockwise from azimuth 0 points at world point `p`.
fn beam_time(profile: &Profile, p: &Vector3<f64>, t_scan: f64, period: f64, t_vs: &Pose) -> Option<(f64, Vector3<f64>)> {
    let bearing = |t: f64| {
        let q = t_vs.inverse_transform_point(&profile.state(t).pose.transform_point(p));
        let mut a = q.y.atan2(q.x);
        if a < 0.0 {
            a += 2.0 * std::f64::consts::PI;
        }
        (a, q)
    };
    // fixed point of t = t_scan + period * bearing(t) / 2pi
    let mut t = t_scan;
    for _ in 0..8 {
        let (a, _) = bearing(t);
        t = t_scan + period * a / (2.0 * std::f64::consts::PI);
    }
    let (a, q) = bearing(t);
    let t_check = t_scan + period * a / (2.0 * std::f64::consts::PI);
    ((t_check - t).abs() < 1e-6 * period).then_some((t, q))
}

/// Radar pointcloud with true bearings, Doppler-shifted ranges and range noise.
pub fn render_radar_points(profile: &Profile, world: &World, t_scan: f64, cfg: &SimConfig, rng: &mut ChaCha8Rng) -> LidarFrame {
    let period = 1.0 / cfg.radar_rate;
    let max_range = cfg.radar_range_bins as f64 * cfg.radar_resolution;
    let noise = Normal::new(0.0, cfg.radar_range_sigma.max(1e-300)).unwrap();
    let mut points = Vec::new();
    for p in &world.landmarks {
        let Some((t, q)) = beam_time(profile, p, t_scan, period, &cfg.extrinsics.t_vs) else {
            continue;
        };
        let r = q.norm();
        if r < 1.0 || r > max_range {
            continue;
        }
        let varpi = profile.state(t).velocity;
        let dq = doppler_correction(&q, &varpi, &cfg.extrinsics);
        let mut qm = q - dq;
        if cfg.radar_range_sigma > 0.0 {
            qm += q / r * noise.sample(rng);
        }
        if cfg.radar_azimuth_sigma > 0.0 {
            let da: f64 = StandardNormal.sample(rng);
            let (s, c) = (da * cfg.radar_azimuth_sigma).sin_cos();
            qm = Vector3::new(c * qm.x - s * qm.y, s * qm.x + c * qm.y, qm.z);
        }
        points.push(SensorPoint { p: Vector3::new(qm.x, qm.y, 0.0), intensity: 1.0, time: t });
    }
    points.sort_by(|a, b| a.time.total_cmp(&b.time));
    LidarFrame::new(points, t_scan, t_scan + period)
}

/// Polar power image: landmarks are drawn as bright cells at their
/// Doppler-shifted range on the azimuth whose beam covers them.
pub fn render_radar_scan(profile: &Profile, world: &World, t_scan: f64, cfg: &SimConfig, rng: &mut ChaCha8Rng) -> PolarScan {
    let period = 1.0 / cfg.radar_rate;
    let a_n = cfg.radar_azimuths;
    let mut scan = PolarScan::new(a_n, cfg.radar_range_bins, cfg.radar_resolution);
    for a in 0..a_n {
        scan.azimuth_times[a] = t_scan + period * a as f64 / a_n as f64;
        scan.azimuth_angles[a] = 2.0 * std::f64::consts::PI * a as f64 / a_n as f64;
    }
    for v in scan.power.iter_mut() {
        *v = (10.0 + 5.0 * rand::Rng::random::<f64>(rng)) as u8;
    }
    let step = 2.0 * std::f64::consts::PI / a_n as f64;
    for p in &world.landmarks {
        let Some((t, q)) = beam_time(profile, p, t_scan, period, &cfg.extrinsics.t_vs) else {
            continue;
        };
        let mut bearing = q.y.atan2(q.x);
        if bearing < 0.0 {
            bearing += 2.0 * std::f64::consts::PI;
        }
        let a = ((bearing / step).round() as usize) % a_n;
        let varpi = profile.state(t).velocity;
        let qm = q - doppler_correction(&q, &varpi, &cfg.extrinsics);
        let bin = (qm.norm() / cfg.radar_resolution - 0.5).round();
        if bin < 0.0 || bin as usize >= cfg.radar_range_bins {
            continue;
        }
        scan.row_mut(a)[bin as usize] = 200;
    }
    scan
}

/// Polar scans over `[0, duration)` at `radar_rate`.
pub fn simulate_radar_scans(profile: &Profile, world: &World, cfg: &SimConfig) -> Vec<PolarScan> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = (cfg.duration * cfg.radar_rate).floor() as usize;
    (0..n)
        .map(|k| render_radar_scan(profile, world, k as f64 / cfg.radar_rate, cfg, &mut rng))
        .collect()
}

/// Everything produced by one simulation run.
#[derive(Clone, Debug)]
pub struct SimData {
    pub profile: Profile,
    pub imu: Vec<ImuSample>,
    /// Bias at each IMU sample.
    pub biases: Vec<Vector6<f64>>,
    pub lidar: Vec<LidarFrame>,
    pub radar: Vec<LidarFrame>,
}

impl SimData {
    /// Ground-truth `T_vi` at `t`.
    pub fn truth(&self, t: f64) -> Pose {
        self.profile.state(t).pose
    }

    /// IMU samples with time in `[t0, t1)`.
    pub fn imu_between(&self, t0: f64, t1: f64) -> &[ImuSample] {
        let a = self.imu.partition_point(|s| s.time < t0);
        let b = self.imu.partition_point(|s| s.time < t1);
        &self.imu[a..b]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sensor {
    Lidar,
    Radar,
}

/// Runs the simulator for one sensor.
pub fn simulate(profile: &Profile, world: &World, cfg: &SimConfig, sensor: Sensor) -> SimData {
    let (imu, biases) = sample_imu(profile, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut lidar = Vec::new();
    let mut radar = Vec::new();
    match sensor {
        Sensor::Lidar => {
            let n = (cfg.duration * cfg.lidar_rate).floor() as usize;
            for k in 0..n {
                lidar.push(render_lidar(profile, world, k as f64 / cfg.lidar_rate, cfg, &mut rng));
            }
        }
        Sensor::Radar => {
            let n = (cfg.duration * cfg.radar_rate).floor() as usize;
            for k in 0..n {
                radar.push(render_radar_points(profile, world, k as f64 / cfg.radar_rate, cfg, &mut rng));
            }
        }
    }
    SimData {
        profile: profile.clone(),
        imu,
        biases,
        lidar,
        radar,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::{gocfar_detect, polar_to_cartesian, CfarConfig};
    use crate::imu::{gyro_error, preintegrate_velocity};
    use crate::liegroup::Twist;

    #[test]
    fn stationary_imu_measures_gravity_reaction() {
        let cfg = SimConfig { duration: 1.0, ..SimConfig::default() }.noiseless();
        let (imu, _) = sample_imu(&Profile::Stationary, &cfg);
        for s in &imu {
            assert!((s.accel - Vector3::new(0.0, 0.0, 9.8066)).norm() < 1e-12);
            assert_eq!(s.omega, Vector3::zeros());
        }
    }

    #[test]
    fn circle_gyro_is_constant() {
        let cfg = SimConfig { duration: 20.0, ..SimConfig::default() }.noiseless();
        let (imu, _) = sample_imu(&Profile::smooth_drive(), &cfg);
        for s in imu.iter().filter(|s| s.time > 6.0) {
            assert!((s.omega - Vector3::new(0.0, 0.0, 0.25)).norm() < 1e-12);
        }
    }

    #[test]
    fn bias_random_walk_variance_grows_linearly() {
        let mut finals = Vec::new();
        for seed in 0..300 {
            let cfg = SimConfig {
                duration: 4.0,
                seed,
                qb_diag: Vector6::repeat(0.01),
                ..SimConfig::default()
            };
            let (_, b) = sample_imu(&Profile::Stationary, &cfg);
            finals.push((b[400][0], b[800][0]));
        }
        let var = |f: &dyn Fn(&(f64, f64)) -> f64| finals.iter().map(|x| f(x).powi(2)).sum::<f64>() / finals.len() as f64;
        let v2 = var(&|x| x.0);
        let v4 = var(&|x| x.1);
        assert!((v2 / 0.02 - 1.0).abs() < 0.25, "{v2}");
        assert!((v4 / 0.04 - 1.0).abs() < 0.25, "{v4}");
    }

    #[test]
    fn noiseless_imu_factors_vanish_on_truth() {
        let profile = Profile::smooth_drive();
        let cfg = SimConfig { duration: 8.0, ..SimConfig::default() }.noiseless();
        let (imu, _) = sample_imu(&profile, &cfg);
        for k in 0..70 {
            let (t0, t1) = (k as f64 * 0.1, (k + 1) as f64 * 0.1);
            let seg: Vec<ImuSample> = imu.iter().copied().filter(|s| s.time >= t0 - 1e-12 && s.time < t1 - 1e-9).collect();
            let att: Vec<Matrix3<f64>> = seg.iter().map(|s| profile.state(s.time).pose.rotation).collect();
            let pre = preintegrate_velocity(&seg, &att, &Vector3::zeros(), &GRAVITY, t1, &Matrix3::identity(), false).unwrap();
            let e = profile.body_velocity(t1) - profile.body_velocity(seg[0].time) - pre.delta_nu;
            assert!(e.norm() < 1e-6, "segment {k}: {}", e.norm());
            for s in &seg {
                assert!(gyro_error(s, &profile.state(s.time).velocity, &Vector3::zeros()).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn stationary_lidar_points_lie_on_planes() {
        let world = World::room(15.0, 10.0, 4.0, -1.5, 1);
        let cfg = SimConfig::default().noiseless();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = render_lidar(&Profile::Stationary, &world, 0.0, &cfg, &mut rng);
        assert!(f.len() > 5000);
        for p in &f.points {
            let d = world.planes.iter().map(|pl| pl.signed_distance(&p.p).abs()).fold(f64::INFINITY, f64::min);
            assert!(d < 1e-9);
        }
    }

    #[test]
    fn moving_lidar_deskews_onto_planes_with_truth() {
        let world = World::ring_road(40.0, -1.8, 2);
        let profile = Profile::smooth_drive();
        let cfg = SimConfig::default().noiseless();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = render_lidar(&profile, &world, 8.0, &cfg, &mut rng);
        let dist = |x: &Vector3<f64>| world.planes.iter().map(|pl| pl.signed_distance(x).abs()).fold(f64::INFINITY, f64::min);
        let frame_pose = profile.state(8.0).pose;
        let mut raw_max: f64 = 0.0;
        for p in &f.points {
            let x = profile.state(p.time).pose.inverse_transform_point(&p.p);
            assert!(dist(&x) < 1e-9);
            raw_max = raw_max.max(dist(&frame_pose.inverse_transform_point(&p.p)));
        }
        assert!(raw_max > 0.1, "raw frame should be distorted");
    }

    #[test]
    fn radar_doppler_shift_and_correction() {
        // 20 m/s straight ahead, landmark on the boresight.
        let v = Twist::new(-20.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        let profile = Profile::ConstantVelocity { start: Pose::identity(), velocity: v };
        let world = World { planes: vec![], landmarks: vec![Vector3::new(40.0, 0.0, 0.0)] };
        let cfg = SimConfig::default().noiseless();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = render_radar_points(&profile, &world, 0.0, &cfg, &mut rng);
        assert_eq!(f.len(), 1);
        let p = f.points[0];
        assert!(p.time.abs() < 1e-12);
        assert!((p.p.x - (40.0 + 20.0 * 0.049)).abs() < 1e-9);
        let corrected = p.p + doppler_correction(&p.p, &v, &cfg.extrinsics);
        assert!((corrected.x - 40.0).abs() < 1e-9);
    }

    #[test]
    fn polar_render_round_trip_within_half_bin() {
        let profile = Profile::Stationary;
        let world = World::landmark_ring(30.0, 25.0, 8.0, 3);
        let cfg = SimConfig::default().noiseless();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let scan = render_radar_scan(&profile, &world, 0.0, &cfg, &mut rng);
        scan.validate().unwrap();
        let det = gocfar_detect(&scan, &CfarConfig { noise_floor: 50.0, ..CfarConfig::default() });
        let pts = polar_to_cartesian(&det, &scan);
        assert!(pts.len() > 20);
        let mut matched = 0;
        for p in &pts.points {
            let r = p.p.norm();
            let step = 2.0 * std::f64::consts::PI / cfg.radar_azimuths as f64;
            let best = world
                .landmarks
                .iter()
                .filter(|l| (l.y.atan2(l.x) - p.p.y.atan2(p.p.x)).sin().abs() < step && l.dot(&p.p) > 0.0)
                .map(|l| (l.norm() - r).abs())
                .fold(f64::INFINITY, f64::min);
            if best <= 0.5 * cfg.radar_resolution + 1e-9 {
                matched += 1;
            }
        }
        assert_eq!(matched, pts.len());
    }

    #[test]
    fn seeded_determinism() {
        let world = World::room(15.0, 10.0, 4.0, -1.5, 1);
        let cfg = SimConfig { duration: 0.3, ..SimConfig::default() };
        let a = simulate(&Profile::spin_aggressive(), &world, &cfg, Sensor::Lidar);
        let b = simulate(&Profile::spin_aggressive(), &world, &cfg, Sensor::Lidar);
        assert_eq!(a.imu, b.imu);
        assert_eq!(a.lidar, b.lidar);
    }
}
