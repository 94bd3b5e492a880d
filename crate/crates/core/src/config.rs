//! Plain-text `key = value` configuration with dotted section keys.
//!
//! Blank lines and `#` comments are ignored. Unknown keys are errors.
//! Changing `sensor` resets every other key to that sensor's defaults, so it
//! belongs at the top of a file.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use nalgebra::Vector6;

use crate::error::{Error, Result};
use crate::frontend::CfarConfig;
use crate::gp_prior::JacobianMode;
use crate::icp::RobustLoss;
use crate::sim::{Profile, SimConfig, World};
use crate::solver::{OdometryConfig, SensorKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProfileKind {
    SmoothDrive,
    SpinAggressive,
    Stationary,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WorldKind {
    RingRoad,
    Room,
    Landmarks,
}

/// Scenario choices for the simulator beyond [`SimConfig`].
#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub profile: ProfileKind,
    pub world: WorldKind,
    pub sensor: SensorKind,
    /// Cruise speed of the smooth-drive profile (m/s).
    pub speed: f64,
    pub radius: f64,
    pub world_seed: u64,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            profile: ProfileKind::SmoothDrive,
            world: WorldKind::RingRoad,
            sensor: SensorKind::Lidar,
            speed: 10.0,
            radius: 40.0,
            world_seed: 1,
        }
    }
}

impl Scenario {
    pub fn profile(&self) -> Profile {
        match self.profile {
            ProfileKind::SmoothDrive => Profile::SmoothDrive {
                radius: self.radius,
                speed: self.speed,
                lead_in: 1.0,
                ramp: 4.0,
            },
            ProfileKind::SpinAggressive => Profile::spin_aggressive(),
            ProfileKind::Stationary => Profile::Stationary,
        }
    }

    /// The sensor sits 1.8 m above the road, 1.5 m above the room floor.
    pub fn world(&self) -> World {
        match self.world {
            WorldKind::RingRoad => World::ring_road(self.radius, -1.8, self.world_seed),
            WorldKind::Room => World::room(15.0, 10.0, 4.0, -1.5, self.world_seed),
            WorldKind::Landmarks => World::landmark_ring(self.radius, 40.0, 6.0, self.world_seed),
        }
    }
}

/// Everything a pipeline run needs.
#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub odometry: OdometryConfig,
    pub cfar: CfarConfig,
    pub sim: SimConfig,
    pub scenario: Scenario,
    /// Leading stationary IMU span used for gravity alignment (s).
    pub gravity_init_duration: f64,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            odometry: OdometryConfig::default(),
            cfar: CfarConfig::default(),
            sim: SimConfig::default(),
            scenario: Scenario::default(),
            gravity_init_duration: 0.9,
        }
    }
}

fn bad(key: &str, value: &str, why: impl Display) -> Error {
    Error::Config(format!("{key} = {value}: {why}"))
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value.parse::<T>().map_err(|e| bad(key, value, e))
}

fn flag(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(bad(key, value, "expected true or false")),
    }
}

fn opt<T: FromStr>(key: &str, value: &str) -> Result<Option<T>>
where
    T::Err: Display,
{
    if value == "none" {
        Ok(None)
    } else {
        num(key, value).map(Some)
    }
}

fn vec6(key: &str, value: &str) -> Result<Vector6<f64>> {
    let v = value
        .split(',')
        .map(|s| num::<f64>(key, s.trim()))
        .collect::<Result<Vec<_>>>()?;
    if v.len() != 6 {
        return Err(bad(key, value, "expected 6 comma-separated values"));
    }
    Ok(Vector6::from_row_slice(&v))
}

fn loss(key: &str, value: &str) -> Result<RobustLoss> {
    let (name, arg) = value.split_once(':').unwrap_or((value, ""));
    let scale = || num::<f64>(key, arg);
    match name {
        "none" => Ok(RobustLoss::None),
        "cauchy" => Ok(RobustLoss::Cauchy(scale()?)),
        "huber" => Ok(RobustLoss::Huber(scale()?)),
        _ => Err(bad(key, value, "expected none, cauchy:<c> or huber:<c>")),
    }
}

fn show_loss(l: &RobustLoss) -> String {
    match l {
        RobustLoss::None => "none".into(),
        RobustLoss::Cauchy(c) => format!("cauchy:{c}"),
        RobustLoss::Huber(c) => format!("huber:{c}"),
    }
}

fn show_opt<T: Display>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "none".into(), |x| x.to_string())
}

fn show_vec6(v: &Vector6<f64>) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl Config {
    /// Defaults for a sensor: radar selects planar-map radar settings.
    pub fn for_sensor(sensor: SensorKind) -> Self {
        let mut c = Self::default();
        if sensor == SensorKind::Radar {
            c.odometry = OdometryConfig::radar();
            c.scenario.sensor = SensorKind::Radar;
            c.scenario.world = WorldKind::Landmarks;
            c.scenario.speed = 20.0;
            c.scenario.radius = 200.0;
            c.sim.imu_gravity = false;
        }
        c
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut c = Self::default();
        c.apply_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(c)
    }

    /// Applies every `key = value` line of `text` on top of the current values.
    pub fn apply_str(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        self.odometry.validate()
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let o = &mut self.odometry;
        let s = &mut self.sim;
        match key {
            "seed" => {
                let seed = num(key, v)?;
                o.seed = seed;
                s.seed = seed;
            }
            "sensor" => {
                let sensor = match v {
                    "lidar" => SensorKind::Lidar,
                    "radar" => SensorKind::Radar,
                    _ => return Err(bad(key, v, "expected lidar or radar")),
                };
                if sensor != o.sensor {
                    let (odo_seed, sim_seed) = (o.seed, s.seed);
                    *self = Self::for_sensor(sensor);
                    self.odometry.seed = odo_seed;
                    self.sim.seed = sim_seed;
                }
            }
            "solver.inner_max" => o.inner.max_iterations = num(key, v)?,
            "solver.inner_step_tol" => o.inner.step_tol = num(key, v)?,
            "solver.inner_cost_tol" => o.inner.cost_tol = num(key, v)?,
            "solver.outer_max" => o.outer_max = num(key, v)?,
            "solver.outer_tol" => o.outer_tol = num(key, v)?,
            "solver.window_frames" => o.window_frames = num(key, v)?,
            "solver.extra_knots" => o.extra_knots = num(key, v)?,
            "solver.damping" => o.window.damping = num(key, v)?,
            "solver.damping_retries" => o.window.damping_retries = num(key, v)?,
            "solver.renormalize_every" => o.window.renormalize_every = num(key, v)?,
            "solver.compute_covariance" => o.compute_covariance = flag(key, v)?,
            "solver.jacobians" => {
                o.window.jacobian_mode = match v {
                    "exact" => JacobianMode::Exact,
                    "first_order" => JacobianMode::FirstOrder,
                    _ => return Err(bad(key, v, "expected exact or first_order")),
                }
            }
            "prior.q_diag" => o.window.prior.q_diag = vec6(key, v)?,
            "prior.qb_diag" => o.window.prior.qb_diag = vec6(key, v)?,
            "map.voxel_size" => o.map.voxel_size = num(key, v)?,
            "map.max_points_per_voxel" => o.map.max_points_per_voxel = num(key, v)?,
            "map.min_point_distance" => o.map.min_point_distance = num(key, v)?,
            "map.expiry_frames" => o.map.expiry_frames = opt(key, v)?,
            "map.planar" => o.map.planar = flag(key, v)?,
            "map.keyframe_distance" => o.keyframe_distance = opt(key, v)?,
            "frontend.crop_min" => o.crop = Some((num(key, v)?, o.crop.map_or(f64::INFINITY, |c| c.1))),
            "frontend.crop_max" => o.crop = Some((o.crop.map_or(0.0, |c| c.0), num(key, v)?)),
            "frontend.crop" => match v {
                "none" => o.crop = None,
                _ => return Err(bad(key, v, "only 'none' is accepted; use crop_min/crop_max")),
            },
            "frontend.downsample_voxel" => o.downsample_voxel = opt(key, v)?,
            "frontend.timestamp_freq" => o.timestamp_freq = opt(key, v)?,
            "cfar.train_cells" => self.cfar.train_cells = num(key, v)?,
            "cfar.guard_cells" => self.cfar.guard_cells = num(key, v)?,
            "cfar.threshold" => self.cfar.threshold_factor = num(key, v)?,
            "cfar.noise_floor" => self.cfar.noise_floor = num(key, v)?,
            "icp.knn" => o.knn = num(key, v)?,
            "icp.max_corr_voxels" => o.max_corr_voxels = num(key, v)?,
            "icp.p2plane_var" => o.p2plane_var = num(key, v)?,
            "icp.lidar_loss" => o.lidar_loss = loss(key, v)?,
            "icp.radar_var" => o.radar_var = num(key, v)?,
            "icp.radar_loss" => o.radar_loss = loss(key, v)?,
            "imu.use" => o.use_imu = flag(key, v)?,
            "imu.gyro_var" => o.imu_noise.r_omega = nalgebra::Matrix3::identity() * num::<f64>(key, v)?,
            "imu.accel_var" => o.imu_noise.r_accel = nalgebra::Matrix3::identity() * num::<f64>(key, v)?,
            "gravity.init_duration" => self.gravity_init_duration = num(key, v)?,
            "gravity.min_samples" => o.gravity.min_samples = num(key, v)?,
            "init.pose_sigma" => o.init_pose_sigma = num(key, v)?,
            "init.velocity_sigma" => o.init_velocity_sigma = num(key, v)?,
            "init.accel_bias_sigma" => o.init_accel_bias_sigma = num(key, v)?,
            "init.gyro_bias_sigma" => o.init_gyro_bias_sigma = num(key, v)?,
            "sim.duration" => s.duration = num(key, v)?,
            "sim.imu_rate" => s.imu_rate = num(key, v)?,
            "sim.imu_gravity" => s.imu_gravity = flag(key, v)?,
            "sim.gyro_sigma" => s.gyro_sigma = num(key, v)?,
            "sim.accel_sigma" => s.accel_sigma = num(key, v)?,
            "sim.qb_diag" => s.qb_diag = vec6(key, v)?,
            "sim.lidar_rate" => s.lidar_rate = num(key, v)?,
            "sim.lidar_beams" => s.lidar_beams = num(key, v)?,
            "sim.lidar_columns" => s.lidar_columns = num(key, v)?,
            "sim.lidar_max_range" => s.lidar_max_range = num(key, v)?,
            "sim.lidar_sigma" => s.lidar_sigma = num(key, v)?,
            "sim.radar_rate" => s.radar_rate = num(key, v)?,
            "sim.radar_azimuths" => s.radar_azimuths = num(key, v)?,
            "sim.radar_range_bins" => s.radar_range_bins = num(key, v)?,
            "sim.radar_resolution" => s.radar_resolution = num(key, v)?,
            "sim.radar_range_sigma" => s.radar_range_sigma = num(key, v)?,
            "sim.radar_azimuth_sigma" => s.radar_azimuth_sigma = num(key, v)?,
            "sim.beta" => s.extrinsics.beta = num(key, v)?,
            "sim.profile" => {
                self.scenario.profile = match v {
                    "smooth_drive" => ProfileKind::SmoothDrive,
                    "spin" => ProfileKind::SpinAggressive,
                    "stationary" => ProfileKind::Stationary,
                    _ => return Err(bad(key, v, "expected smooth_drive, spin or stationary")),
                }
            }
            "sim.world" => {
                self.scenario.world = match v {
                    "ring_road" => WorldKind::RingRoad,
                    "room" => WorldKind::Room,
                    "landmarks" => WorldKind::Landmarks,
                    _ => return Err(bad(key, v, "expected ring_road, room or landmarks")),
                }
            }
            "sim.speed" => self.scenario.speed = num(key, v)?,
            "sim.radius" => self.scenario.radius = num(key, v)?,
            "sim.world_seed" => self.scenario.world_seed = num(key, v)?,
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Every settable key with its current value, in a form [`Config::set`] accepts.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let o = &self.odometry;
        let s = &self.sim;
        let sensor = match o.sensor {
            SensorKind::Lidar => "lidar",
            SensorKind::Radar => "radar",
        };
        let mut e: Vec<(&'static str, String)> = vec![
            ("sensor", sensor.into()),
            ("seed", o.seed.to_string()),
            ("solver.inner_max", o.inner.max_iterations.to_string()),
            ("solver.inner_step_tol", o.inner.step_tol.to_string()),
            ("solver.inner_cost_tol", o.inner.cost_tol.to_string()),
            ("solver.outer_max", o.outer_max.to_string()),
            ("solver.outer_tol", o.outer_tol.to_string()),
            ("solver.window_frames", o.window_frames.to_string()),
            ("solver.extra_knots", o.extra_knots.to_string()),
            ("solver.damping", o.window.damping.to_string()),
            ("solver.damping_retries", o.window.damping_retries.to_string()),
            ("solver.renormalize_every", o.window.renormalize_every.to_string()),
            ("solver.compute_covariance", o.compute_covariance.to_string()),
            (
                "solver.jacobians",
                match o.window.jacobian_mode {
                    JacobianMode::Exact => "exact",
                    JacobianMode::FirstOrder => "first_order",
                }
                .into(),
            ),
            ("prior.q_diag", show_vec6(&o.window.prior.q_diag)),
            ("prior.qb_diag", show_vec6(&o.window.prior.qb_diag)),
            ("map.voxel_size", o.map.voxel_size.to_string()),
            ("map.max_points_per_voxel", o.map.max_points_per_voxel.to_string()),
            ("map.min_point_distance", o.map.min_point_distance.to_string()),
            ("map.expiry_frames", show_opt(&o.map.expiry_frames)),
            ("map.planar", o.map.planar.to_string()),
            ("map.keyframe_distance", show_opt(&o.keyframe_distance)),
        ];
        match o.crop {
            Some((lo, hi)) => {
                e.push(("frontend.crop_min", lo.to_string()));
                e.push(("frontend.crop_max", hi.to_string()));
            }
            None => e.push(("frontend.crop", "none".into())),
        }
        e.extend([
            ("frontend.downsample_voxel", show_opt(&o.downsample_voxel)),
            ("frontend.timestamp_freq", show_opt(&o.timestamp_freq)),
            ("cfar.train_cells", self.cfar.train_cells.to_string()),
            ("cfar.guard_cells", self.cfar.guard_cells.to_string()),
            ("cfar.threshold", self.cfar.threshold_factor.to_string()),
            ("cfar.noise_floor", self.cfar.noise_floor.to_string()),
            ("icp.knn", o.knn.to_string()),
            ("icp.max_corr_voxels", o.max_corr_voxels.to_string()),
            ("icp.p2plane_var", o.p2plane_var.to_string()),
            ("icp.lidar_loss", show_loss(&o.lidar_loss)),
            ("icp.radar_var", o.radar_var.to_string()),
            ("icp.radar_loss", show_loss(&o.radar_loss)),
            ("imu.use", o.use_imu.to_string()),
            ("imu.gyro_var", o.imu_noise.r_omega[(0, 0)].to_string()),
            ("imu.accel_var", o.imu_noise.r_accel[(0, 0)].to_string()),
            ("gravity.init_duration", self.gravity_init_duration.to_string()),
            ("gravity.min_samples", o.gravity.min_samples.to_string()),
            ("init.pose_sigma", o.init_pose_sigma.to_string()),
            ("init.velocity_sigma", o.init_velocity_sigma.to_string()),
            ("init.accel_bias_sigma", o.init_accel_bias_sigma.to_string()),
            ("init.gyro_bias_sigma", o.init_gyro_bias_sigma.to_string()),
            ("sim.duration", s.duration.to_string()),
            ("sim.imu_rate", s.imu_rate.to_string()),
            ("sim.imu_gravity", s.imu_gravity.to_string()),
            ("sim.gyro_sigma", s.gyro_sigma.to_string()),
            ("sim.accel_sigma", s.accel_sigma.to_string()),
            ("sim.qb_diag", show_vec6(&s.qb_diag)),
            ("sim.lidar_rate", s.lidar_rate.to_string()),
            ("sim.lidar_beams", s.lidar_beams.to_string()),
            ("sim.lidar_columns", s.lidar_columns.to_string()),
            ("sim.lidar_max_range", s.lidar_max_range.to_string()),
            ("sim.lidar_sigma", s.lidar_sigma.to_string()),
            ("sim.radar_rate", s.radar_rate.to_string()),
            ("sim.radar_azimuths", s.radar_azimuths.to_string()),
            ("sim.radar_range_bins", s.radar_range_bins.to_string()),
            ("sim.radar_resolution", s.radar_resolution.to_string()),
            ("sim.radar_range_sigma", s.radar_range_sigma.to_string()),
            ("sim.radar_azimuth_sigma", s.radar_azimuth_sigma.to_string()),
            ("sim.beta", s.extrinsics.beta.to_string()),
            (
                "sim.profile",
                match self.scenario.profile {
                    ProfileKind::SmoothDrive => "smooth_drive",
                    ProfileKind::SpinAggressive => "spin",
                    ProfileKind::Stationary => "stationary",
                }
                .into(),
            ),
            (
                "sim.world",
                match self.scenario.world {
                    WorldKind::RingRoad => "ring_road",
                    WorldKind::Room => "room",
                    WorldKind::Landmarks => "landmarks",
                }
                .into(),
            ),
            ("sim.speed", self.scenario.speed.to_string()),
            ("sim.radius", self.scenario.radius.to_string()),
            ("sim.world_seed", self.scenario.world_seed.to_string()),
        ]);
        e
    }

    /// Serialized form accepted by [`Config::apply_str`].
    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_dotted_keys_and_comments() {
        let mut c = Config::default();
        c.apply_str("# solver\nsolver.inner_max = 7   # trailing\n\nicp.lidar_loss = huber:0.5\nmap.expiry_frames = none\n")
            .unwrap();
        assert_eq!(c.odometry.inner.max_iterations, 7);
        assert_eq!(c.odometry.lidar_loss, RobustLoss::Huber(0.5));
        assert_eq!(c.odometry.map.expiry_frames, None);
    }

    #[test]
    fn unknown_key_reports_line() {
        let err = Config::default().apply_str("solver.inner_max = 3\nsolver.bogus = 1\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 2") && msg.contains("solver.bogus"), "{msg}");
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(Config::default().apply_str("solver.inner_max = many").is_err());
        assert!(Config::default().apply_str("prior.q_diag = 1,2,3").is_err());
        assert!(Config::default().apply_str("solver.window_frames = 0").is_err());
        assert!(Config::default().apply_str("no equals sign").is_err());
    }

    #[test]
    fn sensor_switch_selects_radar_defaults() {
        let mut c = Config::default();
        c.apply_str("seed = 9\nsensor = radar\n").unwrap();
        assert!(c.odometry.map.planar);
        assert_eq!(c.odometry.seed, 9);
        assert_eq!(c.sim.seed, 9);
        assert_eq!(c.scenario.world, WorldKind::Landmarks);
        assert!(!c.sim.imu_gravity);
    }

    #[test]
    fn text_round_trip_of_defaults() {
        for c in [Config::default(), Config::for_sensor(SensorKind::Radar)] {
            let mut back = Config::default();
            back.apply_str(&c.to_text()).unwrap();
            assert_eq!(back, c);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn text_round_trip(inner in 1usize..20, tol in 1e-9f64..1e-2, voxel in 0.1f64..5.0, q in 0.1f64..100.0, seed in any::<u64>()) {
            let mut c = Config::default();
            c.odometry.inner.max_iterations = inner;
            c.odometry.outer_tol = tol;
            c.odometry.map.voxel_size = voxel;
            c.odometry.window.prior.q_diag[2] = q;
            c.odometry.seed = seed;
            c.sim.seed = seed;
            let mut back = Config::default();
            back.apply_str(&c.to_text()).unwrap();
            prop_assert_eq!(back, c);
        }
    }
}
