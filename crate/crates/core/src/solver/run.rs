//! Whole-sequence drivers shared by the command line and the tests.

use log::warn;

use super::baseline::CvBaseline;
use super::odometry::{FrameResult, Odometry, OdometryConfig, SensorKind};
use crate::error::{Error, Result};
use crate::frontend::LidarFrame;
use crate::imu::ImuSample;

/// Runs the sliding-window estimator over time-ordered frames.
///
/// With inertial input enabled, samples in the first `gravity_init` seconds
/// after the first frame align the map with gravity (lidar only; the radar
/// platform is planar and gravity-free).
pub fn run_odometry(cfg: &OdometryConfig, frames: &[LidarFrame], imu: &[ImuSample], gravity_init: f64) -> Result<Vec<FrameResult>> {
    if cfg.use_imu && imu.is_empty() {
        return Err(Error::Config("inertial mode requires IMU samples".into()));
    }
    let mut odo = Odometry::new(cfg.clone())?;
    let Some(first) = frames.first() else {
        return Ok(Vec::new());
    };
    if cfg.use_imu && cfg.sensor == SensorKind::Lidar {
        let t0 = first.t_start;
        let a = imu.partition_point(|s| s.time < t0);
        let b = imu.partition_point(|s| s.time < t0 + gravity_init);
        odo.initialize_gravity(&imu[a..b])?;
    }
    let mut out = Vec::with_capacity(frames.len());
    let mut next = imu.partition_point(|s| s.time < first.t_start);
    for f in frames {
        let slice: &[ImuSample] = if cfg.use_imu {
            let end = imu.partition_point(|s| s.time <= f.t_end);
            let s = &imu[next.min(end)..end];
            next = end;
            s
        } else {
            &[]
        };
        if cfg.use_imu && slice.is_empty() {
            warn!("IMU dropout before t = {:.3}", f.t_end);
        }
        out.push(odo.process_frame(f, slice)?);
    }
    Ok(out)
}

/// Runs the constant-velocity baseline over time-ordered frames.
pub fn run_baseline(cfg: &OdometryConfig, frames: &[LidarFrame]) -> Result<Vec<FrameResult>> {
    let mut cv = CvBaseline::new(cfg.clone())?;
    frames.iter().map(|f| cv.process_frame(f)).collect()
}
