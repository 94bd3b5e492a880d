//! On-disk dataset: integer-indexed frame files, `imu.csv`, `calib.txt` and
//! an optional `gt.tum`, all in one directory.

use std::path::Path;

use anyhow::{bail, Context, Result};
use log::warn;
use wnoa_core::eval::Trajectory;
use wnoa_core::frontend::{gocfar_detect, polar_to_cartesian, CfarConfig, LidarFrame, PolarScan};
use wnoa_core::icp::Extrinsics;
use wnoa_core::imu::ImuSample;
use wnoa_core::io::{self, FrameFormat};
use wnoa_core::solver::SensorKind;

pub const IMU_FILE: &str = "imu.csv";
pub const CALIB_FILE: &str = "calib.txt";
pub const TRUTH_FILE: &str = "gt.tum";

pub struct Dataset {
    pub sensor: SensorKind,
    pub frames: Vec<LidarFrame>,
    pub imu: Vec<ImuSample>,
    pub extrinsics: Extrinsics,
    pub truth: Option<Trajectory>,
}

/// Sensor implied by the frame files in `dir`.
pub fn detect_sensor(dir: &Path) -> Result<SensorKind> {
    let frames = io::list_frames(dir).with_context(|| format!("listing frames in {}", dir.display()))?;
    let Some(&(_, _, fmt)) = frames.first() else {
        bail!("no frame files in {}", dir.display());
    };
    if frames.iter().any(|f| f.2 != fmt) {
        bail!("mixed frame formats in {}", dir.display());
    }
    Ok(match fmt {
        FrameFormat::Polar => SensorKind::Radar,
        FrameFormat::LidarBin | FrameFormat::LidarCsv => SensorKind::Lidar,
    })
}

/// Detections of one polar scan as a timestamped planar cloud.
pub fn radar_frame(scan: &PolarScan, cfar: &CfarConfig) -> LidarFrame {
    polar_to_cartesian(&gocfar_detect(scan, cfar), scan)
}

/// Loads at most `limit` frames; radar scans pass through CFAR detection.
pub fn load(dir: &Path, cfar: &CfarConfig, limit: Option<usize>) -> Result<Dataset> {
    let sensor = detect_sensor(dir)?;
    let mut files = io::list_frames(dir)?;
    files.truncate(limit.unwrap_or(usize::MAX));
    let mut frames = Vec::with_capacity(files.len());
    for (_, path, fmt) in &files {
        let frame = match fmt {
            FrameFormat::LidarBin => io::read_lidar_bin(path)?,
            FrameFormat::LidarCsv => io::read_lidar_csv(path)?,
            FrameFormat::Polar => radar_frame(&io::read_polar(path)?, cfar),
        };
        if let Some(prev) = frames.last().map(|f: &LidarFrame| f.t_end) {
            if frame.t_start < prev {
                bail!("{}: frame starts at {} before the previous frame ends at {prev}", path.display(), frame.t_start);
            }
        }
        frames.push(frame);
    }

    let imu_path = dir.join(IMU_FILE);
    let imu = if imu_path.exists() { io::read_imu_csv(&imu_path)? } else { Vec::new() };
    let calib_path = dir.join(CALIB_FILE);
    let extrinsics = if calib_path.exists() {
        io::read_calib(&calib_path)?
    } else {
        warn!("{} missing: identity extrinsics, no Doppler correction", calib_path.display());
        Extrinsics::default()
    };
    let truth_path = dir.join(TRUTH_FILE);
    let truth = truth_path.exists().then(|| io::read_tum(&truth_path)).transpose()?;
    Ok(Dataset {
        sensor,
        frames,
        imu,
        extrinsics,
        truth,
    })
}

/// Frames written by the simulator.
pub enum SimFrames<'a> {
    Lidar(&'a [LidarFrame]),
    Radar(&'a [PolarScan]),
}

pub fn write(dir: &Path, frames: SimFrames, imu: &[ImuSample], extrinsics: &Extrinsics) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    match frames {
        SimFrames::Lidar(frames) => {
            for (i, f) in frames.iter().enumerate() {
                io::write_lidar_bin(&dir.join(io::frame_file_name(i, FrameFormat::LidarBin)), f)?;
            }
        }
        SimFrames::Radar(scans) => {
            for (i, s) in scans.iter().enumerate() {
                io::write_polar(&dir.join(io::frame_file_name(i, FrameFormat::Polar)), s)?;
            }
        }
    }
    io::write_imu_csv(&dir.join(IMU_FILE), imu)?;
    io::write_calib(&dir.join(CALIB_FILE), extrinsics)?;
    Ok(())
}
