//! File formats: lidar frames, polar radar scans, IMU CSV, calibration,
//! TUM/KITTI trajectories, diagnostics and metrics reports.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};

use crate::error::{Error, Result};
use crate::eval::{ErrorSample, Trajectory};
use crate::frontend::{LidarFrame, PolarScan, SensorPoint};
use crate::icp::Extrinsics;
use crate::imu::ImuSample;
use crate::liegroup::Pose;
use crate::solver::FrameDiagnostics;

fn parse_err(file: &Path, record: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        file: file.to_path_buf(),
        record,
        msg: msg.into(),
    }
}

fn parse_f64(file: &Path, record: usize, field: &str) -> Result<f64> {
    field
        .trim()
        .parse::<f64>()
        .map_err(|e| parse_err(file, record, format!("'{field}': {e}")))
}

fn csv_err(file: &Path, e: csv::Error) -> Error {
    let record = e.position().map_or(0, |p| p.record() as usize);
    parse_err(file, record, e.to_string())
}

/// Reads a headed numeric CSV, checking the header names.
fn read_numeric_csv(path: &Path, header: &[&str]) -> Result<Vec<Vec<f64>>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let got = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    if got.iter().collect::<Vec<_>>() != header {
        return Err(parse_err(
            path,
            0,
            format!("expected header {}, got {}", header.join(","), got.iter().collect::<Vec<_>>().join(",")),
        ));
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        if rec.len() != header.len() {
            return Err(parse_err(path, i + 1, format!("expected {} fields, got {}", header.len(), rec.len())));
        }
        rows.push(rec.iter().map(|f| parse_f64(path, i + 1, f)).collect::<Result<Vec<_>>>()?);
    }
    Ok(rows)
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    csv::Writer::from_path(path).map_err(|e| csv_err(path, e))
}

fn write_rows(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record(&r).map_err(|e| csv_err(path, e))?;
    }
    w.flush()?;
    Ok(())
}

const LIDAR_RECORD: usize = 4 * 4 + 8;

/// Binary lidar frame: little-endian `[f32 x, y, z, intensity; f64 t]` records.
pub fn read_lidar_bin(path: &Path) -> Result<LidarFrame> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() % LIDAR_RECORD != 0 {
        return Err(parse_err(
            path,
            bytes.len() / LIDAR_RECORD,
            format!("truncated record ({} trailing bytes)", bytes.len() % LIDAR_RECORD),
        ));
    }
    let f32_at = |b: &[u8], o: usize| f32::from_le_bytes(b[o..o + 4].try_into().expect("4 bytes")) as f64;
    let points = bytes
        .chunks_exact(LIDAR_RECORD)
        .map(|r| SensorPoint {
            p: Vector3::new(f32_at(r, 0), f32_at(r, 4), f32_at(r, 8)),
            intensity: f32_at(r, 12),
            time: f64::from_le_bytes(r[16..24].try_into().expect("8 bytes")),
        })
        .collect::<Vec<_>>();
    if let Some(i) = points.iter().position(|p| !(p.p.iter().all(|c| c.is_finite()) && p.time.is_finite())) {
        return Err(parse_err(path, i, "non-finite value"));
    }
    Ok(LidarFrame::from_points(points))
}

pub fn write_lidar_bin(path: &Path, frame: &LidarFrame) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for p in &frame.points {
        for c in [p.p.x, p.p.y, p.p.z, p.intensity] {
            w.write_all(&(c as f32).to_le_bytes())?;
        }
        w.write_all(&p.time.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// KITTI velodyne scan: little-endian `f32 [x, y, z, reflectance]` records
/// without timestamps. Point times are recovered from azimuth assuming a
/// clockwise sweep that starts and ends behind the sensor.
pub fn read_kitti_velodyne(path: &Path, t_start: f64, period: f64) -> Result<LidarFrame> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() % 16 != 0 {
        return Err(parse_err(path, bytes.len() / 16, "truncated record"));
    }
    let f32_at = |b: &[u8], o: usize| f32::from_le_bytes(b[o..o + 4].try_into().expect("4 bytes")) as f64;
    let points = bytes
        .chunks_exact(16)
        .map(|r| {
            let p = Vector3::new(f32_at(r, 0), f32_at(r, 4), f32_at(r, 8));
            let frac = (0.5 - p.y.atan2(p.x) / (2.0 * std::f64::consts::PI)).clamp(0.0, 1.0);
            SensorPoint {
                p,
                intensity: f32_at(r, 12),
                time: t_start + frac * period,
            }
        })
        .filter(|sp| sp.p.iter().all(|c| c.is_finite()))
        .collect();
    Ok(LidarFrame::new(points, t_start, t_start + period))
}

/// KITTI `times.txt`: one timestamp per line.
pub fn read_kitti_times(path: &Path) -> Result<Vec<f64>> {
    read_number_lines(path)?
        .into_iter()
        .map(|(line, v)| match v.as_slice() {
            [t] => Ok(*t),
            _ => Err(parse_err(path, line, "expected one value")),
        })
        .collect()
}

/// The `Tr:` lidar-to-camera transform of a KITTI odometry `calib.txt`.
pub fn read_kitti_lidar_to_camera(path: &Path) -> Result<Pose> {
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if let Some(rest) = line.strip_prefix("Tr:") {
            let v = rest
                .split_whitespace()
                .map(|f| parse_f64(path, i + 1, f))
                .collect::<Result<Vec<_>>>()?;
            if v.len() != 12 {
                return Err(parse_err(path, i + 1, format!("expected 12 values, got {}", v.len())));
            }
            return Ok(pose_from_rows(&v));
        }
    }
    Err(parse_err(path, 0, "no 'Tr:' line"))
}

const LIDAR_HEADER: [&str; 5] = ["x", "y", "z", "intensity", "t"];

/// CSV lidar frame with header `x,y,z,intensity,t`.
pub fn read_lidar_csv(path: &Path) -> Result<LidarFrame> {
    let points = read_numeric_csv(path, &LIDAR_HEADER)?
        .into_iter()
        .map(|r| SensorPoint {
            p: Vector3::new(r[0], r[1], r[2]),
            intensity: r[3],
            time: r[4],
        })
        .collect();
    Ok(LidarFrame::from_points(points))
}

pub fn write_lidar_csv(path: &Path, frame: &LidarFrame) -> Result<()> {
    write_rows(
        path,
        &LIDAR_HEADER,
        frame.points.iter().map(|p| {
            vec![
                p.p.x.to_string(),
                p.p.y.to_string(),
                p.p.z.to_string(),
                p.intensity.to_string(),
                p.time.to_string(),
            ]
        }),
    )
}

/// Polar scan: `u32 A, u32 R, f64 resolution`, `f64 azimuth_times[A]`,
/// `f64 azimuth_angles[A]`, `u8 power[A x R]` (little-endian, row per azimuth).
pub fn read_polar(path: &Path) -> Result<PolarScan> {
    let mut r = BufReader::new(File::open(path)?);
    let mut u32b = [0u8; 4];
    let mut f64b = [0u8; 8];
    let short = |e: std::io::Error, rec: usize| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            parse_err(path, rec, "file ends early")
        } else {
            Error::Io(e)
        }
    };
    r.read_exact(&mut u32b).map_err(|e| short(e, 0))?;
    let a = u32::from_le_bytes(u32b) as usize;
    r.read_exact(&mut u32b).map_err(|e| short(e, 0))?;
    let bins = u32::from_le_bytes(u32b) as usize;
    r.read_exact(&mut f64b).map_err(|e| short(e, 0))?;
    let res = f64::from_le_bytes(f64b);
    let mut scan = PolarScan::new(a, bins, res);
    for i in 0..a {
        r.read_exact(&mut f64b).map_err(|e| short(e, i))?;
        scan.azimuth_times[i] = f64::from_le_bytes(f64b);
    }
    for i in 0..a {
        r.read_exact(&mut f64b).map_err(|e| short(e, i))?;
        scan.azimuth_angles[i] = f64::from_le_bytes(f64b);
    }
    for i in 0..a {
        r.read_exact(scan.row_mut(i)).map_err(|e| short(e, i))?;
    }
    if r.read(&mut [0u8; 1])? != 0 {
        return Err(parse_err(path, a, "trailing bytes after power rows"));
    }
    scan.validate().map_err(|e| parse_err(path, 0, e.to_string()))?;
    Ok(scan)
}

pub fn write_polar(path: &Path, scan: &PolarScan) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&(scan.azimuths as u32).to_le_bytes())?;
    w.write_all(&(scan.range_bins as u32).to_le_bytes())?;
    w.write_all(&scan.range_resolution.to_le_bytes())?;
    for t in &scan.azimuth_times {
        w.write_all(&t.to_le_bytes())?;
    }
    for a in &scan.azimuth_angles {
        w.write_all(&a.to_le_bytes())?;
    }
    w.write_all(&scan.power)?;
    w.flush()?;
    Ok(())
}

const IMU_HEADER: [&str; 7] = ["t", "wx", "wy", "wz", "ax", "ay", "az"];

/// IMU CSV with header `t,wx,wy,wz,ax,ay,az`; samples must be time-sorted.
pub fn read_imu_csv(path: &Path) -> Result<Vec<ImuSample>> {
    let rows = read_numeric_csv(path, &IMU_HEADER)?;
    let samples: Vec<ImuSample> = rows
        .into_iter()
        .map(|r| ImuSample {
            time: r[0],
            omega: Vector3::new(r[1], r[2], r[3]),
            accel: Vector3::new(r[4], r[5], r[6]),
        })
        .collect();
    if let Some(i) = samples.windows(2).position(|w| w[1].time < w[0].time) {
        return Err(parse_err(path, i + 2, "timestamps not sorted"));
    }
    Ok(samples)
}

pub fn write_imu_csv(path: &Path, samples: &[ImuSample]) -> Result<()> {
    write_rows(
        path,
        &IMU_HEADER,
        samples.iter().map(|s| {
            [s.time, s.omega.x, s.omega.y, s.omega.z, s.accel.x, s.accel.y, s.accel.z]
                .iter()
                .map(|v| v.to_string())
                .collect()
        }),
    )
}

/// Reads whitespace-separated numeric lines, skipping blanks and `#` comments.
fn read_number_lines(path: &Path) -> Result<Vec<(usize, Vec<f64>)>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals = line
            .split_whitespace()
            .map(|f| parse_f64(path, i + 1, f))
            .collect::<Result<Vec<_>>>()?;
        out.push((i + 1, vals));
    }
    Ok(out)
}

fn pose_from_rows(v: &[f64]) -> Pose {
    let r = Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]);
    Pose::new(r, Vector3::new(v[3], v[7], v[11])).normalized()
}

fn pose_rows(p: &Pose) -> [f64; 12] {
    let (r, t) = (&p.rotation, &p.translation);
    [
        r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x,
        r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y,
        r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z,
    ]
}

fn join(vals: &[f64]) -> String {
    vals.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ")
}

/// TUM trajectory `t x y z qx qy qz qw` (world-from-vehicle).
pub fn read_tum(path: &Path) -> Result<Trajectory> {
    let mut stamps = Vec::new();
    let mut poses = Vec::new();
    for (line, v) in read_number_lines(path)? {
        if v.len() != 8 {
            return Err(parse_err(path, line, format!("expected 8 fields, got {}", v.len())));
        }
        let q = nalgebra::Quaternion::new(v[7], v[4], v[5], v[6]);
        if q.norm() < 1e-9 {
            return Err(parse_err(path, line, "zero quaternion"));
        }
        let r = UnitQuaternion::from_quaternion(q).to_rotation_matrix().into_inner();
        stamps.push(v[0]);
        poses.push(Pose::new(r, Vector3::new(v[1], v[2], v[3])));
    }
    Trajectory::new(stamps, poses).map_err(|e| parse_err(path, 0, e.to_string()))
}

pub fn write_tum(path: &Path, tr: &Trajectory) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for (t, p) in tr.stamps.iter().zip(&tr.poses) {
        let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(p.rotation));
        let x = &p.translation;
        writeln!(w, "{t} {}", join(&[x.x, x.y, x.z, q.i, q.j, q.k, q.w]))?;
    }
    w.flush()?;
    Ok(())
}

/// KITTI poses: 12 row-major floats of a 3x4 world-from-vehicle matrix per line.
pub fn read_kitti(path: &Path) -> Result<Vec<Pose>> {
    read_number_lines(path)?
        .into_iter()
        .map(|(line, v)| {
            if v.len() != 12 {
                return Err(parse_err(path, line, format!("expected 12 fields, got {}", v.len())));
            }
            Ok(pose_from_rows(&v))
        })
        .collect()
}

pub fn write_kitti(path: &Path, poses: &[Pose]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for p in poses {
        writeln!(w, "{}", join(&pose_rows(p)))?;
    }
    w.flush()?;
    Ok(())
}

/// `calib.txt`: sensor-to-vehicle `T_vs` as 12 row-major floats followed by
/// the Doppler constant `beta` (defaults to 0 when absent).
pub fn read_calib(path: &Path) -> Result<Extrinsics> {
    let vals: Vec<f64> = read_number_lines(path)?.into_iter().flat_map(|(_, v)| v).collect();
    match vals.len() {
        12 | 13 => Ok(Extrinsics {
            t_vs: pose_from_rows(&vals[..12]),
            beta: vals.get(12).copied().unwrap_or(0.0),
        }),
        n => Err(parse_err(path, 1, format!("expected 12 or 13 values, got {n}"))),
    }
}

pub fn write_calib(path: &Path, ext: &Extrinsics) -> Result<()> {
    let mut v = pose_rows(&ext.t_vs).to_vec();
    v.push(ext.beta);
    std::fs::write(path, format!("{}\n", join(&v)))?;
    Ok(())
}

const DIAG_HEADER: [&str; 9] = [
    "time",
    "inner_iterations",
    "outer_iterations",
    "cost",
    "correspondences",
    "condition",
    "wall_time",
    "degenerate",
    "damping",
];

pub fn write_diagnostics_csv(path: &Path, diags: &[FrameDiagnostics]) -> Result<()> {
    write_rows(
        path,
        &DIAG_HEADER,
        diags.iter().map(|d| {
            vec![
                d.time.to_string(),
                d.inner_iterations.to_string(),
                d.outer_iterations.to_string(),
                d.cost.to_string(),
                d.correspondences.to_string(),
                d.condition.to_string(),
                d.wall_time.to_string(),
                u8::from(d.degenerate).to_string(),
                d.damping.to_string(),
            ]
        }),
    )
}

/// `metric,value` report.
pub fn write_metrics_csv(path: &Path, metrics: &[(&str, f64)]) -> Result<()> {
    write_rows(path, &["metric", "value"], metrics.iter().map(|(k, v)| vec![k.to_string(), v.to_string()]))
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<(String, f64)>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        if rec.len() != 2 {
            return Err(parse_err(path, i + 1, "expected metric,value"));
        }
        out.push((rec[0].to_string(), parse_f64(path, i + 1, &rec[1])?));
    }
    Ok(out)
}

/// Plot-ready `time,translation_error,rotation_error_deg` table.
pub fn write_error_csv(path: &Path, samples: &[ErrorSample]) -> Result<()> {
    write_rows(
        path,
        &["time", "translation_error", "rotation_error_deg"],
        samples
            .iter()
            .map(|s| vec![s.time.to_string(), s.translation.to_string(), s.rotation_deg.to_string()]),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrameFormat {
    LidarBin,
    LidarCsv,
    Polar,
}

impl FrameFormat {
    pub fn extension(self) -> &'static str {
        match self {
            FrameFormat::LidarBin => "bin",
            FrameFormat::LidarCsv => "csv",
            FrameFormat::Polar => "polar",
        }
    }

    fn from_extension(ext: &str) -> Option<Self> {
        match ext {
            "bin" => Some(FrameFormat::LidarBin),
            "csv" => Some(FrameFormat::LidarCsv),
            "polar" => Some(FrameFormat::Polar),
            _ => None,
        }
    }
}

/// Frame files in `dir` whose stem is an integer index, sorted by index.
pub fn list_frames(dir: &Path) -> Result<Vec<(usize, PathBuf, FrameFormat)>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let (Some(stem), Some(ext)) = (
            path.file_stem().and_then(|s| s.to_str()),
            path.extension().and_then(|s| s.to_str()),
        ) else {
            continue;
        };
        let (Ok(idx), Some(fmt)) = (stem.parse::<usize>(), FrameFormat::from_extension(ext)) else {
            continue;
        };
        out.push((idx, path, fmt));
    }
    out.sort_by_key(|e| e.0);
    if let Some(w) = out.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(Error::Format(format!(
            "duplicate frame index {} ({} and {})",
            w[0].0,
            w[0].1.display(),
            w[1].1.display()
        )));
    }
    Ok(out)
}

pub fn frame_file_name(index: usize, fmt: FrameFormat) -> String {
    format!("{index:06}.{}", fmt.extension())
}
