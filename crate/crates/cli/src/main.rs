//! `wnoa`: simulate datasets, run lidar/radar(-inertial) odometry and
//! evaluate trajectories.

mod dataset;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, ValueEnum};
use log::info;
use wnoa_core::config::Config;
use wnoa_core::eval::{self, Trajectory};
use wnoa_core::io;
use wnoa_core::sim::{simulate, simulate_radar_scans, Sensor};
use wnoa_core::solver::{run_baseline, run_odometry, FrameResult, SensorKind};

use dataset::{Dataset, SimFrames};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Mode {
    Lo,
    Lio,
    Ro,
    Rio,
    CvBaseline,
    Simulate,
    Evaluate,
}

impl Mode {
    fn sensor(self) -> Option<SensorKind> {
        match self {
            Mode::Lo | Mode::Lio => Some(SensorKind::Lidar),
            Mode::Ro | Mode::Rio => Some(SensorKind::Radar),
            _ => None,
        }
    }

    fn inertial(self) -> bool {
        matches!(self, Mode::Lio | Mode::Rio)
    }

    fn name(self) -> &'static str {
        match self {
            Mode::Lo => "lo",
            Mode::Lio => "lio",
            Mode::Ro => "ro",
            Mode::Rio => "rio",
            Mode::CvBaseline => "cv-baseline",
            Mode::Simulate => "simulate",
            Mode::Evaluate => "evaluate",
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "wnoa", version, about = "Continuous-time lidar/radar-inertial odometry")]
struct Args {
    #[arg(long, value_enum)]
    mode: Mode,
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory (input of odometry and evaluate modes).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory (dataset directory for simulate).
    #[arg(long)]
    out: PathBuf,
    /// Overrides the `seed` key.
    #[arg(long)]
    seed: Option<u64>,
    /// Uses only the first N frames.
    #[arg(long)]
    frames: Option<usize>,
    /// Writes per-frame solver diagnostics.
    #[arg(long)]
    diag: bool,
    /// Trajectory to evaluate (default `<out>/trajectory.tum`).
    #[arg(long)]
    estimate: Option<PathBuf>,
}

const TRAJECTORY_TUM: &str = "trajectory.tum";
const TRAJECTORY_KITTI: &str = "trajectory.kitti";
const METRICS: &str = "metrics.csv";
const DIAGNOSTICS: &str = "diagnostics.csv";
const ERRORS: &str = "errors.csv";
/// Estimate and ground-truth stamps closer than this are associated (s).
const MATCH_DT: f64 = 1e-3;

/// Defaults for `sensor`, then the config file, then the seed flag.
fn load_config(args: &Args, sensor: SensorKind) -> Result<Config> {
    let mut cfg = Config::for_sensor(sensor);
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        cfg.apply_str(&text)
            .map_err(|e| wnoa_core::Error::Config(format!("{}: {e}", path.display())))?;
    }
    if let Some(seed) = args.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    Ok(cfg)
}

fn data_dir(args: &Args) -> Result<&Path> {
    match &args.data {
        Some(d) => Ok(d),
        None => Err(wnoa_core::Error::Config(format!("mode {} requires --data", args.mode.name())).into()),
    }
}

fn sensor_name(s: SensorKind) -> &'static str {
    match s {
        SensorKind::Lidar => "lidar",
        SensorKind::Radar => "radar",
    }
}

fn simulate_mode(args: &Args) -> Result<()> {
    let mut cfg = load_config(args, SensorKind::Lidar)?;
    if let Some(n) = args.frames {
        let rate = match cfg.scenario.sensor {
            SensorKind::Lidar => cfg.sim.lidar_rate,
            SensorKind::Radar => cfg.sim.radar_rate,
        };
        cfg.sim.duration = cfg.sim.duration.min(n as f64 / rate);
    }
    let profile = cfg.scenario.profile();
    let world = cfg.scenario.world();
    info!("simulating {:.1} s of {}", cfg.sim.duration, sensor_name(cfg.scenario.sensor));
    match cfg.scenario.sensor {
        SensorKind::Lidar => {
            let data = simulate(&profile, &world, &cfg.sim, Sensor::Lidar);
            dataset::write(&args.out, SimFrames::Lidar(&data.lidar), &data.imu, &cfg.sim.extrinsics)?;
        }
        SensorKind::Radar => {
            let scans = simulate_radar_scans(&profile, &world, &cfg.sim);
            let (imu, _) = wnoa_core::sim::sample_imu(&profile, &cfg.sim);
            dataset::write(&args.out, SimFrames::Radar(&scans), &imu, &cfg.sim.extrinsics)?;
        }
    }
    // ground truth at the mid time of each frame as it will be read back
    let ds = dataset::load(&args.out, &cfg.cfar, None)?;
    let truth = Trajectory::from_vehicle_poses(ds.frames.iter().map(|f| {
        let t = f.mid_time();
        (t, profile.state(t).pose)
    }))?;
    io::write_tum(&args.out.join(dataset::TRUTH_FILE), &truth)?;
    std::fs::write(args.out.join("config.txt"), cfg.to_text())?;
    println!("wrote {} frames to {}", ds.frames.len(), args.out.display());
    Ok(())
}

/// Accuracy metrics of `est` against `gt` on timestamp-associated poses.
fn accuracy_metrics(est: &Trajectory, gt: &Trajectory) -> Result<Vec<(&'static str, f64)>> {
    let (e, g) = eval::matched(est, gt, MATCH_DT);
    if e.len() < 3 {
        bail!("only {} estimated poses match ground-truth timestamps", e.len());
    }
    let rte = eval::kitti_rte(&e.poses, &g.poses);
    Ok(vec![
        ("matched_poses", e.len() as f64),
        ("path_length_m", g.path_length()),
        ("final_drift_percent", eval::final_drift_percent(&e.poses, &g.poses)),
        ("ate_m", eval::ate_umeyama(&e, &g)?),
        ("rte_translation_percent", rte.translation),
        ("rte_rotation_deg_per_100m", rte.rotation),
        ("rte_segments", rte.segments as f64),
    ])
}

fn odometry_mode(args: &Args) -> Result<()> {
    let dir = data_dir(args)?;
    let sensor = match args.mode.sensor() {
        Some(s) => s,
        None => dataset::detect_sensor(dir)?,
    };
    let cfg = load_config(args, sensor)?;
    if cfg.odometry.sensor != sensor {
        return Err(wnoa_core::Error::Config(format!(
            "configuration selects {} but mode {} needs {}",
            sensor_name(cfg.odometry.sensor),
            args.mode.name(),
            sensor_name(sensor)
        ))
        .into());
    }
    let ds: Dataset = dataset::load(dir, &cfg.cfar, args.frames)?;
    if ds.sensor != sensor {
        return Err(wnoa_core::Error::Config(format!(
            "mode {} needs {} frames, {} holds {} frames",
            args.mode.name(),
            sensor_name(sensor),
            dir.display(),
            sensor_name(ds.sensor)
        ))
        .into());
    }
    if args.mode.inertial() && ds.imu.is_empty() {
        return Err(wnoa_core::Error::Config(format!(
            "mode {} requires IMU measurements ({} missing or empty)",
            args.mode.name(),
            dir.join(dataset::IMU_FILE).display()
        ))
        .into());
    }
    let mut oc = cfg.odometry.clone();
    oc.use_imu = args.mode.inertial();
    oc.window.extrinsics = ds.extrinsics;
    info!("{}: {} frames from {}", args.mode.name(), ds.frames.len(), dir.display());
    let results: Vec<FrameResult> = if args.mode == Mode::CvBaseline {
        run_baseline(&oc, &ds.frames)?
    } else {
        run_odometry(&oc, &ds.frames, &ds.imu, cfg.gravity_init_duration)?
    };

    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let est = Trajectory::from_vehicle_poses(results.iter().map(|r| (r.time, r.pose)))?;
    io::write_tum(&args.out.join(TRAJECTORY_TUM), &est)?;
    io::write_kitti(&args.out.join(TRAJECTORY_KITTI), &est.poses)?;
    let diags: Vec<_> = results.iter().map(|r| r.diagnostics).collect();
    if args.diag {
        io::write_diagnostics_csv(&args.out.join(DIAGNOSTICS), &diags)?;
    }
    let n = diags.len().max(1) as f64;
    let mut metrics = vec![
        ("frames", results.len() as f64),
        ("mean_frame_time_ms", 1e3 * diags.iter().map(|d| d.wall_time).sum::<f64>() / n),
        ("degenerate_frames", diags.iter().filter(|d| d.degenerate).count() as f64),
    ];
    if let Some(gt) = &ds.truth {
        metrics.extend(accuracy_metrics(&est, gt)?);
    }
    io::write_metrics_csv(&args.out.join(METRICS), &metrics)?;
    report(&metrics);
    Ok(())
}

fn evaluate_mode(args: &Args) -> Result<()> {
    let dir = data_dir(args)?;
    let truth_path = dir.join(dataset::TRUTH_FILE);
    if !truth_path.exists() {
        return Err(wnoa_core::Error::Config(format!("evaluate needs ground truth at {}", truth_path.display())).into());
    }
    let gt = io::read_tum(&truth_path)?;
    let est_path = args.estimate.clone().unwrap_or_else(|| args.out.join(TRAJECTORY_TUM));
    let est = io::read_tum(&est_path)?;
    let metrics = accuracy_metrics(&est, &gt)?;
    std::fs::create_dir_all(&args.out)?;
    io::write_metrics_csv(&args.out.join(METRICS), &metrics)?;
    io::write_error_csv(&args.out.join(ERRORS), &eval::error_vs_time(&est, &gt, MATCH_DT))?;
    report(&metrics);
    Ok(())
}

fn report(metrics: &[(&str, f64)]) {
    for (k, v) in metrics {
        println!("{k} = {v}");
    }
}

fn run(args: &Args) -> Result<()> {
    match args.mode {
        Mode::Simulate => simulate_mode(args),
        Mode::Evaluate => evaluate_mode(args),
        _ => odometry_mode(args),
    }
}

/// Failure class and exit status.
fn classify(err: &anyhow::Error) -> (&'static str, u8) {
    use wnoa_core::Error as E;
    match err.chain().find_map(|e| e.downcast_ref::<E>()) {
        Some(E::Config(_)) => ("config", 3),
        Some(E::Parse { .. } | E::Format(_)) => ("input", 4),
        Some(E::Io(_)) => ("io", 5),
        Some(E::NotPositiveDefinite(_) | E::DegenerateInterval(_) | E::OutOfRange { .. }) => ("solver", 6),
        None if err.chain().any(|e| e.is::<std::io::Error>()) => ("io", 5),
        None => ("input", 4),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = Args::parse();
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (kind, code) = classify(&e);
            eprintln!("error[{kind}]: {e:#}");
            ExitCode::from(code)
        }
    }
}
