//! Sensor preprocessing: lidar cropping, shuffled voxel downsampling and
//! timestamp binning; radar GO-CFAR detection and polar-to-Cartesian conversion.

use std::collections::HashSet;

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// One return in the sensor frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SensorPoint {
    pub p: Vector3<f64>,
    pub intensity: f64,
    pub time: f64,
}

/// A scan (lidar sweep or CFAR pointcloud) with its time span.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LidarFrame {
    pub points: Vec<SensorPoint>,
    pub t_start: f64,
    pub t_end: f64,
}

impl LidarFrame {
    pub fn new(points: Vec<SensorPoint>, t_start: f64, t_end: f64) -> Self {
        Self {
            points,
            t_start,
            t_end,
        }
    }

    /// Frame spanning the point timestamps.
    pub fn from_points(points: Vec<SensorPoint>) -> Self {
        let t_start = points.iter().map(|p| p.time).fold(f64::INFINITY, f64::min);
        let t_end = points.iter().map(|p| p.time).fold(f64::NEG_INFINITY, f64::max);
        Self {
            points,
            t_start,
            t_end,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn mid_time(&self) -> f64 {
        0.5 * (self.t_start + self.t_end)
    }

    fn with_points(&self, points: Vec<SensorPoint>) -> Self {
        Self {
            points,
            t_start: self.t_start,
            t_end: self.t_end,
        }
    }
}

/// Drops returns outside `[min_range, max_range]`.
pub fn crop_range(frame: &LidarFrame, min_range: f64, max_range: f64) -> LidarFrame {
    frame.with_points(
        frame
            .points
            .iter()
            .filter(|p| {
                let r = p.p.norm();
                r >= min_range && r <= max_range
            })
            .copied()
            .collect(),
    )
}

/// Keeps the first point per voxel after a seeded shuffle.
pub fn downsample_lidar(frame: &LidarFrame, voxel: f64, seed: u64) -> LidarFrame {
    let mut order: Vec<usize> = (0..frame.points.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for i in order {
        let p = &frame.points[i];
        let key = (
            (p.p.x / voxel).floor() as i64,
            (p.p.y / voxel).floor() as i64,
            (p.p.z / voxel).floor() as i64,
        );
        if seen.insert(key) {
            out.push(*p);
        }
    }
    frame.with_points(out)
}

/// Rounds timestamps to the nearest point of a `1/freq` grid; `None` disables.
pub fn bin_timestamps(frame: &LidarFrame, freq: Option<f64>) -> LidarFrame {
    let Some(freq) = freq else {
        return frame.clone();
    };
    frame.with_points(
        frame
            .points
            .iter()
            .map(|p| SensorPoint {
                time: (p.time * freq).round() / freq,
                ..*p
            })
            .collect(),
    )
}

/// Spinning-radar power image, row-major by azimuth.
#[derive(Clone, Debug, PartialEq)]
pub struct PolarScan {
    pub azimuths: usize,
    pub range_bins: usize,
    pub range_resolution: f64,
    pub azimuth_times: Vec<f64>,
    pub azimuth_angles: Vec<f64>,
    pub power: Vec<u8>,
}

impl PolarScan {
    pub fn new(azimuths: usize, range_bins: usize, range_resolution: f64) -> Self {
        Self {
            azimuths,
            range_bins,
            range_resolution,
            azimuth_times: vec![0.0; azimuths],
            azimuth_angles: vec![0.0; azimuths],
            power: vec![0; azimuths * range_bins],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.azimuths == 0 || self.range_bins == 0 {
            return Err(Error::Format("polar scan must have azimuths and range bins".into()));
        }
        if self.azimuth_times.len() != self.azimuths
            || self.azimuth_angles.len() != self.azimuths
            || self.power.len() != self.azimuths * self.range_bins
        {
            return Err(Error::Format("polar scan array sizes disagree with header".into()));
        }
        if self.azimuth_times.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Format("azimuth times must be monotone".into()));
        }
        Ok(())
    }

    pub fn row(&self, a: usize) -> &[u8] {
        &self.power[a * self.range_bins..(a + 1) * self.range_bins]
    }

    pub fn row_mut(&mut self, a: usize) -> &mut [u8] {
        let r = self.range_bins;
        &mut self.power[a * r..(a + 1) * r]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CfarConfig {
    pub train_cells: usize,
    pub guard_cells: usize,
    pub threshold_factor: f64,
    pub noise_floor: f64,
}

impl Default for CfarConfig {
    fn default() -> Self {
        Self {
            train_cells: 12,
            guard_cells: 4,
            threshold_factor: 3.0,
            noise_floor: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Detection {
    pub azimuth: usize,
    pub bin: usize,
    pub power: u8,
}

/// Greatest-of CFAR along each azimuth. Cells closer than `train + guard` to
/// either end of the row are skipped.
pub fn gocfar_detect(scan: &PolarScan, cfg: &CfarConfig) -> Vec<Detection> {
    let w = cfg.train_cells.max(1);
    let g = cfg.guard_cells;
    let margin = w + g;
    let mut out = Vec::new();
    if scan.range_bins <= 2 * margin {
        return out;
    }
    for a in 0..scan.azimuths {
        let row = scan.row(a);
        // prefix sums for O(1) window means
        let mut prefix = vec![0u64; row.len() + 1];
        for (i, &v) in row.iter().enumerate() {
            prefix[i + 1] = prefix[i] + v as u64;
        }
        let window = |lo: usize, hi: usize| (prefix[hi] - prefix[lo]) as f64 / (hi - lo) as f64;
        for i in margin..row.len() - margin {
            let left = window(i - margin, i - g);
            let right = window(i + g + 1, i + margin + 1);
            let v = row[i] as f64;
            if v > cfg.threshold_factor * left.max(right) && v > cfg.noise_floor {
                out.push(Detection {
                    azimuth: a,
                    bin: i,
                    power: row[i],
                });
            }
        }
    }
    out
}

/// Detections as planar points at bin centres, stamped with their azimuth time.
pub fn polar_to_cartesian(detections: &[Detection], scan: &PolarScan) -> LidarFrame {
    let points = detections
        .iter()
        .map(|d| {
            let r = (d.bin as f64 + 0.5) * scan.range_resolution;
            let th = scan.azimuth_angles[d.azimuth];
            SensorPoint {
                p: Vector3::new(r * th.cos(), r * th.sin(), 0.0),
                intensity: d.power as f64,
                time: scan.azimuth_times[d.azimuth],
            }
        })
        .collect();
    let t_start = scan.azimuth_times.first().copied().unwrap_or(0.0);
    let t_end = scan.azimuth_times.last().copied().unwrap_or(0.0);
    LidarFrame::new(points, t_start, t_end)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn pt(x: f64, y: f64, z: f64, t: f64) -> SensorPoint {
        SensorPoint {
            p: Vector3::new(x, y, z),
            intensity: 0.0,
            time: t,
        }
    }

    #[test]
    fn downsample_examples() {
        let f = LidarFrame::new(vec![pt(0.1, 0.1, 0.1, 0.0), pt(1.0, 1.0, 1.0, 0.01)], 0.0, 0.1);
        assert_eq!(downsample_lidar(&f, 1.5, 0).len(), 1);
        let f = LidarFrame::new((0..10).map(|i| pt(i as f64 * 2.0, 0.0, 0.0, 0.0)).collect(), 0.0, 0.1);
        assert_eq!(downsample_lidar(&f, 1.5, 0).len(), 10);
    }

    #[test]
    fn downsample_is_deterministic_subset() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pts: Vec<_> = (0..2000)
            .map(|i| pt(rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0), rng.random_range(-2.0..2.0), i as f64 * 1e-4))
            .collect();
        let f = LidarFrame::new(pts, 0.0, 0.2);
        let a = downsample_lidar(&f, 1.5, 42);
        let b = downsample_lidar(&f, 1.5, 42);
        assert_eq!(a, b);
        assert!(a.points.iter().all(|p| f.points.contains(p)));
        assert!(a.len() < f.len());
    }

    #[test]
    fn crop_examples() {
        let f = LidarFrame::new(vec![pt(0.5, 0.0, 0.0, 0.0), pt(10.0, 0.0, 0.0, 0.0), pt(200.0, 0.0, 0.0, 0.0)], 0.0, 0.1);
        assert_eq!(crop_range(&f, 1.0, 120.0).len(), 1);
    }

    #[test]
    fn binning_examples() {
        let f = LidarFrame::new(vec![pt(1.0, 2.0, 3.0, 0.10003)], 0.0, 0.2);
        assert_eq!(bin_timestamps(&f, None), f);
        let b = bin_timestamps(&f, Some(5000.0));
        assert_relative_eq!(b.points[0].time, 0.1, epsilon = 1e-15);
        assert_eq!(b.points[0].p, f.points[0].p);

        let f = LidarFrame::new((0..1000).map(|i| pt(1.0, 0.0, 0.0, i as f64 * 1e-4)).collect(), 0.0, 0.1);
        let b = bin_timestamps(&f, Some(400.0));
        let mut times: Vec<_> = b.points.iter().map(|p| p.time.to_bits()).collect();
        times.sort();
        times.dedup();
        assert!(times.len() as f64 <= 0.1 * 400.0 + 1.0);
    }

    fn flat_scan(level: u8) -> PolarScan {
        let mut s = PolarScan::new(4, 200, 0.0596);
        s.power.iter_mut().for_each(|v| *v = level);
        for a in 0..4 {
            s.azimuth_times[a] = a as f64 * 0.001;
            s.azimuth_angles[a] = a as f64 * 0.5;
        }
        s
    }

    #[test]
    fn cfar_constant_scan_has_no_detections() {
        let s = flat_scan(20);
        assert!(gocfar_detect(&s, &CfarConfig::default()).is_empty());
    }

    #[test]
    fn cfar_single_spike() {
        let mut s = flat_scan(10);
        s.row_mut(2)[100] = 100;
        let d = gocfar_detect(&s, &CfarConfig::default());
        assert_eq!(d, vec![Detection { azimuth: 2, bin: 100, power: 100 }]);
    }

    #[test]
    fn cfar_greatest_of_suppresses_spike_near_clutter_wall() {
        let mut s = flat_scan(5);
        // clutter wall starting just beyond the guard cells on the right
        for b in 105..110 {
            s.row_mut(0)[b] = 60;
        }
        s.row_mut(0)[100] = 70;
        let cfg = CfarConfig::default();
        assert!(gocfar_detect(&s, &cfg).iter().all(|d| d.bin != 100));
        // cell-averaging over both windows would have kept it
        let row = s.row(0);
        let (w, g) = (cfg.train_cells, cfg.guard_cells);
        let left: f64 = row[100 - w - g..100 - g].iter().map(|&v| v as f64).sum();
        let right: f64 = row[101 + g..101 + g + w].iter().map(|&v| v as f64).sum();
        let ca = (left + right) / (2 * w) as f64;
        assert!(70.0 > cfg.threshold_factor * ca);
    }

    #[test]
    fn cfar_noise_floor_and_false_alarm_budget() {
        // exponentially distributed power (square-law detector on Gaussian noise)
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let exp = rand_distr::Exp::new(0.1).unwrap();
        let mut s = PolarScan::new(400, 500, 0.0596);
        for v in s.power.iter_mut() {
            *v = rand_distr::Distribution::<f64>::sample(&exp, &mut rng).min(255.0) as u8;
        }
        for a in 0..400 {
            s.azimuth_times[a] = a as f64;
        }
        let cells = (400 * (500 - 32)) as f64;
        let no_floor = gocfar_detect(&s, &CfarConfig::default()).len() as f64;
        let cfg = CfarConfig {
            noise_floor: 60.0,
            ..Default::default()
        };
        let with_floor = gocfar_detect(&s, &cfg).len() as f64;
        assert!(no_floor / cells < 0.06, "{}", no_floor / cells);
        assert!(with_floor / cells < 0.01, "{}", with_floor / cells);
        assert!(with_floor < no_floor);
    }

    #[test]
    fn polar_conversion() {
        let mut s = flat_scan(0);
        s.azimuth_angles[0] = 0.0;
        s.azimuth_angles[1] = std::f64::consts::FRAC_PI_2;
        let det = [
            Detection { azimuth: 0, bin: 99, power: 1 },
            Detection { azimuth: 1, bin: 10, power: 1 },
        ];
        let f = polar_to_cartesian(&det, &s);
        assert_relative_eq!(f.points[0].p, Vector3::new(99.5 * 0.0596, 0.0, 0.0), epsilon = 1e-12);
        assert!((f.points[0].p.x - 5.93).abs() < 1e-3);
        assert!(f.points[1].p.x.abs() < 1e-12 && f.points[1].p.y > 0.0);
        assert_eq!(f.points[1].time, s.azimuth_times[1]);
    }
}
