//! Planar-patch and landmark worlds for ray casting.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Rectangular patch `center + a u + b v` with `|a| <= half_u`, `|b| <= half_v`.
/// Infinite when both half extents are infinite.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Plane {
    pub center: Vector3<f64>,
    pub normal: Vector3<f64>,
    pub u: Vector3<f64>,
    pub v: Vector3<f64>,
    pub half_u: f64,
    pub half_v: f64,
}

impl Plane {
    /// Patch spanned by orthogonal unit axes `u`, `v`.
    pub fn new(center: Vector3<f64>, u: Vector3<f64>, v: Vector3<f64>, half_u: f64, half_v: f64) -> Self {
        let u = u.normalize();
        let v = v.normalize();
        Self {
            center,
            normal: u.cross(&v).normalize(),
            u,
            v,
            half_u,
            half_v,
        }
    }

    pub fn infinite(point: Vector3<f64>, normal: Vector3<f64>) -> Self {
        let n = normal.normalize();
        let helper = if n.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
        let u = n.cross(&helper).normalize();
        let v = n.cross(&u);
        Self {
            center: point,
            normal: n,
            u,
            v,
            half_u: f64::INFINITY,
            half_v: f64::INFINITY,
        }
    }

    /// Distance along a unit ray to the patch, if hit in front of the origin.
    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        let denom = self.normal.dot(dir);
        if denom.abs() < 1e-12 {
            return None;
        }
        let t = self.normal.dot(&(self.center - origin)) / denom;
        if t <= 0.0 {
            return None;
        }
        let d = origin + dir * t - self.center;
        (d.dot(&self.u).abs() <= self.half_u && d.dot(&self.v).abs() <= self.half_v).then_some(t)
    }

    pub fn signed_distance(&self, p: &Vector3<f64>) -> f64 {
        self.normal.dot(&(p - self.center))
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct World {
    pub planes: Vec<Plane>,
    /// Point reflectors for radar.
    pub landmarks: Vec<Vector3<f64>>,
}

/// Four vertical faces of a box of height `h` standing on `z = ground`.
fn block(center: Vector3<f64>, yaw: f64, sx: f64, sy: f64, ground: f64, h: f64) -> [Plane; 4] {
    let ex = Vector3::new(yaw.cos(), yaw.sin(), 0.0);
    let ey = Vector3::new(-yaw.sin(), yaw.cos(), 0.0);
    let z = Vector3::z();
    let c = Vector3::new(center.x, center.y, ground + 0.5 * h);
    [
        Plane::new(c + ex * sx, ey, z, sy, 0.5 * h),
        Plane::new(c - ex * sx, z, ey, sy, 0.5 * h),
        Plane::new(c + ey * sy, z, ex, sx, 0.5 * h),
        Plane::new(c - ey * sy, ex, z, sx, 0.5 * h),
    ]
}

impl World {
    /// Ground plane plus randomly rotated buildings and pillars on both sides
    /// of a circular road of the given radius centred at `(0, radius)`.
    pub fn ring_road(radius: f64, ground: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut planes = vec![Plane::infinite(Vector3::new(0.0, 0.0, ground), Vector3::z())];
        let centre = Vector3::new(0.0, radius, 0.0);
        let n_blocks = ((2.0 * std::f64::consts::PI * radius) / 12.0).ceil() as usize;
        for i in 0..n_blocks {
            let a = 2.0 * std::f64::consts::PI * (i as f64 + rng.random_range(-0.2..0.2)) / n_blocks as f64;
            for side in [-1.0, 1.0] {
                let r = radius + side * rng.random_range(12.0..18.0);
                let c = centre + Vector3::new(a.sin(), -a.cos(), 0.0) * r;
                let yaw = rng.random_range(0.0..std::f64::consts::PI);
                let (sx, sy) = (rng.random_range(1.5..4.0), rng.random_range(1.5..4.0));
                planes.extend(block(c, yaw, sx, sy, ground, rng.random_range(4.0..12.0)));
            }
            if i % 3 == 0 {
                let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                let r = radius + side * rng.random_range(7.0..9.0);
                let c = centre + Vector3::new(a.sin(), -a.cos(), 0.0) * r;
                planes.extend(block(c, rng.random_range(0.0..1.5), 0.3, 0.3, ground, 6.0));
            }
        }
        World { planes, landmarks: Vec::new() }
    }

    /// Closed rectangular room with pillars.
    pub fn room(half_x: f64, half_y: f64, height: f64, ground: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = Vector3::z();
        let zc = ground + 0.5 * height;
        let mut planes = vec![
            Plane::infinite(Vector3::new(0.0, 0.0, ground), z),
            Plane::new(Vector3::new(0.0, 0.0, ground + height), Vector3::x(), Vector3::y(), half_x, half_y),
            Plane::new(Vector3::new(half_x, 0.0, zc), Vector3::y(), z, half_y, 0.5 * height),
            Plane::new(Vector3::new(-half_x, 0.0, zc), z, Vector3::y(), half_y, 0.5 * height),
            Plane::new(Vector3::new(0.0, half_y, zc), z, Vector3::x(), half_x, 0.5 * height),
            Plane::new(Vector3::new(0.0, -half_y, zc), Vector3::x(), z, half_x, 0.5 * height),
        ];
        for _ in 0..8 {
            let c = Vector3::new(
                rng.random_range(-0.8 * half_x..0.8 * half_x),
                rng.random_range(-0.8 * half_y..0.8 * half_y),
                0.0,
            );
            if c.norm() < 4.0 {
                continue;
            }
            planes.extend(block(c, rng.random_range(0.0..1.5), 0.4, 0.6, ground, height));
        }
        World { planes, landmarks: Vec::new() }
    }

    /// Infinite planes in general position around the origin.
    pub fn known_planes() -> Self {
        let planes = [
            (Vector3::new(0.0, 0.0, -2.0), Vector3::new(0.0, 0.0, 1.0)),
            (Vector3::new(15.0, 0.0, 0.0), Vector3::new(-1.0, 0.0, 0.0)),
            (Vector3::new(0.0, 12.0, 0.0), Vector3::new(0.0, -1.0, 0.0)),
            (Vector3::new(-10.0, 0.0, 0.0), Vector3::new(0.9, 0.3, 0.1)),
            (Vector3::new(0.0, -14.0, 0.0), Vector3::new(0.2, 0.95, -0.1)),
            (Vector3::new(0.0, 0.0, 8.0), Vector3::new(0.1, -0.2, -1.0)),
        ]
        .map(|(p, n)| Plane::infinite(p, n))
        .to_vec();
        World { planes, landmarks: Vec::new() }
    }

    /// Random point reflectors in an annulus around a circle of the given
    /// radius centred at `(0, radius)`, `spacing` metres apart on average.
    pub fn landmark_ring(radius: f64, band: f64, spacing: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let area = 2.0 * std::f64::consts::PI * radius * 2.0 * band;
        let n = (area / (spacing * spacing)) as usize;
        let centre = Vector3::new(0.0, radius, 0.0);
        let landmarks = (0..n)
            .filter_map(|_| {
                let a = rng.random_range(0.0..2.0 * std::f64::consts::PI);
                let off = rng.random_range(-band..band);
                // keep the road itself clear
                (off.abs() > 4.0).then(|| centre + Vector3::new(a.sin(), -a.cos(), 0.0) * (radius + off))
            })
            .collect();
        World { planes: Vec::new(), landmarks }
    }

    /// Nearest hit along a ray.
    pub fn cast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>, max_range: f64) -> Option<f64> {
        self.planes
            .iter()
            .filter_map(|p| p.intersect(origin, dir))
            .filter(|&t| t <= max_range)
            .min_by(|a, b| a.total_cmp(b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ray_plane_intersection_matches_analytic() {
        let p = Plane::infinite(Vector3::new(0.0, 0.0, -2.0), Vector3::z());
        let dir = Vector3::new(1.0, 0.0, -1.0).normalize();
        let t = p.intersect(&Vector3::zeros(), &dir).unwrap();
        assert!((t - 2.0 * 2f64.sqrt()).abs() < 1e-12);
        assert!(p.intersect(&Vector3::zeros(), &Vector3::z()).is_none());
    }

    #[test]
    fn finite_patch_bounds() {
        let p = Plane::new(Vector3::new(5.0, 0.0, 0.0), Vector3::y(), Vector3::z(), 1.0, 1.0);
        assert!(p.intersect(&Vector3::zeros(), &Vector3::x()).is_some());
        let off = Vector3::new(5.0, 2.0, 0.0).normalize();
        assert!(p.intersect(&Vector3::zeros(), &off).is_none());
    }

    #[test]
    fn block_normals_point_outward() {
        for f in block(Vector3::new(3.0, 4.0, 0.0), 0.4, 1.0, 2.0, -1.0, 5.0) {
            let c = Vector3::new(3.0, 4.0, f.center.z);
            assert!(f.normal.dot(&(f.center - c)) > 0.0);
            assert!(f.normal.z.abs() < 1e-12);
        }
    }
}
