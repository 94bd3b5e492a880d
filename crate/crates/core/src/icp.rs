//! Point-to-plane (lidar) and Doppler-compensated point-to-point (radar)
//! registration factors.

use nalgebra::{Matrix3, SMatrix, Vector3, Vector4};

use crate::liegroup::{odot, Pose, Twist};

pub type Matrix1x6 = SMatrix<f64, 1, 6>;
pub type Matrix3x6 = SMatrix<f64, 3, 6>;

/// A measured point in the sensor frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QueryPoint {
    pub q: Vector3<f64>,
    pub time: f64,
    pub alpha: f64,
}

/// A matched map point with its local surface normal.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Correspondence {
    pub p: Vector3<f64>,
    pub n: Vector3<f64>,
    pub alpha: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub enum RobustLoss {
    #[default]
    None,
    Cauchy(f64),
    Huber(f64),
}

impl RobustLoss {
    /// IRLS weight for a residual of (whitened) norm `r`.
    pub fn weight(&self, r: f64) -> f64 {
        match *self {
            RobustLoss::None => 1.0,
            RobustLoss::Cauchy(c) => 1.0 / (1.0 + (r / c).powi(2)),
            RobustLoss::Huber(c) => {
                if r <= c {
                    1.0
                } else {
                    c / r
                }
            }
        }
    }

    /// Robustified cost `rho(r)` for a residual norm `r`, scaled so that
    /// `rho(r) ~ r^2 / 2` near zero.
    pub fn cost(&self, r: f64) -> f64 {
        match *self {
            RobustLoss::None => 0.5 * r * r,
            RobustLoss::Cauchy(c) => 0.5 * c * c * (1.0 + (r / c).powi(2)).ln(),
            RobustLoss::Huber(c) => {
                if r <= c {
                    0.5 * r * r
                } else {
                    c * (r - 0.5 * c)
                }
            }
        }
    }
}

/// Sensor mounting and radar Doppler constant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Extrinsics {
    /// Sensor-to-vehicle transform.
    pub t_vs: Pose,
    /// Range bias per unit radial velocity (s).
    pub beta: f64,
}

impl Default for Extrinsics {
    fn default() -> Self {
        Self {
            t_vs: Pose::identity(),
            beta: 0.0,
        }
    }
}

/// `(sigma2 - sigma3) / sigma1` for eigenvalues sorted in decreasing order.
pub fn plane_weight(sigma: [f64; 3]) -> f64 {
    if sigma[0] <= 0.0 {
        return 0.0;
    }
    ((sigma[1] - sigma[2]) / sigma[0]).clamp(0.0, 1.0)
}

fn homogeneous(v: &Vector3<f64>) -> Vector4<f64> {
    Vector4::new(v.x, v.y, v.z, 1.0)
}

/// Map-frame point `T_vi^-1 T_vs q` and its Jacobian wrt a left perturbation of `T_vi`.
fn to_map(q: &Vector3<f64>, pose: &Pose, ext: &Extrinsics) -> (Vector3<f64>, Matrix3x6) {
    let y = ext.t_vs.transform_point(q);
    let x = pose.inverse_transform_point(&y);
    // T^-1 exp(-eps^) y  =>  dx = -C^T (y^odot) eps
    let dy = odot(&homogeneous(&y)).fixed_rows::<3>(0).into_owned();
    (x, -pose.rotation.transpose() * dy)
}

/// `alpha n^T (p - T_vi^-1 T_vs q)`.
pub fn p2plane_error(corr: &Correspondence, q: &Vector3<f64>, pose: &Pose, ext: &Extrinsics) -> f64 {
    let (x, _) = to_map(q, pose, ext);
    corr.alpha * corr.n.dot(&(corr.p - x))
}

/// Residual and Jacobian wrt a left perturbation of the interpolated pose.
pub fn p2plane_linearized(
    corr: &Correspondence,
    q: &Vector3<f64>,
    pose: &Pose,
    ext: &Extrinsics,
) -> (f64, Matrix1x6) {
    let (x, dx) = to_map(q, pose, ext);
    let e = corr.alpha * corr.n.dot(&(corr.p - x));
    (e, -(corr.n.transpose() * dx) * corr.alpha)
}

/// Sensitivity of the Doppler correction to the vehicle velocity:
/// `dq = M varpi`. Zero for a degenerate point at the origin.
pub fn doppler_matrix(q: &Vector3<f64>, ext: &Extrinsics) -> Matrix3x6 {
    let r = q.norm();
    if r == 0.0 || ext.beta == 0.0 {
        return Matrix3x6::zeros();
    }
    let a = q / r;
    // velocity of the sensor frame is Ad(T_sv) varpi
    let ad_sv = ext.t_vs.inverse().adjoint();
    let q_odot = odot(&homogeneous(q)).fixed_rows::<3>(0).into_owned();
    (a * a.transpose()) * q_odot * ad_sv * ext.beta
}

/// Range correction restoring a Doppler-distorted point; collinear with `q`.
pub fn doppler_correction(q: &Vector3<f64>, varpi: &Twist, ext: &Extrinsics) -> Vector3<f64> {
    doppler_matrix(q, ext) * varpi
}

/// `p - T_vi^-1 T_vs (q + dq)`.
pub fn p2p_radar_error(
    p: &Vector3<f64>,
    q: &Vector3<f64>,
    pose: &Pose,
    varpi: &Twist,
    ext: &Extrinsics,
) -> Vector3<f64> {
    let qc = q + doppler_correction(q, varpi, ext);
    let (x, _) = to_map(&qc, pose, ext);
    p - x
}

/// Residual plus Jacobians wrt the interpolated pose and velocity.
pub fn p2p_radar_linearized(
    p: &Vector3<f64>,
    q: &Vector3<f64>,
    pose: &Pose,
    varpi: &Twist,
    ext: &Extrinsics,
) -> (Vector3<f64>, Matrix3x6, Matrix3x6) {
    let m = doppler_matrix(q, ext);
    let qc = q + m * varpi;
    let (x, dx) = to_map(&qc, pose, ext);
    let c_map_sensor: Matrix3<f64> = pose.rotation.transpose() * ext.t_vs.rotation;
    (p - x, -dx, -c_map_sensor * m)
}
