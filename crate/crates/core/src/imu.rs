//! Gyroscope, preintegrated-accelerometer and bias factors, plus startup
//! gravity alignment.
//!
//! The state velocity `varpi` satisfies `dT_vi/dt = varpi^ T_vi`, which is the
//! negative of the physical body rate an IMU reports. Factors here convert
//! explicitly: physical linear velocity is `-rho(varpi)` and physical angular
//! rate is `-psi(varpi)`.

use nalgebra::{Matrix3, Matrix6, SMatrix, Vector3, Vector6};

use crate::error::{Error, Result};
use crate::liegroup::{skew, so3_exp, so3_left_jacobian_inv, so3_log, Twist};

/// Gravity in the gravity-aligned frame.
pub const GRAVITY: Vector3<f64> = Vector3::new(0.0, 0.0, -9.8066);

pub type Matrix3x6 = SMatrix<f64, 3, 6>;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImuSample {
    pub time: f64,
    /// Angular rate, rad/s.
    pub omega: Vector3<f64>,
    /// Specific force, m/s^2.
    pub accel: Vector3<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImuNoise {
    pub r_omega: Matrix3<f64>,
    pub r_accel: Matrix3<f64>,
}

impl Default for ImuNoise {
    fn default() -> Self {
        Self {
            r_omega: Matrix3::identity() * 1e-4,
            r_accel: Matrix3::identity() * 1e-2,
        }
    }
}

/// Physical angular rate encoded by a state velocity.
pub fn physical_angular(varpi: &Twist) -> Vector3<f64> {
    -varpi.fixed_rows::<3>(3).into_owned()
}

/// Physical linear velocity encoded by a state velocity.
pub fn physical_linear(varpi: &Twist) -> Vector3<f64> {
    -varpi.fixed_rows::<3>(0).into_owned()
}

/// `e = omega_meas - omega(tau) - b_omega(tau)`.
pub fn gyro_error(sample: &ImuSample, varpi: &Twist, b_omega: &Vector3<f64>) -> Vector3<f64> {
    sample.omega - physical_angular(varpi) - b_omega
}

/// Jacobian of [`gyro_error`] wrt a velocity perturbation.
pub fn gyro_error_velocity_jacobian() -> Matrix3x6 {
    let mut j = Matrix3x6::zeros();
    j.fixed_view_mut::<3, 3>(0, 3).copy_from(&Matrix3::identity());
    j
}

/// Jacobian of [`gyro_error`] wrt the full bias `[b_a; b_omega]`.
pub fn gyro_error_bias_jacobian() -> Matrix3x6 {
    let mut j = Matrix3x6::zeros();
    j.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-Matrix3::identity()));
    j
}

/// Accelerometer samples integrated over `[start, end]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Preintegration {
    pub start: f64,
    pub end: f64,
    pub delta_nu: Vector3<f64>,
    pub covariance: Matrix3<f64>,
    /// `sum(dt_n)`, the sensitivity of `delta_nu` to the accelerometer bias.
    pub duration: f64,
}

/// Sums `(a_n + C_vi(tau_n) g_i - b_a) dt_n` over the samples, closing the last
/// interval at `end`. `attitudes[n]` is `C_vi` at `samples[n].time` and
/// `gravity` is expressed in the map frame. Returns `None` for an empty window.
pub fn preintegrate_velocity(
    samples: &[ImuSample],
    attitudes: &[Matrix3<f64>],
    b_a: &Vector3<f64>,
    gravity: &Vector3<f64>,
    end: f64,
    r_accel: &Matrix3<f64>,
    mode_2d: bool,
) -> Option<Preintegration> {
    assert_eq!(samples.len(), attitudes.len());
    let first = samples.first()?;
    let mut delta_nu = Vector3::zeros();
    let mut dt2 = 0.0;
    for (n, (s, c)) in samples.iter().zip(attitudes).enumerate() {
        let next = samples.get(n + 1).map_or(end, |x| x.time);
        let dt = next - s.time;
        let mut a = s.accel - b_a;
        if !mode_2d {
            a += c * gravity;
        }
        delta_nu += a * dt;
        dt2 += dt * dt;
    }
    Some(Preintegration {
        start: first.time,
        end,
        delta_nu,
        covariance: r_accel * dt2,
        duration: end - first.time,
    })
}

/// `e = nu(end) - nu(start) - delta_nu`, with physical velocities.
pub fn accel_error(varpi_end: &Twist, varpi_start: &Twist, pre: &Preintegration) -> Vector3<f64> {
    physical_linear(varpi_end) - physical_linear(varpi_start) - pre.delta_nu
}

/// Jacobians of [`accel_error`] wrt `(d varpi_end, d varpi_start, d b)`, with
/// `b` the bias at the window's left knot.
pub fn accel_error_jacobians(pre: &Preintegration) -> (Matrix3x6, Matrix3x6, Matrix3x6) {
    let mut j_end = Matrix3x6::zeros();
    j_end.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-Matrix3::identity()));
    let j_start = -j_end;
    let mut j_bias = Matrix3x6::zeros();
    j_bias
        .fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&(Matrix3::identity() * pre.duration));
    (j_end, j_start, j_bias)
}

/// `e = b_k1 - b_k` with covariance `Q_b dt`.
pub fn bias_prior_error(bias_k: &Vector6<f64>, bias_k1: &Vector6<f64>) -> Vector6<f64> {
    bias_k1 - bias_k
}

pub fn bias_prior_cov(qb_diag: &Vector6<f64>, dt: f64) -> Matrix6<f64> {
    Matrix6::from_diagonal(&(qb_diag * dt))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GravityEstimate {
    /// Rotation taking gravity-aligned vectors into the map frame.
    pub c_ig: Matrix3<f64>,
    pub g: Vector3<f64>,
}

impl GravityEstimate {
    pub fn level() -> Self {
        Self {
            c_ig: Matrix3::identity(),
            g: GRAVITY,
        }
    }

    /// Gravity expressed in the map frame.
    pub fn gravity_in_map(&self) -> Vector3<f64> {
        self.c_ig * self.g
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GravityConfig {
    pub min_samples: usize,
    /// Variance of the rotation prior on `C_ig` (rad^2).
    pub rotation_prior_var: f64,
    /// Inverse variance of the zero-mean bias prior; `0` disables it.
    pub bias_prior_weight: f64,
    pub max_iterations: usize,
}

impl Default for GravityConfig {
    fn default() -> Self {
        Self {
            min_samples: 50,
            rotation_prior_var: 1e4,
            bias_prior_weight: 1.0,
            max_iterations: 20,
        }
    }
}

/// Solves for `C_ig` and `b_a` from stationary samples by minimizing
/// `sum |a_n + C_ig g - b_a|^2_{R_a}` with weak priors on both.
pub fn estimate_gravity(
    samples: &[ImuSample],
    r_accel: &Matrix3<f64>,
    cfg: &GravityConfig,
) -> Result<(GravityEstimate, Vector3<f64>)> {
    if samples.len() < cfg.min_samples {
        return Err(Error::Format(format!(
            "gravity alignment needs {} stationary samples, got {}",
            cfg.min_samples,
            samples.len()
        )));
    }
    let w = r_accel
        .try_inverse()
        .ok_or_else(|| Error::Config("accelerometer covariance is singular".into()))?;
    // The cost only depends on the mean specific force.
    let n = samples.len() as f64;
    let mean = samples.iter().map(|s| s.accel).sum::<Vector3<f64>>() / n;
    let w_data = w * n;

    let mut c = Matrix3::identity();
    let mut b = Vector3::zeros();
    for _ in 0..cfg.max_iterations {
        let cg = c * GRAVITY;
        let e = mean + cg - b;
        // d e / d phi (left perturbation) and d e / d b
        let j_phi = -skew(&cg);
        let j_b = -Matrix3::identity();
        let phi = so3_log(&c);
        let j_prior = so3_left_jacobian_inv(&phi);
        let prior_w = Matrix3::identity() / cfg.rotation_prior_var;

        let mut h = nalgebra::Matrix6::<f64>::zeros();
        let mut g = Vector6::zeros();
        let hpp = j_phi.transpose() * w_data * j_phi + j_prior.transpose() * prior_w * j_prior;
        let hpb = j_phi.transpose() * w_data * j_b;
        let hbb = j_b.transpose() * w_data * j_b + Matrix3::identity() * cfg.bias_prior_weight;
        h.fixed_view_mut::<3, 3>(0, 0).copy_from(&hpp);
        h.fixed_view_mut::<3, 3>(0, 3).copy_from(&hpb);
        h.fixed_view_mut::<3, 3>(3, 0).copy_from(&hpb.transpose());
        h.fixed_view_mut::<3, 3>(3, 3).copy_from(&hbb);
        let gp = j_phi.transpose() * w_data * e + j_prior.transpose() * prior_w * phi;
        let gb = j_b.transpose() * w_data * e + b * cfg.bias_prior_weight;
        g.fixed_rows_mut::<3>(0).copy_from(&gp);
        g.fixed_rows_mut::<3>(3).copy_from(&gb);

        let step = h
            .cholesky()
            .ok_or(Error::NotPositiveDefinite(0))?
            .solve(&(-g));
        c = so3_exp(&step.fixed_rows::<3>(0).into_owned()) * c;
        b += step.fixed_rows::<3>(3);
        if step.norm() < 1e-12 {
            break;
        }
    }
    Ok((GravityEstimate { c_ig: c, g: GRAVITY }, b))
}
