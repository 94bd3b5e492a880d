//! White-noise-on-acceleration motion prior.
//!
//! Between consecutive knots the trajectory is modelled as a local
//! linear-time-invariant GP on `gamma_k(t) = [xi_k(t); xi_k'(t)]`, where
//! `T(t) = exp(xi_k(t)^) T(t_k)`. Every matrix here that only depends on time
//! (transition, process covariance, interpolation weights) has the
//! `[[a I, b I], [c I, d I]]` structure, with the per-axis PSD entering as a
//! diagonal factor.

use nalgebra::{Matrix2, Matrix6, SMatrix, SVector, Vector6};

use crate::error::{Error, Result};
use crate::liegroup::{
    curly_wedge, left_jacobian, left_jacobian_inv, left_jacobian_inv_vec_derivative,
    left_jacobian_vec_derivative, Pose, Twist,
};

pub type Matrix12 = SMatrix<f64, 12, 12>;
pub type Vector12 = SVector<f64, 12>;
pub type Matrix12x6 = SMatrix<f64, 12, 6>;

/// Estimated state at one knot.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrajectoryKnot {
    pub time: f64,
    /// `T_vi`, world-to-vehicle.
    pub pose: Pose,
    /// Body-centric velocity `[nu; omega]` with `dT/dt = varpi^ T`.
    pub velocity: Twist,
    /// `[b_a; b_omega]`.
    pub bias: Vector6<f64>,
}

impl TrajectoryKnot {
    pub fn new(time: f64, pose: Pose, velocity: Twist) -> Self {
        Self {
            time,
            pose,
            velocity,
            bias: Vector6::zeros(),
        }
    }
}

/// Power-spectral densities of the velocity and bias priors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PriorHyperparams {
    /// Diagonal of `Q` (translation then rotation).
    pub q_diag: Vector6<f64>,
    /// Diagonal of the bias random-walk PSD `Q_b` (accel then gyro).
    pub qb_diag: Vector6<f64>,
}

impl Default for PriorHyperparams {
    fn default() -> Self {
        Self {
            q_diag: Vector6::new(50.0, 50.0, 50.0, 5.0, 5.0, 5.0),
            qb_diag: Vector6::new(1e-3, 1e-3, 1e-3, 1e-5, 1e-5, 1e-5),
        }
    }
}

impl PriorHyperparams {
    pub fn validate(&self) -> Result<()> {
        if self.q_diag.iter().chain(self.qb_diag.iter()).all(|&v| v > 0.0 && v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Config("prior PSD entries must be positive".into()))
        }
    }
}

/// Local Markovian state `gamma = [xi; xi_dot]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalGamma {
    pub xi: Twist,
    pub xi_dot: Twist,
}

/// Expands a 2x2 scalar block pattern into 12x12 with a diagonal factor.
fn expand(blocks: &Matrix2<f64>, diag: &Vector6<f64>) -> Matrix12 {
    let mut m = Matrix12::zeros();
    for (bi, bj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
        for a in 0..6 {
            m[(6 * bi + a, 6 * bj + a)] = blocks[(bi, bj)] * diag[a];
        }
    }
    m
}

fn transition_scalar(dt: f64) -> Matrix2<f64> {
    Matrix2::new(1.0, dt, 0.0, 1.0)
}

fn process_cov_scalar(dt: f64) -> Matrix2<f64> {
    Matrix2::new(
        dt * dt * dt / 3.0,
        dt * dt / 2.0,
        dt * dt / 2.0,
        dt,
    )
}

fn process_cov_inv_scalar(dt: f64) -> Matrix2<f64> {
    Matrix2::new(
        12.0 / (dt * dt * dt),
        -6.0 / (dt * dt),
        -6.0 / (dt * dt),
        4.0 / dt,
    )
}

/// `Phi(t, t_k) = [[I, (t - t_k) I], [0, I]]`.
pub fn transition(t: f64, t_k: f64) -> Matrix12 {
    expand(&transition_scalar(t - t_k), &Vector6::repeat(1.0))
}

/// Covariance `Q_k` accumulated over `dt`.
pub fn process_cov(dt: f64, q: &PriorHyperparams) -> Result<Matrix12> {
    if !(dt > 0.0) {
        return Err(Error::DegenerateInterval(dt));
    }
    Ok(expand(&process_cov_scalar(dt), &q.q_diag))
}

/// Closed-form inverse of [`process_cov`].
pub fn process_cov_inv(dt: f64, q: &PriorHyperparams) -> Result<Matrix12> {
    if !(dt > 0.0) {
        return Err(Error::DegenerateInterval(dt));
    }
    Ok(expand(&process_cov_inv_scalar(dt), &q.q_diag.map(|v| 1.0 / v)))
}

/// Local Markovian states of a knot pair, `(gamma_k(t_k), gamma_k(t_k+1))`.
pub fn local_gammas(k: &TrajectoryKnot, k1: &TrajectoryKnot) -> (LocalGamma, LocalGamma) {
    let xi = (k1.pose * k.pose.inverse()).log();
    (
        LocalGamma {
            xi: Twist::zeros(),
            xi_dot: k.velocity,
        },
        LocalGamma {
            xi,
            xi_dot: left_jacobian_inv(&xi) * k1.velocity,
        },
    )
}

/// How `d(J^-1 v)/dxi` and `d(J v)/dxi` are linearized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum JacobianMode {
    /// Series-exact derivatives.
    #[default]
    Exact,
    /// `J^-1 ~ 1 - xi^⋏/2`, `J ~ 1 + xi^⋏/2`; error grows linearly in `|xi|`.
    FirstOrder,
}

impl JacobianMode {
    fn d_jinv_vec(self, xi: &Twist, v: &Twist) -> Matrix6<f64> {
        match self {
            JacobianMode::Exact => left_jacobian_inv_vec_derivative(xi, v),
            JacobianMode::FirstOrder => curly_wedge(v) * 0.5,
        }
    }

    fn d_j_vec(self, xi: &Twist, v: &Twist) -> Matrix6<f64> {
        match self {
            JacobianMode::Exact => left_jacobian_vec_derivative(xi, v),
            JacobianMode::FirstOrder => -curly_wedge(v) * 0.5,
        }
    }
}

/// Motion-prior factor between two knots.
#[derive(Clone, Debug)]
pub struct MotionPriorFactor {
    pub residual: Vector12,
    /// Jacobians wrt `(eps_k, eta_k, eps_k1, eta_k1)`.
    pub jacobians: [Matrix12x6; 4],
    pub information: Matrix12,
}

/// `e = [ln(T_k1 T_k^-1) - dt varpi_k; J^-1 varpi_k1 - varpi_k]`.
pub fn motion_prior_error(k: &TrajectoryKnot, k1: &TrajectoryKnot) -> Vector12 {
    let dt = k1.time - k.time;
    let (_, g1) = local_gammas(k, k1);
    let mut e = Vector12::zeros();
    e.fixed_rows_mut::<6>(0).copy_from(&(g1.xi - k.velocity * dt));
    e.fixed_rows_mut::<6>(6).copy_from(&(g1.xi_dot - k.velocity));
    e
}

pub fn motion_prior_factor(
    k: &TrajectoryKnot,
    k1: &TrajectoryKnot,
    q: &PriorHyperparams,
    mode: JacobianMode,
) -> Result<MotionPriorFactor> {
    let dt = k1.time - k.time;
    let information = process_cov_inv(dt, q)?;
    let xi = (k1.pose * k.pose.inverse()).log();
    let jinv = left_jacobian_inv(&xi);
    let ad = (k1.pose * k.pose.inverse()).adjoint();
    let dv = mode.d_jinv_vec(&xi, &k1.velocity);

    let mut j_eps_k1 = Matrix12x6::zeros();
    j_eps_k1.fixed_view_mut::<6, 6>(0, 0).copy_from(&jinv);
    j_eps_k1.fixed_view_mut::<6, 6>(6, 0).copy_from(&(dv * jinv));
    let j_eps_k = -j_eps_k1 * ad;

    let mut j_eta_k = Matrix12x6::zeros();
    j_eta_k.fixed_view_mut::<6, 6>(0, 0).copy_from(&(-Matrix6::identity() * dt));
    j_eta_k.fixed_view_mut::<6, 6>(6, 0).copy_from(&(-Matrix6::identity()));
    let mut j_eta_k1 = Matrix12x6::zeros();
    j_eta_k1.fixed_view_mut::<6, 6>(6, 0).copy_from(&jinv);

    Ok(MotionPriorFactor {
        residual: motion_prior_error(k, k1),
        jacobians: [j_eps_k, j_eta_k, j_eps_k1, j_eta_k1],
        information,
    })
}

/// Scalar interpolation weights; `Lambda`/`Psi` are these blocks times `I_6`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InterpWeights {
    pub lambda: Matrix2<f64>,
    pub psi: Matrix2<f64>,
}

impl InterpWeights {
    /// `Psi = Q_tau Phi(t_k1, tau)^T Q_k1^-1`, `Lambda = Phi(tau, t_k) - Psi Phi(t_k1, t_k)`.
    pub fn new(tau: f64, t_k: f64, t_k1: f64) -> Self {
        let dt = t_k1 - t_k;
        let s = tau - t_k;
        let psi = process_cov_scalar(s)
            * transition_scalar(t_k1 - tau).transpose()
            * process_cov_inv_scalar(dt);
        let lambda = transition_scalar(s) - psi * transition_scalar(dt);
        Self { lambda, psi }
    }
}

/// Full 12x12 `(Lambda, Psi)`, evaluated with the PSD in place.
pub fn interp_matrices(
    tau: f64,
    t_k: f64,
    t_k1: f64,
    q: &PriorHyperparams,
) -> Result<(Matrix12, Matrix12)> {
    let dt = t_k1 - t_k;
    let q_k1_inv = process_cov_inv(dt, q)?;
    let q_tau = if tau > t_k {
        process_cov(tau - t_k, q)?
    } else {
        Matrix12::zeros()
    };
    let psi = q_tau * transition(t_k1, tau).transpose() * q_k1_inv;
    let lambda = transition(tau, t_k) - psi * transition(t_k1, t_k);
    Ok((lambda, psi))
}

/// Interpolated state at a measurement time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InterpolatedState {
    pub pose: Pose,
    pub velocity: Twist,
    pub bias: Vector6<f64>,
}

/// Jacobians of the interpolated pose/velocity perturbations wrt the
/// bracketing knot perturbations, ordered `(eps_k, eta_k, eps_k1, eta_k1)`.
/// Biases interpolate linearly with weights `(1 - s, s)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InterpJacobians {
    pub pose: [Matrix6<f64>; 4],
    pub velocity: [Matrix6<f64>; 4],
    pub bias_weights: (f64, f64),
}

/// Per-segment quantities reused for every interpolation time in `[t_k, t_k1]`.
#[derive(Clone, Debug)]
pub struct SegmentInterp {
    k: TrajectoryKnot,
    k1: TrajectoryKnot,
    xi1: Twist,
    jinv1: Matrix6<f64>,
    xi_dot1: Twist,
    ad10: Matrix6<f64>,
    d_jinv_v1: Matrix6<f64>,
    mode: JacobianMode,
}

impl SegmentInterp {
    pub fn new(k: &TrajectoryKnot, k1: &TrajectoryKnot, mode: JacobianMode) -> Self {
        let rel = k1.pose * k.pose.inverse();
        let xi1 = rel.log();
        let jinv1 = left_jacobian_inv(&xi1);
        Self {
            k: *k,
            k1: *k1,
            xi1,
            jinv1,
            xi_dot1: jinv1 * k1.velocity,
            ad10: rel.adjoint(),
            d_jinv_v1: mode.d_jinv_vec(&xi1, &k1.velocity),
            mode,
        }
    }

    pub fn knots(&self) -> (&TrajectoryKnot, &TrajectoryKnot) {
        (&self.k, &self.k1)
    }

    fn local(&self, w: &InterpWeights) -> (Twist, Twist) {
        let (l, p) = (&w.lambda, &w.psi);
        let v0 = self.k.velocity;
        let xi = v0 * l[(0, 1)] + self.xi1 * p[(0, 0)] + self.xi_dot1 * p[(0, 1)];
        let xi_dot = v0 * l[(1, 1)] + self.xi1 * p[(1, 0)] + self.xi_dot1 * p[(1, 1)];
        (xi, xi_dot)
    }

    fn bias_fraction(&self, tau: f64) -> f64 {
        (tau - self.k.time) / (self.k1.time - self.k.time)
    }

    pub fn state(&self, tau: f64) -> InterpolatedState {
        if tau == self.k.time {
            return InterpolatedState {
                pose: self.k.pose,
                velocity: self.k.velocity,
                bias: self.k.bias,
            };
        }
        if tau == self.k1.time {
            return InterpolatedState {
                pose: self.k1.pose,
                velocity: self.k1.velocity,
                bias: self.k1.bias,
            };
        }
        let w = InterpWeights::new(tau, self.k.time, self.k1.time);
        let (xi, xi_dot) = self.local(&w);
        let s = self.bias_fraction(tau);
        InterpolatedState {
            pose: Pose::exp(&xi) * self.k.pose,
            velocity: left_jacobian(&xi) * xi_dot,
            bias: self.k.bias * (1.0 - s) + self.k1.bias * s,
        }
    }

    pub fn state_and_jacobians(&self, tau: f64) -> (InterpolatedState, InterpJacobians) {
        let w = InterpWeights::new(tau, self.k.time, self.k1.time);
        let (xi, xi_dot) = self.local(&w);
        let (l, p) = (&w.lambda, &w.psi);

        // Local-variable Jacobians for row r of (Lambda, Psi).
        let local_jac = |r: usize| -> [Matrix6<f64>; 4] {
            let d_eps1 = (Matrix6::identity() * p[(r, 0)] + self.d_jinv_v1 * p[(r, 1)]) * self.jinv1;
            [
                -d_eps1 * self.ad10,
                Matrix6::identity() * l[(r, 1)],
                d_eps1,
                self.jinv1 * p[(r, 1)],
            ]
        };
        let dxi = local_jac(0);
        let dxi_dot = local_jac(1);

        let j_tau = left_jacobian(&xi);
        let ad_tau = Pose::exp(&xi).adjoint();
        let dj = self.mode.d_j_vec(&xi, &xi_dot);

        let mut pose = [Matrix6::zeros(); 4];
        let mut velocity = [Matrix6::zeros(); 4];
        for i in 0..4 {
            pose[i] = j_tau * dxi[i];
            velocity[i] = j_tau * dxi_dot[i] + dj * dxi[i];
        }
        pose[0] += ad_tau;

        let s = self.bias_fraction(tau);
        let state = self.state(tau);
        (
            state,
            InterpJacobians {
                pose,
                velocity,
                bias_weights: (1.0 - s, s),
            },
        )
    }
}

impl SegmentInterp {
    /// Interpolated state and only the pose rows of the Jacobians, ordered
    /// as in [`InterpJacobians::pose`].
    pub fn state_and_pose_jacobians(&self, tau: f64) -> (InterpolatedState, [Matrix6<f64>; 4]) {
        let w = InterpWeights::new(tau, self.k.time, self.k1.time);
        let (xi, xi_dot) = self.local(&w);
        let p = &w.psi;
        let d_eps1 = (Matrix6::identity() * p[(0, 0)] + self.d_jinv_v1 * p[(0, 1)]) * self.jinv1;
        let j_tau = left_jacobian(&xi);
        let e = Pose::exp(&xi);
        let jd = j_tau * d_eps1;
        let pose = [
            e.adjoint() - jd * self.ad10,
            j_tau * w.lambda[(0, 1)],
            jd,
            j_tau * self.jinv1 * p[(0, 1)],
        ];
        let s = self.bias_fraction(tau);
        let state = InterpolatedState {
            pose: e * self.k.pose,
            velocity: j_tau * xi_dot,
            bias: self.k.bias * (1.0 - s) + self.k1.bias * s,
        };
        (state, pose)
    }
}

pub fn interpolate_state(k: &TrajectoryKnot, k1: &TrajectoryKnot, tau: f64) -> InterpolatedState {
    SegmentInterp::new(k, k1, JacobianMode::Exact).state(tau)
}

pub fn interp_jacobians(
    k: &TrajectoryKnot,
    k1: &TrajectoryKnot,
    tau: f64,
    mode: JacobianMode,
) -> InterpJacobians {
    SegmentInterp::new(k, k1, mode).state_and_jacobians(tau).1
}

/// First-order map from a local GP perturbation `(d xi, d xi_dot)` at `tau` to
/// the global `(d T, d varpi)` perturbation (knot `k` held fixed).
pub fn local_to_global(xi: &Twist, xi_dot: &Twist) -> Matrix12 {
    let j = left_jacobian(xi);
    let mut m = Matrix12::zeros();
    m.fixed_view_mut::<6, 6>(0, 0).copy_from(&j);
    m.fixed_view_mut::<6, 6>(6, 6).copy_from(&j);
    m.fixed_view_mut::<6, 6>(6, 0)
        .copy_from(&left_jacobian_vec_derivative(xi, xi_dot));
    m
}

impl SegmentInterp {
    /// Local GP state at `tau` (for covariance interpolation).
    pub fn local_state(&self, tau: f64) -> LocalGamma {
        let w = InterpWeights::new(tau, self.k.time, self.k1.time);
        let (xi, xi_dot) = self.local(&w);
        LocalGamma { xi, xi_dot }
    }
}
