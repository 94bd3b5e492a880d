//! Analytic ground-truth trajectories.

use nalgebra::{Matrix3, SVector, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::gp_prior::{process_cov, transition, JacobianMode, PriorHyperparams, SegmentInterp, TrajectoryKnot};
use crate::liegroup::{left_jacobian, rot_axis, skew, twist, Pose, Twist};

/// Ground-truth state at one time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TruthState {
    /// `T_vi`.
    pub pose: Pose,
    /// Body-centric velocity `varpi` with `dT/dt = varpi^ T`.
    pub velocity: Twist,
    pub acceleration: Twist,
}

impl TruthState {
    pub fn knot(&self, time: f64) -> TrajectoryKnot {
        TrajectoryKnot::new(time, self.pose, self.velocity)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Profile {
    Stationary,
    /// Counter-clockwise circle starting at the origin heading +x, speed
    /// ramped from rest by a quintic smoothstep after a stationary lead-in.
    SmoothDrive {
        radius: f64,
        speed: f64,
        lead_in: f64,
        ramp: f64,
    },
    /// Spinning in place with a slow planar wander; yaw rate
    /// `rate (1 - cos(freq t))` after the lead-in.
    SpinAggressive { rate: f64, freq: f64, wander: f64, lead_in: f64 },
    /// `T(t) = exp(t varpi^) T_0`.
    ConstantVelocity { start: Pose, velocity: Twist },
    /// GP-mean interpolation through explicit knots.
    Knots(Vec<TrajectoryKnot>),
}

impl Profile {
    pub fn smooth_drive() -> Self {
        Profile::SmoothDrive {
            radius: 40.0,
            speed: 10.0,
            lead_in: 1.0,
            ramp: 4.0,
        }
    }

    pub fn spin_aggressive() -> Self {
        Profile::SpinAggressive {
            rate: 2.5,
            freq: 3.0,
            wander: 1.0,
            lead_in: 1.0,
        }
    }

    pub fn state(&self, t: f64) -> TruthState {
        match self {
            Profile::Stationary => planar(&PlanarSample::default()),
            Profile::SmoothDrive { radius, speed, lead_in, ramp } => {
                let (s, sd, sdd) = ramp_arc(t - lead_in, *speed, *ramp);
                let (sn, cs) = (s / radius).sin_cos();
                planar(&PlanarSample {
                    r: Vector3::new(radius * sn, radius * (1.0 - cs), 0.0),
                    rd: Vector3::new(sd * cs, sd * sn, 0.0),
                    rdd: Vector3::new(sdd * cs - sd * sd / radius * sn, sdd * sn + sd * sd / radius * cs, 0.0),
                    yaw: s / radius,
                    yaw_d: sd / radius,
                    yaw_dd: sdd / radius,
                })
            }
            Profile::SpinAggressive { rate, freq, wander, lead_in } => {
                let u = (t - lead_in).max(0.0);
                let (sn, cs) = (freq * u).sin_cos();
                // bounded wander with zero velocity and acceleration at the start
                let (s1, c1) = (0.5 * u).sin_cos();
                let (s2, c2) = u.sin_cos();
                planar(&PlanarSample {
                    r: Vector3::new(wander * (1.0 - c1).powi(2), 0.5 * wander * (1.0 - c2).powi(2), 0.0),
                    rd: Vector3::new(wander * (1.0 - c1) * s1, wander * (1.0 - c2) * s2, 0.0),
                    rdd: Vector3::new(
                        wander * 0.5 * (s1 * s1 + (1.0 - c1) * c1),
                        wander * (s2 * s2 + (1.0 - c2) * c2),
                        0.0,
                    ),
                    yaw: rate * (u - sn / freq),
                    yaw_d: rate * (1.0 - cs),
                    yaw_dd: rate * freq * sn,
                })
            }
            Profile::ConstantVelocity { start, velocity } => TruthState {
                pose: Pose::exp(&(velocity * t)) * *start,
                velocity: *velocity,
                acceleration: Twist::zeros(),
            },
            Profile::Knots(knots) => {
                let n = knots.len();
                let i = knots.partition_point(|k| k.time <= t).clamp(1, n - 1) - 1;
                let s = SegmentInterp::new(&knots[i], &knots[i + 1], JacobianMode::Exact).state(t);
                TruthState {
                    pose: s.pose,
                    velocity: s.velocity,
                    acceleration: Twist::zeros(),
                }
            }
        }
    }

    /// Physical body-frame linear velocity.
    pub fn body_velocity(&self, t: f64) -> Vector3<f64> {
        -self.state(t).velocity.fixed_rows::<3>(0).into_owned()
    }
}

/// Arc length, speed and tangential acceleration for a smoothstep ramp.
fn ramp_arc(u: f64, speed: f64, ramp: f64) -> (f64, f64, f64) {
    if u <= 0.0 {
        return (0.0, 0.0, 0.0);
    }
    if u >= ramp {
        return (0.5 * speed * ramp + speed * (u - ramp), speed, 0.0);
    }
    let x = u / ramp;
    let h = x.powi(3) * (10.0 - 15.0 * x + 6.0 * x * x);
    let hd = 30.0 * x * x * (1.0 - x).powi(2) / ramp;
    let integral = ramp * x.powi(4) * (2.5 - 3.0 * x + x * x);
    (speed * integral, speed * h, speed * hd)
}

#[derive(Default)]
struct PlanarSample {
    r: Vector3<f64>,
    rd: Vector3<f64>,
    rdd: Vector3<f64>,
    yaw: f64,
    yaw_d: f64,
    yaw_dd: f64,
}

/// Yaw-only vehicle at world position `r`.
fn planar(s: &PlanarSample) -> TruthState {
    let c_iv = rot_axis(&Vector3::z(), s.yaw);
    let c_vi: Matrix3<f64> = c_iv.transpose();
    let omega = Vector3::new(0.0, 0.0, s.yaw_d);
    let nu = c_vi * s.rd;
    let nu_dot = -skew(&omega) * nu + c_vi * s.rdd;
    TruthState {
        pose: Pose::new(c_vi, -(c_vi * s.r)),
        velocity: -twist(nu, omega),
        acceleration: -twist(nu_dot, Vector3::new(0.0, 0.0, s.yaw_dd)),
    }
}

/// Draws `count` knots `dt` apart from the motion prior, starting at `start`.
/// Use with [`Profile::Knots`] for trajectories that satisfy the estimator's
/// own process model.
pub fn sample_gp_knots(start: &TrajectoryKnot, dt: f64, count: usize, prior: &PriorHyperparams, rng: &mut impl Rng) -> Result<Vec<TrajectoryKnot>> {
    let chol = process_cov(dt, prior)?
        .cholesky()
        .ok_or_else(|| Error::Config("process covariance is not positive definite".into()))?;
    let phi = transition(dt, 0.0);
    let mut knots = vec![*start];
    for _ in 1..count {
        let k = knots.last().unwrap();
        let mut gamma = SVector::<f64, 12>::zeros();
        gamma.fixed_rows_mut::<6>(6).copy_from(&k.velocity);
        let w = SVector::<f64, 12>::from_fn(|_, _| rng.sample(StandardNormal));
        let g1 = phi * gamma + chol.l() * w;
        let xi = g1.fixed_rows::<6>(0).into_owned();
        let xi_dot = g1.fixed_rows::<6>(6).into_owned();
        knots.push(TrajectoryKnot::new(k.time + dt, Pose::exp(&xi) * k.pose, left_jacobian(&xi) * xi_dot));
    }
    Ok(knots)
}
