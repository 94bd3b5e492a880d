//! Sliding window of trajectory knots with Gauss-Newton assembly,
//! marginalization and covariance queries.

use log::debug;
use nalgebra::{DMatrix, Matrix3, Matrix6, SMatrix, SVector, Vector3, Vector6};

use super::linalg::{schur_first, BlockTridiagonal, Matrix18, Vector18, KNOT_DIM};
use crate::error::{Error, Result};
use crate::gp_prior::{
    local_to_global, motion_prior_factor, process_cov, InterpJacobians, InterpWeights,
    InterpolatedState, JacobianMode, Matrix12, PriorHyperparams, SegmentInterp, TrajectoryKnot,
};
use crate::icp::{p2p_radar_linearized, p2plane_linearized, Correspondence, Extrinsics, RobustLoss};
use crate::imu::{
    accel_error_jacobians, gyro_error, gyro_error_bias_jacobian, gyro_error_velocity_jacobian,
    physical_linear, preintegrate_velocity, ImuSample, Preintegration,
};
use crate::liegroup::{left_jacobian_inv, Pose};

type Matrix36 = SMatrix<f64, 36, 36>;
type Vector36 = SVector<f64, 36>;
type Matrix18x36 = SMatrix<f64, 18, 36>;

#[derive(Clone, Debug, PartialEq)]
pub struct PointToPlaneFactor {
    pub time: f64,
    pub q: Vector3<f64>,
    pub corr: Correspondence,
    /// Inverse measurement variance.
    pub info: f64,
    pub loss: RobustLoss,
    /// Frame that produced the measurement.
    pub tag: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RadarFactor {
    pub time: f64,
    pub q: Vector3<f64>,
    pub p: Vector3<f64>,
    pub info: Matrix3<f64>,
    pub loss: RobustLoss,
    pub tag: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GyroFactor {
    pub sample: ImuSample,
    pub info: Matrix3<f64>,
}

/// Preintegrated accelerometer factor over one knot interval.
#[derive(Clone, Debug, PartialEq)]
pub struct VelocityFactor {
    pub samples: Vec<ImuSample>,
    pub end: f64,
    pub r_accel: Matrix3<f64>,
    pub mode_2d: bool,
    /// Integrated with zero bias; the bias enters linearly.
    pre: Preintegration,
    info: Matrix3<f64>,
}

impl VelocityFactor {
    pub fn start(&self) -> f64 {
        self.samples[0].time
    }

    pub fn preintegration(&self) -> &Preintegration {
        &self.pre
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Factor {
    PointToPlane(PointToPlaneFactor),
    Radar(RadarFactor),
    Gyro(GyroFactor),
    Velocity(VelocityFactor),
}

impl Factor {
    /// Earliest time the factor depends on.
    pub fn time(&self) -> f64 {
        match self {
            Factor::PointToPlane(f) => f.time,
            Factor::Radar(f) => f.time,
            Factor::Gyro(f) => f.sample.time,
            Factor::Velocity(f) => f.start(),
        }
    }

    pub fn tag(&self) -> Option<usize> {
        match self {
            Factor::PointToPlane(f) => Some(f.tag),
            Factor::Radar(f) => Some(f.tag),
            _ => None,
        }
    }
}

/// Prior information on the first knot of the window.
#[derive(Clone, Debug, PartialEq)]
pub enum WindowPrior {
    /// Gaussian on the state: `x (-) mean` with information `info`.
    State { mean: TrajectoryKnot, info: Matrix18 },
    /// Quadratic `1/2 d^T A d - c^T d` in `d = x (-) lin`, left by
    /// marginalizing departed knots.
    Marginal { a: Matrix18, c: Vector18, lin: TrajectoryKnot },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WindowConfig {
    pub prior: PriorHyperparams,
    pub jacobian_mode: JacobianMode,
    pub extrinsics: Extrinsics,
    /// Gravity expressed in the map frame.
    pub gravity: Vector3<f64>,
    pub renormalize_every: usize,
    pub damping: f64,
    pub damping_retries: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            prior: PriorHyperparams::default(),
            jacobian_mode: JacobianMode::Exact,
            extrinsics: Extrinsics::default(),
            gravity: crate::imu::GRAVITY,
            renormalize_every: 100,
            damping: 1e-6,
            damping_retries: 5,
        }
    }
}

/// Assembled Gauss-Newton system; `rhs` is the negative gradient.
#[derive(Clone, Debug)]
pub struct Linearization {
    pub system: BlockTridiagonal,
    pub rhs: Vec<Vector18>,
    pub cost: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct InnerStats {
    pub iterations: usize,
    pub cost: f64,
    pub step_norm: f64,
    pub damping: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InnerConfig {
    pub max_iterations: usize,
    pub step_tol: f64,
    pub cost_tol: f64,
}

impl Default for InnerConfig {
    fn default() -> Self {
        Self {
            max_iterations: 5,
            step_tol: 1e-5,
            cost_tol: 1e-6,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SlidingWindow {
    cfg: WindowConfig,
    knots: Vec<TrajectoryKnot>,
    prior: WindowPrior,
    factors: Vec<Factor>,
    updates: usize,
}

/// `x (-) mean` for a full knot state.
pub fn knot_difference(x: &TrajectoryKnot, mean: &TrajectoryKnot) -> Vector18 {
    let mut r = Vector18::zeros();
    r.fixed_rows_mut::<6>(0).copy_from(&(x.pose * mean.pose.inverse()).log());
    r.fixed_rows_mut::<6>(6).copy_from(&(x.velocity - mean.velocity));
    r.fixed_rows_mut::<6>(12).copy_from(&(x.bias - mean.bias));
    r
}

/// Applies a knot perturbation `(eps, eta, beta)`.
pub fn knot_retract(x: &TrajectoryKnot, d: &Vector18) -> TrajectoryKnot {
    TrajectoryKnot {
        time: x.time,
        pose: x.pose.perturb(&d.fixed_rows::<6>(0).into_owned()),
        velocity: x.velocity + d.fixed_rows::<6>(6),
        bias: x.bias + d.fixed_rows::<6>(12),
    }
}

fn interp_projection(j: &InterpJacobians) -> Matrix18x36 {
    let mut p = Matrix18x36::zeros();
    let cols = [0, 6, 18, 24];
    for (slot, &c) in cols.iter().enumerate() {
        p.fixed_view_mut::<6, 6>(0, c).copy_from(&j.pose[slot]);
        p.fixed_view_mut::<6, 6>(6, c).copy_from(&j.velocity[slot]);
    }
    let (w0, w1) = j.bias_weights;
    p.fixed_view_mut::<6, 6>(12, 12).copy_from(&(Matrix6::identity() * w0));
    p.fixed_view_mut::<6, 6>(12, 30).copy_from(&(Matrix6::identity() * w1));
    p
}

fn scatter(lin: &mut Linearization, seg: usize, a: &Matrix36, g: &Vector36) {
    lin.system.diag[seg] += a.fixed_view::<18, 18>(0, 0);
    lin.system.diag[seg + 1] += a.fixed_view::<18, 18>(18, 18);
    lin.system.off[seg] += a.fixed_view::<18, 18>(0, 18);
    lin.rhs[seg] -= g.fixed_rows::<18>(0);
    lin.rhs[seg + 1] -= g.fixed_rows::<18>(18);
}

/// Accumulates `J^T W J` and `J^T W e` for a local-state residual.
#[derive(Default)]
struct LocalAccumulator {
    h: SMatrix<f64, 18, 18>,
    g: SVector<f64, 18>,
    pose_only: bool,
    any: bool,
}

impl LocalAccumulator {
    fn new() -> Self {
        Self {
            pose_only: true,
            ..Default::default()
        }
    }

    fn add<const R: usize>(&mut self, j: &SMatrix<f64, R, 18>, w: &SMatrix<f64, R, R>, e: &SVector<f64, R>, pose_only: bool) {
        let jtw = j.transpose() * w;
        self.h += jtw * j;
        self.g += jtw * e;
        self.pose_only &= pose_only;
        self.any = true;
    }

    /// Scalar residual touching only the pose block.
    fn add_pose_scalar(&mut self, j: &SMatrix<f64, 1, 6>, w: f64, e: f64) {
        let jt = j.transpose() * w;
        {
            let mut h = self.h.fixed_view_mut::<6, 6>(0, 0);
            h += jt * j;
        }
        {
            let mut g = self.g.fixed_rows_mut::<6>(0);
            g += jt * e;
        }
        self.any = true;
    }
}

impl SlidingWindow {
    /// A window holding a single knot with a Gaussian prior on it.
    pub fn new(cfg: WindowConfig, first: TrajectoryKnot, prior_info: Matrix18) -> Self {
        Self {
            cfg,
            knots: vec![first],
            prior: WindowPrior::State {
                mean: first,
                info: prior_info,
            },
            factors: Vec::new(),
            updates: 0,
        }
    }

    pub fn config(&self) -> &WindowConfig {
        &self.cfg
    }

    pub fn config_mut(&mut self) -> &mut WindowConfig {
        &mut self.cfg
    }

    pub fn knots(&self) -> &[TrajectoryKnot] {
        &self.knots
    }

    pub fn prior(&self) -> &WindowPrior {
        &self.prior
    }

    pub fn factors(&self) -> &[Factor] {
        &self.factors
    }

    pub fn start_time(&self) -> f64 {
        self.knots[0].time
    }

    pub fn end_time(&self) -> f64 {
        self.knots.last().unwrap().time
    }

    /// Constant-velocity extrapolation from the newest knot.
    pub fn init_knot(&self, t: f64) -> TrajectoryKnot {
        let last = self.knots.last().unwrap();
        TrajectoryKnot {
            time: t,
            pose: Pose::exp(&(last.velocity * (t - last.time))) * last.pose,
            velocity: last.velocity,
            bias: last.bias,
        }
    }

    pub fn push_knot(&mut self, t: f64) -> Result<()> {
        if t <= self.end_time() {
            return Err(Error::DegenerateInterval(t - self.end_time()));
        }
        let k = self.init_knot(t);
        self.knots.push(k);
        Ok(())
    }

    pub fn add_factor(&mut self, f: Factor) {
        self.factors.push(f);
    }

    pub fn retain_factors(&mut self, keep: impl Fn(&Factor) -> bool) {
        self.factors.retain(keep);
    }

    /// Adds a gyro factor and returns whether the sample lies in the window.
    pub fn add_gyro(&mut self, sample: ImuSample, r_omega: &Matrix3<f64>) -> bool {
        if sample.time < self.start_time() || sample.time > self.end_time() {
            return false;
        }
        let info = r_omega.try_inverse().unwrap_or_else(Matrix3::zeros);
        self.factors.push(Factor::Gyro(GyroFactor { sample, info }));
        true
    }

    /// Adds a preintegrated velocity factor over `[samples[0].time, end]`.
    pub fn add_velocity(&mut self, samples: Vec<ImuSample>, end: f64, r_accel: Matrix3<f64>, mode_2d: bool) -> bool {
        if samples.is_empty() {
            return false;
        }
        let placeholder = Preintegration {
            start: samples[0].time,
            end,
            delta_nu: Vector3::zeros(),
            covariance: r_accel,
            duration: end - samples[0].time,
        };
        let mut f = VelocityFactor {
            samples,
            end,
            r_accel,
            mode_2d,
            pre: placeholder,
            info: Matrix3::identity(),
        };
        self.refresh_velocity_factor(&mut f);
        self.factors.push(Factor::Velocity(f));
        true
    }

    fn refresh_velocity_factor(&self, f: &mut VelocityFactor) {
        let attitudes: Vec<Matrix3<f64>> = f
            .samples
            .iter()
            .map(|s| self.state_at(s.time).pose.rotation)
            .collect();
        if let Some(pre) = preintegrate_velocity(
            &f.samples,
            &attitudes,
            &Vector3::zeros(),
            &self.cfg.gravity,
            f.end,
            &f.r_accel,
            f.mode_2d,
        ) {
            f.info = pre.covariance.try_inverse().unwrap_or_else(Matrix3::zeros);
            f.pre = pre;
        }
    }

    /// Re-evaluates preintegration attitudes at the current estimate.
    pub fn refresh_preintegration(&mut self) {
        let mut factors = std::mem::take(&mut self.factors);
        for f in &mut factors {
            if let Factor::Velocity(v) = f {
                self.refresh_velocity_factor(v);
            }
        }
        self.factors = factors;
    }

    fn segment_of(&self, t: f64) -> Option<usize> {
        let n = self.knots.len();
        if n < 2 || t < self.knots[0].time || t > self.knots[n - 1].time {
            return None;
        }
        let i = self.knots.partition_point(|k| k.time <= t);
        Some(i.saturating_sub(1).min(n - 2))
    }

    fn interps(&self) -> Vec<SegmentInterp> {
        self.knots
            .windows(2)
            .map(|w| SegmentInterp::new(&w[0], &w[1], self.cfg.jacobian_mode))
            .collect()
    }

    /// Interpolated state at `t` (clamped to the window).
    pub fn state_at(&self, t: f64) -> InterpolatedState {
        let n = self.knots.len();
        if n == 1 || t <= self.knots[0].time {
            let k = &self.knots[0];
            if n == 1 || t == k.time {
                return InterpolatedState {
                    pose: Pose::exp(&(k.velocity * (t - k.time))) * k.pose,
                    velocity: k.velocity,
                    bias: k.bias,
                };
            }
        }
        if t >= self.knots[n - 1].time {
            let k = &self.knots[n - 1];
            return InterpolatedState {
                pose: Pose::exp(&(k.velocity * (t - k.time))) * k.pose,
                velocity: k.velocity,
                bias: k.bias,
            };
        }
        let i = self.segment_of(t).unwrap_or(0);
        SegmentInterp::new(&self.knots[i], &self.knots[i + 1], self.cfg.jacobian_mode).state(t)
    }

    /// Cost and (optionally) normal equations over the factors that belong to
    /// segments accepted by `segments`.
    fn accumulate(&self, jacobians: bool, segments: &dyn Fn(usize) -> bool, with_prior: bool) -> Linearization {
        let n = self.knots.len();
        let mut lin = Linearization {
            system: BlockTridiagonal::zeros(n),
            rhs: vec![Vector18::zeros(); n],
            cost: 0.0,
        };
        let interps = self.interps();
        let ext = &self.cfg.extrinsics;

        if with_prior {
            self.add_window_prior(&mut lin, jacobians);
        }

        for (i, w) in self.knots.windows(2).enumerate() {
            if !segments(i) {
                continue;
            }
            self.add_segment_priors(&mut lin, i, &w[0], &w[1], jacobians);
        }

        // Interpolated factors grouped by time.
        let mut order: Vec<(f64, usize)> = self
            .factors
            .iter()
            .enumerate()
            .filter(|(_, f)| !matches!(f, Factor::Velocity(_)))
            .map(|(i, f)| (f.time(), i))
            .collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut start = 0;
        while start < order.len() {
            let t = order[start].0;
            let mut end = start;
            while end < order.len() && order[end].0 == t {
                end += 1;
            }
            let group = &order[start..end];
            start = end;
            let Some(seg) = self.segment_of(t) else {
                debug!("factor at {t} outside window");
                continue;
            };
            if !segments(seg) {
                continue;
            }
            let interp = &interps[seg];
            if !jacobians {
                let state = interp.state(t);
                for &(_, idx) in group {
                    lin.cost += self.local_factor(&self.factors[idx], &state, ext, None);
                }
                continue;
            }
            let pose_only = group.iter().all(|&(_, idx)| matches!(self.factors[idx], Factor::PointToPlane(_)));
            let mut acc = LocalAccumulator::new();
            if pose_only {
                let (state, jp) = interp.state_and_pose_jacobians(t);
                for &(_, idx) in group {
                    lin.cost += self.local_factor(&self.factors[idx], &state, ext, Some(&mut acc));
                }
                let mut p = SMatrix::<f64, 6, 36>::zeros();
                for (slot, &c) in [0, 6, 18, 24].iter().enumerate() {
                    p.fixed_view_mut::<6, 6>(0, c).copy_from(&jp[slot]);
                }
                let h = acc.h.fixed_view::<6, 6>(0, 0) * p;
                scatter(&mut lin, seg, &(p.transpose() * h), &(p.transpose() * acc.g.fixed_rows::<6>(0)));
            } else {
                let (state, j) = interp.state_and_jacobians(t);
                for &(_, idx) in group {
                    lin.cost += self.local_factor(&self.factors[idx], &state, ext, Some(&mut acc));
                }
                let p = interp_projection(&j);
                scatter(&mut lin, seg, &(p.transpose() * acc.h * p), &(p.transpose() * acc.g));
            }
        }

        for f in &self.factors {
            if let Factor::Velocity(v) = f {
                let Some(seg) = self.segment_of(v.start()) else {
                    continue;
                };
                if !segments(seg) {
                    continue;
                }
                self.add_velocity_factor(&mut lin, &interps[seg], seg, v, jacobians);
            }
        }
        lin
    }

    /// Returns the cost of one factor at an interpolated state and optionally
    /// accumulates its local linearization.
    fn local_factor(&self, f: &Factor, state: &InterpolatedState, ext: &Extrinsics, acc: Option<&mut LocalAccumulator>) -> f64 {
        match f {
            Factor::PointToPlane(m) => {
                let (e, j) = p2plane_linearized(&m.corr, &m.q, &state.pose, ext);
                let r = m.info.sqrt() * e.abs();
                if let Some(acc) = acc {
                    acc.add_pose_scalar(&j, m.loss.weight(r) * m.info, e);
                }
                m.loss.cost(r)
            }
            Factor::Radar(m) => {
                let (e, jp, jv) = p2p_radar_linearized(&m.p, &m.q, &state.pose, &state.velocity, ext);
                let r = (e.transpose() * m.info * e)[0].max(0.0).sqrt();
                if let Some(acc) = acc {
                    let w = m.info * m.loss.weight(r);
                    let mut jl = SMatrix::<f64, 3, 18>::zeros();
                    jl.fixed_view_mut::<3, 6>(0, 0).copy_from(&jp);
                    jl.fixed_view_mut::<3, 6>(0, 6).copy_from(&jv);
                    acc.add(&jl, &w, &e, false);
                }
                m.loss.cost(r)
            }
            Factor::Gyro(g) => {
                let b_omega = state.bias.fixed_rows::<3>(3).into_owned();
                let e = gyro_error(&g.sample, &state.velocity, &b_omega);
                if let Some(acc) = acc {
                    let mut jl = SMatrix::<f64, 3, 18>::zeros();
                    jl.fixed_view_mut::<3, 6>(0, 6).copy_from(&gyro_error_velocity_jacobian());
                    jl.fixed_view_mut::<3, 6>(0, 12).copy_from(&gyro_error_bias_jacobian());
                    acc.add(&jl, &g.info, &e, false);
                }
                0.5 * (e.transpose() * g.info * e)[0]
            }
            Factor::Velocity(_) => unreachable!("velocity factors are not local"),
        }
    }

    fn add_velocity_factor(&self, lin: &mut Linearization, interp: &SegmentInterp, seg: usize, v: &VelocityFactor, jacobians: bool) {
        let (s0, j0) = interp.state_and_jacobians(v.start());
        let (s1, j1) = interp.state_and_jacobians(v.end);
        let b_a = self.knots[seg].bias.fixed_rows::<3>(0).into_owned();
        let delta_nu = v.pre.delta_nu - b_a * v.pre.duration;
        let e = physical_linear(&s1.velocity) - physical_linear(&s0.velocity) - delta_nu;
        lin.cost += 0.5 * (e.transpose() * v.info * e)[0];
        if !jacobians {
            return;
        }
        let (je, js, jb) = accel_error_jacobians(&v.pre);
        let p0 = interp_projection(&j0);
        let p1 = interp_projection(&j1);
        let mut j = SMatrix::<f64, 3, 36>::zeros();
        j += je * p1.fixed_rows::<6>(6);
        j += js * p0.fixed_rows::<6>(6);
        let mut jbias = j.fixed_view_mut::<3, 6>(0, 12);
        jbias += jb;
        let jtw = j.transpose() * v.info;
        scatter(lin, seg, &(jtw * j), &(jtw * e));
    }

    fn add_segment_priors(&self, lin: &mut Linearization, seg: usize, k0: &TrajectoryKnot, k1: &TrajectoryKnot, jacobians: bool) {
        let q = &self.cfg.prior;
        let Ok(f) = motion_prior_factor(k0, k1, q, self.cfg.jacobian_mode) else {
            return;
        };
        lin.cost += 0.5 * (f.residual.transpose() * f.information * f.residual)[0];
        let dt = k1.time - k0.time;
        let eb = k1.bias - k0.bias;
        let wb = Matrix6::from_diagonal(&q.qb_diag.map(|v| 1.0 / (v * dt)));
        lin.cost += 0.5 * (eb.transpose() * wb * eb)[0];
        if !jacobians {
            return;
        }
        let mut j = SMatrix::<f64, 12, 36>::zeros();
        for (slot, c) in [0, 6, 18, 24].into_iter().enumerate() {
            j.fixed_view_mut::<12, 6>(0, c).copy_from(&f.jacobians[slot]);
        }
        let jtw = j.transpose() * f.information;
        let mut a = jtw * j;
        let mut g = jtw * f.residual;
        // bias random walk: e = b1 - b0
        {
            let mut v = a.fixed_view_mut::<6, 6>(12, 12);
            v += wb;
        }
        {
            let mut v = a.fixed_view_mut::<6, 6>(30, 30);
            v += wb;
        }
        {
            let mut v = a.fixed_view_mut::<6, 6>(12, 30);
            v += -wb;
        }
        {
            let mut v = a.fixed_view_mut::<6, 6>(30, 12);
            v += -wb;
        }
        {
            let mut v = g.fixed_rows_mut::<6>(12);
            v += -wb * eb;
        }
        {
            let mut v = g.fixed_rows_mut::<6>(30);
            v += wb * eb;
        }
        scatter(lin, seg, &a, &g);
    }

    fn add_window_prior(&self, lin: &mut Linearization, jacobians: bool) {
        let (r, a, c) = match &self.prior {
            WindowPrior::State { mean, info } => (knot_difference(&self.knots[0], mean), info, None),
            WindowPrior::Marginal { a, c, lin } => (knot_difference(&self.knots[0], lin), a, Some(c)),
        };
        let ar = a * r;
        lin.cost += 0.5 * r.dot(&ar) - c.map_or(0.0, |c| c.dot(&r));
        if jacobians {
            let mut j = Matrix18::identity();
            j.fixed_view_mut::<6, 6>(0, 0)
                .copy_from(&left_jacobian_inv(&r.fixed_rows::<6>(0).into_owned()));
            let grad = ar - c.copied().unwrap_or_else(Vector18::zeros);
            lin.system.diag[0] += j.transpose() * a * j;
            lin.rhs[0] -= j.transpose() * grad;
        }
    }

    /// Normal equations over every knot.
    pub fn linearize(&self) -> Linearization {
        self.accumulate(true, &|_| true, true)
    }

    pub fn cost(&self) -> f64 {
        self.accumulate(false, &|_| true, true).cost
    }

    /// Gauss-Newton step for every knot.
    pub fn solve_step(&self, lin: &Linearization) -> Result<(Vec<Vector18>, f64)> {
        lin.system.solve_damped(&lin.rhs, self.cfg.damping, self.cfg.damping_retries)
    }

    pub fn apply_step(&mut self, step: &[Vector18]) {
        for (k, d) in self.knots.iter_mut().zip(step) {
            *k = knot_retract(k, d);
        }
        self.updates += 1;
        if self.cfg.renormalize_every > 0 && self.updates.is_multiple_of(self.cfg.renormalize_every) {
            for k in &mut self.knots {
                k.pose = k.pose.normalized();
            }
        }
    }

    /// Inner Gauss-Newton loop. Steps that increase the cost are rejected.
    pub fn optimize(&mut self, cfg: &InnerConfig) -> Result<InnerStats> {
        let mut stats = InnerStats {
            cost: self.cost(),
            ..Default::default()
        };
        for _ in 0..cfg.max_iterations {
            let lin = self.linearize();
            let (step, damping) = self.solve_step(&lin)?;
            let step_norm = step.iter().map(|s| s.norm_squared()).sum::<f64>().sqrt();
            let backup = self.knots.clone();
            self.apply_step(&step);
            let cost = self.cost();
            stats.iterations += 1;
            stats.damping = stats.damping.max(damping);
            if cost > stats.cost + 1e-9 * stats.cost.abs() + 1e-12 {
                debug!("rejecting step: cost {} -> {}", stats.cost, cost);
                self.knots = backup;
                break;
            }
            let rel = (stats.cost - cost).abs() / stats.cost.abs().max(f64::MIN_POSITIVE);
            stats.cost = cost;
            stats.step_norm = step_norm;
            if step_norm <= cfg.step_tol || rel <= cfg.cost_tol {
                break;
            }
        }
        Ok(stats)
    }

    /// Marginalizes the first knot into a prior on the second.
    pub fn marginalize_first(&mut self) {
        assert!(self.knots.len() >= 2, "cannot marginalize the only knot");
        let lin = self.accumulate(true, &|s| s == 0, true);
        let sys = BlockTridiagonal {
            diag: lin.system.diag[..2].to_vec(),
            off: lin.system.off[..1].to_vec(),
        };
        let (red, rhs) = schur_first(&sys, &lin.rhs[..2]);
        let a = red.diag[0];
        self.prior = WindowPrior::Marginal {
            a: 0.5 * (a + a.transpose()),
            c: rhs[0],
            lin: self.knots[1],
        };
        let t1 = self.knots[1].time;
        self.factors.retain(|f| f.time() >= t1);
        self.knots.remove(0);
    }

    /// Marginalizes knots so that the first knot is the newest one at or
    /// before `t`.
    pub fn slide_to(&mut self, t: f64) {
        while self.knots.len() >= 2 && self.knots[1].time <= t {
            self.marginalize_first();
        }
    }

    /// Joint covariance of every knot state (dense).
    pub fn knot_covariance(&self) -> Result<DMatrix<f64>> {
        let lin = self.linearize();
        let dense = lin.system.to_dense();
        let chol = dense.cholesky().ok_or(Error::NotPositiveDefinite(0))?;
        Ok(chol.inverse())
    }

    /// Joint `(pose, velocity)` covariance at time `t` inside the window.
    pub fn query_covariance(&self, t: f64) -> Result<Matrix12> {
        let seg = self.segment_of(t).ok_or(Error::OutOfRange {
            t,
            start: self.start_time(),
            end: self.end_time(),
        })?;
        let cov = self.knot_covariance()?;
        let block = cov.view((seg * KNOT_DIM, seg * KNOT_DIM), (2 * KNOT_DIM, 2 * KNOT_DIM));
        let block = SMatrix::<f64, 36, 36>::from_fn(|r, c| block[(r, c)]);
        let (k0, k1) = (&self.knots[seg], &self.knots[seg + 1]);
        let interp = SegmentInterp::new(k0, k1, self.cfg.jacobian_mode);
        let (_, j) = interp.state_and_jacobians(t);
        let p = interp_projection(&j);
        let p12 = p.fixed_rows::<12>(0);
        let mut out: Matrix12 = p12 * block * p12.transpose();
        if t > k0.time && t < k1.time {
            let w = InterpWeights::new(t, k0.time, k1.time);
            let q_tau = process_cov(t - k0.time, &self.cfg.prior)?;
            let q_1 = process_cov(k1.time - k0.time, &self.cfg.prior)?;
            let psi = expand_weights(&w.psi);
            let local = q_tau - psi * q_1 * psi.transpose();
            let g = interp.local_state(t);
            let l = local_to_global(&g.xi, &g.xi_dot);
            out += l * local * l.transpose();
        }
        Ok(0.5 * (out + out.transpose()))
    }

    /// Pose covariance at `t`.
    pub fn query_pose_covariance(&self, t: f64) -> Result<Matrix6<f64>> {
        Ok(self.query_covariance(t)?.fixed_view::<6, 6>(0, 0).into_owned())
    }

    /// Largest-to-smallest diagonal ratio of the reduced system, a cheap
    /// conditioning proxy.
    pub fn condition_proxy(lin: &Linearization) -> f64 {
        let mut lo = f64::INFINITY;
        let mut hi: f64 = 0.0;
        for d in &lin.system.diag {
            for k in 0..KNOT_DIM {
                lo = lo.min(d[(k, k)]);
                hi = hi.max(d[(k, k)]);
            }
        }
        if lo > 0.0 {
            hi / lo
        } else {
            f64::INFINITY
        }
    }

    /// Moves every knot by a rigid-body and bias offset (testing helper for
    /// perturbing initial guesses).
    pub fn set_knots(&mut self, knots: Vec<TrajectoryKnot>) {
        assert_eq!(knots.len(), self.knots.len());
        self.knots = knots;
    }
}

fn expand_weights(b: &nalgebra::Matrix2<f64>) -> Matrix12 {
    let mut m = Matrix12::zeros();
    for (bi, bj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
        m.fixed_view_mut::<6, 6>(6 * bi, 6 * bj)
            .copy_from(&(Matrix6::identity() * b[(bi, bj)]));
    }
    m
}

/// Block-diagonal prior information from per-component standard deviations.
pub fn prior_information(pose_sigma: &Vector6<f64>, velocity_sigma: &Vector6<f64>, bias_sigma: &Vector6<f64>) -> Matrix18 {
    let mut d = Vector18::zeros();
    for i in 0..6 {
        d[i] = 1.0 / pose_sigma[i].powi(2);
        d[6 + i] = 1.0 / velocity_sigma[i].powi(2);
        d[12 + i] = 1.0 / bias_sigma[i].powi(2);
    }
    Matrix18::from_diagonal(&d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imu::GRAVITY;
    use crate::liegroup::Twist;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec<const N: usize>(rng: &mut impl Rng, s: f64) -> SVector<f64, N> {
        SVector::<f64, N>::from_fn(|_, _| rng.random_range(-s..s))
    }

    fn random_window(rng: &mut impl Rng, n: usize) -> SlidingWindow {
        let cfg = WindowConfig::default();
        let mut first = TrajectoryKnot::new(0.0, Pose::exp(&rand_vec(rng, 0.5)), rand_vec(rng, 1.0));
        first.bias = rand_vec(rng, 0.05);
        let info = prior_information(&Vector6::repeat(0.1), &Vector6::repeat(0.5), &Vector6::repeat(0.1));
        let mut w = SlidingWindow::new(cfg, first, info);
        for i in 1..n {
            w.push_knot(0.1 * i as f64).unwrap();
        }
        let knots: Vec<TrajectoryKnot> = w
            .knots()
            .iter()
            .map(|k| {
                let mut d = rand_vec::<18>(rng, 0.05);
                if k.time == 0.0 {
                    d *= 0.0;
                }
                knot_retract(k, &d)
            })
            .collect();
        w.set_knots(knots);
        w
    }

    fn add_random_factors(rng: &mut impl Rng, w: &mut SlidingWindow) {
        let end = w.end_time();
        for i in 0..40 {
            let t = if i % 10 == 0 { 0.1 * (i / 10) as f64 } else { rng.random_range(0.0..end) };
            let n = rand_vec::<3>(rng, 1.0).normalize();
            w.add_factor(Factor::PointToPlane(PointToPlaneFactor {
                time: t,
                q: rand_vec(rng, 10.0),
                corr: Correspondence { p: rand_vec(rng, 10.0), n, alpha: 0.9 },
                info: 4.0,
                loss: if i % 2 == 0 { RobustLoss::None } else { RobustLoss::Cauchy(1.0) },
                tag: 0,
            }));
        }
        w.config_mut().extrinsics.beta = 0.05;
        for _ in 0..10 {
            let t = rng.random_range(0.0..end);
            w.add_factor(Factor::Radar(RadarFactor {
                time: t,
                q: rand_vec(rng, 20.0),
                p: rand_vec(rng, 20.0),
                info: Matrix3::identity() * 0.5,
                loss: RobustLoss::Cauchy(1.0),
                tag: 0,
            }));
        }
        let mut samples = Vec::new();
        let mut t = 0.0;
        while t < end {
            let s = ImuSample { time: t, omega: rand_vec(rng, 1.0), accel: rand_vec::<3>(rng, 1.0) - GRAVITY };
            w.add_gyro(s, &(Matrix3::identity() * 1e-2));
            samples.push(s);
            t += 0.013;
        }
        let times: Vec<f64> = w.knots().iter().map(|k| k.time).collect();
        for pair in times.windows(2) {
            let seg: Vec<ImuSample> = samples.iter().copied().filter(|s| s.time >= pair[0] && s.time < pair[1]).collect();
            w.add_velocity(seg, pair[1], Matrix3::identity() * 1e-2, false);
        }
    }

    #[test]
    fn gradient_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut w = random_window(&mut rng, 4);
        add_random_factors(&mut rng, &mut w);
        let lin = w.linearize();
        assert!((lin.cost - w.cost()).abs() < 1e-9 * lin.cost.max(1.0));
        let h = 1e-6;
        for k in 0..w.knots().len() {
            for d in 0..KNOT_DIM {
                let mut plus = w.clone();
                let mut minus = w.clone();
                let mut step = vec![Vector18::zeros(); w.knots().len()];
                step[k][d] = h;
                plus.apply_step(&step);
                step[k][d] = -h;
                minus.apply_step(&step);
                let fd = (plus.cost() - minus.cost()) / (2.0 * h);
                let an = -lin.rhs[k][d];
                assert!((fd - an).abs() < 1e-4 * (1.0 + an.abs()), "knot {k} dim {d}: fd {fd} analytic {an}");
            }
        }
    }

    #[test]
    fn hessian_matches_gradient_difference_without_robust_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut w = random_window(&mut rng, 3);
        add_random_factors(&mut rng, &mut w);
        w.retain_factors(|f| !matches!(f, Factor::PointToPlane(p) if p.loss != RobustLoss::None) && !matches!(f, Factor::Radar(_)));
        // Gauss-Newton Hessian is symmetric positive definite and banded.
        let lin = w.linearize();
        let dense = lin.system.to_dense();
        assert!((dense.clone() - dense.transpose()).norm() < 1e-9 * dense.norm());
        assert!(dense.cholesky().is_some());
    }

    fn consistent_window(n: usize) -> (SlidingWindow, Vec<TrajectoryKnot>) {
        // Constant body velocity with exact point-to-plane measurements on
        // three orthogonal walls.
        let varpi = Twist::from_column_slice(&[-2.0, -0.3, 0.0, 0.0, 0.0, -0.4]);
        let truth = |t: f64| TrajectoryKnot::new(t, Pose::exp(&(varpi * t)), varpi);
        let info = prior_information(&Vector6::repeat(1e-3), &Vector6::repeat(1.0), &Vector6::repeat(1e-3));
        let mut w = SlidingWindow::new(WindowConfig::default(), truth(0.0), info);
        for i in 1..n {
            w.push_knot(0.1 * i as f64).unwrap();
        }
        let planes = [
            (Vector3::new(1.0, 0.0, 0.0), 8.0),
            (Vector3::new(0.0, 1.0, 0.0), -6.0),
            (Vector3::new(0.0, 0.0, 1.0), -1.5),
            (Vector3::new(0.6, 0.8, 0.0), 12.0),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let end = w.end_time();
        for i in 0..400 {
            let t = end * i as f64 / 400.0;
            let (nrm, d) = planes[i % planes.len()];
            let p = nrm * d + rand_vec::<3>(&mut rng, 3.0).cross(&nrm);
            let q = truth(t).pose.transform_point(&p);
            w.add_factor(Factor::PointToPlane(PointToPlaneFactor {
                time: t,
                q,
                corr: Correspondence { p: nrm * d, n: nrm, alpha: 1.0 },
                info: 100.0,
                loss: RobustLoss::None,
                tag: 0,
            }));
        }
        let knots = (0..n).map(|i| truth(0.1 * i as f64)).collect();
        (w, knots)
    }

    #[test]
    fn optimize_recovers_constant_velocity_trajectory() {
        let (mut w, truth) = consistent_window(5);
        // Start from a stationary guess.
        let stationary: Vec<TrajectoryKnot> = truth
            .iter()
            .map(|k| TrajectoryKnot::new(k.time, truth[0].pose, Twist::zeros()))
            .collect();
        w.set_knots(stationary);
        let stats = w
            .optimize(&InnerConfig { max_iterations: 20, step_tol: 1e-10, cost_tol: 0.0 })
            .unwrap();
        assert!(stats.cost < 1e-8, "final cost {}", stats.cost);
        for (k, t) in w.knots().iter().zip(&truth) {
            assert!((k.pose * t.pose.inverse()).log().norm() < 1e-5);
            assert!((k.velocity - t.velocity).norm() < 1e-4);
        }
    }

    #[test]
    fn marginalization_preserves_solution_on_remaining_knots() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut w = random_window(&mut rng, 5);
        add_random_factors(&mut rng, &mut w);
        let full = w.linearize();
        let x_full = full.system.solve(&full.rhs).unwrap();

        let mut m = w.clone();
        m.marginalize_first();
        assert_eq!(m.knots().len(), 4);
        assert!(m.factors().iter().all(|f| f.time() >= 0.1));
        let lin = m.linearize();
        let (x, _) = m.solve_step(&lin).unwrap();
        for i in 0..4 {
            assert!((x[i] - x_full[i + 1]).norm() < 1e-6 * (1.0 + x_full[i + 1].norm()), "knot {i}");
        }
    }

    #[test]
    fn slide_marginalizes_knots_before_time() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut w = random_window(&mut rng, 6);
        add_random_factors(&mut rng, &mut w);
        w.slide_to(0.25);
        assert_eq!(w.knots().len(), 4);
        assert!((w.start_time() - 0.2).abs() < 1e-12);
        assert!(matches!(w.prior(), WindowPrior::Marginal { .. }));
        w.slide_to(0.25);
        assert_eq!(w.knots().len(), 4);
    }

    #[test]
    fn covariance_at_knot_matches_dense_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut w = random_window(&mut rng, 4);
        add_random_factors(&mut rng, &mut w);
        let dense = w.knot_covariance().unwrap();
        let c = w.query_covariance(0.1).unwrap();
        for r in 0..12 {
            for col in 0..12 {
                let d = dense[(KNOT_DIM + r, KNOT_DIM + col)];
                assert!((c[(r, col)] - d).abs() < 1e-9 * (1.0 + d.abs()));
            }
        }
        let mid = w.query_covariance(0.15).unwrap();
        assert!(mid.symmetric_eigenvalues().min() > 0.0);
        assert!(w.query_covariance(1.0).is_err());
    }

    #[test]
    fn factor_at_knot_time_uses_later_segment() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let w = random_window(&mut rng, 4);
        assert_eq!(w.segment_of(0.0), Some(0));
        assert_eq!(w.segment_of(0.1), Some(1));
        assert_eq!(w.segment_of(0.3), Some(2));
        assert_eq!(w.segment_of(0.31), None);
    }

    #[test]
    fn knot_difference_inverts_retract() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut k = TrajectoryKnot::new(1.0, Pose::exp(&rand_vec(&mut rng, 1.0)), rand_vec(&mut rng, 1.0));
        k.bias = rand_vec(&mut rng, 0.1);
        let d = rand_vec::<18>(&mut rng, 0.3);
        let r = knot_difference(&knot_retract(&k, &d), &k);
        assert!((r - d).norm() < 1e-10);
    }
}
