//! SE(3) / SO(3) kernels.
//!
//! Twists are stacked `[rho; psi]`: translational part first, rotational
//! second. Poses act on points by `p' = C p + r` and perturbations are applied
//! on the left, `T = exp(eps^) T_op`.

use nalgebra::{Matrix3, Matrix4, Matrix6, SMatrix, Vector3, Vector4, Vector6};

/// Six-vector element of se(3), `[rho; psi]`.
pub type Twist = Vector6<f64>;
pub type Matrix4x6 = SMatrix<f64, 4, 6>;
pub type Matrix3x6 = SMatrix<f64, 3, 6>;

/// Below this rotation angle the trigonometric coefficients are evaluated by
/// truncated Taylor series instead of their closed forms.
pub const SMALL_ANGLE: f64 = 1e-2;

pub fn twist(rho: Vector3<f64>, psi: Vector3<f64>) -> Twist {
    Twist::new(rho.x, rho.y, rho.z, psi.x, psi.y, psi.z)
}

pub fn rho(xi: &Twist) -> Vector3<f64> {
    xi.fixed_rows::<3>(0).into_owned()
}

pub fn psi(xi: &Twist) -> Vector3<f64> {
    xi.fixed_rows::<3>(3).into_owned()
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

pub fn unskew(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// 4x4 matrix form of a twist.
pub fn wedge(xi: &Twist) -> Matrix4<f64> {
    let mut m = Matrix4::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&skew(&psi(xi)));
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&rho(xi));
    m
}

pub fn vee(m: &Matrix4<f64>) -> Twist {
    let r = m.fixed_view::<3, 1>(0, 3).into_owned();
    let w = unskew(&m.fixed_view::<3, 3>(0, 0).into_owned());
    twist(r, w)
}

/// Adjoint-algebra operator `xi^⋏ = [psi^, rho^; 0, psi^]`.
pub fn curly_wedge(xi: &Twist) -> Matrix6<f64> {
    let mut m = Matrix6::zeros();
    let ps = skew(&psi(xi));
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&ps);
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(&ps);
    m.fixed_view_mut::<3, 3>(0, 3).copy_from(&skew(&rho(xi)));
    m
}

/// `p^⊙` for a homogeneous point, so that `xi^ p = p^⊙ xi`.
pub fn odot(p: &Vector4<f64>) -> Matrix4x6 {
    let mut m = Matrix4x6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&(Matrix3::identity() * p.w));
    let e = Vector3::new(p.x, p.y, p.z);
    m.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-skew(&e)));
    m
}

/// Top three rows of `odot` for a Euclidean point (homogeneous weight 1).
pub fn odot3(p: &Vector3<f64>) -> Matrix3x6 {
    let mut m = Matrix3x6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
    m.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-skew(p)));
    m
}

// Trigonometric coefficients shared by the SO(3)/SE(3) closed forms, each with
// a Taylor branch that avoids the 0/0 and the cancellation near zero.

/// sin(t)/t
fn coef_a(t: f64) -> f64 {
    if t < SMALL_ANGLE {
        let t2 = t * t;
        1.0 - t2 / 6.0 * (1.0 - t2 / 20.0 * (1.0 - t2 / 42.0))
    } else {
        t.sin() / t
    }
}

/// (1 - cos t)/t^2
fn coef_b(t: f64) -> f64 {
    if t < SMALL_ANGLE {
        let t2 = t * t;
        0.5 - t2 / 24.0 * (1.0 - t2 / 30.0 * (1.0 - t2 / 56.0))
    } else {
        (1.0 - t.cos()) / (t * t)
    }
}

/// (t - sin t)/t^3
fn coef_c(t: f64) -> f64 {
    if t < SMALL_ANGLE {
        let t2 = t * t;
        1.0 / 6.0 - t2 / 120.0 * (1.0 - t2 / 42.0 * (1.0 - t2 / 72.0))
    } else {
        (t - t.sin()) / (t * t * t)
    }
}

/// (t^2 + 2 cos t - 2)/(2 t^4)
fn coef_d(t: f64) -> f64 {
    if t < SMALL_ANGLE {
        let t2 = t * t;
        1.0 / 24.0 - t2 / 720.0 + t2 * t2 / 40320.0 - t2 * t2 * t2 / 3628800.0
    } else {
        (t * t + 2.0 * t.cos() - 2.0) / (2.0 * t.powi(4))
    }
}

/// (2t - 3 sin t + t cos t)/(2 t^5)
fn coef_e(t: f64) -> f64 {
    if t < SMALL_ANGLE {
        let t2 = t * t;
        1.0 / 120.0 - t2 / 2520.0 + t2 * t2 / 120960.0 - t2 * t2 * t2 / 9979200.0
    } else {
        (2.0 * t - 3.0 * t.sin() + t * t.cos()) / (2.0 * t.powi(5))
    }
}

/// (1 - (t/2) cot(t/2))/t^2
fn coef_f(t: f64) -> f64 {
    if t < SMALL_ANGLE {
        let t2 = t * t;
        1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0 + t2 * t2 * t2 / 1209600.0
    } else {
        let h = 0.5 * t;
        (1.0 - h * h.cos() / h.sin()) / (t * t)
    }
}

pub fn so3_exp(phi: &Vector3<f64>) -> Matrix3<f64> {
    let t = phi.norm();
    let k = skew(phi);
    Matrix3::identity() + k * coef_a(t) + k * k * coef_b(t)
}

/// Rotation vector of `c`, with `|psi| <= pi`.
///
/// At exactly pi the axis is read from the column of the symmetric part with
/// the largest diagonal entry and signed so that that component is positive.
pub fn so3_log(c: &Matrix3<f64>) -> Vector3<f64> {
    let w = unskew(&(c - c.transpose()));
    let s = 0.5 * w.norm();
    let cs = 0.5 * (c.trace() - 1.0);
    let theta = s.atan2(cs);
    if cs > -0.9 {
        let factor = if theta < 1e-4 {
            1.0 + theta * theta / 6.0
        } else {
            theta / s
        };
        return 0.5 * factor * w;
    }
    let b = 0.5 * (c + c.transpose()) - Matrix3::identity() * cs;
    let (mut i, mut best) = (0, b[(0, 0)]);
    for j in 1..3 {
        if b[(j, j)] > best {
            best = b[(j, j)];
            i = j;
        }
    }
    let mut axis = b.column(i).into_owned() / ((1.0 - cs) * best).max(f64::MIN_POSITIVE).sqrt();
    axis.normalize_mut();
    if axis.dot(&w) < 0.0 {
        axis = -axis;
    }
    axis * theta
}

pub fn so3_left_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let t = phi.norm();
    let k = skew(phi);
    Matrix3::identity() + k * coef_b(t) + k * k * coef_c(t)
}

pub fn so3_left_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    let t = phi.norm();
    let k = skew(phi);
    Matrix3::identity() - k * 0.5 + k * k * coef_f(t)
}

/// Off-diagonal block of the SE(3) left Jacobian.
fn se3_q(xi: &Twist) -> Matrix3<f64> {
    let r = skew(&rho(xi));
    let p = skew(&psi(xi));
    let t = psi(xi).norm();
    let pr = p * r;
    let rp = r * p;
    let prp = pr * p;
    let pp = p * p;
    r * 0.5
        + (pr + rp + prp) * coef_c(t)
        + (pp * r + rp * p - prp * 3.0) * coef_d(t)
        + (prp * p + pp * r * p) * coef_e(t)
}

pub fn left_jacobian(xi: &Twist) -> Matrix6<f64> {
    let j = so3_left_jacobian(&psi(xi));
    let mut m = Matrix6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&j);
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(&j);
    m.fixed_view_mut::<3, 3>(0, 3).copy_from(&se3_q(xi));
    m
}

pub fn left_jacobian_inv(xi: &Twist) -> Matrix6<f64> {
    let ji = so3_left_jacobian_inv(&psi(xi));
    let mut m = Matrix6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&ji);
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(&ji);
    m.fixed_view_mut::<3, 3>(0, 3)
        .copy_from(&(-ji * se3_q(xi) * ji));
    m
}

/// First-order inverse left Jacobian, `1 - xi^⋏ / 2`.
///
/// Only accurate for small `xi`; used by [`crate::gp_prior::JacobianMode::FirstOrder`].
pub fn left_jacobian_inv_first_order(xi: &Twist) -> Matrix6<f64> {
    Matrix6::identity() - curly_wedge(xi) * 0.5
}

/// Bernoulli-number series coefficients `B_n / n!` of `x / (e^x - 1)`.
fn bernoulli_coeffs(n: usize) -> Vec<f64> {
    let two_pi = 2.0 * std::f64::consts::PI;
    (0..n)
        .map(|k| match k {
            0 => 1.0,
            1 => -0.5,
            k if k % 2 == 1 => 0.0,
            k => {
                // B_k / k! = (-1)^(k/2+1) 2 zeta(k) / (2 pi)^k
                // zeta(k) by partial sum plus Euler-Maclaurin tail
                let kf = k as f64;
                let m = 50.0f64;
                let head: f64 = (1..50).map(|j| (j as f64).powf(-kf)).sum();
                let pi = std::f64::consts::PI;
                let zeta = match k {
                    2 => pi.powi(2) / 6.0,
                    4 => pi.powi(4) / 90.0,
                    6 => pi.powi(6) / 945.0,
                    8 => pi.powi(8) / 9450.0,
                    _ => head
                    + m.powf(1.0 - kf) / (kf - 1.0)
                    + 0.5 * m.powf(-kf)
                    + kf * m.powf(-kf - 1.0) / 12.0,
                };
                let sign = if (k / 2) % 2 == 1 { 1.0 } else { -1.0 };
                sign * 2.0 * zeta / two_pi.powi(k as i32)
            }
        })
        .collect()
}

fn series_len(xi: &Twist, ratio: f64) -> usize {
    // The spectral radius of xi^⋏ is |psi|; the nilpotent translation part only
    // adds polynomial growth, covered by the margin.
    let r = psi(xi).norm() / ratio;
    if r < 1e-12 {
        return 6;
    }
    let n = (1e-20f64).ln() / r.ln();
    (n.ceil() as usize + 6).clamp(6, 120)
}

/// `d/dxi [f(xi^⋏) v]` for the power series `f(X) = sum c_n X^n`.
fn series_vec_derivative(xi: &Twist, v: &Twist, coeffs: &[f64]) -> Matrix6<f64> {
    let n = coeffs.len();
    let x = curly_wedge(xi);
    // w_j = X^j v
    let mut w = Vec::with_capacity(n);
    let mut cur = *v;
    for _ in 0..n {
        w.push(curly_wedge(&cur));
        cur = x * cur;
    }
    // d(X^m v) = sum_i X^i dX X^(m-1-i) v, and dX u = -u^⋏ dxi.
    let mut acc = Matrix6::zeros();
    for i in (0..n.saturating_sub(1)).rev() {
        let mut s = Matrix6::zeros();
        for j in 0..(n - 1 - i) {
            let c = coeffs[i + j + 1];
            if c != 0.0 {
                s += w[j] * c;
            }
        }
        acc = s + x * acc;
    }
    -acc
}

/// Exact `d/dxi [J(xi) v]`.
pub fn left_jacobian_vec_derivative(xi: &Twist, v: &Twist) -> Matrix6<f64> {
    let r = psi(xi).norm();
    let (mut n, mut term) = (1usize, 1.0f64);
    while term > 1e-20 && n < 80 {
        term *= r / n as f64;
        n += 1;
    }
    let n = n + 6;
    let mut coeffs = Vec::with_capacity(n);
    let mut fact = 1.0;
    for k in 0..n {
        fact *= (k + 1) as f64;
        coeffs.push(1.0 / fact);
    }
    series_vec_derivative(xi, v, &coeffs)
}

/// Exact `d/dxi [J(xi)^-1 v]`. Valid for `|psi| < 2 pi`.
pub fn left_jacobian_inv_vec_derivative(xi: &Twist, v: &Twist) -> Matrix6<f64> {
    let n = series_len(xi, 2.0 * std::f64::consts::PI);
    series_vec_derivative(xi, v, &bernoulli_coeffs(n))
}

/// Rigid transform stored as rotation + translation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(Matrix3::identity(), Vector3::zeros())
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::new(Matrix3::identity(), t)
    }

    pub fn from_matrix(m: &Matrix4<f64>) -> Self {
        Self::new(
            m.fixed_view::<3, 3>(0, 0).into_owned(),
            m.fixed_view::<3, 1>(0, 3).into_owned(),
        )
    }

    pub fn matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Closed-form exponential map.
    pub fn exp(xi: &Twist) -> Self {
        let phi = psi(xi);
        Self::new(so3_exp(&phi), so3_left_jacobian(&phi) * rho(xi))
    }

    pub fn log(&self) -> Twist {
        let phi = so3_log(&self.rotation);
        twist(so3_left_jacobian_inv(&phi) * self.translation, phi)
    }

    pub fn inverse(&self) -> Self {
        let ct = self.rotation.transpose();
        Self::new(ct, -(ct * self.translation))
    }

    pub fn compose(&self, other: &Pose) -> Self {
        Self::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn inverse_transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.translation)
    }

    /// `Ad(T) = [C, r^C; 0, C]`.
    pub fn adjoint(&self) -> Matrix6<f64> {
        let mut m = Matrix6::zeros();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 3>(3, 3).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 3>(0, 3)
            .copy_from(&(skew(&self.translation) * self.rotation));
        m
    }

    /// Left perturbation `exp(eps^) T`.
    pub fn perturb(&self, eps: &Twist) -> Self {
        Pose::exp(eps).compose(self)
    }

    /// Projects the rotation back onto SO(3) (polar decomposition).
    pub fn normalized(&self) -> Self {
        let svd = self.rotation.svd(true, true);
        let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut r = u * vt;
        if r.determinant() < 0.0 {
            let mut u2 = u;
            u2.column_mut(2).neg_mut();
            r = u2 * vt;
        }
        Self::new(r, self.translation)
    }

    pub fn orthonormality_error(&self) -> f64 {
        (self.rotation.transpose() * self.rotation - Matrix3::identity()).norm()
    }
}

impl std::ops::Mul for Pose {
    type Output = Pose;
    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

impl std::ops::Mul<&Pose> for &Pose {
    type Output = Pose;
    fn mul(self, rhs: &Pose) -> Pose {
        self.compose(rhs)
    }
}

/// Rotation about a unit axis.
pub fn rot_axis(axis: &Vector3<f64>, angle: f64) -> Matrix3<f64> {
    so3_exp(&(axis.normalize() * angle))
}

/// Relative pose twist `ln(a b^-1)`.
pub fn between(a: &Pose, b: &Pose) -> Twist {
    (a * &b.inverse()).log()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn random_twist(rng: &mut impl Rng, max_angle: f64) -> Twist {
        let r = Vector3::new(
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
        );
        let axis = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        )
        .normalize();
        twist(r, axis * rng.random_range(0.0..max_angle))
    }

    #[test]
    fn exp_of_zero_is_identity() {
        assert_eq!(Pose::exp(&Twist::zeros()), Pose::identity());
    }

    #[test]
    fn quarter_turn_about_z() {
        let t = Pose::exp(&Twist::new(0.0, 0.0, 0.0, 0.0, 0.0, FRAC_PI_2));
        let expected = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert_relative_eq!(t.rotation, expected, epsilon = 1e-15);
        assert_relative_eq!(t.translation, Vector3::zeros(), epsilon = 1e-15);
    }

    #[test]
    fn pure_translation() {
        let t = Pose::exp(&Twist::new(1.0, 0.0, 0.0, 0.0, 0.0, 0.0));
        assert_eq!(t.translation, Vector3::new(1.0, 0.0, 0.0));
        assert_eq!(t.rotation, Matrix3::identity());
    }

    #[test]
    fn log_identity_is_zero() {
        assert_eq!(Pose::identity().log(), Twist::zeros());
    }

    #[test]
    fn log_half_turn_about_x() {
        let c = Matrix3::new(1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, -1.0);
        let xi = Pose::new(c, Vector3::zeros()).log();
        assert_relative_eq!(psi(&xi), Vector3::new(PI, 0.0, 0.0), epsilon = 1e-12);
        // Near pi from either side the sign follows the antisymmetric part.
        for s in [1.0, -1.0] {
            let phi = Vector3::new(0.3, -0.5, 0.8).normalize() * (PI - 1e-7) * s;
            assert_relative_eq!(so3_log(&so3_exp(&phi)), phi, epsilon = 1e-8);
        }
    }

    #[test]
    fn round_trip_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let xi = random_twist(&mut rng, PI - 0.1);
            let back = Pose::exp(&xi).log();
            assert!((back - xi).norm() < 1e-9, "{xi} -> {back}");
        }
    }

    #[test]
    fn round_trip_small_angles() {
        for &a in &[0.0, 1e-12, 1e-9, 1e-6, 1e-3, 0.0099, 0.0101, 0.5] {
            let xi = twist(Vector3::new(0.3, -1.0, 2.0), Vector3::new(1.0, 2.0, -0.5).normalize() * a);
            assert_relative_eq!(Pose::exp(&xi).log(), xi, epsilon = 1e-13);
        }
    }

    #[test]
    fn wedge_odot_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let xi = random_twist(&mut rng, 3.0);
            let p = Vector4::new(
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
                rng.random_range(-1.0..1.0),
            );
            assert!((wedge(&xi) * p - odot(&p) * xi).norm() < 1e-12);
        }
    }

    #[test]
    fn odot_of_origin() {
        let m = odot(&Vector4::new(0.0, 0.0, 0.0, 1.0));
        let mut expected = Matrix4x6::zeros();
        expected.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
        assert_eq!(m, expected);
        assert_eq!(curly_wedge(&Twist::zeros()), Matrix6::zeros());
    }

    #[test]
    fn vee_inverts_wedge() {
        let xi = Twist::new(1.0, 2.0, 3.0, 4.0, 5.0, 6.0);
        assert_eq!(vee(&wedge(&xi)), xi);
    }

    #[test]
    fn adjoint_is_homomorphism() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let a = Pose::exp(&random_twist(&mut rng, 3.0));
            let b = Pose::exp(&random_twist(&mut rng, 3.0));
            assert_relative_eq!((a * b).adjoint(), a.adjoint() * b.adjoint(), epsilon = 1e-12);
        }
    }

    #[test]
    fn jacobian_inverse_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert_eq!(left_jacobian(&Twist::zeros()), Matrix6::identity());
        for _ in 0..200 {
            let xi = random_twist(&mut rng, 3.0);
            let prod = left_jacobian(&xi) * left_jacobian_inv(&xi);
            assert_relative_eq!(prod, Matrix6::identity(), epsilon = 1e-9);
        }
    }

    #[test]
    fn left_jacobian_matches_finite_differences() {
        // ln(exp((xi + h d)^) ) ~ xi + h d and exp(J h d) exp(xi) = exp(xi + h d)
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let h = 1e-6;
        for _ in 0..50 {
            let xi = random_twist(&mut rng, 2.5);
            let base = Pose::exp(&xi);
            let mut fd = Matrix6::zeros();
            for k in 0..6 {
                let mut d = Twist::zeros();
                d[k] = h;
                let plus = between(&Pose::exp(&(xi + d)), &base);
                let minus = between(&Pose::exp(&(xi - d)), &base);
                fd.set_column(k, &((plus - minus) / (2.0 * h)));
            }
            let j = left_jacobian(&xi);
            assert!((fd - j).norm() <= 1e-5 * j.norm(), "{}", (fd - j).norm());
            // and the inverse maps group perturbations back to algebra ones
            let ji = left_jacobian_inv(&xi);
            let mut fdi = Matrix6::zeros();
            for k in 0..6 {
                let mut d = Twist::zeros();
                d[k] = h;
                let plus = (Pose::exp(&d) * base).log();
                let minus = (Pose::exp(&(-d)) * base).log();
                fdi.set_column(k, &((plus - minus) / (2.0 * h)));
            }
            assert!((fdi - ji).norm() <= 1e-5 * ji.norm());
        }
    }

    fn fd_vec_derivative(f: impl Fn(&Twist) -> Twist, xi: &Twist) -> Matrix6<f64> {
        let h = 1e-6;
        let mut m = Matrix6::zeros();
        for k in 0..6 {
            let mut d = Twist::zeros();
            d[k] = h;
            m.set_column(k, &((f(&(xi + d)) - f(&(xi - d))) / (2.0 * h)));
        }
        m
    }

    #[test]
    fn jacobian_vec_derivatives_match_closed_forms() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..100 {
            let xi = random_twist(&mut rng, 3.0);
            let v = random_twist(&mut rng, 3.0);
            let exact = left_jacobian_inv_vec_derivative(&xi, &v);
            let fd = fd_vec_derivative(|x| left_jacobian_inv(x) * v, &xi);
            assert!((exact - fd).norm() <= 1e-6 * (1.0 + fd.norm()), "{}", (exact - fd).norm());
            let exact = left_jacobian_vec_derivative(&xi, &v);
            let fd = fd_vec_derivative(|x| left_jacobian(x) * v, &xi);
            assert!((exact - fd).norm() <= 1e-6 * (1.0 + fd.norm()));
        }
        // at zero both reduce to the first-order forms
        let v = Twist::new(1.0, -2.0, 0.5, 0.1, 0.2, -0.3);
        assert_relative_eq!(
            left_jacobian_inv_vec_derivative(&Twist::zeros(), &v),
            curly_wedge(&v) * 0.5,
            epsilon = 1e-14
        );
        assert_relative_eq!(
            left_jacobian_vec_derivative(&Twist::zeros(), &v),
            -curly_wedge(&v) * 0.5,
            epsilon = 1e-14
        );
    }

    #[test]
    fn normalization_repairs_drift() {
        let mut t = Pose::exp(&Twist::new(1.0, 0.0, 0.0, 0.1, 0.2, 0.3));
        t.rotation[(0, 1)] += 1e-6;
        let n = t.normalized();
        assert!(n.orthonormality_error() < 1e-12);
        assert!((n.rotation.determinant() - 1.0).abs() < 1e-12);
    }
}

#[cfg(test)]
mod approx_impls {
    use super::Pose;

    impl approx::AbsDiffEq for Pose {
        type Epsilon = f64;
        fn default_epsilon() -> f64 {
            1e-12
        }
        fn abs_diff_eq(&self, other: &Self, eps: f64) -> bool {
            self.rotation.abs_diff_eq(&other.rotation, eps)
                && self.translation.abs_diff_eq(&other.translation, eps)
        }
    }

    impl approx::RelativeEq for Pose {
        fn default_max_relative() -> f64 {
            1e-12
        }
        fn relative_eq(&self, other: &Self, eps: f64, rel: f64) -> bool {
            self.rotation.relative_eq(&other.rotation, eps, rel)
                && self.translation.relative_eq(&other.translation, eps, rel)
        }
    }
}
