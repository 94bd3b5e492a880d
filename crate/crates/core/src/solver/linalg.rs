//! Block-tridiagonal normal equations over 18-dimensional knot states.

use log::warn;
use nalgebra::{Cholesky, DMatrix, DVector, SMatrix, SVector};

use crate::error::{Error, Result};

pub const KNOT_DIM: usize = 18;
pub type Matrix18 = SMatrix<f64, 18, 18>;
pub type Vector18 = SVector<f64, 18>;

/// Symmetric block-tridiagonal matrix; `off[i]` is the `(i, i+1)` block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockTridiagonal {
    pub diag: Vec<Matrix18>,
    pub off: Vec<Matrix18>,
}

impl BlockTridiagonal {
    pub fn zeros(n: usize) -> Self {
        Self {
            diag: vec![Matrix18::zeros(); n],
            off: vec![Matrix18::zeros(); n.saturating_sub(1)],
        }
    }

    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.len();
        let mut m = DMatrix::zeros(n * KNOT_DIM, n * KNOT_DIM);
        for (i, d) in self.diag.iter().enumerate() {
            m.view_mut((i * KNOT_DIM, i * KNOT_DIM), (KNOT_DIM, KNOT_DIM)).copy_from(d);
        }
        for (i, o) in self.off.iter().enumerate() {
            m.view_mut((i * KNOT_DIM, (i + 1) * KNOT_DIM), (KNOT_DIM, KNOT_DIM)).copy_from(o);
            m.view_mut(((i + 1) * KNOT_DIM, i * KNOT_DIM), (KNOT_DIM, KNOT_DIM))
                .copy_from(&o.transpose());
        }
        m
    }

    fn add_diagonal(&mut self, lambda: f64) {
        for d in &mut self.diag {
            for k in 0..KNOT_DIM {
                d[(k, k)] += lambda;
            }
        }
    }

    /// Block Cholesky solve of `A x = rhs`; `None` if `A` is not positive definite.
    pub fn solve(&self, rhs: &[Vector18]) -> Option<Vec<Vector18>> {
        let n = self.len();
        assert_eq!(rhs.len(), n);
        if n == 0 {
            return Some(vec![]);
        }
        let mut chol: Vec<Cholesky<f64, nalgebra::Const<18>>> = Vec::with_capacity(n);
        // m[i] = L_i^-1 A_{i,i+1}
        let mut m: Vec<Matrix18> = Vec::with_capacity(n - 1);
        let mut s = self.diag[0];
        for i in 0..n {
            let c = Cholesky::new(s)?;
            if i + 1 < n {
                let mi = c.l_dirty().solve_lower_triangular(&self.off[i])?;
                s = self.diag[i + 1] - mi.transpose() * mi;
                m.push(mi);
            }
            chol.push(c);
        }
        let lower = |i: usize| chol[i].l();
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            let mut r = rhs[i];
            if i > 0 {
                r -= m[i - 1].transpose() * y[i - 1];
            }
            y.push(lower(i).solve_lower_triangular(&r)?);
        }
        let mut x = vec![Vector18::zeros(); n];
        for i in (0..n).rev() {
            let mut r = y[i];
            if i + 1 < n {
                r -= m[i] * x[i + 1];
            }
            x[i] = lower(i).transpose().solve_upper_triangular(&r)?;
        }
        Some(x)
    }

    /// Solve with Levenberg damping retries: `lambda0`, growing 10x, at most
    /// `retries` times. Returns the solution and the damping used.
    pub fn solve_damped(&self, rhs: &[Vector18], lambda0: f64, retries: usize) -> Result<(Vec<Vector18>, f64)> {
        if let Some(x) = self.solve(rhs) {
            return Ok((x, 0.0));
        }
        let mut lambda = lambda0;
        for _ in 0..retries {
            let mut damped = self.clone();
            damped.add_diagonal(lambda);
            if let Some(x) = damped.solve(rhs) {
                warn!("normal equations needed damping {lambda:e}");
                return Ok((x, lambda));
            }
            lambda *= 10.0;
        }
        Err(Error::NotPositiveDefinite(retries))
    }
}

/// Inverse of a symmetric block, regularized with `1e-9` on the diagonal if
/// it is not positive definite.
pub fn robust_inverse(a: &Matrix18) -> Matrix18 {
    if let Some(c) = Cholesky::new(*a) {
        return c.inverse();
    }
    warn!("marginalized block singular; regularizing");
    let reg = a + Matrix18::identity() * 1e-9;
    Cholesky::new(reg)
        .map(|c| c.inverse())
        .unwrap_or_else(|| reg.try_inverse().unwrap_or_else(Matrix18::zeros))
}

/// Eliminates the first block: returns the Schur complement system on the
/// remaining blocks.
pub fn schur_first(sys: &BlockTridiagonal, rhs: &[Vector18]) -> (BlockTridiagonal, Vec<Vector18>) {
    assert!(sys.len() >= 2);
    let inv = robust_inverse(&sys.diag[0]);
    let b = sys.off[0];
    let mut reduced = BlockTridiagonal {
        diag: sys.diag[1..].to_vec(),
        off: sys.off[1..].to_vec(),
    };
    reduced.diag[0] -= b.transpose() * inv * b;
    let mut r = rhs[1..].to_vec();
    r[0] -= b.transpose() * inv * rhs[0];
    (reduced, r)
}

pub fn stack(v: &[Vector18]) -> DVector<f64> {
    DVector::from_iterator(v.len() * KNOT_DIM, v.iter().flat_map(|x| x.iter().copied()))
}
