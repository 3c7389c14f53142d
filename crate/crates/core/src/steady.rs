//! Steady state of the level-scale recursion `P_t = R_t (R_t + I)^{-1}`,
//! `R_t = φ² P_{t-1} + W`.

use crate::error::{Error, Result};
use crate::matrix::{chol_upper, inv_pd, max_eigenvalue, min_eigenvalue, sym_eigen, symmetrize, Mat, SpdMatrix};

/// Fixed-point residual above which [`p_limit`] abandons the closed form.
const CLOSED_FORM_RESIDUAL_MAX: f64 = 1e-8;
const ITER_TOL: f64 = 1e-12;
const ITER_CAP: usize = 10_000;

/// Limits of the level scale `P` and forecast scale `Q = P + W + I`.
#[derive(Debug, Clone, PartialEq)]
pub struct SteadyState {
    pub p: SpdMatrix,
    pub q: SpdMatrix,
    pub phi: f64,
    pub w: SpdMatrix,
}

impl SteadyState {
    pub fn new(phi: f64, w: &SpdMatrix) -> Result<Self> {
        let p = p_limit(phi, w)?;
        let dim = w.dim();
        let q = &p + &**w + Mat::identity(dim, dim);
        Ok(SteadyState {
            p: SpdMatrix::new(p)?,
            q: SpdMatrix::new(q)?,
            phi,
            w: w.clone(),
        })
    }

    pub fn dim(&self) -> usize {
        self.w.dim()
    }
}

fn check_w(w: &Mat) -> Result<()> {
    chol_upper(w).map_err(|_| Error::Domain("W must be positive definite".into()))?;
    Ok(())
}

/// One step of the recursion, written as `I - (R + I)^{-1}` so the result is
/// exactly symmetric.
pub fn p_step(p_prev: &Mat, phi: f64, w: &Mat) -> Result<Mat> {
    if p_prev.shape() != w.shape() {
        return Err(Error::dim("P and W differ in size"));
    }
    let n = w.nrows();
    let eye = Mat::identity(n, n);
    let r = symmetrize(&(p_prev * (phi * phi) + w));
    let inv = inv_pd(&(&r + &eye))?;
    Ok(symmetrize(&(eye - inv)))
}

/// Iterates [`p_step`] from `P_0 = p0 I` until successive iterates differ by
/// less than `tol` in Frobenius norm. Returns the limit and the step count.
pub fn p_iterate(phi: f64, w: &Mat, p0: f64, tol: f64, max_iter: usize) -> Result<(Mat, usize)> {
    let n = w.nrows();
    let mut p = Mat::identity(n, n) * p0;
    for it in 1..=max_iter {
        let next = p_step(&p, phi, w)?;
        let delta = (&next - &p).norm();
        p = next;
        if delta <= tol {
            return Ok((p, it));
        }
    }
    Err(Error::Numerical {
        msg: format!("P recursion did not converge in {max_iter} steps"),
        residual: (p_step(&p, phi, w)? - &p).norm(),
    })
}

/// Closed-form limit of the recursion for `P_0 = p_0 I`.
///
/// All terms are functions of `W`, so the quadratic
/// `φ²P² + P(W + (1-φ²)I) - W = 0` is solved eigenvalue by eigenvalue in the
/// eigenbasis of `W`, in the cancellation-free form
/// `P = 2W [ {(W + (1-φ²)I)² + 4φ²W}^{1/2} + W + (1-φ²)I ]^{-1}`,
/// which also covers `φ = 0` (giving `W (W + I)^{-1}`).
pub fn p_limit(phi: f64, w: &Mat) -> Result<Mat> {
    check_w(w)?;
    let eig = sym_eigen(w);
    let phi2 = phi * phi;
    let mut scaled = eig.eigenvectors.clone();
    for (j, &wj) in eig.eigenvalues.iter().enumerate() {
        let m = wj + 1.0 - phi2;
        let arg = m * m + 4.0 * phi2 * wj;
        debug_assert!(arg > 0.0);
        let pj = 2.0 * wj / (arg.sqrt() + m);
        scaled.column_mut(j).scale_mut(pj);
    }
    let p = symmetrize(&(scaled * eig.eigenvectors.transpose()));

    let residual = (p_step(&p, phi, w)? - &p).norm();
    if residual.is_finite() && residual <= CLOSED_FORM_RESIDUAL_MAX {
        return Ok(p);
    }
    let (p_iter, _) = p_iterate(phi, w, 1.0, ITER_TOL, ITER_CAP)?;
    Ok(p_iter)
}

/// Inverts [`p_limit`]: `W = (I - P)^{-1} (φ²P² + (1-φ²)P)`.
pub fn w_from_p(p: &Mat, phi: f64) -> Result<Mat> {
    let n = p.nrows();
    let eye = Mat::identity(n, n);
    let lo = min_eigenvalue(p);
    let hi = max_eigenvalue(p);
    if !(lo > 0.0 && hi < 1.0) {
        return Err(Error::Domain(format!(
            "P must have eigenvalues in (0, 1), found [{lo}, {hi}]"
        )));
    }
    let i_minus_p = symmetrize(&(&eye - p));
    let inv = inv_pd(&i_minus_p).map_err(|_| Error::Domain("I - P is singular".into()))?;
    let phi2 = phi * phi;
    let rhs = p * p * phi2 + p * (1.0 - phi2);
    Ok(symmetrize(&(inv * rhs)))
}
