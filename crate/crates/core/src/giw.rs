//! The generalized inverse Wishart distribution `GIW_p(n, A, S)`.
//!
//! `X ~ GIW_p(n, A, S)` when `X^{1/2} S^{-1} X^{1/2} ~ IW_p(n, A)`, using the
//! inverse Wishart parameterization in which `IW_p(n, A)` has density
//! proportional to `|X|^{-n/2} exp(-tr(A X^{-1}) / 2)`. Setting either `A` or
//! `S` to the identity recovers an ordinary inverse Wishart. The inverse
//! `Y = X^{-1}` follows the generalized Wishart `GW_p(n - p - 1, A^{-1}, S^{-1})`.

use nalgebra::SVD;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::matrix::{
    chol_upper, commutator_norm, inv_pd, kron, log_det_pd, nearest_pd, sym_sqrt_and_inv_sqrt,
    symmetrize, unvec, vec, Mat, SpdMatrix,
};

/// Relative commutator size below which `A` and `S` are treated as commuting.
pub const COMMUTE_TOL: f64 = 1e-10;

/// Eigenvalue floor applied by [`estimator_tilde`], relative to the largest eigenvalue.
pub const TILDE_FLOOR: f64 = 1e-10;

/// Condition-number ceiling for the vectorized mode solve.
const VEC_SOLVE_COND_MAX: f64 = 1e12;

#[derive(Debug, Clone, PartialEq)]
pub struct GiwParams {
    pub n: f64,
    pub a: SpdMatrix,
    pub s: SpdMatrix,
}

impl GiwParams {
    pub fn new(n: f64, a: SpdMatrix, s: SpdMatrix) -> Result<Self> {
        let p = a.dim();
        if s.dim() != p {
            return Err(Error::dim(format!("A is {p}x{p} but S is {0}x{0}", s.dim())));
        }
        if !(n > 2.0 * p as f64) {
            return Err(Error::param(format!(
                "GIW degrees of freedom must exceed 2p = {}, got {n}",
                2 * p
            )));
        }
        chol_upper(&a)?;
        chol_upper(&s)?;
        Ok(GiwParams { n, a, s })
    }

    pub fn dim(&self) -> usize {
        self.a.dim()
    }

    /// The same distribution with the roles of `A` and `S` exchanged.
    pub fn swapped(&self) -> Self {
        GiwParams {
            n: self.n,
            a: self.s.clone(),
            s: self.a.clone(),
        }
    }
}

/// Parameters of the generalized Wishart `GW_p(dof, A^{-1}, S^{-1})`.
#[derive(Debug, Clone, PartialEq)]
pub struct GwParams {
    pub dof: f64,
    pub a_inv: SpdMatrix,
    pub s_inv: SpdMatrix,
}

impl GwParams {
    pub fn new(dof: f64, a_inv: SpdMatrix, s_inv: SpdMatrix) -> Result<Self> {
        let p = a_inv.dim();
        if s_inv.dim() != p {
            return Err(Error::dim("GW covariance matrices differ in size"));
        }
        if !(dof > p as f64 - 1.0) {
            return Err(Error::param(format!(
                "GW degrees of freedom must exceed p - 1 = {}, got {dof}",
                p as f64 - 1.0
            )));
        }
        chol_upper(&a_inv)?;
        chol_upper(&s_inv)?;
        Ok(GwParams { dof, a_inv, s_inv })
    }

    /// Distribution of `X^{-1}` when `X ~ GIW_p(n, A, S)`.
    pub fn from_giw(g: &GiwParams) -> Result<Self> {
        let p = g.dim() as f64;
        Self::new(
            g.n - p - 1.0,
            SpdMatrix::new(inv_pd(&g.a)?)?,
            SpdMatrix::new(inv_pd(&g.s)?)?,
        )
    }

    pub fn dim(&self) -> usize {
        self.a_inv.dim()
    }
}

/// `log Γ_p(x)` as a sum of univariate log-gammas.
pub fn ln_mvgamma(p: usize, x: f64) -> f64 {
    let pf = p as f64;
    pf * (pf - 1.0) / 4.0 * std::f64::consts::PI.ln()
        + (1..=p).map(|i| ln_gamma(x + (1.0 - i as f64) / 2.0)).sum::<f64>()
}

fn check_dim(x: &Mat, p: usize) -> Result<()> {
    if x.nrows() != p || x.ncols() != p {
        return Err(Error::dim(format!(
            "argument is {}x{}, distribution is {p}x{p}",
            x.nrows(),
            x.ncols()
        )));
    }
    Ok(())
}

/// Log normalizing term shared by the GIW and GW densities.
fn log_norm_const(p: usize, n: f64, a: &Mat, s: &Mat) -> Result<f64> {
    let pf = p as f64;
    let k = (n - pf - 1.0) / 2.0;
    Ok(k * (log_det_pd(a)? + log_det_pd(s)?)
        - pf * k * std::f64::consts::LN_2
        - ln_mvgamma(p, k))
}

/// Log normalizing constant of `GIW_p(n, A, S)`; the density minus this term
/// is the kernel `-(n/2) log|X| - tr(A X^{-1/2} S X^{-1/2}) / 2`.
pub fn giw_log_normalizer(params: &GiwParams) -> Result<f64> {
    log_norm_const(params.dim(), params.n, &params.a, &params.s)
}

pub fn giw_log_density(x: &Mat, params: &GiwParams) -> Result<f64> {
    let p = params.dim();
    check_dim(x, p)?;
    let log_det_x = log_det_pd(x).map_err(|_| Error::Domain("X is not positive definite".into()))?;
    let (_, x_inv_half) = sym_sqrt_and_inv_sqrt(x)?;
    let quad = (&*params.a * &x_inv_half * &*params.s * &x_inv_half).trace();
    Ok(log_norm_const(p, params.n, &params.a, &params.s)? - params.n / 2.0 * log_det_x - quad / 2.0)
}

pub fn gw_log_density(y: &Mat, params: &GwParams) -> Result<f64> {
    let p = params.dim();
    check_dim(y, p)?;
    let pf = p as f64;
    let n = params.dof + pf + 1.0;
    let a = inv_pd(&params.a_inv)?;
    let s = inv_pd(&params.s_inv)?;
    let log_det_y = log_det_pd(y).map_err(|_| Error::Domain("Y is not positive definite".into()))?;
    let (y_half, _) = sym_sqrt_and_inv_sqrt(y)?;
    let quad = (&a * &y_half * &s * &y_half).trace();
    Ok(log_norm_const(p, n, &a, &s)? + (n - 2.0 * pf - 2.0) / 2.0 * log_det_y - quad / 2.0)
}

/// First and inverse moments of `X^{1/2} S^{-1} X^{1/2}`.
#[derive(Debug, Clone)]
pub struct GiwMoments {
    /// `E(X^{1/2} S^{-1} X^{1/2}) = A / (n - 2p - 2)`.
    pub e_quad: Mat,
    /// `E(X^{-1/2} S X^{-1/2}) = (n - p - 1) A^{-1}`.
    pub e_inv_quad: Mat,
}

pub fn giw_moments(params: &GiwParams) -> Result<GiwMoments> {
    let pf = params.dim() as f64;
    let n = params.n;
    if !(n > 2.0 * pf + 2.0) {
        return Err(Error::param(format!(
            "E(X^(1/2) S^-1 X^(1/2)) needs n > 2p + 2 = {}, got {n}",
            2.0 * pf + 2.0
        )));
    }
    Ok(GiwMoments {
        e_quad: &*params.a / (n - 2.0 * pf - 2.0),
        e_inv_quad: inv_pd(&params.a)? * (n - pf - 1.0),
    })
}

/// `E|X|^ℓ` for `0 < ℓ < (n - 2p) / 2`.
///
/// Evaluated as `2^{-pℓ} |A|^ℓ |S|^ℓ Γ_p((n-p-1)/2 - ℓ) / Γ_p((n-p-1)/2)`, which
/// for integer `ℓ` is the finite product `∏_i ∏_{j≤ℓ} ((n-p-i)/2 - j)^{-1}`.
pub fn giw_det_moment(params: &GiwParams, ell: f64) -> Result<f64> {
    let p = params.dim();
    let pf = p as f64;
    let n = params.n;
    let upper = (n - 2.0 * pf) / 2.0;
    if !(ell > 0.0 && ell < upper) {
        return Err(Error::param(format!(
            "E|X|^l needs 0 < l < (n - 2p)/2 = {upper}, got {ell}"
        )));
    }
    let k = (n - pf - 1.0) / 2.0;
    let log_val = -pf * ell * std::f64::consts::LN_2
        + ell * (log_det_pd(&params.a)? + log_det_pd(&params.s)?)
        + ln_mvgamma(p, k - ell)
        - ln_mvgamma(p, k);
    Ok(log_val.exp())
}

/// Residual of the mode equation `A X^{-1/2} S + S X^{-1/2} A - 2n X^{1/2}`
/// in Frobenius norm, together with `‖X^{1/2}‖_F`.
pub fn mode_residual(x: &Mat, params: &GiwParams) -> Result<(f64, f64)> {
    let (half, inv_half) = sym_sqrt_and_inv_sqrt(x)?;
    let a = &*params.a;
    let s = &*params.s;
    let r = a * &inv_half * s + s * &inv_half * a - &half * (2.0 * params.n);
    Ok((r.norm(), half.norm()))
}

fn mode_tolerance(params: &GiwParams, half_norm: f64) -> f64 {
    1e-6 * params.n * half_norm
}

/// Mode of `GIW_p(n, A, S)`.
///
/// Commuting `A`, `S` give the closed form `AS/n`. Otherwise the vectorized
/// system `(b'⊗B + d'⊗D) vec(X^{-1/2}⊗X^{-1/2}) = 2n vec(I)` with
/// `b = vec(S)`, `B = I⊗A`, `d = vec(A)`, `D = I⊗S` is solved in the
/// least-squares sense and `X^{-1}` is read off through
/// `(Z⊗Z) vec(I) = vec(Z²)`. The system has `p²` equations in `p⁴` unknowns,
/// so its minimum-norm solution is generally not of Kronecker form; the
/// candidate is therefore polished by Newton steps on the concave log-density
/// in `Z = X^{-1/2}` until the mode-equation residual is negligible.
pub fn giw_mode(params: &GiwParams) -> Result<Mat> {
    let a = &*params.a;
    let s = &*params.s;
    let n = params.n;
    let as_ = a * s;
    if commutator_norm(a, s) <= COMMUTE_TOL * as_.norm() {
        return Ok(symmetrize(&as_) / n);
    }

    let start = match vec_mode_candidate(params) {
        Ok(x) => {
            let (res, half) = mode_residual(&x, params)?;
            if res <= 1e-12 * n * half {
                return Ok(x);
            }
            x
        }
        Err(_) => estimator_tilde(params),
    };

    let x = newton_mode(params, &start)?;
    let (res, half) = mode_residual(&x, params)?;
    if res > mode_tolerance(params, half) {
        return Err(Error::Numerical {
            msg: "GIW mode does not satisfy the mode equation".into(),
            residual: res,
        });
    }
    Ok(x)
}

/// Mode computed by Newton refinement from a caller-supplied PD starting point
/// (used by the filter, which warm-starts from the previous estimate).
pub fn giw_mode_from(params: &GiwParams, start: &Mat) -> Result<Mat> {
    let a = &*params.a;
    let s = &*params.s;
    let as_ = a * s;
    if commutator_norm(a, s) <= COMMUTE_TOL * as_.norm() {
        return Ok(symmetrize(&as_) / params.n);
    }
    let x = newton_mode(params, start)?;
    let (res, half) = mode_residual(&x, params)?;
    if res > mode_tolerance(params, half) {
        return Err(Error::Numerical {
            msg: "GIW mode does not satisfy the mode equation".into(),
            residual: res,
        });
    }
    Ok(x)
}

/// Newton refinement from `start` without the residual check, for callers
/// that prefer the best available iterate over an error.
pub(crate) fn giw_mode_polish(params: &GiwParams, start: &Mat) -> Result<Mat> {
    let a = &*params.a;
    let s = &*params.s;
    let as_ = a * s;
    if commutator_norm(a, s) <= COMMUTE_TOL * as_.norm() {
        return Ok(symmetrize(&as_) / params.n);
    }
    newton_mode(params, start)
}

/// Least-squares solution of the vectorized mode equation, mapped back to a
/// PD matrix. Fails when the solve is ill-conditioned or the extracted
/// `X^{-1}` is not positive definite.
pub fn vec_mode_candidate(params: &GiwParams) -> Result<Mat> {
    let p = params.dim();
    let a = &*params.a;
    let s = &*params.s;
    let eye = Mat::identity(p, p);
    let b = vec(s).transpose();
    let d = vec(a).transpose();
    let big_b = kron(&eye, a);
    let big_d = kron(&eye, s);
    let m = kron(&Mat::from_row_slice(1, p * p, b.as_slice()), &big_b)
        + kron(&Mat::from_row_slice(1, p * p, d.as_slice()), &big_d);
    let rhs = vec(&eye) * (2.0 * params.n);

    // Minimum-norm solution v = M'(MM')^{-1} rhs computed from the SVD of M'.
    let svd = SVD::new(m.transpose(), true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smin > 0.0) || smax / smin > VEC_SOLVE_COND_MAX {
        return Err(Error::Numerical {
            msg: "vectorized mode system is rank deficient".into(),
            residual: smax / smin,
        });
    }
    let u = svd.u.as_ref().expect("u requested");
    let vt = svd.v_t.as_ref().expect("v requested");
    // M' = U Σ V'  =>  M = V Σ U',  min-norm solution = U Σ^{-1} V' rhs
    let mut coeff = vt * &rhs;
    for (c, sv) in coeff.iter_mut().zip(svd.singular_values.iter()) {
        *c /= sv;
    }
    let v = u * coeff;
    let kz = unvec(&v, p * p, p * p)?;
    let x_inv = symmetrize(&unvec(&(kz * vec(&eye)), p, p)?);
    let x = inv_pd(&x_inv)?;
    Ok(x)
}

/// Newton iteration for the maximizer of `n log|Z| - tr(AZSZ)/2` over PD `Z`,
/// returning `X = Z^{-2}`.
fn newton_mode(params: &GiwParams, start: &Mat) -> Result<Mat> {
    let p = params.dim();
    let a = &*params.a;
    let s = &*params.s;
    let n = params.n;
    let objective = |z: &Mat| -> Option<f64> {
        let ld = log_det_pd(z).ok()?;
        Some((a * z * s * z).trace() / 2.0 - n * ld)
    };
    let (_, mut z) = sym_sqrt_and_inv_sqrt(start)?;
    let mut f = objective(&z).ok_or_else(|| Error::Domain("mode start is not PD".into()))?;
    let base_hess = (kron(s, a) + kron(a, s)) * 0.5;

    for _ in 0..200 {
        let z_inv = inv_pd(&z)?;
        let grad = symmetrize(&(a * &z * s + s * &z * a)) * 0.5 - &z_inv * n;
        if grad.norm() <= 1e-14 * n * z_inv.norm() {
            break;
        }
        let hess = &base_hess + kron(&z_inv, &z_inv) * n;
        let step = hess
            .cholesky()
            .ok_or(Error::Numerical {
                msg: "mode Hessian is not PD".into(),
                residual: grad.norm(),
            })?
            .solve(&vec(&grad));
        let dz = symmetrize(&unvec(&step, p, p)?);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let cand = &z - &dz * t;
            if let Some(fc) = objective(&cand) {
                // allow rounding-level increases so the final steps are not rejected
                if fc <= f + 8.0 * f64::EPSILON * (f.abs() + 1.0) {
                    z = cand;
                    f = fc;
                    accepted = true;
                    break;
                }
            }
            t *= 0.5;
        }
        if !accepted || (&dz * t).norm() <= 1e-15 * z.norm() {
            break;
        }
    }
    let z_inv = inv_pd(&z)?;
    Ok(symmetrize(&(&z_inv * &z_inv)))
}

/// `(AS + SA) / (2n)` with eigenvalues floored at [`TILDE_FLOOR`] times the largest one.
pub fn estimator_tilde(params: &GiwParams) -> Mat {
    estimator_tilde_raw(&params.a, &params.s, params.n)
}

pub(crate) fn estimator_tilde_raw(a: &Mat, s: &Mat, n: f64) -> Mat {
    let as_ = a * s;
    let avg = symmetrize(&(&as_ + as_.transpose())) / (2.0 * n);
    let top = crate::matrix::max_eigenvalue(&avg).max(f64::MIN_POSITIVE);
    nearest_pd(&avg, TILDE_FLOOR * top)
}

/// One draw of `X ~ GIW_1(n, a, s)`: `x = a s / g` with `g ~ Gamma((n-2)/2, scale 2)`.
pub fn giw_sample_p1<R: Rng + ?Sized>(n: f64, a: f64, s: f64, rng: &mut R) -> Result<f64> {
    if !(n > 2.0) {
        return Err(Error::param(format!("GIW_1 needs n > 2, got {n}")));
    }
    if !(a > 0.0 && s > 0.0) {
        return Err(Error::param("GIW_1 scale parameters must be positive"));
    }
    let g = Gamma::new((n - 2.0) / 2.0, 2.0).map_err(|e| Error::param(e.to_string()))?;
    Ok(a * s / g.sample(rng))
}
