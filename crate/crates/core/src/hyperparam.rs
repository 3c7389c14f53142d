//! Estimation of the evolution scale.
//!
//! With `m_0 = 0` and `Σ` treated as `I`, maximizing the marginal likelihood
//! over `W` amounts to minimizing `log|S_N|` over the steady-state scale `P`,
//! where `S_N = S_0 + Σ_t e_t e_t'` and `e_t = y_t - Σ_{i=0}^{t-2} P(I-P)^i y_{t-1-i}`.
//! Parameters are the lower-triangular entries of `P` (vech order); an
//! off-diagonal parameter `p_kl` moves both `(k,l)` and `(l,k)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::giw::ln_mvgamma;
use crate::matrix::{
    chol_upper, inv_pd, log_det_pd, max_eigenvalue, min_eigenvalue, sym_eigen, symmetrize, unvech, vech, Mat,
    SpdMatrix, Vector,
};

/// Series longer than this use a truncated lag window in the expansion.
pub const TRUNCATE_ABOVE: usize = 500;
/// Lags `i` with `‖(I-P)^i‖_2` below this are dropped.
pub const TRUNCATE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct NrSettings {
    pub tol: f64,
    pub max_iter: usize,
    pub eig_clamp: f64,
    /// Starting iterate; `None` means `0.5 I`.
    pub init: Option<Mat>,
}

impl Default for NrSettings {
    fn default() -> Self {
        NrSettings {
            tol: 1e-3,
            max_iter: 50,
            eig_clamp: 1e-4,
            init: None,
        }
    }
}

impl NrSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.eig_clamp > 0.0 && self.eig_clamp < 0.5) {
            return Err(Error::param("eigenvalue clamp must lie in (0, 0.5)"));
        }
        if !(self.tol > 0.0) {
            return Err(Error::param("tolerance must be positive"));
        }
        if self.max_iter == 0 {
            return Err(Error::param("max_iter must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NrTraceRow {
    pub iter: usize,
    pub objective: f64,
    pub step_norm: f64,
    /// True when the Newton direction was replaced by steepest descent.
    pub gradient_step: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NrResult {
    pub p: Mat,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub trace: Vec<NrTraceRow>,
}

/// Closed-form log marginal likelihood of `N` observations given the
/// initial and final spreads.
pub fn loglik_closed(s0: &Mat, sn: &Mat, n0: f64, n_obs: usize, p: usize) -> Result<f64> {
    if n_obs == 0 {
        return Err(Error::Config("log-likelihood needs at least one observation".into()));
    }
    if s0.nrows() != p || sn.nrows() != p {
        return Err(Error::dim("spread matrices do not match p"));
    }
    let pf = p as f64;
    let c1 = n0 + pf - 2.0;
    let mut c = -(n_obs as f64) * pf / 2.0 * std::f64::consts::PI.ln();
    for t in 1..=n_obs {
        let n_prev = n0 + (t - 1) as f64;
        c += ln_mvgamma(p, (n_prev + pf) / 2.0) - ln_mvgamma(p, (n_prev + pf - 1.0) / 2.0);
    }
    Ok(c + (c1 + 1.0) * log_det_pd(s0)? / 2.0 - (c1 + n_obs as f64 + 1.0) * log_det_pd(sn)? / 2.0)
}

fn check_p(p: &Mat) -> Result<()> {
    if !p.is_square() {
        return Err(Error::dim("P must be square"));
    }
    let (lo, hi) = (min_eigenvalue(p), max_eigenvalue(p));
    if !(lo > 0.0 && hi < 1.0) {
        return Err(Error::Domain(format!("P must have eigenvalues in (0, 1), found [{lo}, {hi}]")));
    }
    Ok(())
}

fn check_inputs(p: &Mat, data: &[Vector], s0: &Mat) -> Result<()> {
    check_p(p)?;
    if data.is_empty() {
        return Err(Error::Config("empty series".into()));
    }
    let dim = p.nrows();
    if s0.nrows() != dim || data.iter().any(|y| y.len() != dim) {
        return Err(Error::dim("P, S0 and observations differ in dimension"));
    }
    Ok(())
}

/// Number of lags kept in the expansion: all of them up to
/// [`TRUNCATE_ABOVE`] observations, otherwise the smallest `i_max` with
/// `‖(I-P)^{i_max}‖_2 < TRUNCATE_TOL`.
pub fn lag_window(p: &Mat, n_obs: usize) -> usize {
    if n_obs <= TRUNCATE_ABOVE {
        return n_obs;
    }
    let r = 1.0 - min_eigenvalue(p);
    if r <= 0.0 {
        return 1;
    }
    let i_max = (TRUNCATE_TOL.ln() / r.ln()).ceil();
    if i_max.is_finite() && i_max < n_obs as f64 {
        (i_max as usize).max(1)
    } else {
        n_obs
    }
}

/// `G_i = P (I-P)^i` for `i < count`.
fn lag_weights(p: &Mat, count: usize) -> Vec<Mat> {
    let dim = p.nrows();
    let i_minus_p = Mat::identity(dim, dim) - p;
    let mut out = Vec::with_capacity(count);
    let mut g = p.clone();
    for _ in 0..count {
        out.push(g.clone());
        g = &g * &i_minus_p;
    }
    out
}

/// Forecast errors from the explicit lag expansion.
fn expansion_errors(p: &Mat, data: &[Vector]) -> Vec<Vector> {
    let window = lag_window(p, data.len());
    let g = lag_weights(p, window);
    data.iter()
        .enumerate()
        .map(|(s, y)| {
            let mut e = y.clone();
            for (i, gi) in g.iter().enumerate().take(s) {
                e -= gi * &data[s - 1 - i];
            }
            e
        })
        .collect()
}

/// Forecast errors from `m_t = (I-P)m_{t-1} + P y_t`, `m_0 = 0`.
fn recursion_errors(p: &Mat, data: &[Vector]) -> Vec<Vector> {
    let mut m = Vector::zeros(p.nrows());
    data.iter()
        .map(|y| {
            let e = y - &m;
            m += p * &e;
            e
        })
        .collect()
}

fn accumulate(s0: &Mat, errors: &[Vector]) -> Mat {
    let mut s = s0.clone();
    for e in errors {
        s.ger(1.0, e, e, 1.0);
    }
    symmetrize(&s)
}

/// `log|S_N|` from the lag expansion (truncated above [`TRUNCATE_ABOVE`]).
pub fn logdet_sn(p: &Mat, data: &[Vector], s0: &Mat) -> Result<f64> {
    check_inputs(p, data, s0)?;
    log_det_pd(&accumulate(s0, &expansion_errors(p, data)))
}

/// `log|S_N|` by running the filter recursion.
pub fn logdet_sn_recursive(p: &Mat, data: &[Vector], s0: &Mat) -> Result<f64> {
    check_inputs(p, data, s0)?;
    log_det_pd(&accumulate(s0, &recursion_errors(p, data)))
}

/// Index pairs `(k, l)`, `k >= l`, in vech order.
pub fn vech_pairs(dim: usize) -> Vec<(usize, usize)> {
    (0..dim).flat_map(|l| (l..dim).map(move |k| (k, l))).collect()
}

fn pair_index(dim: usize) -> Vec<Vec<usize>> {
    let mut idx = vec![vec![0; dim]; dim];
    for (a, (k, l)) in vech_pairs(dim).into_iter().enumerate() {
        idx[k][l] = a;
        idx[l][k] = a;
    }
    idx
}

/// `K_0 = u_k u_l' + u_l u_k'` (or `u_k u_k'`).
fn unit_direction(dim: usize, k: usize, l: usize) -> Mat {
    let mut k0 = Mat::zeros(dim, dim);
    k0[(k, l)] = 1.0;
    k0[(l, k)] = 1.0;
    k0
}

/// `K_0 v` for the unit direction of pair `(k, l)`.
fn apply_direction(k: usize, l: usize, v: &Vector, out: &mut Vector) {
    out[k] += v[l];
    if k != l {
        out[l] += v[k];
    }
}

/// `λ' K_0 v` for the unit direction of pair `(k, l)`.
fn bilinear_direction(k: usize, l: usize, lambda: &Vector, v: &Vector) -> f64 {
    if k == l {
        lambda[k] * v[k]
    } else {
        lambda[k] * v[l] + lambda[l] * v[k]
    }
}

/// Gradient of `log|S_N|` through the lag-derivative recursion
/// `K_i = K_{i-1}(I-P) - P(I-P)^{i-1} K_0`, giving
/// `∂log|S_N|/∂p_kl = -2 Σ_i tr(K_i C_i)` with `C_i = Σ_t y_{t-1-i} e_t' S_N^{-1}`.
/// Returned as a symmetric matrix with entry `(k,l)` holding `∂/∂p_kl`.
pub fn grad_logdet_sn(p: &Mat, data: &[Vector], s0: &Mat) -> Result<Mat> {
    check_inputs(p, data, s0)?;
    let dim = p.nrows();
    let n_obs = data.len();
    let errors = expansion_errors(p, data);
    let s_inv = inv_pd(&accumulate(s0, &errors))?;
    let window = lag_window(p, n_obs).min(n_obs.saturating_sub(1));
    let g_vec: Vec<Vector> = errors.iter().map(|e| &s_inv * e).collect();

    let c: Vec<Mat> = (0..window)
        .map(|i| {
            let mut ci = Mat::zeros(dim, dim);
            for s in (i + 1)..n_obs {
                ci.ger(1.0, &data[s - 1 - i], &g_vec[s], 1.0);
            }
            ci
        })
        .collect();
    let weights = lag_weights(p, window);
    let i_minus_p = Mat::identity(dim, dim) - p;

    let mut grad = Mat::zeros(dim, dim);
    for (k, l) in vech_pairs(dim) {
        let k0 = unit_direction(dim, k, l);
        let mut ki = k0.clone();
        let mut total = 0.0;
        for i in 0..window {
            if i > 0 {
                ki = &ki * &i_minus_p - &weights[i - 1] * &k0;
            }
            total += ki.component_mul(&c[i].transpose()).sum();
        }
        grad[(k, l)] = -2.0 * total;
        grad[(l, k)] = -2.0 * total;
    }
    Ok(grad)
}

/// Objective value, vech gradient and vech Hessian.
#[derive(Debug, Clone)]
pub struct Derivatives {
    pub value: f64,
    pub grad: Vector,
    pub hess: Mat,
}

/// Exact value, gradient and Hessian of `log|S_N|` in `O(N q^2 + N q p^2)`
/// for `q = p(p+1)/2` parameters.
///
/// Forward sensitivities follow `dm_t = (I-P) dm_{t-1} + K_0 e_t`, `de_t = -dm_{t-1}`.
/// The second-order error term is contracted against the adjoint
/// `λ_j = S^{-1} e_{j+1} + (I-P) λ_{j+1}` so no second-order sensitivities are stored.
pub fn logdet_sn_derivatives(p: &Mat, data: &[Vector], s0: &Mat) -> Result<Derivatives> {
    check_inputs(p, data, s0)?;
    let dim = p.nrows();
    let n_obs = data.len();
    let pairs = vech_pairs(dim);
    let q = pairs.len();
    let i_minus_p = Mat::identity(dim, dim) - p;

    let errors = recursion_errors(p, data);
    let sn = accumulate(s0, &errors);
    let value = log_det_pd(&sn)?;
    let s_inv = inv_pd(&sn)?;
    let g_vec: Vec<Vector> = errors.iter().map(|e| &s_inv * e).collect();

    // prev[a][s] = dm^a before step s
    let prev: Vec<Vec<Vector>> = pairs
        .iter()
        .map(|&(k, l)| {
            let mut dm = Vector::zeros(dim);
            let mut out = Vec::with_capacity(n_obs);
            for e in &errors {
                out.push(dm.clone());
                let mut next = &i_minus_p * &dm;
                apply_direction(k, l, e, &mut next);
                dm = next;
            }
            out
        })
        .collect();

    let mut lambda = vec![Vector::zeros(dim); n_obs];
    for s in (0..n_obs.saturating_sub(1)).rev() {
        lambda[s] = &g_vec[s + 1] + &i_minus_p * &lambda[s + 1];
    }

    let mut grad = Vector::zeros(q);
    let mut t_mats = Vec::with_capacity(q);
    let mut scaled: Vec<Vec<Vector>> = Vec::with_capacity(q);
    for a in 0..q {
        let mut d = Mat::zeros(dim, dim);
        let mut ga = 0.0;
        for s in 0..n_obs {
            ga += g_vec[s].dot(&prev[a][s]);
            d.ger(1.0, &prev[a][s], &errors[s], 1.0);
        }
        grad[a] = -2.0 * ga;
        let ds = -(&d + d.transpose());
        t_mats.push(&s_inv * ds);
        scaled.push(prev[a].iter().map(|v| &s_inv * v).collect());
    }

    let mut hess = Mat::zeros(q, q);
    for a in 0..q {
        let (ka, la) = pairs[a];
        for b in a..q {
            let (kb, lb) = pairs[b];
            let h1 = -t_mats[b].component_mul(&t_mats[a].transpose()).sum();
            let mut h2 = 0.0;
            let mut h3 = 0.0;
            for s in 0..n_obs {
                h2 += bilinear_direction(kb, lb, &lambda[s], &prev[a][s])
                    + bilinear_direction(ka, la, &lambda[s], &prev[b][s]);
                h3 += prev[a][s].dot(&scaled[b][s]);
            }
            let h = h1 + 2.0 * h2 + 2.0 * h3;
            hess[(a, b)] = h;
            hess[(b, a)] = h;
        }
    }
    Ok(Derivatives { value, grad, hess })
}

/// Hessian of `log|S_N|` as a `p² × p²` matrix indexed by `vec` positions;
/// entry `(k + l p, r + s p)` holds `∂²/∂p_kl ∂p_rs`.
pub fn hess_logdet_sn(p: &Mat, data: &[Vector], s0: &Mat) -> Result<Mat> {
    let d = logdet_sn_derivatives(p, data, s0)?;
    let dim = p.nrows();
    let idx = pair_index(dim);
    Ok(Mat::from_fn(dim * dim, dim * dim, |i, j| {
        d.hess[(idx[i % dim][i / dim], idx[j % dim][j / dim])]
    }))
}

/// Symmetrizes and clamps the spectrum of `m` into `[ε, 1-ε]`.
pub fn clamp_spectrum(m: &Mat, eps: f64) -> Mat {
    let eig = sym_eigen(&symmetrize(m));
    let mut v = eig.eigenvectors.clone();
    for (j, lam) in eig.eigenvalues.iter().enumerate() {
        v.column_mut(j).scale_mut(lam.clamp(eps, 1.0 - eps));
    }
    symmetrize(&(v * eig.eigenvectors.transpose()))
}

const MAX_HALVINGS: usize = 40;

/// Newton-Raphson minimization of `log|S_N|` over `P`.
///
/// Each iterate takes the Newton descent direction (steepest descent when the
/// Hessian is not positive definite), halves the step until the objective
/// does not increase, and clamps the spectrum into `(ε, 1-ε)`. Stops when
/// successive iterates differ by at most `tol` in Frobenius norm.
pub fn newton_raphson_p(data: &[Vector], s0: &Mat, settings: &NrSettings) -> Result<NrResult> {
    settings.validate()?;
    if data.len() < 2 {
        return Err(Error::Config("Newton-Raphson needs at least two observations".into()));
    }
    let dim = s0.nrows();
    let eps = settings.eig_clamp;
    let init = settings.init.clone().unwrap_or_else(|| Mat::identity(dim, dim) * 0.5);
    if init.shape() != (dim, dim) {
        return Err(Error::dim("initial P does not match S0"));
    }
    let mut p = clamp_spectrum(&init, eps);
    let mut derivs = logdet_sn_derivatives(&p, data, s0)?;
    let mut trace = vec![NrTraceRow {
        iter: 0,
        objective: derivs.value,
        step_norm: 0.0,
        gradient_step: false,
    }];
    let fail = |msg: &str, trace: &[NrTraceRow]| Error::Estimation {
        msg: msg.into(),
        trace: trace.iter().map(|r| r.objective).collect(),
    };

    for iter in 1..=settings.max_iter {
        if !derivs.value.is_finite() || derivs.grad.iter().any(|g| !g.is_finite()) {
            return Err(fail("non-finite objective or gradient", &trace));
        }
        let newton = chol_upper(&derivs.hess).ok().and_then(|_| derivs.hess.clone().cholesky()).map(|c| -c.solve(&derivs.grad));
        let directions: Vec<(Vector, bool)> = match newton {
            Some(d) if d.iter().all(|v| v.is_finite()) => vec![(d, false), (-&derivs.grad, true)],
            _ => vec![(-&derivs.grad, true)],
        };
        let x = vech(&p);
        let mut accepted = None;
        'dirs: for (dir, is_grad) in directions {
            let mut alpha = 1.0;
            if is_grad {
                // scale steepest descent to a unit step in parameter space
                let norm = dir.norm();
                if norm > 0.0 {
                    alpha = 1.0 / norm;
                }
            }
            for _ in 0..MAX_HALVINGS {
                let cand_x = &x + &dir * alpha;
                let cand = clamp_spectrum(&unvech(cand_x.as_slice())?, eps);
                if let Ok(v) = logdet_sn_recursive(&cand, data, s0) {
                    if v.is_finite() && v <= derivs.value {
                        accepted = Some((cand, is_grad));
                        break 'dirs;
                    }
                }
                alpha /= 2.0;
            }
        }
        let Some((next, gradient_step)) = accepted else {
            // no descent available at machine resolution: current iterate is the minimum
            let objective = derivs.value;
            return Ok(NrResult {
                p,
                objective,
                iterations: iter - 1,
                converged: true,
                trace,
            });
        };
        let step_norm = (&next - &p).norm();
        p = next;
        derivs = logdet_sn_derivatives(&p, data, s0)?;
        trace.push(NrTraceRow {
            iter,
            objective: derivs.value,
            step_norm,
            gradient_step,
        });
        if step_norm <= settings.tol {
            return Ok(NrResult {
                p,
                objective: derivs.value,
                iterations: iter,
                converged: true,
                trace,
            });
        }
    }
    Ok(NrResult {
        p,
        objective: derivs.value,
        iterations: settings.max_iter,
        converged: false,
        trace,
    })
}

/// Single discounting: `W = diag(δ_i^{-1}(1-δ_i)²)`.
pub fn w_from_discounts(deltas: &[f64]) -> Result<SpdMatrix> {
    if deltas.is_empty() {
        return Err(Error::param("no discount factors given"));
    }
    for &d in deltas {
        if !(d > 0.0 && d <= 1.0) {
            return Err(Error::param(format!("discount factor {d} outside (0, 1]")));
        }
        if d == 1.0 {
            return Err(Error::param("discount factor 1 gives a zero evolution variance; W must be positive definite"));
        }
    }
    let diag: Vec<f64> = deltas.iter().map(|d| (1.0 - d) * (1.0 - d) / d).collect();
    Ok(SpdMatrix::from_diagonal(&diag))
}
