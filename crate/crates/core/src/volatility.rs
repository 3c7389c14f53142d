//! Time-varying observation covariance.
//!
//! The precision evolves as `Σ_t^{-1} = k U(Σ_{t-1}^{-1})' B_t U(Σ_{t-1}^{-1})`
//! with `B_t ~ B_p(m/2, 1/2)` singular multivariate beta, `U(·)` the upper
//! Cholesky factor, `k = {δ(1-p)+p}/{δ(2-p)+p-1}` and `m = δ/(1-δ) + p - 1`.

use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::filter::{
    check_observation, log_predictive_error, sigma_estimate, standardize, FilterState, ForecastRecord,
    Standardization,
};
use crate::matrix::{chol_upper, fmt_f64, inv_pd, nearest_pd, sym_eigen, sym_sqrt_and_inv_sqrt, symmetrize, vech, Mat, Vector};

/// Floor applied to simulated covariances at the output boundary.
pub const PATH_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VolConstants {
    pub delta: f64,
    pub p: usize,
    pub k: f64,
    /// Infinite when `δ = 1`.
    pub m: f64,
}

impl VolConstants {
    /// `δ = 1`: `k = 1` and `B_t = I` with probability one.
    pub fn is_degenerate(&self) -> bool {
        self.delta == 1.0
    }

    /// Forecast degrees of freedom `δ/(1-δ)`.
    pub fn forecast_dof(&self) -> f64 {
        self.delta / (1.0 - self.delta)
    }

    /// Posterior GIW degrees of freedom `1/(1-δ) + 2p`.
    pub fn posterior_dof(&self) -> f64 {
        1.0 / (1.0 - self.delta) + 2.0 * self.p as f64
    }
}

pub fn vol_constants(delta: f64, p: usize) -> Result<VolConstants> {
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(Error::param(format!("discount factor {delta} outside (0, 1]")));
    }
    if p == 0 {
        return Err(Error::param("dimension must be positive"));
    }
    let pf = p as f64;
    let k = (delta * (1.0 - pf) + pf) / (delta * (2.0 - pf) + pf - 1.0);
    let m = if delta == 1.0 {
        f64::INFINITY
    } else {
        delta / (1.0 - delta) + pf - 1.0
    };
    Ok(VolConstants { delta, p, k, m })
}

/// Upper-triangular `T` with `T'T ~ W_p(m, I)` (Bartlett decomposition).
fn bartlett_upper<R: Rng + ?Sized>(m: f64, p: usize, rng: &mut R) -> Result<Mat> {
    let mut t = Mat::zeros(p, p);
    for i in 0..p {
        let chi = ChiSquared::new(m - i as f64).map_err(|e| Error::param(e.to_string()))?;
        t[(i, i)] = chi.sample(rng).sqrt();
        for j in (i + 1)..p {
            t[(i, j)] = rng.sample(StandardNormal);
        }
    }
    Ok(t)
}

/// `B = U(C)'^{-1} A_1 U(C)^{-1}` with `A_1 ~ W_p(m, I)`,
/// `A_2 = Σ_{j=1}^n Y_j Y_j'`, `Y_j ~ N_p(0, I)` and `C = A_1 + A_2`.
pub fn sample_singular_beta<R: Rng + ?Sized>(m: f64, n: usize, p: usize, rng: &mut R) -> Result<Mat> {
    if !(m > p as f64 - 1.0) {
        return Err(Error::param(format!("singular beta needs m > p - 1 = {}, got {m}", p as f64 - 1.0)));
    }
    if n == 0 {
        return Err(Error::param("singular beta needs n >= 1"));
    }
    let t = bartlett_upper(m, p, rng)?;
    let a1 = t.transpose() * &t;
    let mut c = a1.clone();
    for _ in 0..n {
        let y = Vector::from_fn(p, |_, _| rng.sample(StandardNormal));
        c.ger(1.0, &y, &y, 1.0);
    }
    let u = chol_upper(&symmetrize(&c))?;
    let u_inv = u
        .solve_upper_triangular(&Mat::identity(p, p))
        .ok_or(Error::Singular { pivot: 0, value: 0.0 })?;
    Ok(symmetrize(&(u_inv.transpose() * a1 * u_inv)))
}

/// Factor `U` with `U'U = M`; upper Cholesky when `M` is PD, otherwise the
/// symmetric PSD root.
fn upper_factor(m: &Mat) -> Mat {
    match chol_upper(m) {
        Ok(u) => u,
        Err(_) => {
            let eig = sym_eigen(m);
            let mut v = eig.eigenvectors.clone();
            for (j, l) in eig.eigenvalues.iter().enumerate() {
                v.column_mut(j).scale_mut(l.max(0.0).sqrt());
            }
            symmetrize(&(v * eig.eigenvectors.transpose()))
        }
    }
}

/// `k U(P)' B U(P)` for the precision `P`.
pub fn evolve_precision(prec_prev: &Mat, b: &Mat, k: f64) -> Mat {
    let u = upper_factor(prec_prev);
    symmetrize(&(u.transpose() * b * &u * k))
}

fn pseudo_inverse_pd(prec: &Mat) -> Mat {
    if let Ok(inv) = inv_pd(prec) {
        return nearest_pd(&inv, PATH_FLOOR);
    }
    let eig = sym_eigen(prec);
    let tol = eig.eigenvalues.amax() * 1e-14 * prec.nrows() as f64;
    let mut v = eig.eigenvectors.clone();
    for (j, l) in eig.eigenvalues.iter().enumerate() {
        v.column_mut(j).scale_mut(if *l > tol { 1.0 / l } else { 0.0 });
    }
    nearest_pd(&(v * eig.eigenvectors.transpose()), PATH_FLOOR)
}

/// `Σ_1, …, Σ_N` from iterating the precision evolution from `Σ_0 = sigma0`.
pub fn simulate_vol_path<R: Rng + ?Sized>(
    sigma0: &Mat,
    consts: &VolConstants,
    n_steps: usize,
    rng: &mut R,
) -> Result<Vec<Mat>> {
    let p = consts.p;
    if sigma0.nrows() != p {
        return Err(Error::dim("Σ_0 does not match the constants' dimension"));
    }
    let mut prec = inv_pd(sigma0)?;
    let mut path = Vec::with_capacity(n_steps);
    for _ in 0..n_steps {
        if !consts.is_degenerate() {
            let b = sample_singular_beta(consts.m, 1, p, rng)?;
            prec = evolve_precision(&prec, &b, consts.k);
        }
        path.push(pseudo_inverse_pd(&prec));
    }
    Ok(path)
}

/// Local level series driven by a covariance path: `ε_t ~ N(0, Σ_t)`,
/// `ω_t ~ N(0, Σ_t^{1/2} W Σ_t^{1/2})`, `θ_0 = 0`.
pub fn simulate_vol_llm<R: Rng + ?Sized>(path: &[Mat], w: &Mat, phi: f64, rng: &mut R) -> Result<Vec<Vector>> {
    let p = w.nrows();
    let w_half = upper_factor(w).transpose();
    let mut theta = Vector::zeros(p);
    let mut out = Vec::with_capacity(path.len());
    for sigma in path {
        let (half, _) = sym_sqrt_and_inv_sqrt(sigma)?;
        let z1 = Vector::from_fn(p, |_, _| rng.sample(StandardNormal));
        let z2 = Vector::from_fn(p, |_, _| rng.sample(StandardNormal));
        theta = &theta * phi + &half * (&w_half * z1);
        out.push(&theta + &half * z2);
    }
    Ok(out)
}

/// One row of `vech(Σ_t)` per time point.
pub fn format_vech_path(path: &[Mat]) -> String {
    let mut out = String::new();
    for sigma in path {
        let row: Vec<String> = vech(sigma).iter().map(|v| fmt_f64(*v)).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Filter step under the evolving covariance.
///
/// The forecast is `t_p(δ/(1-δ), φ m_{t-1}, S_{t-1}/k)`, the spread is
/// discounted as `S_t = S_{t-1}/k + e_t e_t'` and `Σ̃_t` comes from
/// `GIW_p(1/(1-δ) + 2p, Q^{-1}, S_t)`. Degrees of freedom do not accumulate.
/// With `δ = 1` (`k = 1`) the state's own `n` is held fixed in place of the
/// infinite forecast degrees of freedom.
pub fn vol_filter_step(state: &FilterState, y: &Vector, consts: &VolConstants) -> Result<(FilterState, ForecastRecord)> {
    let p = state.dim();
    if consts.p != p {
        return Err(Error::dim("volatility constants do not match the state dimension"));
    }
    let t = state.t + 1;
    check_observation(y, p, t)?;
    let (dof, post_dof) = if consts.is_degenerate() {
        (state.n, state.n + 2.0 * p as f64)
    } else {
        (consts.forecast_dof(), consts.posterior_dof())
    };
    let phi = state.steady.phi;
    let location = &state.m * phi;
    let e = y - &location;
    let prior_s = &state.s / consts.k;

    let std_error = match state.options.standardization {
        Standardization::Spread if dof > 2.0 => {
            let scale = 1.0 / (dof - 2.0);
            standardize(&e, prior_s.diagonal().iter().map(|v| v * scale))
        }
        Standardization::Spread => Vector::from_element(p, f64::NAN),
        Standardization::Conditional => {
            let (half, _) = sym_sqrt_and_inv_sqrt(&state.sigma_tilde)?;
            let f = &half * &*state.steady.q * &half;
            standardize(&e, f.diagonal().iter().copied())
        }
    };
    let log_pred = log_predictive_error(&prior_s, dof, &e)?;
    let record = ForecastRecord {
        t,
        dof,
        location: location.clone(),
        spread: prior_s.clone(),
        error: e.clone(),
        std_error,
        log_pred,
    };

    let s_new = symmetrize(&(prior_s + &e * e.transpose()));
    let sigma_tilde = sigma_estimate(state.options.estimator, &state.q_inv, &s_new, post_dof, Some(&state.sigma_tilde))?;
    let (half, inv_half) = sym_sqrt_and_inv_sqrt(&sigma_tilde)?;
    let gain = &half * &*state.steady.p * &inv_half;
    let m_new = location + gain * &e;
    let next = FilterState {
        t,
        m: m_new,
        s: s_new,
        n: dof,
        sigma_tilde,
        steady: state.steady.clone(),
        p_t: state.p_t.clone(),
        options: state.options,
        q_inv: state.q_inv.clone(),
    };
    Ok((next, record))
}

/// Runs [`vol_filter_step`] over a series and returns the records and the
/// `Σ̃_t` path.
pub fn run_vol_filter(
    state: FilterState,
    data: &[Vector],
    consts: &VolConstants,
) -> Result<(Vec<ForecastRecord>, Vec<Mat>, FilterState)> {
    let mut state = state;
    let mut records = Vec::with_capacity(data.len());
    let mut path = Vec::with_capacity(data.len());
    for y in data {
        let (next, rec) = vol_filter_step(&state, y, consts)?;
        state = next;
        records.push(rec);
        path.push(state.sigma_tilde.clone());
    }
    Ok((records, path, state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filter::{filter_init, filter_step, ModelConfig, WSpec};
    use crate::matrix::{max_eigenvalue, min_eigenvalue, SpdMatrix};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::Gamma;
    use statrs::distribution::{Beta, ContinuousCDF};
    use statrs::function::gamma::digamma;

    fn ks_one_sample(mut xs: Vec<f64>, cdf: impl Fn(f64) -> f64) -> f64 {
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = xs.len() as f64;
        xs.iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = cdf(x);
                (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
            })
            .fold(0.0, f64::max)
    }

    fn ks_two_sample(mut a: Vec<f64>, mut b: Vec<f64>) -> f64 {
        a.sort_by(|x, y| x.partial_cmp(y).unwrap());
        b.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let (na, nb) = (a.len() as f64, b.len() as f64);
        let (mut i, mut j, mut d) = (0, 0, 0.0f64);
        while i < a.len() && j < b.len() {
            if a[i] <= b[j] {
                i += 1;
            } else {
                j += 1;
            }
            d = d.max((i as f64 / na - j as f64 / nb).abs());
        }
        d
    }

    #[test]
    fn constants_examples() {
        let c = vol_constants(0.95, 2).unwrap();
        assert!((c.k - 1.05).abs() < 1e-14);
        assert!((c.m - 20.0).abs() < 1e-12);
        let c = vol_constants(0.9, 1).unwrap();
        assert!((c.k - 1.0 / 0.9).abs() < 1e-14);
        assert!((c.m - 9.0).abs() < 1e-12);
        let c = vol_constants(1.0, 4).unwrap();
        assert_eq!(c.k, 1.0);
        assert!(c.m.is_infinite() && c.is_degenerate());
        assert!(vol_constants(0.0, 2).is_err());
        assert!(vol_constants(1.1, 2).is_err());
    }

    #[test]
    fn precision_expectation_is_preserved_by_constants() {
        for p in 1..6 {
            for delta in [0.5, 0.8, 0.95, 0.99] {
                let c = vol_constants(delta, p).unwrap();
                assert!((c.k * c.m / (c.m + 1.0) - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn scalar_beta_matches_beta_cdf() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (m, n) = (7.0, 1);
        let draws: Vec<f64> = (0..100_000)
            .map(|_| sample_singular_beta(m, n, 1, &mut rng).unwrap()[(0, 0)])
            .collect();
        let beta = Beta::new(m / 2.0, n as f64 / 2.0).unwrap();
        let d = ks_one_sample(draws, |x| beta.cdf(x));
        assert!(d < 1.628 / (100_000f64).sqrt(), "KS statistic {d}");
    }

    #[test]
    fn beta_spectrum_and_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for _ in 0..500 {
            let b = sample_singular_beta(5.5, 1, 3, &mut rng).unwrap();
            let eig = sym_eigen(&b).eigenvalues;
            assert!(eig.min() >= 0.0 && eig.max() <= 1.0 + 1e-12);
            let mut gap: Vec<f64> = eig.iter().map(|l| 1.0 - l).collect();
            gap.sort_by(|a, b| a.partial_cmp(b).unwrap());
            assert!(gap[0].abs() < 1e-10 && gap[1].abs() < 1e-10 && gap[2] > 1e-10);
        }
        assert!(sample_singular_beta(1.5, 1, 3, &mut rng).is_err());
    }

    #[test]
    fn identity_beta_keeps_precision() {
        let prec = Mat::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        assert!((evolve_precision(&prec, &Mat::identity(2, 2), 1.0) - &prec).amax() < 1e-14);
        let scalar = evolve_precision(&Mat::from_element(1, 1, 4.0), &Mat::from_element(1, 1, 0.3), 1.2);
        assert!((scalar[(0, 0)] - 1.2 * 0.3 * 4.0).abs() < 1e-14);
    }

    #[test]
    fn evolved_precision_is_a_martingale() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let c = vol_constants(0.9, 2).unwrap();
        let prec = Mat::from_row_slice(2, 2, &[2.0, 0.6, 0.6, 1.0]);
        let draws = 100_000;
        let mut sum = Mat::zeros(2, 2);
        let mut sq = Mat::zeros(2, 2);
        for _ in 0..draws {
            let b = sample_singular_beta(c.m, 1, 2, &mut rng).unwrap();
            let e = evolve_precision(&prec, &b, c.k);
            sq += e.component_mul(&e);
            sum += e;
        }
        let mean = &sum / draws as f64;
        for i in 0..2 {
            for j in 0..2 {
                let var = sq[(i, j)] / draws as f64 - mean[(i, j)].powi(2);
                let se = (var / draws as f64).sqrt();
                assert!((mean[(i, j)] - prec[(i, j)]).abs() < 3.0 * se, "({i},{j}) {} vs {}", mean[(i, j)], prec[(i, j)]);
            }
        }
    }

    #[test]
    fn beta_gamma_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let (m, n, rate) = (6.0, 1usize, 1.7);
        let h = Gamma::new((m + n as f64) / 2.0, 1.0 / rate).unwrap();
        let g = Gamma::new(m / 2.0, 1.0 / rate).unwrap();
        let count = 100_000;
        let built: Vec<f64> = (0..count)
            .map(|_| sample_singular_beta(m, n, 1, &mut rng).unwrap()[(0, 0)] * h.sample(&mut rng))
            .collect();
        let direct: Vec<f64> = (0..count).map(|_| g.sample(&mut rng)).collect();
        let d = ks_two_sample(built, direct);
        let crit = 1.628 * (2.0 / count as f64).sqrt();
        assert!(d < crit, "KS {d} vs {crit}");
    }

    #[test]
    fn degenerate_path_is_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let sigma0 = Mat::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.5]);
        let path = simulate_vol_path(&sigma0, &vol_constants(1.0, 2).unwrap(), 20, &mut rng).unwrap();
        assert!(path.iter().all(|s| (s - &sigma0).amax() < 1e-12));
    }

    #[test]
    fn scalar_log_variance_drift() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let c = vol_constants(0.9, 1).unwrap();
        let steps = 100_000;
        let path = simulate_vol_path(&Mat::from_element(1, 1, 1.0), &c, steps, &mut rng).unwrap();
        let incs: Vec<f64> = std::iter::once(path[0][(0, 0)].ln())
            .chain(path.windows(2).map(|w| w[1][(0, 0)].ln() - w[0][(0, 0)].ln()))
            .collect();
        let mean = incs.iter().sum::<f64>() / steps as f64;
        let var = incs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (steps - 1) as f64;
        // E log B for B ~ Beta(m/2, 1/2)
        let e_log_b = digamma(c.m / 2.0) - digamma((c.m + 1.0) / 2.0);
        let expected = -(c.k.ln() + e_log_b);
        assert!((mean - expected).abs() < 3.0 * (var / steps as f64).sqrt());
    }

    #[test]
    fn path_stays_pd() {
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let c = vol_constants(0.95, 3).unwrap();
        let path = simulate_vol_path(&Mat::identity(3, 3), &c, 1000, &mut rng).unwrap();
        assert!(path.iter().all(|s| min_eigenvalue(s) > 0.0));
        let csv = format_vech_path(&path[..2]);
        assert_eq!(csv.lines().count(), 2);
        assert_eq!(csv.lines().next().unwrap().split(',').count(), 6);
    }

    fn state(p: usize, w: f64) -> FilterState {
        let cfg = ModelConfig::local_level(p, WSpec::Fixed(SpdMatrix::scaled_identity(p, w)));
        filter_init(&cfg, &cfg.resolve_w().unwrap()).unwrap()
    }

    #[test]
    fn zero_error_decays_spread() {
        let c = vol_constants(0.9, 2).unwrap();
        let mut s0 = state(2, 0.3);
        s0.m = Vector::from_vec(vec![1.0, 2.0]);
        let y = s0.m.clone();
        let (next, rec) = vol_filter_step(&s0, &y, &c).unwrap();
        assert_eq!(next.m, s0.m);
        assert!((next.s.clone() - &s0.s / c.k).amax() < 1e-15);
        assert_eq!(rec.dof, c.forecast_dof());
    }

    #[test]
    fn unit_discount_matches_fixed_dof_filter() {
        let mut rng = ChaCha8Rng::seed_from_u64(28);
        let data: Vec<Vector> = (0..50).map(|_| Vector::from_fn(3, |_, _| rng.sample(StandardNormal))).collect();
        let c = vol_constants(1.0, 3).unwrap();
        let mut a = state(3, 0.4);
        let mut b = a.clone();
        for y in &data {
            let (na, _) = vol_filter_step(&a, y, &c).unwrap();
            let (mut nb, _) = filter_step(&b, y).unwrap();
            nb.n = b.n;
            a = na;
            b = nb;
            assert!((&a.m - &b.m).amax() < 1e-10);
            assert!((&a.s - &b.s).amax() < 1e-10);
        }
    }

    #[test]
    fn tracks_simulated_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let c = vol_constants(0.98, 2).unwrap();
        let sigma0 = Mat::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.8]);
        let path = simulate_vol_path(&sigma0, &c, 500, &mut rng).unwrap();
        let w = Mat::identity(2, 2) * 0.2;
        let data = simulate_vol_llm(&path, &w, 1.0, &mut rng).unwrap();
        let cfg = ModelConfig::local_level(2, WSpec::Fixed(SpdMatrix::new(w).unwrap()));
        let init = filter_init(&cfg, &cfg.resolve_w().unwrap()).unwrap();
        let (_, est, _) = run_vol_filter(init, &data, &c).unwrap();
        let learned: f64 = est.iter().zip(&path).map(|(e, s)| (e - s).norm()).sum::<f64>() / 500.0;
        let frozen: f64 = path.iter().map(|s| (&sigma0 - s).norm()).sum::<f64>() / 500.0;
        assert!(learned < frozen, "learned {learned} vs frozen {frozen}");
        assert!(est.iter().all(|s| max_eigenvalue(s).is_finite()));
    }
}
