//! Comparison models: the Kalman filter with known covariances, the
//! conjugate inverse Wishart filter with `Ω = wΣ`, and EM estimation of
//! `(Σ, Ω)`.

use crate::error::{Error, Result};
use crate::filter::{check_series, log_predictive_error, msse, standardize, ForecastRecord};
use crate::matrix::{inv_pd, log_det_pd, nearest_pd, symmetrize, Mat, Vector};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Kalman filter output with the filtered moments at `t = 0..=N`.
#[derive(Debug, Clone)]
pub struct KalmanOutput {
    pub records: Vec<ForecastRecord>,
    pub means: Vec<Vector>,
    pub covs: Vec<Mat>,
    /// `R_t = φ² C_{t-1} + Ω`, index `t` (entry 0 unused).
    pub prior_covs: Vec<Mat>,
    pub loglik: f64,
    pub msse: Vector,
    pub missing: usize,
}

fn check_cov(name: &str, m: &Mat, p: usize) -> Result<()> {
    if m.shape() != (p, p) {
        return Err(Error::dim(format!("{name} must be {p}x{p}")));
    }
    Ok(())
}

/// Kalman recursions for `y_t = θ_t + ε_t`, `θ_t = φ θ_{t-1} + ω_t`.
/// Standardized errors use the forecast covariance `F_t`.
pub fn kalman_run(data: &[Vector], sigma: &Mat, omega: &Mat, phi: f64, m0: &Vector, c0: &Mat) -> Result<KalmanOutput> {
    let p = check_series(data)?;
    check_cov("Σ", sigma, p)?;
    check_cov("Ω", omega, p)?;
    check_cov("C0", c0, p)?;
    if m0.len() != p {
        return Err(Error::dim("m0 does not match the series"));
    }
    let eye = Mat::identity(p, p);
    let mut means = vec![m0.clone()];
    let mut covs = vec![c0.clone()];
    let mut prior_covs = vec![Mat::zeros(p, p)];
    let mut records = Vec::with_capacity(data.len());
    let mut loglik = 0.0;
    for (i, y) in data.iter().enumerate() {
        let a = &means[i] * phi;
        let r = symmetrize(&(&covs[i] * (phi * phi) + omega));
        let f = symmetrize(&(&r + sigma));
        let f_inv = inv_pd(&f).map_err(|_| Error::Numerical {
            msg: format!("forecast covariance singular at t = {}", i + 1),
            residual: 0.0,
        })?;
        let e = y - &a;
        let quad = (e.transpose() * &f_inv * &e)[(0, 0)];
        let log_pred = -0.5 * (p as f64 * LN_2PI + log_det_pd(&f)? + quad);
        loglik += log_pred;
        let k = &r * &f_inv;
        let i_k = &eye - &k;
        // Joseph form keeps C_t symmetric PSD
        let c = symmetrize(&(&i_k * &r * i_k.transpose() + &k * sigma * k.transpose()));
        records.push(ForecastRecord {
            t: i + 1,
            dof: f64::INFINITY,
            location: a.clone(),
            spread: f.clone(),
            std_error: standardize(&e, f.diagonal().iter().copied()),
            error: e.clone(),
            log_pred,
        });
        means.push(a + k * e);
        covs.push(c);
        prior_covs.push(r);
    }
    let (msse, missing) = msse(&records);
    Ok(KalmanOutput {
        records,
        means,
        covs,
        prior_covs,
        loglik,
        msse,
        missing,
    })
}

/// Fixed-interval smoothed moments for `t = 0..=N`.
#[derive(Debug, Clone)]
pub struct Smoothed {
    pub means: Vec<Vector>,
    pub covs: Vec<Mat>,
    /// `Cov(θ_t, θ_{t-1} | y^N)`, index `t` (entry 0 is zero).
    pub lag_one: Vec<Mat>,
    pub loglik: f64,
}

pub fn kalman_smoother(data: &[Vector], sigma: &Mat, omega: &Mat, phi: f64, m0: &Vector, c0: &Mat) -> Result<Smoothed> {
    let kf = kalman_run(data, sigma, omega, phi, m0, c0)?;
    let n = data.len();
    let p = m0.len();
    let mut means = kf.means.clone();
    let mut covs = kf.covs.clone();
    let mut lag_one = vec![Mat::zeros(p, p); n + 1];
    for t in (0..n).rev() {
        let r_next = &kf.prior_covs[t + 1];
        let j = &kf.covs[t] * phi * inv_pd(r_next)?;
        let a_next = &kf.means[t] * phi;
        means[t] = &kf.means[t] + &j * (&means[t + 1] - a_next);
        covs[t] = symmetrize(&(&kf.covs[t] + &j * (&covs[t + 1] - r_next) * j.transpose()));
        lag_one[t + 1] = &covs[t + 1] * j.transpose();
    }
    Ok(Smoothed {
        means,
        covs,
        lag_one,
        loglik: kf.loglik,
    })
}

#[derive(Debug, Clone)]
pub struct EmOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Starting `(Σ, Ω)`; defaults to half the covariance of first differences for both.
    pub init: Option<(Mat, Mat)>,
    /// Floor for eigenvalues of the M-step estimates.
    pub pd_floor: f64,
}

impl Default for EmOptions {
    fn default() -> Self {
        EmOptions {
            tol: 1e-3,
            max_iter: 500,
            init: None,
            pd_floor: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EmResult {
    pub sigma_hat: Mat,
    pub omega_hat: Mat,
    pub loglik_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Set when an M-step estimate needed eigenvalue repair.
    pub repaired: bool,
    pub m0: Vector,
    pub c0: Mat,
}

fn sample_cov(xs: &[Vector]) -> Mat {
    let p = xs[0].len();
    let n = xs.len() as f64;
    let mean = xs.iter().fold(Vector::zeros(p), |acc, x| acc + x) / n;
    let mut c = Mat::zeros(p, p);
    for x in xs {
        let d = x - &mean;
        c.ger(1.0, &d, &d, 1.0);
    }
    c / (n - 1.0).max(1.0)
}

/// Starting values `Σ = Ω = cov(Δy)/2` and the fixed initial-state prior
/// `θ_0 ~ N(y_1, κ I)` with `κ = 100 max(1, tr cov(Δy)/p)`.
pub fn em_initial(data: &[Vector], floor: f64) -> Result<(Mat, Vector, Mat)> {
    let p = check_series(data)?;
    if data.len() < 3 {
        return Err(Error::Config("EM needs at least three observations".into()));
    }
    let diffs: Vec<Vector> = data.windows(2).map(|w| &w[1] - &w[0]).collect();
    let cov = sample_cov(&diffs);
    let half = nearest_pd(&(&cov * 0.5), floor.max(1e-6 * cov.trace().abs() / p as f64));
    let kappa = 100.0 * (cov.trace() / p as f64).max(1.0);
    Ok((half, data[0].clone(), Mat::identity(p, p) * kappa))
}

/// Shumway-Stoffer EM for `(Σ, Ω)` with `φ` fixed.
pub fn em_fit(data: &[Vector], phi: f64, options: &EmOptions) -> Result<EmResult> {
    let p = check_series(data)?;
    let n = data.len();
    let (start, m0, c0) = em_initial(data, options.pd_floor)?;
    let (mut sigma, mut omega) = options.init.clone().unwrap_or((start.clone(), start));
    let mut trace: Vec<f64> = Vec::new();
    let mut repaired = false;
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..options.max_iter {
        let sm = kalman_smoother(data, &sigma, &omega, phi, &m0, &c0)?;
        if let Some(&prev) = trace.last() {
            if (sm.loglik - prev).abs() < options.tol {
                trace.push(sm.loglik);
                converged = true;
                break;
            }
        }
        trace.push(sm.loglik);
        iterations += 1;

        let mut s_new = Mat::zeros(p, p);
        let mut o_new = Mat::zeros(p, p);
        for t in 1..=n {
            let r = &data[t - 1] - &sm.means[t];
            s_new += &r * r.transpose() + &sm.covs[t];
            let d = &sm.means[t] - &sm.means[t - 1] * phi;
            let l = &sm.lag_one[t];
            o_new += &d * d.transpose() + &sm.covs[t] - (l + l.transpose()) * phi + &sm.covs[t - 1] * (phi * phi);
        }
        let s_new = symmetrize(&(s_new / n as f64));
        let o_new = symmetrize(&(o_new / n as f64));
        let s_fixed = nearest_pd(&s_new, options.pd_floor);
        let o_fixed = nearest_pd(&o_new, options.pd_floor);
        repaired |= s_fixed != s_new || o_fixed != o_new;
        sigma = s_fixed;
        omega = o_fixed;
    }
    Ok(EmResult {
        sigma_hat: sigma,
        omega_hat: omega,
        loglik_trace: trace,
        iterations,
        converged,
        repaired,
        m0,
        c0,
    })
}

/// Output of the conjugate inverse Wishart filter.
#[derive(Debug, Clone)]
pub struct IwOutput {
    pub records: Vec<ForecastRecord>,
    pub means: Vec<Vector>,
    pub spreads: Vec<Mat>,
    pub n: f64,
    pub loglik: f64,
    pub msse: Vector,
    pub missing: usize,
}

/// Inverse Wishart filter with `Ω = wΣ`: scalar steady gain `p_w`,
/// `m_t = φ m_{t-1} + p_w e_t`, `S_t = S_{t-1} + e_t e_t'`, `n_t = n_{t-1} + 1`.
/// Errors are standardized by the Student-t forecast covariance `S_{t-1}/(n_{t-1}-2)`.
pub fn iw_filter(data: &[Vector], w: f64, phi: f64, m0: &Vector, n0: f64, s0: &Mat) -> Result<IwOutput> {
    let p = check_series(data)?;
    if !(w > 0.0) {
        return Err(Error::param("w must be positive"));
    }
    check_cov("S0", s0, p)?;
    let mm = w + 1.0 - phi * phi;
    let gain = 2.0 * w / ((mm * mm + 4.0 * phi * phi * w).sqrt() + mm);
    let mut m = m0.clone();
    let mut s = s0.clone();
    let mut n = n0;
    let mut means = vec![m.clone()];
    let mut spreads = vec![s.clone()];
    let mut records = Vec::with_capacity(data.len());
    let mut loglik = 0.0;
    for (i, y) in data.iter().enumerate() {
        let a = &m * phi;
        let e = y - &a;
        let log_pred = log_predictive_error(&s, n, &e)?;
        loglik += log_pred;
        let std_error = if n > 2.0 {
            standardize(&e, s.diagonal().iter().map(|v| v / (n - 2.0)))
        } else {
            Vector::from_element(p, f64::NAN)
        };
        records.push(ForecastRecord {
            t: i + 1,
            dof: n,
            location: a.clone(),
            spread: s.clone(),
            error: e.clone(),
            std_error,
            log_pred,
        });
        s = symmetrize(&(&s + &e * e.transpose()));
        n += 1.0;
        m = a + &e * gain;
        means.push(m.clone());
        spreads.push(s.clone());
    }
    let (msse, missing) = msse(&records);
    Ok(IwOutput {
        records,
        means,
        spreads,
        n,
        loglik,
        msse,
        missing,
    })
}

/// Maximizer of a unimodal `f` on `[lo, hi]` by golden-section search.
pub fn golden_section_max(f: impl Fn(f64) -> Result<f64>, mut lo: f64, mut hi: f64, tol: f64) -> Result<(f64, f64)> {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = hi - r * (hi - lo);
    let mut d = lo + r * (hi - lo);
    let mut fc = f(c)?;
    let mut fd = f(d)?;
    while hi - lo > tol {
        if fc > fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - r * (hi - lo);
            fc = f(c)?;
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + r * (hi - lo);
            fd = f(d)?;
        }
    }
    Ok(if fc > fd { (c, fc) } else { (d, fd) })
}

#[derive(Debug, Clone)]
pub struct IwFit {
    pub w_hat: f64,
    pub loglik: f64,
    pub output: IwOutput,
}

/// Default bracket for `w`.
pub const IW_BRACKET: (f64, f64) = (1e-4, 1e2);
const LOG_W_TOL: f64 = 1e-6;

/// Maximum likelihood `w` by golden-section search on `log w`. An optimum at
/// the bracket edge widens the bracket by a factor 100 on both sides once.
pub fn iw_fit(data: &[Vector], phi: f64, n0: f64, s0: &Mat, bracket: (f64, f64)) -> Result<IwFit> {
    let p = check_series(data)?;
    let (lo, hi) = bracket;
    if !(lo > 0.0 && hi > lo) {
        return Err(Error::param("w bracket must satisfy 0 < lo < hi"));
    }
    let m0 = Vector::zeros(p);
    let ll = |log_w: f64| iw_filter(data, log_w.exp(), phi, &m0, n0, s0).map(|o| o.loglik);
    let mut range = (lo.ln(), hi.ln());
    for attempt in 0..2 {
        let (x, _) = golden_section_max(&ll, range.0, range.1, LOG_W_TOL)?;
        let at_edge = x - range.0 < 1e-3 || range.1 - x < 1e-3;
        if !at_edge {
            let w_hat = x.exp();
            let output = iw_filter(data, w_hat, phi, &m0, n0, s0)?;
            return Ok(IwFit {
                w_hat,
                loglik: output.loglik,
                output,
            });
        }
        if attempt == 0 {
            let widen = 100f64.ln();
            range = (range.0 - widen, range.1 + widen);
        }
    }
    Err(Error::Estimation {
        msg: "profile likelihood in w is monotone over the widened bracket".into(),
        trace: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filter::{run_filter, ModelConfig, WSpec};
    use crate::matrix::{min_eigenvalue, SpdMatrix};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn normal(p: usize, rng: &mut ChaCha8Rng) -> Vector {
        Vector::from_fn(p, |_, _| rng.sample(StandardNormal))
    }

    fn simulate(sigma: &Mat, omega: &Mat, n: usize, rng: &mut ChaCha8Rng) -> Vec<Vector> {
        let p = sigma.nrows();
        let ls = sigma.clone().cholesky().unwrap().l();
        let lo = omega.clone().cholesky().unwrap().l();
        let mut theta = &lo * normal(p, rng);
        (0..n)
            .map(|_| {
                theta += &lo * normal(p, rng);
                &theta + &ls * normal(p, rng)
            })
            .collect()
    }

    #[test]
    fn scalar_kalman_matches_hand_recursion() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let data: Vec<Vector> = (0..80).map(|_| normal(1, &mut rng)).collect();
        let (s, o, phi) = (0.7, 0.3, 0.9);
        let out = kalman_run(
            &data,
            &Mat::from_element(1, 1, s),
            &Mat::from_element(1, 1, o),
            phi,
            &Vector::zeros(1),
            &Mat::from_element(1, 1, 2.0),
        )
        .unwrap();
        let (mut m, mut c) = (0.0, 2.0);
        for (y, rec) in data.iter().zip(&out.records) {
            let r = phi * phi * c + o;
            let f = r + s;
            let e = y[0] - phi * m;
            assert!((rec.error[0] - e).abs() < 1e-12);
            assert!((rec.spread[(0, 0)] - f).abs() < 1e-12);
            let k = r / f;
            m = phi * m + k * e;
            c = r - k * r;
        }
        assert!((out.means.last().unwrap()[0] - m).abs() < 1e-12);
        assert!((out.covs.last().unwrap()[(0, 0)] - c).abs() < 1e-12);
    }

    #[test]
    fn static_level_is_weighted_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let data: Vec<Vector> = (0..200).map(|_| normal(2, &mut rng)).collect();
        let out = kalman_run(&data, &Mat::identity(2, 2), &Mat::zeros(2, 2), 1.0, &Vector::zeros(2), &(Mat::identity(2, 2) * 1e8)).unwrap();
        let mean = data.iter().fold(Vector::zeros(2), |a, y| a + y) / 200.0;
        assert!((out.means.last().unwrap() - mean).amax() < 1e-6);
        assert!(out.covs.last().unwrap().amax() < 0.006);
    }

    #[test]
    fn kalman_msse_is_calibrated() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let sigma = Mat::from_row_slice(3, 3, &[1.0, 0.3, 0.1, 0.3, 2.0, -0.2, 0.1, -0.2, 0.5]);
        let omega = Mat::from_row_slice(3, 3, &[0.2, 0.05, 0.0, 0.05, 0.4, 0.0, 0.0, 0.0, 0.1]);
        let data = simulate(&sigma, &omega, 4000, &mut rng);
        let out = kalman_run(&data, &sigma, &omega, 1.0, &Vector::zeros(3), &omega).unwrap();
        assert!(out.msse.iter().all(|v| (v - 1.0).abs() < 0.07), "{:?}", out.msse);
    }

    #[test]
    fn smoother_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let sigma = Mat::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.7]);
        let omega = Mat::from_row_slice(2, 2, &[0.3, 0.1, 0.1, 0.5]);
        let data = simulate(&sigma, &omega, 60, &mut rng);
        let m0 = Vector::zeros(2);
        let c0 = Mat::identity(2, 2) * 10.0;
        let kf = kalman_run(&data, &sigma, &omega, 1.0, &m0, &c0).unwrap();
        let sm = kalman_smoother(&data, &sigma, &omega, 1.0, &m0, &c0).unwrap();
        assert_eq!(sm.means.last(), kf.means.last());
        for t in 0..=60 {
            assert!(min_eigenvalue(&(&kf.covs[t] - &sm.covs[t])) > -1e-10);
        }
        let big = Mat::identity(2, 2) * 1e8;
        let sm = kalman_smoother(&data, &sigma, &big, 1.0, &m0, &c0).unwrap();
        for t in 1..=60 {
            assert!((&sm.means[t] - &data[t - 1]).amax() < 1e-5);
        }
    }

    #[test]
    fn lag_one_covariance_matches_joint_smoother() {
        // scalar case: compare against the covariance from the joint Gaussian posterior
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let n = 6;
        let data: Vec<Vector> = (0..n).map(|_| normal(1, &mut rng)).collect();
        let (s, o, phi, c0) = (0.8, 0.5, 0.9, 2.0);
        let sm = kalman_smoother(
            &data,
            &Mat::from_element(1, 1, s),
            &Mat::from_element(1, 1, o),
            phi,
            &Vector::zeros(1),
            &Mat::from_element(1, 1, c0),
        )
        .unwrap();
        // prior covariance of (θ_0..θ_n)
        let mut prior = Mat::zeros(n + 1, n + 1);
        let mut var = vec![c0];
        for t in 1..=n {
            var.push(phi * phi * var[t - 1] + o);
        }
        for i in 0..=n {
            for j in 0..=n {
                let (a, b) = (i.min(j), i.max(j));
                prior[(i, j)] = phi.powi((b - a) as i32) * var[a];
            }
        }
        // posterior precision adds 1/s on θ_1..θ_n
        let mut prec = prior.clone().try_inverse().unwrap();
        for t in 1..=n {
            prec[(t, t)] += 1.0 / s;
        }
        let post = prec.try_inverse().unwrap();
        for t in 1..=n {
            assert!((sm.lag_one[t][(0, 0)] - post[(t, t - 1)]).abs() < 1e-10);
            assert!((sm.covs[t][(0, 0)] - post[(t, t)]).abs() < 1e-10);
        }
    }

    #[test]
    fn em_is_monotone_and_recovers() {
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let sigma = Mat::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.6]);
        let omega = Mat::from_row_slice(2, 2, &[0.4, -0.1, -0.1, 0.3]);
        let data = simulate(&sigma, &omega, 1000, &mut rng);
        let fit = em_fit(&data, 1.0, &EmOptions::default()).unwrap();
        assert!(fit.converged);
        for w in fit.loglik_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-8);
        }
        let es = (&fit.sigma_hat - &sigma).norm() / sigma.norm();
        let eo = (&fit.omega_hat - &omega).norm() / omega.norm();
        assert!(es < 0.2 && eo < 0.2, "Σ error {es}, Ω error {eo}");

        let warm = em_fit(
            &data,
            1.0,
            &EmOptions {
                init: Some((fit.sigma_hat.clone(), fit.omega_hat.clone())),
                ..EmOptions::default()
            },
        )
        .unwrap();
        assert!(warm.iterations <= 3);
    }

    #[test]
    fn iw_filter_equals_giw_with_scalar_w() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let data: Vec<Vector> = (0..120).map(|_| normal(3, &mut rng) * 2.0).collect();
        for w in [1.0, 0.35] {
            let cfg = ModelConfig::local_level(3, WSpec::Fixed(SpdMatrix::scaled_identity(3, w)));
            let giw = run_filter(&cfg, &data).unwrap();
            let iw = iw_filter(&data, w, 1.0, &cfg.m0, cfg.n0, &cfg.s0).unwrap();
            assert!((&giw.final_state.m - iw.means.last().unwrap()).amax() < 1e-10);
            assert!((&giw.final_state.s - iw.spreads.last().unwrap()).amax() < 1e-10 * iw.spreads.last().unwrap().amax());
            for (a, b) in giw.records.iter().zip(&iw.records) {
                assert!((a.log_pred - b.log_pred).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn iw_fit_recovers_ratio() {
        let mut rng = ChaCha8Rng::seed_from_u64(38);
        let p = 5;
        let g = Mat::from_fn(p, p, |_, _| rng.random::<f64>() - 0.5);
        let sigma = &g * g.transpose() + Mat::identity(p, p);
        let w = 0.4;
        let data = simulate(&sigma, &(&sigma * w), 500, &mut rng);
        let fit = iw_fit(&data, 1.0, 0.01, &Mat::identity(p, p), IW_BRACKET).unwrap();
        assert!((fit.w_hat - w).abs() / w < 0.3, "w_hat {}", fit.w_hat);
        let at = |x: f64| iw_filter(&data, x, 1.0, &Vector::zeros(p), 0.01, &Mat::identity(p, p)).unwrap().loglik;
        assert!(fit.loglik >= at(0.5 * fit.w_hat) && fit.loglik >= at(2.0 * fit.w_hat));
    }

    #[test]
    fn golden_section_finds_quadratic_peak() {
        let (x, fx) = golden_section_max(|x| Ok(-(x - 1.3) * (x - 1.3) + 2.0), -5.0, 5.0, 1e-9).unwrap();
        assert!((x - 1.3).abs() < 1e-6 && (fx - 2.0).abs() < 1e-12);
    }
}
