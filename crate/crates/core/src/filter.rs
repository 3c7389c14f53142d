//! Approximate conjugate filter for the local level model
//! `y_t = θ_t + ε_t`, `θ_t = φ θ_{t-1} + ω_t`, with `ε_t ~ N(0, Σ)` and
//! `ω_t ~ N(0, Σ^{1/2} W Σ^{1/2})`.
//!
//! The observation covariance carries a GIW prior `Σ ~ GIW_p(n_0, Q^{-1}, S_0)`;
//! after each observation the posterior is `GIW_p(n_t + 2p, Q^{-1}, S_t)` with
//! `S_t = S_{t-1} + e_t e_t'`. The level gain uses the steady-state scale `P`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::giw::{estimator_tilde_raw, giw_mode_polish, ln_mvgamma, GiwParams};
use crate::hyperparam::{newton_raphson_p, w_from_discounts, NrSettings};
use crate::matrix::{inv_pd, log_det_pd, max_eigenvalue, min_eigenvalue, sym_sqrt_and_inv_sqrt, symmetrize, Mat, SpdMatrix, Vector};
use crate::steady::{p_step, w_from_p, SteadyState};

/// Standard deviations below this are treated as missing in standardized errors.
pub const STD_FLOOR: f64 = 1e-12;

/// How the evolution matrix `W` is obtained.
#[derive(Debug, Clone, PartialEq)]
pub enum WSpec {
    Fixed(SpdMatrix),
    Discounts(Vec<f64>),
    /// Newton-Raphson on a calibration prefix (`calibration == 0` means the
    /// whole series), optionally re-run every `reestimate_every` steps.
    EstimateNr {
        settings: NrSettings,
        calibration: usize,
        reestimate_every: Option<usize>,
    },
}

/// Point estimate of `Σ` used inside the gain `A_t = Σ̃^{1/2} P Σ̃^{-1/2}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SigmaEstimator {
    /// `(AS + SA) / 2n`, eigenvalues floored relative to the largest.
    Tilde,
    /// Exact posterior mode, refined from the previous estimate (default).
    Mode,
    /// `Tilde` while its condition number stays below [`GUARD_MAX_COND`],
    /// the exact mode otherwise.
    Guarded,
}

/// Condition-number bound used by [`SigmaEstimator::Guarded`].
pub const GUARD_MAX_COND: f64 = 1e3;

/// Covariance used to standardize forecast errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Standardization {
    /// Covariance of the Student-t forecast, `S_{t-1} / (n_{t-1} - 2)`;
    /// steps with `n_{t-1} <= 2` have no finite variance and are skipped.
    Spread,
    /// `Σ̃_{t-1}^{1/2} Q Σ̃_{t-1}^{1/2}`, the Gaussian forecast covariance given `Σ = Σ̃`.
    Conditional,
}

/// Which level scale enters the gain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GainMode {
    SteadyState,
    /// Propagates `P_t` from `P_0 = p_0 I` (diagnostics).
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterOptions {
    pub estimator: SigmaEstimator,
    pub standardization: Standardization,
    pub gain: GainMode,
}

impl Default for FilterOptions {
    fn default() -> Self {
        FilterOptions {
            estimator: SigmaEstimator::Mode,
            standardization: Standardization::Spread,
            gain: GainMode::SteadyState,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub phi: f64,
    pub m0: Vector,
    pub p0: f64,
    pub n0: f64,
    pub s0: SpdMatrix,
    pub w_spec: WSpec,
    pub options: FilterOptions,
}

impl ModelConfig {
    /// Local level defaults: `φ = 1`, `m_0 = 0`, `p_0 = 1000`, `n_0 = 1/100`, `S_0 = I`.
    pub fn local_level(p: usize, w_spec: WSpec) -> Self {
        ModelConfig {
            phi: 1.0,
            m0: Vector::zeros(p),
            p0: 1000.0,
            n0: 0.01,
            s0: SpdMatrix::identity(p),
            w_spec,
            options: FilterOptions::default(),
        }
    }

    pub fn dim(&self) -> usize {
        self.s0.dim()
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.dim();
        if self.m0.len() != p {
            return Err(Error::Config(format!("m0 has length {}, expected {p}", self.m0.len())));
        }
        if !(self.p0 > 0.0) {
            return Err(Error::Config("p0 must be positive".into()));
        }
        if !(self.n0 > 0.0) {
            return Err(Error::Config("n0 must be positive".into()));
        }
        if !self.phi.is_finite() {
            return Err(Error::Config("phi must be finite".into()));
        }
        crate::matrix::chol_upper(&self.s0).map_err(|_| Error::Config("S0 must be positive definite".into()))?;
        Ok(())
    }

    /// `W` when it does not depend on data.
    pub fn resolve_w(&self) -> Result<SpdMatrix> {
        match &self.w_spec {
            WSpec::Fixed(w) => {
                if w.dim() != self.dim() {
                    return Err(Error::Config(format!("W is {0}x{0}, expected {1}x{1}", w.dim(), self.dim())));
                }
                Ok(w.clone())
            }
            WSpec::Discounts(d) => {
                if d.len() != self.dim() {
                    return Err(Error::Config(format!("{} discount factors for p = {}", d.len(), self.dim())));
                }
                w_from_discounts(d)
            }
            WSpec::EstimateNr { .. } => Err(Error::Config(
                "W is to be estimated from data; run the calibration pass first".into(),
            )),
        }
    }
}

/// All posterior quantities at time `t`.
#[derive(Debug, Clone)]
pub struct FilterState {
    pub t: usize,
    pub m: Vector,
    pub s: Mat,
    pub n: f64,
    pub sigma_tilde: Mat,
    pub steady: SteadyState,
    /// Exact `P_t`; only advanced under [`GainMode::Exact`].
    pub p_t: Mat,
    pub options: FilterOptions,
    pub(crate) q_inv: Mat,
}

impl FilterState {
    pub fn dim(&self) -> usize {
        self.m.len()
    }

    /// Replaces `W` (and hence `P`, `Q`) keeping the learned `m`, `S`, `n`.
    pub fn with_w(mut self, w: &SpdMatrix) -> Result<Self> {
        self.steady = SteadyState::new(self.steady.phi, w)?;
        self.q_inv = inv_pd(&self.steady.q)?;
        Ok(self)
    }

    /// Posterior GIW for `Σ` at the current time.
    pub fn posterior(&self) -> Result<GiwParams> {
        let p = self.dim() as f64;
        GiwParams::new(
            self.n + 2.0 * p,
            SpdMatrix::new(self.q_inv.clone())?,
            SpdMatrix::new(self.s.clone())?,
        )
    }
}

/// One-step-ahead forecast `y_t | y^{t-1} ~ t_p(dof, location, spread)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastRecord {
    pub t: usize,
    pub dof: f64,
    pub location: Vector,
    pub spread: Mat,
    pub error: Vector,
    /// NaN where the standardizing variance is unavailable.
    pub std_error: Vector,
    pub log_pred: f64,
}

#[derive(Debug, Clone)]
pub struct FilterOutput {
    pub records: Vec<ForecastRecord>,
    pub final_state: FilterState,
    pub msse: Vector,
    /// Standardized errors excluded from the MSSE.
    pub missing: usize,
    /// `Σ̃_t` after each update.
    pub sigma_path: Vec<Mat>,
    pub w: Mat,
}

pub(crate) fn sigma_estimate(
    estimator: SigmaEstimator,
    q_inv: &Mat,
    s: &Mat,
    dof: f64,
    previous: Option<&Mat>,
) -> Result<Mat> {
    let tilde = estimator_tilde_raw(q_inv, s, dof);
    let use_mode = match estimator {
        SigmaEstimator::Tilde => false,
        SigmaEstimator::Mode => true,
        SigmaEstimator::Guarded => max_eigenvalue(&tilde) > GUARD_MAX_COND * min_eigenvalue(&tilde),
    };
    if !use_mode {
        return Ok(tilde);
    }
    let params = GiwParams::new(dof, SpdMatrix::new(q_inv.clone())?, SpdMatrix::new(s.clone())?)?;
    let start = match previous {
        Some(prev) if min_eigenvalue(prev) > 0.0 => prev.clone(),
        _ => crate::matrix::nearest_pd(&tilde, 1e-3 * max_eigenvalue(&tilde)),
    };
    match giw_mode_polish(&params, &start) {
        Ok(mode) if min_eigenvalue(&mode) > 0.0 => Ok(mode),
        _ => Ok(tilde),
    }
}

pub fn filter_init(config: &ModelConfig, w: &SpdMatrix) -> Result<FilterState> {
    config.validate()?;
    let p = config.dim();
    if w.dim() != p {
        return Err(Error::Config(format!("W is {0}x{0}, expected {p}x{p}", w.dim())));
    }
    let steady = SteadyState::new(config.phi, w)?;
    let q_inv = inv_pd(&steady.q)?;
    let sigma_tilde = sigma_estimate(config.options.estimator, &q_inv, &config.s0, config.n0 + 2.0 * p as f64, None)?;
    Ok(FilterState {
        t: 0,
        m: config.m0.clone(),
        s: config.s0.as_mat().clone(),
        n: config.n0,
        sigma_tilde,
        steady,
        p_t: Mat::identity(p, p) * config.p0,
        options: config.options,
        q_inv,
    })
}

/// `log p(y_t | y^{t-1})` for the Student-t forecast with `n_{t-1}` degrees of
/// freedom, location `φ m_{t-1}` and spread `S_{t-1}`.
pub fn log_predictive(state: &FilterState, y: &Vector) -> Result<f64> {
    let e = y - &state.m * state.steady.phi;
    log_predictive_error(&state.s, state.n, &e)
}

pub(crate) fn log_predictive_error(s: &Mat, n: f64, e: &Vector) -> Result<f64> {
    let p = e.len();
    let pf = p as f64;
    let log_det_s = log_det_pd(s).map_err(|_| Error::Numerical {
        msg: "forecast spread is singular".into(),
        residual: 0.0,
    })?;
    let s_inv = inv_pd(s)?;
    let quad = (e.transpose() * &s_inv * e)[(0, 0)];
    // |S|^{(n+p-1)/2} |S + ee'|^{-(n+p)/2} with |S + ee'| = |S| (1 + e'S^{-1}e)
    Ok(ln_mvgamma(p, (n + pf) / 2.0) - ln_mvgamma(p, (n + pf - 1.0) / 2.0) - pf / 2.0 * std::f64::consts::PI.ln()
        - 0.5 * log_det_s
        - (n + pf) / 2.0 * quad.ln_1p())
}

pub(crate) fn check_observation(y: &Vector, p: usize, row: usize) -> Result<()> {
    if y.len() != p {
        return Err(Error::dim(format!("observation has length {}, expected {p}", y.len())));
    }
    if let Some(col) = y.iter().position(|v| !v.is_finite()) {
        return Err(Error::Data {
            row,
            col,
            msg: "non-finite observation".into(),
        });
    }
    Ok(())
}

pub(crate) fn standardize(e: &Vector, cov_diag: impl Iterator<Item = f64>) -> Vector {
    Vector::from_iterator(
        e.len(),
        e.iter().zip(cov_diag).map(|(ei, v)| {
            let sd = if v > 0.0 { v.sqrt() } else { 0.0 };
            if sd < STD_FLOOR || !sd.is_finite() {
                f64::NAN
            } else {
                ei / sd
            }
        }),
    )
}

pub fn filter_step(state: &FilterState, y: &Vector) -> Result<(FilterState, ForecastRecord)> {
    let p = state.dim();
    let t = state.t + 1;
    check_observation(y, p, t)?;
    let phi = state.steady.phi;
    let location = &state.m * phi;
    let e = y - &location;

    let std_error = match state.options.standardization {
        Standardization::Spread if state.n > 2.0 => {
            let scale = 1.0 / (state.n - 2.0);
            standardize(&e, state.s.diagonal().iter().map(|v| v * scale))
        }
        Standardization::Spread => Vector::from_element(p, f64::NAN),
        Standardization::Conditional => {
            let (half, _) = sym_sqrt_and_inv_sqrt(&state.sigma_tilde)?;
            let f = &half * &*state.steady.q * &half;
            standardize(&e, f.diagonal().iter().copied())
        }
    };
    let log_pred = log_predictive_error(&state.s, state.n, &e)?;
    let record = ForecastRecord {
        t,
        dof: state.n,
        location: location.clone(),
        spread: state.s.clone(),
        error: e.clone(),
        std_error,
        log_pred,
    };

    let s_new = symmetrize(&(&state.s + &e * e.transpose()));
    let n_new = state.n + 1.0;
    let sigma_tilde = sigma_estimate(
        state.options.estimator,
        &state.q_inv,
        &s_new,
        n_new + 2.0 * p as f64,
        Some(&state.sigma_tilde),
    )?;
    let p_t = match state.options.gain {
        GainMode::SteadyState => state.p_t.clone(),
        GainMode::Exact => p_step(&state.p_t, phi, &state.steady.w)?,
    };
    let scale = match state.options.gain {
        GainMode::SteadyState => &*state.steady.p,
        GainMode::Exact => &p_t,
    };
    let (half, inv_half) = sym_sqrt_and_inv_sqrt(&sigma_tilde)?;
    let gain = &half * scale * &inv_half;
    let m_new = location + gain * &e;

    let next = FilterState {
        t,
        m: m_new,
        s: s_new,
        n: n_new,
        sigma_tilde,
        steady: state.steady.clone(),
        p_t,
        options: state.options,
        q_inv: state.q_inv.clone(),
    };
    Ok((next, record))
}

/// Per-component mean of squared standardized errors, skipping NaNs.
/// Returns the MSSE vector and the number of skipped entries.
pub fn msse(records: &[ForecastRecord]) -> (Vector, usize) {
    let p = records.first().map_or(0, |r| r.error.len());
    let mut sums = vec![0.0; p];
    let mut counts = vec![0usize; p];
    let mut missing = 0;
    for r in records {
        for (i, z) in r.std_error.iter().enumerate() {
            if z.is_finite() {
                sums[i] += z * z;
                counts[i] += 1;
            } else {
                missing += 1;
            }
        }
    }
    let v = Vector::from_iterator(
        p,
        sums.iter().zip(&counts).map(|(s, &c)| if c > 0 { s / c as f64 } else { f64::NAN }),
    );
    (v, missing)
}

pub(crate) fn check_series(data: &[Vector]) -> Result<usize> {
    let first = data.first().ok_or_else(|| Error::Config("empty series".into()))?;
    let p = first.len();
    for (row, y) in data.iter().enumerate() {
        check_observation(y, p, row + 1)?;
    }
    Ok(p)
}

/// Estimates `W` by Newton-Raphson on `data` and maps `P̂` to `W`.
pub fn estimate_w(data: &[Vector], config: &ModelConfig, settings: &NrSettings) -> Result<SpdMatrix> {
    let p_hat = newton_raphson_p(data, &config.s0, settings)?.p;
    SpdMatrix::new(w_from_p(&p_hat, config.phi)?)
}

pub fn run_filter(config: &ModelConfig, data: &[Vector]) -> Result<FilterOutput> {
    let p = check_series(data)?;
    if p != config.dim() {
        return Err(Error::Config(format!("series has {p} columns, model expects {}", config.dim())));
    }
    let (w, reestimate) = match &config.w_spec {
        WSpec::EstimateNr {
            settings,
            calibration,
            reestimate_every,
        } => {
            let len = if *calibration == 0 { data.len() } else { (*calibration).min(data.len()) };
            (estimate_w(&data[..len], config, settings)?, reestimate_every.map(|k| (k.max(1), settings.clone())))
        }
        _ => (config.resolve_w()?, None),
    };
    let mut state = filter_init(config, &w)?;
    let mut w_used = w.into_inner();
    let mut records = Vec::with_capacity(data.len());
    let mut sigma_path = Vec::with_capacity(data.len());
    for (i, y) in data.iter().enumerate() {
        let (next, rec) = filter_step(&state, y)?;
        state = next;
        records.push(rec);
        sigma_path.push(state.sigma_tilde.clone());
        if let Some((k, settings)) = &reestimate {
            let seen = i + 1;
            if seen % k == 0 && seen >= 2 && seen < data.len() {
                let w_new = estimate_w(&data[..seen], config, settings)?;
                w_used = w_new.as_mat().clone();
                state = state.with_w(&w_new)?;
            }
        }
    }
    let (msse, missing) = msse(&records);
    Ok(FilterOutput {
        records,
        final_state: state,
        msse,
        missing,
        sigma_path,
        w: w_used,
    })
}
