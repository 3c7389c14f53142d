//! Monte Carlo comparison of the GIW filter against the baselines on
//! simulated local level data, and covariance-tracking diagnostics.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Beta, Distribution, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{em_fit, iw_fit, kalman_run, EmOptions, IW_BRACKET};
use crate::error::{Error, Result};
use crate::filter::{run_filter, FilterOptions, ModelConfig, WSpec};
use crate::hyperparam::NrSettings;
use crate::matrix::{chol_upper, nearest_pd, sym_eigen, sym_sqrt_and_inv_sqrt, symmetrize, Mat, SpdMatrix, Vector};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovGenParams {
    pub corr_beta_a: f64,
    pub corr_beta_b: f64,
    pub var_gamma_shape: f64,
    pub var_gamma_scale: f64,
    pub sign_prob: f64,
    pub max_rejections: usize,
    pub pd_floor: f64,
}

impl Default for CovGenParams {
    fn default() -> Self {
        CovGenParams {
            corr_beta_a: 2.0,
            corr_beta_b: 5.0,
            var_gamma_shape: 2.0,
            var_gamma_scale: 1.0,
            sign_prob: 0.5,
            max_rejections: 1000,
            pd_floor: 1e-6,
        }
    }
}

impl CovGenParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.corr_beta_a, self.corr_beta_b, self.var_gamma_shape, self.var_gamma_scale, self.pd_floor];
        if positive.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::param("covariance generator shapes, scales and floor must be positive"));
        }
        if !(0.0..=1.0).contains(&self.sign_prob) {
            return Err(Error::param("sign probability must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Unit-diagonal correlation matrix from the generator scheme. Returns the
/// matrix and whether the PD fallback was used.
pub fn gen_corr<R: Rng + ?Sized>(p: usize, params: &CovGenParams, rng: &mut R) -> Result<(Mat, bool)> {
    params.validate()?;
    let beta = Beta::new(params.corr_beta_a, params.corr_beta_b).map_err(|e| Error::param(e.to_string()))?;
    let sign = Bernoulli::new(params.sign_prob).map_err(|e| Error::param(e.to_string()))?;
    let draw = |rng: &mut R| {
        let mut c = Mat::identity(p, p);
        for j in 0..p {
            for i in (j + 1)..p {
                let r = beta.sample(rng);
                let r = if sign.sample(rng) { r } else { -r };
                c[(i, j)] = r;
                c[(j, i)] = r;
            }
        }
        c
    };
    let mut c = draw(rng);
    for _ in 0..params.max_rejections {
        if chol_upper(&c).is_ok() {
            return Ok((c, false));
        }
        c = draw(rng);
    }
    if chol_upper(&c).is_ok() {
        return Ok((c, false));
    }
    let fixed = nearest_pd(&c, params.pd_floor);
    let d = Vector::from_iterator(p, fixed.diagonal().iter().map(|v| 1.0 / v.sqrt()));
    let scaled = Mat::from_fn(p, p, |i, j| fixed[(i, j)] * d[i] * d[j]);
    Ok((symmetrize(&scaled), true))
}

/// `Σ = V C V` with gamma variances on the diagonal of `V²`.
pub fn gen_cov<R: Rng + ?Sized>(p: usize, params: &CovGenParams, rng: &mut R) -> Result<SpdMatrix> {
    let gamma = Gamma::new(params.var_gamma_shape, params.var_gamma_scale).map_err(|e| Error::param(e.to_string()))?;
    let (c, _) = gen_corr(p, params, rng)?;
    let sd: Vec<f64> = (0..p).map(|_| gamma.sample(rng).sqrt()).collect();
    let sigma = Mat::from_fn(p, p, |i, j| c[(i, j)] * sd[i] * sd[j]);
    SpdMatrix::new(sigma)
}

/// `L` with `L L' = M` for a PSD `M` (symmetric root).
fn psd_factor(m: &Mat) -> Mat {
    let eig = sym_eigen(m);
    let mut v = eig.eigenvectors.clone();
    for (j, l) in eig.eigenvalues.iter().enumerate() {
        v.column_mut(j).scale_mut(l.max(0.0).sqrt());
    }
    v * eig.eigenvectors.transpose()
}

/// Forward simulation with `θ_0 ~ N(m_init, Ω)`. PSD (even zero) covariances
/// are accepted.
pub fn simulate_llm<R: Rng + ?Sized>(
    sigma: &Mat,
    omega: &Mat,
    phi: f64,
    n: usize,
    m_init: &Vector,
    rng: &mut R,
) -> Result<Vec<Vector>> {
    let p = m_init.len();
    if sigma.shape() != (p, p) || omega.shape() != (p, p) {
        return Err(Error::dim("Σ, Ω and m_init differ in dimension"));
    }
    let ls = psd_factor(sigma);
    let lo = psd_factor(omega);
    let z = |rng: &mut R| Vector::from_fn(p, |_, _| rng.sample(StandardNormal));
    let mut theta = m_init + &lo * z(rng);
    Ok((0..n)
        .map(|_| {
            theta = &theta * phi + &lo * z(rng);
            &theta + &ls * z(rng)
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchModel {
    Giw,
    Iw,
    Em,
    Kalman,
}

impl BenchModel {
    pub const ALL: [BenchModel; 4] = [BenchModel::Giw, BenchModel::Iw, BenchModel::Em, BenchModel::Kalman];

    pub fn name(&self) -> &'static str {
        match self {
            BenchModel::Giw => "GIW",
            BenchModel::Iw => "IW",
            BenchModel::Em => "EM",
            BenchModel::Kalman => "Kalman",
        }
    }
}

impl std::str::FromStr for BenchModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "giw" => Ok(BenchModel::Giw),
            "iw" => Ok(BenchModel::Iw),
            "em" => Ok(BenchModel::Em),
            "kalman" => Ok(BenchModel::Kalman),
            other => Err(Error::Config(format!("unknown model '{other}'"))),
        }
    }
}

/// Source of `W` for the GIW model in the benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GiwWSource {
    /// Newton-Raphson estimate on the whole simulated series.
    Estimate,
    /// `Σ^{-1/2} Ω Σ^{-1/2}` from the simulation truth.
    Truth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub p: usize,
    pub n: usize,
    pub replications: usize,
    pub models: Vec<BenchModel>,
    pub seed: u64,
    pub phi: f64,
    pub giw_w: GiwWSource,
    pub cov: CovGenParams,
}

impl BenchConfig {
    /// Desk-scale defaults: `p = 10`, `N = 500`, 20 replications, all models.
    pub fn desk(seed: u64) -> Self {
        BenchConfig {
            p: 10,
            n: 500,
            replications: 20,
            models: BenchModel::ALL.to_vec(),
            seed,
            phi: 1.0,
            giw_w: GiwWSource::Estimate,
            cov: CovGenParams::default(),
        }
    }

    /// The full grid cell `p = 100`, `N = 1000`, 100 replications. `W` comes
    /// from the truth since the `p⁴`-sized Hessian is impractical here.
    pub fn large(seed: u64) -> Self {
        BenchConfig {
            p: 100,
            n: 1000,
            replications: 100,
            giw_w: GiwWSource::Truth,
            ..BenchConfig::desk(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(Error::Config("replications must be at least 1".into()));
        }
        if self.p == 0 || self.n < 3 {
            return Err(Error::Config("benchmark needs p >= 1 and N >= 3".into()));
        }
        if self.models.is_empty() {
            return Err(Error::Config("no models selected".into()));
        }
        self.cov.validate()
    }

    /// Generator for replication `rep`, independent of execution order.
    pub fn rng(&self, rep: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(rep as u64);
        rng
    }
}

/// One simulated replication.
#[derive(Debug, Clone)]
pub struct Replication {
    pub sigma: Mat,
    pub omega: Mat,
    pub data: Vec<Vector>,
}

pub fn draw_replication(config: &BenchConfig, rep: usize) -> Result<Replication> {
    let mut rng = config.rng(rep);
    let sigma = gen_cov(config.p, &config.cov, &mut rng)?.into_inner();
    let omega = gen_cov(config.p, &config.cov, &mut rng)?.into_inner();
    let data = simulate_llm(&sigma, &omega, config.phi, config.n, &Vector::zeros(config.p), &mut rng)?;
    Ok(Replication { sigma, omega, data })
}

/// `Σ^{-1/2} Ω Σ^{-1/2}`.
pub fn true_w(sigma: &Mat, omega: &Mat) -> Result<Mat> {
    let (_, inv_half) = sym_sqrt_and_inv_sqrt(sigma)?;
    Ok(symmetrize(&(&inv_half * omega * &inv_half)))
}

fn mean(v: &Vector) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Component-averaged MSSE of one model on one replication.
pub fn model_msse(model: BenchModel, rep: &Replication, config: &BenchConfig) -> Result<f64> {
    let p = config.p;
    let phi = config.phi;
    match model {
        BenchModel::Giw => {
            let w_spec = match config.giw_w {
                GiwWSource::Truth => WSpec::Fixed(SpdMatrix::new(true_w(&rep.sigma, &rep.omega)?)?),
                GiwWSource::Estimate => WSpec::EstimateNr {
                    settings: NrSettings::default(),
                    calibration: 0,
                    reestimate_every: None,
                },
            };
            let cfg = ModelConfig {
                phi,
                options: FilterOptions::default(),
                ..ModelConfig::local_level(p, w_spec)
            };
            Ok(mean(&run_filter(&cfg, &rep.data)?.msse))
        }
        BenchModel::Iw => {
            let fit = iw_fit(&rep.data, phi, 0.01, &Mat::identity(p, p), IW_BRACKET)?;
            Ok(mean(&fit.output.msse))
        }
        BenchModel::Em => {
            let fit = em_fit(&rep.data, phi, &EmOptions::default())?;
            let out = kalman_run(&rep.data, &fit.sigma_hat, &fit.omega_hat, phi, &fit.m0, &fit.c0)?;
            Ok(mean(&out.msse))
        }
        BenchModel::Kalman => {
            let out = kalman_run(&rep.data, &rep.sigma, &rep.omega, phi, &Vector::zeros(p), &rep.omega)?;
            Ok(mean(&out.msse))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub model: BenchModel,
    pub mean_msse: f64,
    pub std_error: f64,
    pub failures: usize,
    /// Per replication; `None` marks a failed run.
    pub per_replication: Vec<Option<f64>>,
    /// Wall time in seconds per replication (only when timings are requested).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seconds: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub first_error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub schema_version: u32,
    pub config: BenchConfig,
    pub models: Vec<ModelSummary>,
}

fn summarize(model: BenchModel, runs: Vec<(Result<f64>, f64)>, timings: bool) -> ModelSummary {
    let mut first_error = None;
    let per: Vec<Option<f64>> = runs
        .iter()
        .map(|(r, _)| match r {
            Ok(v) if v.is_finite() => Some(*v),
            Ok(v) => {
                first_error.get_or_insert_with(|| format!("non-finite MSSE {v}"));
                None
            }
            Err(e) => {
                first_error.get_or_insert_with(|| e.to_string());
                None
            }
        })
        .collect();
    let ok: Vec<f64> = per.iter().flatten().copied().collect();
    let n = ok.len() as f64;
    let mean_msse = if ok.is_empty() { f64::NAN } else { ok.iter().sum::<f64>() / n };
    let std_error = if ok.len() > 1 {
        (ok.iter().map(|v| (v - mean_msse).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
    } else {
        f64::NAN
    };
    ModelSummary {
        model,
        mean_msse,
        std_error,
        failures: per.len() - ok.len(),
        per_replication: per,
        seconds: timings.then(|| runs.iter().map(|(_, s)| *s).collect()),
        first_error,
    }
}

/// Runs every replication (in parallel) and aggregates in replication order,
/// so the numbers do not depend on scheduling. Failed model runs are counted
/// and excluded.
pub fn run_benchmark(config: &BenchConfig, timings: bool) -> Result<BenchReport> {
    config.validate()?;
    let results: Vec<Vec<(Result<f64>, f64)>> = (0..config.replications)
        .into_par_iter()
        .map(|rep| match draw_replication(config, rep) {
            Ok(r) => config
                .models
                .iter()
                .map(|&m| {
                    let start = Instant::now();
                    let v = model_msse(m, &r, config);
                    (v, start.elapsed().as_secs_f64())
                })
                .collect(),
            Err(e) => config
                .models
                .iter()
                .map(|_| (Err(Error::Config(format!("replication {rep}: {e}"))), 0.0))
                .collect(),
        })
        .collect();
    let models = config
        .models
        .iter()
        .enumerate()
        .map(|(j, &m)| {
            let runs = results
                .iter()
                .map(|row| match &row[j] {
                    (Ok(v), s) => (Ok(*v), *s),
                    (Err(e), s) => (Err(Error::Config(e.to_string())), *s),
                })
                .collect();
            summarize(m, runs, timings)
        })
        .collect();
    Ok(BenchReport {
        schema_version: SCHEMA_VERSION,
        config: config.clone(),
        models,
    })
}

impl BenchReport {
    /// Table layout: one row per model with mean MSSE and its standard error.
    pub fn to_table(&self) -> String {
        let c = &self.config;
        let mut out = String::new();
        let _ = writeln!(out, "p = {}, N = {}, replications = {}, seed = {}", c.p, c.n, c.replications, c.seed);
        let _ = writeln!(out, "{:<8} {:>10} {:>10} {:>9}", "model", "MSSE", "(s.e.)", "failures");
        for m in &self.models {
            let _ = writeln!(
                out,
                "{:<8} {:>10.3} {:>10} {:>9}",
                m.model.name(),
                m.mean_msse,
                format!("({:.3})", m.std_error),
                m.failures
            );
            if let Some(secs) = &m.seconds {
                let total: f64 = secs.iter().sum();
                let max = secs.iter().copied().fold(0.0, f64::max);
                let _ = writeln!(out, "{:<8} mean {:.3}s, max {:.3}s per replication", "", total / secs.len() as f64, max);
            }
        }
        out
    }

    /// `model,replication,msse` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,replication,msse\n");
        for m in &self.models {
            for (i, v) in m.per_replication.iter().enumerate() {
                let cell = v.map_or_else(|| "NA".to_string(), crate::matrix::fmt_f64);
                let _ = writeln!(out, "{},{},{}", m.model.name(), i, cell);
            }
        }
        out
    }

    pub fn summary(&self, model: BenchModel) -> Option<&ModelSummary> {
        self.models.iter().find(|m| m.model == model)
    }
}

/// Reference covariance for [`frobenius_track`].
#[derive(Debug, Clone)]
pub enum Truth<'a> {
    Fixed(&'a Mat),
    Path(&'a [Mat]),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrobeniusTrack {
    /// `‖Σ̃_t - Σ_t‖_F / ‖Σ_t‖_F`.
    pub normalized: Vec<f64>,
    /// `‖Σ̃_t - Σ_t‖_F`.
    pub raw: Vec<f64>,
    pub mean: f64,
    pub variance: f64,
    pub raw_mean: f64,
    pub raw_variance: f64,
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = if xs.len() > 1 {
        xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, v)
}

pub fn frobenius_track(estimates: &[Mat], truth: Truth<'_>) -> Result<FrobeniusTrack> {
    if let Truth::Path(path) = truth {
        if path.len() != estimates.len() {
            return Err(Error::dim("truth path and estimates differ in length"));
        }
    }
    let mut raw = Vec::with_capacity(estimates.len());
    let mut normalized = Vec::with_capacity(estimates.len());
    for (t, est) in estimates.iter().enumerate() {
        let target = match truth {
            Truth::Fixed(m) => m,
            Truth::Path(path) => &path[t],
        };
        if est.shape() != target.shape() {
            return Err(Error::dim("estimate and truth differ in shape"));
        }
        let d = (est - target).norm();
        raw.push(d);
        normalized.push(d / target.norm());
    }
    let (mean, variance) = mean_var(&normalized);
    let (raw_mean, raw_variance) = mean_var(&raw);
    Ok(FrobeniusTrack {
        normalized,
        raw,
        mean,
        variance,
        raw_mean,
        raw_variance,
    })
}
