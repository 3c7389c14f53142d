//! Log Bayes factor EWMA control chart.
//!
//! Each observation is scored by the log Bayes factor of the filter's one-step
//! forecast density against a fixed Gaussian target. The scores are smoothed by
//! an EWMA whose center and limits are calibrated on Phase I; only Phase II
//! points can signal.

use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::{filter_init, filter_step, log_predictive, ModelConfig, WSpec};
use crate::matrix::{chol_upper, fmt_f64, Mat, SpdMatrix, Vector};

/// Gaussian target distribution with cached factorization.
#[derive(Debug, Clone)]
pub struct Target {
    mean: Vector,
    cov: SpdMatrix,
    chol: Mat,
    log_det: f64,
}

impl Target {
    pub fn new(mean: Vector, cov: SpdMatrix) -> Result<Self> {
        if mean.len() != cov.dim() {
            return Err(Error::Config(format!(
                "target mean has length {}, covariance is {}x{}",
                mean.len(),
                cov.dim(),
                cov.dim()
            )));
        }
        let chol = chol_upper(&cov).map_err(|_| Error::Config("target covariance is singular".into()))?;
        let log_det = 2.0 * chol.diagonal().iter().map(|d| d.ln()).sum::<f64>();
        Ok(Target { mean, cov, chol, log_det })
    }

    pub fn mean(&self) -> &Vector {
        &self.mean
    }

    pub fn cov(&self) -> &SpdMatrix {
        &self.cov
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn log_density(&self, y: &Vector) -> Result<f64> {
        if y.len() != self.dim() {
            return Err(Error::dim(format!("observation has length {}, target {}", y.len(), self.dim())));
        }
        let d = y - &self.mean;
        // U'U = C, so d'C^{-1}d = |U'^{-1} d|^2.
        let z = self
            .chol
            .transpose()
            .solve_lower_triangular(&d)
            .ok_or_else(|| Error::Config("target covariance is singular".into()))?;
        let p = self.dim() as f64;
        Ok(-0.5 * (p * (2.0 * PI).ln() + self.log_det + z.norm_squared()))
    }
}

/// Initial EWMA value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EwmaStart {
    /// Phase I mean of `H_t` (two passes).
    #[default]
    PhaseOneMean,
    /// First `H_t` value (single pass).
    FirstValue,
}

#[derive(Debug, Clone)]
pub struct ChartConfig {
    pub lambda: f64,
    pub target: Target,
    pub phase1_end: usize,
    pub limit_multiplier: f64,
    pub start: EwmaStart,
    /// Report signals inside Phase I as well.
    pub audit_phase1: bool,
}

impl ChartConfig {
    pub const DEFAULT_LAMBDA: f64 = 0.05;
    pub const DEFAULT_L: f64 = 3.0;
    pub const MIN_PHASE1: usize = 10;

    pub fn new(target: Target, phase1_end: usize) -> Self {
        ChartConfig {
            lambda: Self::DEFAULT_LAMBDA,
            target,
            phase1_end,
            limit_multiplier: Self::DEFAULT_L,
            start: EwmaStart::default(),
            audit_phase1: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return Err(Error::Config(format!("lambda must lie in (0, 1], got {}", self.lambda)));
        }
        if self.phase1_end < Self::MIN_PHASE1 {
            return Err(Error::Config(format!(
                "phase1_end must be at least {}, got {}",
                Self::MIN_PHASE1,
                self.phase1_end
            )));
        }
        if !(self.limit_multiplier > 0.0) {
            return Err(Error::Config(format!("limit multiplier must be positive, got {}", self.limit_multiplier)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChartPoint {
    pub t: usize,
    pub h: f64,
    pub z: f64,
    pub signal: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChartReport {
    pub points: Vec<ChartPoint>,
    pub center: f64,
    pub lcl: f64,
    pub ucl: f64,
    pub z0: f64,
    pub phase1_end: usize,
    pub signals: Vec<usize>,
}

impl ChartReport {
    pub fn first_signal(&self) -> Option<usize> {
        self.signals.first().copied()
    }

    /// `t,H,Z,center,lcl,ucl,signal` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,H,Z,center,lcl,ucl,signal\n");
        for pt in &self.points {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                pt.t,
                fmt_f64(pt.h),
                fmt_f64(pt.z),
                fmt_f64(self.center),
                fmt_f64(self.lcl),
                fmt_f64(self.ucl),
                u8::from(pt.signal)
            );
        }
        out
    }
}

/// `H_t = log p(y_t | y^{t-1}) - log N(y_t; target)`.
pub fn log_bayes_factor(state: &crate::filter::FilterState, y: &Vector, target: &Target) -> Result<f64> {
    Ok(log_predictive(state, y)? - target.log_density(y)?)
}

/// `Z_t = λ H_t + (1 - λ) Z_{t-1}` starting from `Z_0 = z0`.
pub fn ewma(series: &[f64], lambda: f64, z0: f64) -> Vec<f64> {
    let mut z = z0;
    series
        .iter()
        .map(|h| {
            z = lambda * h + (1.0 - lambda) * z;
            z
        })
        .collect()
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn chart_run(data: &[Vector], config: &ChartConfig, model: &ModelConfig) -> Result<ChartReport> {
    config.validate()?;
    if config.phase1_end >= data.len() {
        return Err(Error::Config(format!(
            "phase1_end ({}) must be smaller than the series length ({})",
            config.phase1_end,
            data.len()
        )));
    }
    if config.target.dim() != model.dim() {
        return Err(Error::Config(format!(
            "target has dimension {}, model {}",
            config.target.dim(),
            model.dim()
        )));
    }
    if matches!(model.w_spec, WSpec::EstimateNr { .. }) {
        return Err(Error::Config("chart requires a fixed or discount-based W".into()));
    }
    let w = model.resolve_w()?;
    let mut state = filter_init(model, &w)?;
    let mut h = Vec::with_capacity(data.len());
    for y in data {
        h.push(log_bayes_factor(&state, y, &config.target)?);
        state = filter_step(&state, y)?.0;
    }

    let phase1 = config.phase1_end;
    let z0 = match config.start {
        EwmaStart::PhaseOneMean => h[..phase1].iter().sum::<f64>() / phase1 as f64,
        EwmaStart::FirstValue => h[0],
    };
    let z = ewma(&h, config.lambda, z0);
    let (center, sd) = mean_sd(&z[..phase1]);
    if !(sd > 0.0) || !sd.is_finite() {
        return Err(Error::Config("Phase I EWMA statistic has zero or undefined variance".into()));
    }
    let half = config.limit_multiplier * sd;
    let (lcl, ucl) = (center - half, center + half);

    let points: Vec<ChartPoint> = h
        .iter()
        .zip(&z)
        .enumerate()
        .map(|(i, (&h, &z))| {
            let t = i + 1;
            let eligible = t > phase1 || config.audit_phase1;
            ChartPoint {
                t,
                h,
                z,
                signal: eligible && (z < lcl || z > ucl),
            }
        })
        .collect();
    let signals = points.iter().filter(|p| p.signal).map(|p| p.t).collect();
    Ok(ChartReport {
        points,
        center,
        lcl,
        ucl,
        z0,
        phase1_end: phase1,
        signals,
    })
}

/// `n` independent draws from the target distribution.
pub fn sample_target<R: Rng + ?Sized>(target: &Target, n: usize, rng: &mut R) -> Vec<Vector> {
    let factor = target.chol.transpose();
    let p = target.dim();
    (0..n)
        .map(|_| {
            let z = Vector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
            &target.mean + &factor * z
        })
        .collect()
}

pub const MOULD_ROWS: usize = 276;
pub const MOULD_COLS: usize = 5;
pub const MOULD_PHASE1_END: usize = 150;

/// Synthetic 276 x 5 series: stable levels with correlated noise up to
/// [`MOULD_PHASE1_END`], then a slow drift in the first two columns.
pub fn mould_series<R: Rng + ?Sized>(rng: &mut R) -> (Vec<Vector>, Target) {
    let levels = Vector::from_column_slice(&[12.0, 8.5, 20.0, 4.0, 15.5]);
    let sd = [0.30, 0.25, 0.50, 0.10, 0.40];
    let rho = 0.4;
    let cov = Mat::from_fn(MOULD_COLS, MOULD_COLS, |i, j| {
        let r = if i == j { 1.0 } else { rho };
        r * sd[i] * sd[j]
    });
    let factor = chol_upper(&cov).expect("fixed covariance is positive definite").transpose();
    let drift = Vector::from_column_slice(&[0.02, -0.015, 0.0, 0.0, 0.0]);
    let data = (0..MOULD_ROWS)
        .map(|i| {
            let z = Vector::from_fn(MOULD_COLS, |_, _| rng.sample::<f64, _>(StandardNormal));
            let mut y = &levels + &factor * z;
            if i >= MOULD_PHASE1_END {
                y += &drift * (i + 1 - MOULD_PHASE1_END) as f64;
            }
            y
        })
        .collect();
    let target = Target::new(levels, SpdMatrix::new(cov).expect("square")).expect("fixed target is valid");
    (data, target)
}

/// Model used for the mould example: slow local level, `S_0` matched to the
/// target covariance and `m_0` at the target mean.
pub fn mould_model(target: &Target) -> ModelConfig {
    let p = target.dim();
    let mut model = ModelConfig::local_level(p, WSpec::Fixed(SpdMatrix::scaled_identity(p, 0.01)));
    model.m0 = target.mean().clone();
    model.s0 = target.cov().clone();
    model
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::giw::ln_mvgamma;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn std_target(p: usize) -> Target {
        Target::new(Vector::zeros(p), SpdMatrix::identity(p)).unwrap()
    }

    #[test]
    fn ewma_closed_forms() {
        let h = [0.3, -1.2, 4.0];
        assert_eq!(ewma(&h, 1.0, 9.0), h.to_vec());
        assert!(ewma(&[2.5; 20], 0.3, 2.5).iter().all(|&z| z == 2.5));
        let mut impulse = vec![0.0; 30];
        impulse[0] = 1.0;
        let lambda = 0.2;
        for (t, z) in ewma(&impulse, lambda, 0.0).iter().enumerate() {
            assert_abs_diff_eq!(*z, lambda * (1.0 - lambda).powi(t as i32), epsilon = 1e-15);
        }
    }

    #[test]
    fn gaussian_target_density() {
        let cov = Mat::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let t = Target::new(Vector::from_column_slice(&[1.0, -1.0]), SpdMatrix::new(cov.clone()).unwrap()).unwrap();
        let y = Vector::from_column_slice(&[0.3, 0.4]);
        let d = &y - t.mean();
        let q = (d.transpose() * cov.try_inverse().unwrap() * &d)[0];
        let want = -std::f64::consts::LN_2 - PI.ln() - 0.5 * 1.75f64.ln() - 0.5 * q;
        assert_abs_diff_eq!(t.log_density(&y).unwrap(), want, epsilon = 1e-13);
        assert!(matches!(
            Target::new(Vector::zeros(2), SpdMatrix::new(Mat::from_element(2, 2, 1.0)).unwrap()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn bayes_factor_at_center_is_dof_gap() {
        // Forecast t_p(n, 0, S) vs N(0, S/(n-2)) at e = 0.
        let p = 2;
        let mut model = ModelConfig::local_level(p, WSpec::Fixed(SpdMatrix::identity(p)));
        model.m0 = Vector::zeros(p);
        model.n0 = 40.0;
        model.s0 = SpdMatrix::scaled_identity(p, 38.0);
        let state = filter_init(&model, &model.resolve_w().unwrap()).unwrap();
        let target = std_target(p);
        let h = log_bayes_factor(&state, &Vector::zeros(p), &target).unwrap();
        let pf = p as f64;
        let want = ln_mvgamma(p, 21.0) - ln_mvgamma(p, 20.5) - 0.5 * pf * PI.ln() - 0.5 * pf * 38f64.ln()
            + 0.5 * pf * (2.0 * PI).ln();
        assert_abs_diff_eq!(h, want, epsilon = 1e-12);
        assert!(h.abs() < 0.1, "H = {h}");
        let far = log_bayes_factor(&state, &Vector::from_element(p, 10.0), &target).unwrap();
        assert!(far > 20.0, "H = {far}");
    }

    #[test]
    fn z_is_convex_combination_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h: Vec<f64> = (0..200).map(|_| rng.random::<f64>() * 10.0 - 5.0).collect();
        let z0 = 1.0;
        let z = ewma(&h, 0.1, z0);
        let (mut lo, mut hi) = (z0, z0);
        for (h, z) in h.iter().zip(&z) {
            lo = lo.min(*h);
            hi = hi.max(*h);
            assert!(*z >= lo - 1e-12 && *z <= hi + 1e-12);
        }
    }

    #[test]
    fn limits_do_not_look_ahead() {
        let (data, target) = mould_series(&mut ChaCha8Rng::seed_from_u64(11));
        let model = mould_model(&target);
        let cfg = ChartConfig::new(target, MOULD_PHASE1_END);
        let full = chart_run(&data, &cfg, &model).unwrap();
        let cut = chart_run(&data[..MOULD_PHASE1_END + 5], &cfg, &model).unwrap();
        assert_eq!(full.center.to_bits(), cut.center.to_bits());
        assert_eq!(full.lcl.to_bits(), cut.lcl.to_bits());
        assert_eq!(full.ucl.to_bits(), cut.ucl.to_bits());
        assert!(full.signals.iter().all(|&t| t > MOULD_PHASE1_END));
    }

    #[test]
    fn shifted_target_constant_leaves_signals() {
        let (data, target) = mould_series(&mut ChaCha8Rng::seed_from_u64(12));
        let model = mould_model(&target);
        let cfg = ChartConfig::new(target.clone(), MOULD_PHASE1_END);
        let base = chart_run(&data, &cfg, &model).unwrap();
        // H + k gives Z + k and center + k.
        let k = 3.25;
        let shifted: Vec<f64> = base.points.iter().map(|p| p.h + k).collect();
        let z = ewma(&shifted, cfg.lambda, base.z0 + k);
        for (p, z) in base.points.iter().zip(&z) {
            assert_abs_diff_eq!(p.z + k, *z, epsilon = 1e-9);
            let sig = p.t > MOULD_PHASE1_END && (*z < base.lcl + k || *z > base.ucl + k);
            assert_eq!(sig, p.signal);
        }
    }

    #[test]
    fn huge_limits_never_signal() {
        let (data, target) = mould_series(&mut ChaCha8Rng::seed_from_u64(13));
        let model = mould_model(&target);
        let mut cfg = ChartConfig::new(target, MOULD_PHASE1_END);
        cfg.lambda = 1.0;
        cfg.limit_multiplier = 1e9;
        assert!(chart_run(&data, &cfg, &model).unwrap().signals.is_empty());
    }

    #[test]
    fn mould_drift_is_detected() {
        let (data, target) = mould_series(&mut ChaCha8Rng::seed_from_u64(14));
        let model = mould_model(&target);
        let report = chart_run(&data, &ChartConfig::new(target, MOULD_PHASE1_END), &model).unwrap();
        assert!(report.first_signal().is_some());
        let csv = report.to_csv();
        assert_eq!(csv.lines().count(), MOULD_ROWS + 1);
    }

    #[test]
    fn config_errors() {
        let (data, target) = mould_series(&mut ChaCha8Rng::seed_from_u64(15));
        let model = mould_model(&target);
        let mut cfg = ChartConfig::new(target.clone(), 5);
        assert!(matches!(chart_run(&data, &cfg, &model), Err(Error::Config(_))));
        cfg.phase1_end = MOULD_ROWS;
        assert!(matches!(chart_run(&data, &cfg, &model), Err(Error::Config(_))));
        cfg.phase1_end = 20;
        cfg.lambda = 0.0;
        assert!(matches!(chart_run(&data, &cfg, &model), Err(Error::Config(_))));
    }
}
