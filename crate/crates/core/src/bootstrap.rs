//! Wild bootstrap for the identified kernel and double wild bootstrap for
//! the reconstruction.
//!
//! A resampled series is `y*_t = yhat_t + |e_t| v_t` with `v_t` i.i.d.
//! standard normal. Replicate `i` draws from its own ChaCha stream derived
//! from `(seed, i)`, so results do not depend on how replicates are
//! scheduled across threads.

use std::collections::BTreeMap;

use chrono::NaiveDate;
use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::deconv::{reconstruct_values, DeconvError, Loss, PenaltyKind, Reconstruction};
use crate::ident::{identify_raw, IdentConfig, IdentError, IdentResult};
use crate::kernel::ExpKernel;
use crate::quantile::percentiles;
use crate::select::{estimate_sigma2, log_grid, mallows_cp, SelectError};
use crate::series::{DailySeries, DateRange};

#[derive(Debug, Error, PartialEq)]
pub enum BootstrapError {
    #[error("{failed} of {requested} replicates failed (limit is 10%)")]
    TooManyFailures { failed: usize, requested: usize },
    #[error("invalid bootstrap configuration: {0}")]
    BadConfig(String),
    #[error("no kernel replicates to draw from")]
    NoKernels,
    #[error(transparent)]
    Ident(#[from] IdentError),
    #[error(transparent)]
    Deconv(#[from] DeconvError),
    #[error(transparent)]
    Select(#[from] SelectError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BootstrapConfig {
    pub n_replicates_ident: usize,
    pub n_replicates_deconv: usize,
    pub seed: u64,
    /// Percent levels reported besides the median.
    pub percentiles: Vec<f64>,
    /// Re-run Cp selection inside every reconstruction replicate instead of
    /// holding lambda at its base value.
    pub reselect_lambda: bool,
    /// Lags of the kernel covered by its pointwise band.
    pub kernel_band_days: usize,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            n_replicates_ident: 1000,
            n_replicates_deconv: 500,
            seed: 0,
            percentiles: vec![2.5, 97.5],
            reselect_lambda: false,
            kernel_band_days: 40,
        }
    }
}

impl BootstrapConfig {
    pub fn validate(&self) -> Result<(), BootstrapError> {
        if self.n_replicates_ident < 2 || self.n_replicates_deconv < 2 {
            return Err(BootstrapError::BadConfig("replicate counts must be >= 2".into()));
        }
        if self.percentiles.iter().any(|p| !(*p > 0.0 && *p < 100.0)) {
            return Err(BootstrapError::BadConfig("percentiles must lie in (0, 100)".into()));
        }
        Ok(())
    }

    /// Configured levels plus the median, ascending and deduplicated.
    pub fn levels(&self) -> Vec<f64> {
        let mut l = self.percentiles.clone();
        l.push(50.0);
        l.sort_by(f64::total_cmp);
        l.dedup();
        l
    }
}

const STREAM_IDENT: u64 = 1 << 56;
const STREAM_DECONV: u64 = 2 << 56;

fn replicate_rng(seed: u64, stream: u64, i: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream | i as u64);
    rng
}

/// `yhat + |e| * v`, `v` standard normal.
pub fn wild_resample<R: Rng + ?Sized>(y_hat: &[f64], residuals_abs: &[f64], rng: &mut R) -> Vec<f64> {
    assert_eq!(y_hat.len(), residuals_abs.len(), "wild_resample: length mismatch");
    y_hat
        .iter()
        .zip(residuals_abs)
        .map(|(y, e)| {
            let v: f64 = rng.sample(StandardNormal);
            y + e.abs() * v
        })
        .collect()
}

/// Replicates of named scalars and of a pointwise curve, with percentile
/// summaries at `levels`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSummary {
    pub levels: Vec<f64>,
    /// Names of the scalar columns of `replicates`.
    pub columns: Vec<String>,
    /// One row per successful replicate.
    pub replicates: Vec<Vec<f64>>,
    /// Percentiles of each scalar column, one value per level.
    pub scalar: BTreeMap<String, Vec<f64>>,
    /// Date of the first pointwise entry, when the curve is dated.
    pub start: Option<NaiveDate>,
    /// Percentiles per curve point, one inner vector per point; `NaN` (null
    /// in JSON) where no replicate reaches the point.
    #[serde(with = "nan_as_null")]
    pub pointwise: Vec<Vec<f64>>,
    pub failures: usize,
}

impl BootstrapSummary {
    pub fn from_replicates(
        levels: Vec<f64>,
        columns: Vec<String>,
        replicates: Vec<Vec<f64>>,
        curves: &[Vec<f64>],
        start: Option<NaiveDate>,
        failures: usize,
    ) -> Self {
        let mut scalar = BTreeMap::new();
        for (k, name) in columns.iter().enumerate() {
            let col: Vec<f64> = replicates.iter().map(|r| r[k]).collect();
            scalar.insert(name.clone(), percentiles(&col, &levels).unwrap_or_default());
        }
        let npoints = curves.iter().map(|c| c.len()).max().unwrap_or(0);
        let pointwise = (0..npoints)
            .map(|t| {
                let col: Vec<f64> = curves
                    .iter()
                    .filter_map(|c| c.get(t).copied())
                    .filter(|v| !v.is_nan())
                    .collect();
                percentiles(&col, &levels).unwrap_or_else(|_| vec![f64::NAN; levels.len()])
            })
            .collect();
        BootstrapSummary {
            levels,
            columns,
            replicates,
            scalar,
            start,
            pointwise,
            failures,
        }
    }

    /// `(lower, upper)` at the outermost levels for a scalar column.
    pub fn band(&self, name: &str) -> Option<(f64, f64)> {
        let v = self.scalar.get(name)?;
        Some((*v.first()?, *v.last()?))
    }

    pub fn level_index(&self, p: f64) -> Option<usize> {
        self.levels.iter().position(|l| (*l - p).abs() < 1e-12)
    }
}

mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[Vec<f64>], s: S) -> Result<S::Ok, S::Error> {
        let o: Vec<Vec<Option<f64>>> = v
            .iter()
            .map(|r| r.iter().map(|x| (!x.is_nan()).then_some(*x)).collect())
            .collect();
        o.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Vec<f64>>, D::Error> {
        let o: Vec<Vec<Option<f64>>> = Vec::deserialize(d)?;
        Ok(o.into_iter()
            .map(|r| r.into_iter().map(|x| x.unwrap_or(f64::NAN)).collect())
            .collect())
    }
}

fn check_failures(failed: usize, requested: usize) -> Result<(), BootstrapError> {
    if failed * 10 > requested {
        return Err(BootstrapError::TooManyFailures { failed, requested });
    }
    if failed > 0 {
        warn!("{failed} of {requested} bootstrap replicates failed and were dropped");
    }
    Ok(())
}

/// Kernel replicates from a wild bootstrap of the identification fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentBootstrap {
    pub kernels: Vec<ExpKernel>,
    /// Scalars `alpha, beta, delay, gain, time_constant, mean_lag`;
    /// pointwise band over kernel lags `0..kernel_band_days`.
    pub summary: BootstrapSummary,
}

pub const IDENT_COLUMNS: [&str; 6] = ["alpha", "beta", "delay", "gain", "time_constant", "mean_lag"];

/// Resample the admissions around the fitted ones and re-identify.
pub fn bootstrap_identify(
    u: &DailySeries,
    y: &DailySeries,
    base: &IdentResult,
    ident_cfg: &IdentConfig,
    cfg: &BootstrapConfig,
) -> Result<IdentBootstrap, BootstrapError> {
    cfg.validate()?;
    let offset = u.offset_of(y.start);
    let abs_res: Vec<f64> = base.residuals.iter().map(|r| r.abs()).collect();
    let results: Vec<Result<ExpKernel, IdentError>> = (0..cfg.n_replicates_ident)
        .into_par_iter()
        .map(|i| {
            let mut rng = replicate_rng(cfg.seed, STREAM_IDENT, i);
            let y_star = wild_resample(&base.fitted, &abs_res, &mut rng);
            identify_raw(&u.values, &y_star, offset, ident_cfg, None).map(|r| r.kernel)
        })
        .collect();
    let kernels: Vec<ExpKernel> = results.iter().filter_map(|r| r.as_ref().ok().copied()).collect();
    check_failures(cfg.n_replicates_ident - kernels.len(), cfg.n_replicates_ident)?;

    let rows: Vec<Vec<f64>> = kernels
        .iter()
        .map(|k| {
            let s = k.stats();
            vec![
                k.alpha(),
                k.beta(),
                k.delay() as f64,
                s.gain,
                s.time_constant,
                s.mean_lag,
            ]
        })
        .collect();
    let curves: Vec<Vec<f64>> = kernels.iter().map(|k| k.values(cfg.kernel_band_days)).collect();
    let summary = BootstrapSummary::from_replicates(
        cfg.levels(),
        IDENT_COLUMNS.iter().map(|s| s.to_string()).collect(),
        rows,
        &curves,
        None,
        cfg.n_replicates_ident - kernels.len(),
    );
    Ok(IdentBootstrap { kernels, summary })
}

/// Everything a reconstruction replicate needs besides its data and kernel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeconvTemplate {
    pub kernel: ExpKernel,
    pub penalty: PenaltyKind,
    pub lambda: f64,
    pub pre_window: i64,
    pub loss: Loss,
    /// Dates summed into the `total` scalar; defaults to the observed window.
    pub total_window: Option<DateRange>,
    /// Grid used when `reselect_lambda` is on, relative to the base lambda.
    pub reselect_span: f64,
}

impl DeconvTemplate {
    pub fn new(kernel: ExpKernel, penalty: PenaltyKind, lambda: f64, pre_window: i64) -> Self {
        DeconvTemplate {
            kernel,
            penalty,
            lambda,
            pre_window,
            loss: Loss::Quadratic,
            total_window: None,
            reselect_span: 1e3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeconvBootstrap {
    pub base: Reconstruction,
    /// Scalar `total`; pointwise bands on the base reconstruction's dates.
    pub summary: BootstrapSummary,
    /// Replicate trajectories on the base dates, `NaN` where a replicate
    /// with another delay does not reach.
    #[serde(skip)]
    pub curves: Vec<Vec<f64>>,
}

fn total_over(series: &DailySeries, window: &DateRange) -> f64 {
    series.iter().filter(|(d, _)| window.contains(*d)).map(|(_, v)| v).sum()
}

/// Double wild bootstrap: every replicate pairs a kernel drawn uniformly
/// from the identification replicates with a wild resample of the observed
/// series around the base fit.
pub fn bootstrap_deconvolve(
    observed: &DailySeries,
    kernels: &IdentBootstrap,
    template: &DeconvTemplate,
    cfg: &BootstrapConfig,
) -> Result<DeconvBootstrap, BootstrapError> {
    cfg.validate()?;
    if kernels.kernels.is_empty() {
        return Err(BootstrapError::NoKernels);
    }
    let solve = |y: Vec<f64>, kernel: &ExpKernel, lambda: f64| {
        reconstruct_values(
            y,
            observed,
            kernel,
            template.penalty,
            lambda,
            template.pre_window,
            template.loss,
        )
    };
    let base = solve(observed.values.clone(), &template.kernel, template.lambda)?;
    let fitted: Vec<f64> = observed
        .values
        .iter()
        .zip(&base.solution.residuals)
        .map(|(y, r)| y - r)
        .collect();
    let abs_res: Vec<f64> = base.solution.residuals.iter().map(|r| r.abs()).collect();
    let window = template.total_window.unwrap_or(observed.support());

    let results: Vec<Result<DailySeries, BootstrapError>> = (0..cfg.n_replicates_deconv)
        .into_par_iter()
        .map(|i| {
            let mut rng = replicate_rng(cfg.seed, STREAM_DECONV, i);
            let kernel = kernels.kernels[rng.random_range(0..kernels.kernels.len())];
            let y_star = wild_resample(&fitted, &abs_res, &mut rng);
            let lambda = if cfg.reselect_lambda {
                reselect(&y_star, &kernel, template)?
            } else {
                template.lambda
            };
            Ok(solve(y_star, &kernel, lambda)?.series)
        })
        .collect();
    let series: Vec<DailySeries> = results.into_iter().filter_map(Result::ok).collect();
    let failures = cfg.n_replicates_deconv - series.len();
    check_failures(failures, cfg.n_replicates_deconv)?;

    let rows: Vec<Vec<f64>> = series.iter().map(|s| vec![total_over(s, &window)]).collect();
    // replicates with another delay are shifted; align them on base dates
    let grid = &base.series;
    let curves: Vec<Vec<f64>> = series
        .iter()
        .map(|s| {
            (0..grid.len())
                .map(|t| s.get(grid.date_at(t)).unwrap_or(f64::NAN))
                .collect()
        })
        .collect();
    let summary = BootstrapSummary::from_replicates(
        cfg.levels(),
        vec!["total".into()],
        rows,
        &curves,
        Some(grid.start),
        failures,
    );
    Ok(DeconvBootstrap { base, summary, curves })
}

fn reselect(y: &[f64], kernel: &ExpKernel, template: &DeconvTemplate) -> Result<f64, BootstrapError> {
    let noise = estimate_sigma2(y, crate::select::DEFAULT_POLY_DEGREE)?;
    let mut problem = crate::deconv::DeconvProblem::new(
        y.to_vec(),
        *kernel,
        template.pre_window,
        template.penalty,
        template.lambda,
    )?;
    problem.loss = Loss::Quadratic;
    let grid = log_grid(
        template.lambda / template.reselect_span,
        template.lambda * template.reselect_span,
        25,
    );
    Ok(mallows_cp(&problem, &grid, noise.sigma2.max(f64::MIN_POSITIVE))?.selected_lambda)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ident::identify;
    use crate::kernel::convolve;
    use crate::series::{AgeGroup, Quantity};

    #[test]
    fn zero_residuals_reproduce_fit() {
        let mut rng = replicate_rng(7, STREAM_IDENT, 0);
        let y_hat = vec![1.0, 2.0, 3.0];
        assert_eq!(wild_resample(&y_hat, &[0.0; 3], &mut rng), y_hat);
    }

    #[test]
    fn fixed_seed_is_bit_identical() {
        let y_hat = vec![1.0; 50];
        let e = vec![0.5; 50];
        let a = wild_resample(&y_hat, &e, &mut replicate_rng(42, STREAM_DECONV, 3));
        let b = wild_resample(&y_hat, &e, &mut replicate_rng(42, STREAM_DECONV, 3));
        assert_eq!(a, b);
        let c = wild_resample(&y_hat, &e, &mut replicate_rng(42, STREAM_DECONV, 4));
        assert_ne!(a, c);
    }

    #[test]
    fn moments_of_wild_draws() {
        let y_hat = [10.0, -3.0, 0.0];
        let e = [2.0, 0.5, 1.0];
        let reps = 10_000;
        let mut sum = [0.0; 3];
        let mut sq = [0.0; 3];
        let mut fourth = [0.0; 3];
        for i in 0..reps {
            let d = wild_resample(&y_hat, &e, &mut replicate_rng(1, STREAM_IDENT, i));
            for t in 0..3 {
                let z = d[t] - y_hat[t];
                sum[t] += z;
                sq[t] += z * z;
                fourth[t] += z.powi(4);
            }
        }
        let n = reps as f64;
        for t in 0..3 {
            let mean = sum[t] / n;
            let var = sq[t] / n;
            // standard errors: sd/sqrt(n) for the mean, sqrt(E z^4 - var^2)/sqrt(n) for var
            let se_mean = e[t] / n.sqrt();
            let se_var = ((fourth[t] / n - var * var).max(0.0) / n).sqrt();
            assert!(mean.abs() < 3.0 * se_mean, "mean t={t}");
            assert!((var - e[t] * e[t]).abs() < 3.0 * se_var, "var t={t}");
        }
    }

    #[test]
    fn percentile_levels() {
        let cfg = BootstrapConfig {
            percentiles: vec![97.5, 2.5, 50.0],
            ..Default::default()
        };
        assert_eq!(cfg.levels(), vec![2.5, 50.0, 97.5]);
        let bad = BootstrapConfig {
            n_replicates_ident: 1,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    fn synthetic() -> (DailySeries, DailySeries, ExpKernel) {
        let u: Vec<f64> = (0..100)
            .map(|t| 500.0 * (-((t as f64 - 45.0) / 18.0).powi(2)).exp() + 20.0)
            .collect();
        let k = ExpKernel::new(0.8, 0.05, -5).unwrap();
        let y = convolve(&u, &k);
        let g = AgeGroup::new(6).unwrap();
        let start = "2020-10-01".parse().unwrap();
        (
            DailySeries::new(start, u, Quantity::NewCases, g).unwrap(),
            DailySeries::new(start, y, Quantity::HospitalAdmissions, g).unwrap(),
            k,
        )
    }

    #[test]
    fn zero_residual_bands_have_zero_width() {
        let (u, y, _) = synthetic();
        let mut base = identify(&u, &y, &IdentConfig::default()).unwrap();
        base.residuals.iter_mut().for_each(|r| *r = 0.0);
        let cfg = BootstrapConfig {
            n_replicates_ident: 8,
            n_replicates_deconv: 8,
            seed: 3,
            ..Default::default()
        };
        let b = bootstrap_identify(&u, &y, &base, &IdentConfig::default(), &cfg).unwrap();
        assert_eq!(b.kernels.len(), 8);
        assert!(b.kernels.iter().all(|k| *k == b.kernels[0]));
        for v in b.summary.scalar.values() {
            assert!(v.iter().all(|x| *x == v[0]));
        }

        // a single kernel and an exact fit give identical reconstructions
        let only = IdentBootstrap {
            kernels: vec![base.kernel],
            summary: b.summary.clone(),
        };
        let obs = DailySeries::new(
            y.start,
            convolve(&u.values, &base.kernel),
            Quantity::HospitalAdmissions,
            y.cohort,
        )
        .unwrap();
        let mut template = DeconvTemplate::new(base.kernel, PenaltyKind::SecondDifference, 1e-6, -1);
        template.total_window = Some(obs.support());
        let d = bootstrap_deconvolve(&obs, &only, &template, &cfg).unwrap();
        let first = &d.summary.replicates[0];
        let base_res_max = d.base.solution.residuals.iter().fold(0.0f64, |a, r| a.max(r.abs()));
        if base_res_max == 0.0 {
            assert!(d.summary.replicates.iter().all(|r| r == first));
        }
        assert!(d.summary.pointwise.iter().all(|p| p.windows(2).all(|w| w[0] <= w[1])));
    }

    #[test]
    fn deterministic_regardless_of_threads() {
        let (u, y, _) = synthetic();
        let noisy: Vec<f64> = y
            .values
            .iter()
            .enumerate()
            .map(|(t, v)| v * (1.0 + 0.03 * ((t * 31 % 11) as f64 - 5.0) / 5.0))
            .collect();
        let y = DailySeries::new(y.start, noisy, y.quantity, y.cohort).unwrap();
        let base = identify(&u, &y, &IdentConfig::default()).unwrap();
        let cfg = BootstrapConfig {
            n_replicates_ident: 24,
            seed: 11,
            ..Default::default()
        };
        let a = bootstrap_identify(&u, &y, &base, &IdentConfig::default(), &cfg).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| bootstrap_identify(&u, &y, &base, &IdentConfig::default(), &cfg).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn band_width_shrinks_with_residuals() {
        let (u, y, _) = synthetic();
        let noisy: Vec<f64> = y
            .values
            .iter()
            .enumerate()
            .map(|(t, v)| v + 1.5 * ((t as f64) * 2.1).sin())
            .collect();
        let y = DailySeries::new(
            y.start,
            noisy.iter().map(|v| v.max(0.0)).collect(),
            y.quantity,
            y.cohort,
        )
        .unwrap();
        let base = identify(&u, &y, &IdentConfig::default()).unwrap();
        let cfg = BootstrapConfig {
            n_replicates_ident: 200,
            seed: 5,
            ..Default::default()
        };
        let mut widths = Vec::new();
        for scale in [1.0, 0.5, 0.1] {
            let mut scaled = base.clone();
            scaled.residuals.iter_mut().for_each(|r| *r *= scale);
            let b = bootstrap_identify(&u, &y, &scaled, &IdentConfig::default(), &cfg).unwrap();
            let (lo, hi) = b.summary.band("gain").unwrap();
            widths.push(hi - lo);
        }
        assert!(widths[0] > widths[1] && widths[1] > widths[2], "{widths:?}");
    }
}
