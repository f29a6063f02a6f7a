//! Least-squares fit of a delayed exponential kernel from an input series
//! (reported cases) to an output series (hospital admissions).
//!
//! The model `y_t = beta * sum_j alpha^j u[t - j - D]` is linear in `beta`,
//! so `beta` is profiled out in closed form. What remains is a search over
//! the integer delay `D` and the scalar `alpha`: an exhaustive delay grid, a
//! coarse `alpha` grid, then golden-section refinement around the best grid
//! point for every delay.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernel::{convolve, ExpKernel, KernelStats};
use crate::series::{DailySeries, Quantity};

#[derive(Debug, Error, PartialEq)]
pub enum IdentError {
    #[error("regressor is identically zero (alpha = {alpha}, delay = {delay})")]
    ZeroRegressor { alpha: f64, delay: i64 },
    #[error("input contains non-finite values")]
    NonFiniteInput,
    #[error("invalid configuration: {0}")]
    BadConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InputHistory {
    /// Use whatever input exists before the fitting window.
    #[default]
    UseAvailable,
    /// Treat input before the fitting window as zero.
    ZeroPad,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IdentConfig {
    pub delay_min: i64,
    pub delay_max: i64,
    /// Coarse grid for `alpha`, ascending, inside `[0, 1)`.
    pub alpha_grid: Vec<f64>,
    pub alpha_refine_tol: f64,
    pub input_history: InputHistory,
}

impl Default for IdentConfig {
    fn default() -> Self {
        IdentConfig {
            delay_min: -15,
            delay_max: 5,
            alpha_grid: (0..=99).map(|i| i as f64 / 100.0).collect(),
            alpha_refine_tol: 1e-6,
            input_history: InputHistory::UseAvailable,
        }
    }
}

impl IdentConfig {
    pub fn validate(&self) -> Result<(), IdentError> {
        if self.delay_min > self.delay_max {
            return Err(IdentError::BadConfig("empty delay grid".into()));
        }
        if self.alpha_grid.is_empty() {
            return Err(IdentError::BadConfig("empty alpha grid".into()));
        }
        if self.alpha_grid.iter().any(|a| !(0.0..1.0).contains(a)) {
            return Err(IdentError::BadConfig("alpha grid must lie in [0, 1)".into()));
        }
        if self.alpha_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(IdentError::BadConfig("alpha grid must be strictly ascending".into()));
        }
        if !(self.alpha_refine_tol > 0.0) {
            return Err(IdentError::BadConfig("alpha_refine_tol must be positive".into()));
        }
        Ok(())
    }
}

/// Upper end of the `alpha` search interval.
const ALPHA_CEILING: f64 = 0.999;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentResult {
    pub kernel: ExpKernel,
    pub stats: KernelStats,
    pub rss: f64,
    pub fitted: Vec<f64>,
    pub residuals: Vec<f64>,
}

/// One objective evaluation made during the search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub delay: i64,
    pub alpha: f64,
    pub rss: f64,
}

/// Input and output on a common day index: output day `t` is input index
/// `t + offset`.
struct Aligned<'a> {
    u: &'a [f64],
    y: &'a [f64],
    offset: i64,
    /// Input indices below this are treated as zero.
    first_input: i64,
}

impl Aligned<'_> {
    /// Exponentially filtered input `w_s = sum_j alpha^j u[s - j]` for
    /// `s` in `lo..=hi`.
    fn filtered(&self, alpha: f64, lo: i64, hi: i64) -> Vec<f64> {
        let len = self.u.len() as i64;
        let start = self.first_input.max(0);
        let mut out = Vec::with_capacity((hi - lo + 1).max(0) as usize);
        let mut w = 0.0;
        let mut s = start.min(lo);
        while s <= hi {
            let u = if s >= start && s < len { self.u[s as usize] } else { 0.0 };
            w = alpha * w + u;
            if s >= lo {
                out.push(w);
            }
            s += 1;
        }
        out
    }

    fn regressor(&self, alpha: f64, delay: i64) -> Vec<f64> {
        let n = self.y.len() as i64;
        self.filtered(alpha, self.offset - delay, self.offset - delay + n - 1)
    }
}

fn profile(phi: &[f64], y: &[f64], alpha: f64, delay: i64) -> Result<(f64, f64), IdentError> {
    let pp: f64 = phi.iter().map(|p| p * p).sum();
    if pp == 0.0 {
        return Err(IdentError::ZeroRegressor { alpha, delay });
    }
    let py: f64 = phi.iter().zip(y).map(|(p, y)| p * y).sum();
    let beta = (py / pp).max(0.0);
    let rss = phi
        .iter()
        .zip(y)
        .map(|(p, y)| {
            let r = y - beta * p;
            r * r
        })
        .sum();
    Ok((beta, rss))
}

/// Closed-form `beta` and residual sum of squares for fixed `alpha` and
/// delay.
///
/// `u` and `y` start on the same day; `u` may extend past the end of `y`
/// and is zero outside its support.
pub fn profile_beta(alpha: f64, delay: i64, u: &[f64], y: &[f64]) -> Result<(f64, f64), IdentError> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(IdentError::BadConfig(format!("alpha {alpha} outside [0, 1)")));
    }
    let data = Aligned {
        u,
        y,
        offset: 0,
        first_input: 0,
    };
    profile(&data.regressor(alpha, delay), y, alpha, delay)
}

fn golden_section<F: FnMut(f64) -> f64>(mut f: F, mut a: f64, mut b: f64, tol: f64) -> (f64, f64) {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while (b - a) > tol {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    if fc <= fd {
        (c, fc)
    } else {
        (d, fd)
    }
}

/// Fit `(alpha, beta, D)` on the dates of `y`.
///
/// `u` may start earlier and end later than `y`; see [`InputHistory`].
pub fn identify(u: &DailySeries, y: &DailySeries, cfg: &IdentConfig) -> Result<IdentResult, IdentError> {
    identify_traced(u, y, cfg, None)
}

/// [`identify`] that also records every objective evaluation.
pub fn identify_traced(
    u: &DailySeries,
    y: &DailySeries,
    cfg: &IdentConfig,
    mut trace: Option<&mut Vec<Evaluation>>,
) -> Result<IdentResult, IdentError> {
    identify_raw(&u.values, &y.values, u.offset_of(y.start), cfg, trace.as_deref_mut())
}

/// Identification on raw vectors: output day `t` corresponds to input
/// index `t + offset`.
pub fn identify_raw(
    u: &[f64],
    y: &[f64],
    offset: i64,
    cfg: &IdentConfig,
    mut trace: Option<&mut Vec<Evaluation>>,
) -> Result<IdentResult, IdentError> {
    cfg.validate()?;
    if u.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(IdentError::NonFiniteInput);
    }
    let data = Aligned {
        u,
        y,
        offset,
        first_input: match cfg.input_history {
            InputHistory::UseAvailable => i64::MIN,
            InputHistory::ZeroPad => offset,
        },
    };
    let n = y.len() as i64;
    let n_alpha = cfg.alpha_grid.len();
    let delays: Vec<i64> = (cfg.delay_min..=cfg.delay_max).collect();

    // coarse grid, one filter pass per alpha shared by all delays
    let lo_all = offset - cfg.delay_max;
    let hi_all = offset - cfg.delay_min + n - 1;
    let mut grid: Vec<Option<(f64, f64)>> = vec![None; delays.len() * n_alpha];
    let mut last_err = None;
    for (ia, &alpha) in cfg.alpha_grid.iter().enumerate() {
        let w = data.filtered(alpha, lo_all, hi_all);
        for (id, &delay) in delays.iter().enumerate() {
            let s0 = (offset - delay - lo_all) as usize;
            match profile(&w[s0..s0 + n as usize], y, alpha, delay) {
                Ok(r) => {
                    if let Some(t) = trace.as_deref_mut() {
                        t.push(Evaluation { delay, alpha, rss: r.1 });
                    }
                    grid[id * n_alpha + ia] = Some(r);
                }
                Err(e) => last_err = Some(e),
            }
        }
    }

    let mut best: Option<(i64, f64, f64, f64)> = None; // delay, alpha, beta, rss
    for (id, &delay) in delays.iter().enumerate() {
        let row = &grid[id * n_alpha..(id + 1) * n_alpha];
        let mut grid_best: Option<(usize, f64, f64)> = None;
        for (ia, r) in row.iter().enumerate() {
            if let Some((beta, rss)) = *r {
                if grid_best.is_none_or(|b| rss < b.2) {
                    grid_best = Some((ia, beta, rss));
                }
            }
        }
        let Some((ia, beta, rss)) = grid_best else { continue };
        let mut cand = (delay, cfg.alpha_grid[ia], beta, rss);

        let a_lo = if ia == 0 { 0.0 } else { cfg.alpha_grid[ia - 1] };
        let a_hi = cfg
            .alpha_grid
            .get(ia + 1)
            .copied()
            .unwrap_or(ALPHA_CEILING)
            .min(ALPHA_CEILING);
        if a_hi > a_lo {
            let objective = |alpha: f64| {
                profile(&data.regressor(alpha, delay), y, alpha, delay)
                    .map(|r| r.1)
                    .unwrap_or(f64::INFINITY)
            };
            let (alpha, _) = golden_section(objective, a_lo, a_hi, cfg.alpha_refine_tol);
            if let Ok((beta, rss)) = profile(&data.regressor(alpha, delay), y, alpha, delay) {
                if let Some(t) = trace.as_deref_mut() {
                    t.push(Evaluation { delay, alpha, rss });
                }
                if rss < cand.3 {
                    cand = (delay, alpha, beta, rss);
                }
            }
        }
        if best.is_none_or(|b| cand.3 < b.3) {
            best = Some(cand);
        }
    }

    let Some((delay, alpha, beta, rss)) = best else {
        return Err(last_err.unwrap_or(IdentError::BadConfig("nothing evaluated".into())));
    };
    let kernel = ExpKernel::fitted(alpha, beta, delay);
    let phi = data.regressor(alpha, delay);
    let fitted: Vec<f64> = phi.iter().map(|p| beta * p).collect();
    let residuals: Vec<f64> = y.iter().zip(&fitted).map(|(y, f)| y - f).collect();
    Ok(IdentResult {
        kernel,
        stats: kernel.stats(),
        rss,
        fitted,
        residuals,
    })
}

/// Admissions predicted from `u` on `u`'s own date grid.
pub fn predict(result: &IdentResult, u: &DailySeries) -> DailySeries {
    DailySeries {
        start: u.start,
        values: convolve(&u.values, &result.kernel),
        quantity: Quantity::HospitalAdmissions,
        cohort: u.cohort,
        smoothed: u.smoothed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::series::AgeGroup;
    use nalgebra::{DMatrix, DVector};

    fn rise_decay(n: usize) -> Vec<f64> {
        (0..n)
            .map(|t| {
                let t = t as f64;
                1000.0 * (t / 40.0).powi(2) * (-(t - 40.0).max(0.0) / 25.0).exp() + 50.0
            })
            .collect()
    }

    #[test]
    fn profile_exact_fit() {
        let u = rise_decay(60);
        let phi_kernel = ExpKernel::new(0.7, 1.0, 2).unwrap();
        let phi = {
            let mut v = convolve(&u, &phi_kernel);
            v.truncate(50);
            v
        };
        let y: Vec<f64> = phi.iter().map(|p| 2.0 * p).collect();
        let (beta, rss) = profile_beta(0.7, 2, &u, &y).unwrap();
        assert!((beta - 2.0).abs() < 1e-12);
        assert!(rss < 1e-18 * y.iter().map(|v| v * v).sum::<f64>());
    }

    #[test]
    fn profile_orthogonal() {
        // alpha = 0, delay = 0: regressor is u itself
        let u = [1.0, 0.0, 1.0, 0.0];
        let y = [0.0, 3.0, 0.0, -2.0];
        let (beta, rss) = profile_beta(0.0, 0, &u, &y).unwrap();
        assert_eq!(beta, 0.0);
        assert_eq!(rss, 13.0);
    }

    #[test]
    fn profile_zero_regressor() {
        assert!(matches!(
            profile_beta(0.5, 0, &[0.0; 5], &[1.0; 5]),
            Err(IdentError::ZeroRegressor { .. })
        ));
    }

    #[test]
    fn profile_matches_normal_equations_oracle() {
        // independent route: regressor built column-wise from the kernel
        // definition, then solved as a one-column least-squares problem
        let u = [3.0, 1.0, 4.0, 1.0, 5.0, 9.0, 2.0, 6.0, 5.0, 3.0];
        let y = [0.5, 1.2, 0.9, 2.2, 1.7, 2.8, 3.1, 2.0, 1.9, 2.4];
        let (alpha, delay) = (0.6f64, -1i64);
        let phi = DVector::from_fn(y.len(), |t, _| {
            (0..=20)
                .map(|j| {
                    let s = t as i64 - j - delay;
                    if (0..u.len() as i64).contains(&s) {
                        alpha.powi(j as i32) * u[s as usize]
                    } else {
                        0.0
                    }
                })
                .sum()
        });
        let x = DMatrix::from_columns(&[phi.clone()]);
        let yv = DVector::from_row_slice(&y);
        let xtx = x.transpose() * &x;
        let beta_oracle = xtx.lu().solve(&(x.transpose() * &yv)).unwrap()[0];
        let rss_oracle = (&yv - &x * beta_oracle).norm_squared();
        let (beta, rss) = profile_beta(alpha, delay, &u, &y).unwrap();
        assert!((beta - beta_oracle).abs() < 1e-12 * beta_oracle.abs());
        assert!((rss - rss_oracle).abs() < 1e-12 * rss_oracle.max(1.0));
    }

    #[test]
    fn golden_finds_parabola_min() {
        let (x, fx) = golden_section(|x| (x - 0.37).powi(2), 0.0, 1.0, 1e-9);
        assert!((x - 0.37).abs() < 1e-8);
        assert!(fx < 1e-16);
    }

    fn series(vals: Vec<f64>, q: Quantity) -> DailySeries {
        DailySeries::new("2020-10-01".parse().unwrap(), vals, q, AgeGroup::new(5).unwrap()).unwrap()
    }

    #[test]
    fn noise_free_recovery() {
        let u = rise_decay(120);
        let truth = ExpKernel::new(0.85, 0.06, -8).unwrap();
        let y = convolve(&u, &truth);
        let res = identify(
            &series(u, Quantity::NewCases),
            &series(y, Quantity::HospitalAdmissions),
            &IdentConfig::default(),
        )
        .unwrap();
        assert_eq!(res.kernel.delay(), -8);
        assert!((res.kernel.alpha() - 0.85).abs() < 1e-4);
        assert!((res.kernel.beta() - 0.06).abs() < 1e-4 * 0.06);
        let rss: f64 = res.residuals.iter().map(|r| r * r).sum();
        assert!((rss - res.rss).abs() <= 1e-9 * (1.0 + res.rss));
    }

    #[test]
    fn history_before_window_is_used() {
        let u_full = rise_decay(150);
        let truth = ExpKernel::new(0.8, 0.05, -6).unwrap();
        let y_full = convolve(&u_full, &truth);
        let u = series(u_full.clone(), Quantity::NewCases);
        let y = crate::series::window(
            &series(y_full, Quantity::HospitalAdmissions),
            crate::series::DateRange::new(u.date_at(30), u.date_at(110)),
        )
        .unwrap();
        let res = identify(&u, &y, &IdentConfig::default()).unwrap();
        assert_eq!(res.kernel.delay(), -6);
        assert!((res.kernel.alpha() - 0.8).abs() < 1e-4);

        // zero padding discards the history and can no longer fit exactly
        let cfg = IdentConfig {
            input_history: InputHistory::ZeroPad,
            ..IdentConfig::default()
        };
        let padded = identify(&u, &y, &cfg).unwrap();
        assert!(padded.rss > res.rss);
    }

    #[test]
    fn returned_rss_is_minimal_over_trace() {
        let u = rise_decay(90);
        let truth = ExpKernel::new(0.75, 0.1, -4).unwrap();
        let y: Vec<f64> = convolve(&u, &truth)
            .iter()
            .enumerate()
            .map(|(t, v)| v + 3.0 * ((t * 7919) % 13) as f64 / 13.0 - 1.5)
            .collect();
        let mut trace = Vec::new();
        let res = identify_traced(
            &series(u, Quantity::NewCases),
            &series(y, Quantity::HospitalAdmissions),
            &IdentConfig::default(),
            Some(&mut trace),
        )
        .unwrap();
        assert!(trace.len() > 2000);
        assert!(trace.iter().all(|e| res.rss <= e.rss));
    }

    #[test]
    fn scaling_equivariance() {
        let u = rise_decay(100);
        let truth = ExpKernel::new(0.8, 0.07, -5).unwrap();
        let y: Vec<f64> = convolve(&u, &truth)
            .iter()
            .enumerate()
            .map(|(t, v)| v * (1.0 + 0.05 * ((t as f64) * 1.3).sin()))
            .collect();
        let cfg = IdentConfig::default();
        let base = identify(
            &series(u.clone(), Quantity::NewCases),
            &series(y.clone(), Quantity::HospitalAdmissions),
            &cfg,
        )
        .unwrap();

        let y3: Vec<f64> = y.iter().map(|v| 3.0 * v).collect();
        let r = identify(
            &series(u.clone(), Quantity::NewCases),
            &series(y3, Quantity::HospitalAdmissions),
            &cfg,
        )
        .unwrap();
        assert_eq!(r.kernel.delay(), base.kernel.delay());
        assert!((r.kernel.alpha() - base.kernel.alpha()).abs() < 1e-9);
        assert!((r.kernel.beta() - 3.0 * base.kernel.beta()).abs() < 1e-9 * base.kernel.beta());

        let u2: Vec<f64> = u.iter().map(|v| 2.0 * v).collect();
        let r = identify(
            &series(u2, Quantity::NewCases),
            &series(y, Quantity::HospitalAdmissions),
            &cfg,
        )
        .unwrap();
        assert_eq!(r.kernel.delay(), base.kernel.delay());
        assert!((r.kernel.alpha() - base.kernel.alpha()).abs() < 1e-9);
        assert!((r.kernel.beta() - base.kernel.beta() / 2.0).abs() < 1e-9 * base.kernel.beta());
        for (a, b) in r.fitted.iter().zip(&base.fitted) {
            assert!((a - b).abs() < 1e-8 * b.abs().max(1.0));
        }
    }

    #[test]
    fn nonfinite_input() {
        let mut u = rise_decay(30);
        let y = u.clone();
        u[3] = f64::NAN;
        let r = identify_raw(&u, &y, 0, &IdentConfig::default(), None);
        assert_eq!(r.unwrap_err(), IdentError::NonFiniteInput);
    }

    #[test]
    fn all_zero_input() {
        let u = vec![0.0; 30];
        let y = vec![1.0; 30];
        assert!(matches!(
            identify_raw(&u, &y, 0, &IdentConfig::default(), None),
            Err(IdentError::ZeroRegressor { .. })
        ));
    }

    #[test]
    fn predict_impulse_and_zero() {
        let kernel = ExpKernel::new(0.6, 0.3, 0).unwrap();
        let res = IdentResult {
            kernel,
            stats: kernel.stats(),
            rss: 0.0,
            fitted: vec![],
            residuals: vec![],
        };
        let mut v = vec![0.0; 8];
        v[0] = 1.0;
        let p = predict(&res, &series(v, Quantity::NewCases));
        for (t, x) in p.values.iter().enumerate() {
            assert!((x - kernel.eval(t as i64)).abs() < 1e-15);
        }
        assert_eq!(p.quantity, Quantity::HospitalAdmissions);
        let z = predict(&res, &series(vec![0.0; 8], Quantity::NewCases));
        assert!(z.values.iter().all(|v| *v == 0.0));
    }
}
