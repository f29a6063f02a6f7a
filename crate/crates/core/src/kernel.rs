//! Delayed exponential impulse response and the convolution operators built
//! from it.
//!
//! The kernel is `g_t = beta * alpha^t` for `t >= 0` and zero before. Output
//! at day `t` is `sum_j g_j * u[t - j - D]`, where `D` is an integer delay
//! between the input and output calendars. The delay never enters the
//! convolution matrix: it only relabels the dates of the unknown input.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum KernelError {
    #[error("alpha must lie in [0, 1), got {0}")]
    AlphaOutOfRange(f64),
    #[error("beta must be positive and finite, got {0}")]
    NonPositiveBeta(f64),
    #[error("time constant is undefined for alpha = 0")]
    DegenerateAlpha,
    #[error("convolution matrix needs at least one observation")]
    NoObservations,
    #[error("pre-window length must be >= -1, got {0}")]
    BadPreWindow(i64),
    #[error("truncation length {got} is shorter than the {need} days the matrix spans")]
    TruncationTooShort { got: usize, need: usize },
}

/// Relative tail mass below which the kernel is cut off.
pub const TAIL_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpKernel {
    alpha: f64,
    beta: f64,
    delay: i64,
}

impl ExpKernel {
    pub fn new(alpha: f64, beta: f64, delay: i64) -> Result<Self, KernelError> {
        if !(0.0..1.0).contains(&alpha) {
            return Err(KernelError::AlphaOutOfRange(alpha));
        }
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(KernelError::NonPositiveBeta(beta));
        }
        Ok(ExpKernel { alpha, beta, delay })
    }

    /// Like [`ExpKernel::new`] but accepts `beta == 0`, which is what a
    /// profiled fit returns for an orthogonal regressor.
    pub(crate) fn fitted(alpha: f64, beta: f64, delay: i64) -> Self {
        debug_assert!((0.0..1.0).contains(&alpha) && beta >= 0.0);
        ExpKernel { alpha, beta, delay }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn delay(&self) -> i64 {
        self.delay
    }

    /// `g_t`, zero for negative `t`. `0^0` is taken as 1.
    pub fn eval(&self, t: i64) -> f64 {
        if t < 0 {
            0.0
        } else if t == 0 {
            self.beta
        } else {
            self.beta * self.alpha.powi(t.min(i32::MAX as i64) as i32)
        }
    }

    pub fn gain(&self) -> f64 {
        self.beta / (1.0 - self.alpha)
    }

    pub fn stats(&self) -> KernelStats {
        kernel_stats(self)
    }

    /// Smallest `T` such that the tail mass `sum_{t >= T} g_t` is below
    /// [`TAIL_TOLERANCE`] times the gain, i.e. `alpha^T < 1e-12`.
    pub fn truncation_length(&self) -> usize {
        if self.alpha == 0.0 {
            return 1;
        }
        let t = (TAIL_TOLERANCE.ln() / self.alpha.ln()).floor() as usize + 1;
        t.max(1)
    }

    /// `g_0 .. g_{len-1}`.
    pub fn values(&self, len: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(len);
        let mut g = self.beta;
        for _ in 0..len {
            out.push(g);
            g *= self.alpha;
        }
        out
    }
}

pub fn kernel_eval(k: &ExpKernel, t: i64) -> f64 {
    k.eval(t)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelStats {
    /// Area under the kernel, `beta / (1 - alpha)`.
    pub gain: f64,
    /// `-1 / ln(alpha)` days; zero when `degenerate`.
    pub time_constant: f64,
    /// Mean of the geometric lag distribution, `alpha / (1 - alpha)`.
    pub mean_lag: f64,
    /// Set when `alpha == 0` and the time constant is undefined.
    pub degenerate: bool,
}

impl KernelStats {
    pub fn time_constant_checked(&self) -> Result<f64, KernelError> {
        if self.degenerate {
            Err(KernelError::DegenerateAlpha)
        } else {
            Ok(self.time_constant)
        }
    }
}

pub fn kernel_stats(k: &ExpKernel) -> KernelStats {
    let a = k.alpha;
    let degenerate = a == 0.0;
    KernelStats {
        gain: k.beta / (1.0 - a),
        time_constant: if degenerate { 0.0 } else { -1.0 / a.ln() },
        mean_lag: a / (1.0 - a),
        degenerate,
    }
}

/// Convolve `u` with the kernel on `u`'s own date grid.
///
/// `u` is zero outside its support. The sum over kernel lags is cut at the
/// kernel's truncation length.
pub fn convolve(u: &[f64], k: &ExpKernel) -> Vec<f64> {
    let n = u.len();
    let trunc = k.truncation_length() as i64;
    let g = k.values(trunc.min(n as i64 + k.delay.unsigned_abs() as i64 + 1) as usize);
    (0..n as i64)
        .map(|t| {
            // u index s = t - j - D must lie in [0, n)
            let s_hi = t - k.delay;
            let j_lo = (s_hi - (n as i64 - 1)).max(0);
            let j_hi = s_hi.min(g.len() as i64 - 1);
            (j_lo..=j_hi).map(|j| g[j as usize] * u[(s_hi - j) as usize]).sum()
        })
        .collect()
}

/// Shape of the convolution matrix mapping unknown inputs to `n_obs`
/// observed outputs.
///
/// With `pre_window == -1` the matrix is the square lower-triangular
/// Toeplitz matrix and inputs before the first observation are assumed
/// zero. With `pre_window = L >= 0`, `L + 1` extra inputs preceding the
/// window become unknowns and the matrix grows to `n x (n + L + 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvMatrixSpec {
    pub kernel: ExpKernel,
    pub n_obs: usize,
    pub pre_window: i64,
    pub truncation_length: usize,
}

impl ConvMatrixSpec {
    pub fn new(kernel: ExpKernel, n_obs: usize, pre_window: i64) -> Result<Self, KernelError> {
        let need = n_obs + pre_window.max(0) as usize + 1;
        let spec = ConvMatrixSpec {
            kernel,
            n_obs,
            pre_window,
            truncation_length: kernel.truncation_length().max(need),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), KernelError> {
        if self.n_obs == 0 {
            return Err(KernelError::NoObservations);
        }
        if self.pre_window < -1 {
            return Err(KernelError::BadPreWindow(self.pre_window));
        }
        let need = self.n_obs + self.pre_window.max(0) as usize + 1;
        if self.truncation_length < need {
            return Err(KernelError::TruncationTooShort {
                got: self.truncation_length,
                need,
            });
        }
        Ok(())
    }

    /// Number of unknown inputs, `n + L + 1`.
    pub fn n_unknowns(&self) -> usize {
        (self.n_obs as i64 + self.pre_window + 1) as usize
    }

    /// Entry `(i, j)` is `g_{L + 1 + i - j}`.
    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.kernel.eval(self.pre_window + 1 + i as i64 - j as i64)
    }
}

pub fn build_conv_matrix(spec: &ConvMatrixSpec) -> DMatrix<f64> {
    let n = spec.n_obs;
    let m = spec.n_unknowns();
    let lag0 = spec.pre_window + 1;
    let g = spec.kernel.values((lag0 + n as i64) as usize);
    DMatrix::from_fn(n, m, |i, j| {
        let lag = lag0 + i as i64 - j as i64;
        if lag < 0 {
            0.0
        } else {
            g[lag as usize]
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn k(alpha: f64, beta: f64, delay: i64) -> ExpKernel {
        ExpKernel::new(alpha, beta, delay).unwrap()
    }

    #[test]
    fn eval_examples() {
        assert_eq!(k(0.5, 1.0, 0).eval(2), 0.25);
        assert_eq!(k(0.3, 2.0, 4).eval(-1), 0.0);
        assert_eq!(k(0.0, 2.0, 0).eval(0), 2.0);
        assert_eq!(k(0.0, 2.0, 0).eval(1), 0.0);
    }

    #[test]
    fn invalid_parameters() {
        assert!(matches!(
            ExpKernel::new(1.0, 1.0, 0),
            Err(KernelError::AlphaOutOfRange(_))
        ));
        assert!(matches!(
            ExpKernel::new(-0.1, 1.0, 0),
            Err(KernelError::AlphaOutOfRange(_))
        ));
        assert!(matches!(
            ExpKernel::new(0.5, 0.0, 0),
            Err(KernelError::NonPositiveBeta(_))
        ));
        assert!(ExpKernel::new(0.5, f64::NAN, 0).is_err());
    }

    #[test]
    fn stats_examples() {
        let s = k(0.9, 0.2, 0).stats();
        assert!((s.gain - 2.0).abs() < 1e-12);
        let s = k(0.82, 0.05, 0).stats();
        assert!((s.gain - 0.05 / 0.18).abs() < 1e-15);
        assert!((s.mean_lag - 0.82 / 0.18).abs() < 1e-12);
        assert!((s.gain - 0.277_777_777_777_8).abs() < 1e-12);
        assert!((s.time_constant - (-1.0 / 0.82f64.ln())).abs() < 1e-12);

        let s = k(0.0, 1.0, 0).stats();
        assert!(s.degenerate);
        assert_eq!(s.time_constant, 0.0);
        assert_eq!(s.time_constant_checked(), Err(KernelError::DegenerateAlpha));
    }

    #[test]
    fn plausibility_50_59_row() {
        // mean lag ~5.3 days means alpha ~ 5.3/6.3; a gain of 5.72% then fixes beta
        let alpha = 5.3 / 6.3;
        let beta = 0.0572 * (1.0 - alpha);
        let s = k(alpha, beta, -7).stats();
        assert!((s.gain - 0.0572).abs() < 1e-12);
        assert!((s.mean_lag - 5.3).abs() < 1e-12);
        assert!(s.time_constant > 5.0 && s.time_constant < 7.0);
    }

    #[test]
    fn gain_matches_truncated_sum() {
        for &(a, b) in &[(0.0, 1.0), (0.5, 0.3), (0.85, 0.06), (0.95, 0.01), (0.99, 2.0)] {
            let kern = k(a, b, 0);
            let t = kern.truncation_length();
            let sum: f64 = (0..t as i64).map(|i| kern.eval(i)).sum();
            assert!((sum - kern.gain()).abs() <= 1e-11 * kern.gain(), "alpha {a}");
            // the tail beyond the cut is below tolerance
            let tail = kern.eval(t as i64) / (1.0 - a);
            assert!(tail < TAIL_TOLERANCE * kern.gain());
        }
    }

    #[test]
    fn convolve_impulse() {
        let kern = k(0.7, 0.5, 0);
        let mut u = vec![0.0; 10];
        u[0] = 1.0;
        let y = convolve(&u, &kern);
        for (t, v) in y.iter().enumerate() {
            assert!((v - kern.eval(t as i64)).abs() < 1e-15);
        }
    }

    #[test]
    fn convolve_negative_delay_shift() {
        let kern = k(0.7, 0.5, -2);
        let mut u = vec![0.0; 12];
        u[5] = 1.0;
        let y = convolve(&u, &kern);
        for (t, v) in y.iter().enumerate() {
            assert!((v - kern.eval(t as i64 - 3)).abs() < 1e-15, "t={t}");
        }
        assert_eq!(y[2], 0.0);
        assert_eq!(y[3], 0.5);
    }

    #[test]
    fn convolve_constant_tends_to_gain() {
        let kern = k(0.8, 0.1, 0);
        let y = convolve(&vec![3.0; 400], &kern);
        // the truncated tail is below 1e-12 of the gain
        assert!((y[399] - 3.0 * kern.gain()).abs() < 3.0 * kern.gain() * 1e-11);
        assert!(y[0] < y[10]);
    }

    #[test]
    fn conv_matrix_square() {
        let spec = ConvMatrixSpec::new(k(0.5, 1.0, 0), 3, -1).unwrap();
        let g = build_conv_matrix(&spec);
        let expected = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.5, 1.0, 0.0, 0.25, 0.5, 1.0]);
        assert_eq!(g, expected);
    }

    #[test]
    fn conv_matrix_extended() {
        let spec = ConvMatrixSpec::new(k(0.5, 1.0, 0), 2, 1).unwrap();
        let g = build_conv_matrix(&spec);
        let expected = DMatrix::from_row_slice(2, 4, &[0.25, 0.5, 1.0, 0.0, 0.125, 0.25, 0.5, 1.0]);
        assert_eq!(g, expected);
        for i in 0..2 {
            for j in 0..4 {
                assert_eq!(g[(i, j)], spec.entry(i, j));
            }
        }
    }

    #[test]
    fn conv_matrix_first_column() {
        let spec = ConvMatrixSpec::new(k(0.6, 0.4, -3), 6, -1).unwrap();
        let g = build_conv_matrix(&spec);
        let mut e1 = nalgebra::DVector::zeros(6);
        e1[0] = 1.0;
        assert_eq!(&g * e1, g.column(0).into_owned());
    }

    #[test]
    fn conv_matrix_toeplitz_and_column_sums() {
        let kern = k(0.9, 0.2, 0);
        let mu = kern.gain();
        let mut prev = 0.0;
        for n in [5, 20, 80, 300] {
            let g = build_conv_matrix(&ConvMatrixSpec::new(kern, n, -1).unwrap());
            for i in 1..n {
                for j in 1..n {
                    assert_eq!(g[(i, j)], g[(i - 1, j - 1)]);
                }
            }
            let col0: f64 = g.column(0).sum();
            assert!(col0 <= mu + 1e-12);
            assert!(col0 > prev);
            prev = col0;
        }
        assert!((prev - mu).abs() < 1e-9);
    }

    #[test]
    fn spec_validation() {
        let kern = k(0.5, 1.0, 0);
        assert_eq!(ConvMatrixSpec::new(kern, 0, -1), Err(KernelError::NoObservations));
        assert_eq!(ConvMatrixSpec::new(kern, 3, -2), Err(KernelError::BadPreWindow(-2)));
        let mut spec = ConvMatrixSpec::new(kern, 10, 4).unwrap();
        assert_eq!(spec.n_unknowns(), 15);
        spec.truncation_length = 5;
        assert!(matches!(spec.validate(), Err(KernelError::TruncationTooShort { .. })));
    }
}
