//! Sample percentiles by linear interpolation between order statistics.
//!
//! For sorted values `x_0 <= ... <= x_{N-1}` and `p` in percent, let
//! `h = (N - 1) p / 100`, `k = floor(h)`. The result is
//! `x_k + (h - k) (x_{k+1} - x_k)`, and `x_{N-1}` when `k = N - 1`. This is
//! the type 7 rule of Hyndman and Fan, the default in R and NumPy.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum QuantileError {
    #[error("cannot take a percentile of an empty sample")]
    EmptyInput,
    #[error("percentile must lie in [0, 100], got {0}")]
    BadLevel(f64),
    #[error("sample contains NaN")]
    NaN,
}

pub fn percentile(v: &[f64], p: f64) -> Result<f64, QuantileError> {
    let mut sorted = v.to_vec();
    if sorted.iter().any(|x| x.is_nan()) {
        return Err(QuantileError::NaN);
    }
    sorted.sort_by(f64::total_cmp);
    percentile_sorted(&sorted, p)
}

/// [`percentile`] on data already sorted ascending.
pub fn percentile_sorted(sorted: &[f64], p: f64) -> Result<f64, QuantileError> {
    if sorted.is_empty() {
        return Err(QuantileError::EmptyInput);
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(QuantileError::BadLevel(p));
    }
    let h = (sorted.len() - 1) as f64 * p / 100.0;
    let k = h.floor() as usize;
    if k + 1 >= sorted.len() {
        return Ok(sorted[sorted.len() - 1]);
    }
    let frac = h - k as f64;
    Ok(sorted[k] + frac * (sorted[k + 1] - sorted[k]))
}

/// Several percentiles of one sample, sorting once.
pub fn percentiles(v: &[f64], levels: &[f64]) -> Result<Vec<f64>, QuantileError> {
    let mut sorted = v.to_vec();
    if sorted.iter().any(|x| x.is_nan()) {
        return Err(QuantileError::NaN);
    }
    sorted.sort_by(f64::total_cmp);
    levels.iter().map(|p| percentile_sorted(&sorted, *p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        assert_eq!(percentile(&[1.0, 2.0, 3.0, 4.0], 50.0).unwrap(), 2.5);
        assert_eq!(percentile(&[5.0], 12.0).unwrap(), 5.0);
        let grid: Vec<f64> = (0..=100).map(f64::from).collect();
        assert!((percentile(&grid, 2.5).unwrap() - 2.5).abs() < 1e-12);
        assert_eq!(percentile(&[4.0, 1.0, 3.0, 2.0], 0.0).unwrap(), 1.0);
        assert_eq!(percentile(&[4.0, 1.0, 3.0, 2.0], 100.0).unwrap(), 4.0);
    }

    #[test]
    fn errors() {
        assert_eq!(percentile(&[], 50.0), Err(QuantileError::EmptyInput));
        assert_eq!(percentile(&[1.0], 101.0), Err(QuantileError::BadLevel(101.0)));
        assert_eq!(percentile(&[1.0, f64::NAN], 50.0), Err(QuantileError::NaN));
    }

    proptest! {
        #[test]
        fn monotone_in_level(v in proptest::collection::vec(-1e6f64..1e6, 1..60), p1 in 0.0f64..100.0, p2 in 0.0f64..100.0) {
            let (lo, hi) = if p1 <= p2 { (p1, p2) } else { (p2, p1) };
            prop_assert!(percentile(&v, lo).unwrap() <= percentile(&v, hi).unwrap());
        }

        #[test]
        fn within_sample_range(v in proptest::collection::vec(-1e6f64..1e6, 1..60), p in 0.0f64..=100.0) {
            let q = percentile(&v, p).unwrap();
            let min = v.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(min <= q && q <= max);
        }
    }
}
