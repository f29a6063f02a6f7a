//! Lawson-Hanson active-set solver for nonnegative least squares, working
//! on the Gram form `min 1/2 x'Qx - q'x  s.t. x >= 0` with `Q = A'A` and
//! `q = A'b`.
//!
//! The passive set may be seeded (for example with the positive support of
//! the unconstrained solution), which usually cuts the number of outer
//! iterations from `O(m)` to a handful.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NnlsError {
    #[error("active-set iteration did not terminate after {0} steps")]
    MaxIterations(usize),
    #[error("dimension mismatch")]
    Dimension,
}

#[derive(Debug, Clone)]
pub struct NnlsOutput {
    pub x: DVector<f64>,
    /// `true` where `x` is held at zero.
    pub active: Vec<bool>,
    pub iterations: usize,
}

/// Size of the gradient for the stationarity tests: `|q|_inf + |Q|_inf |x|_inf`
/// with the row-sum norm on `Q`.
pub fn gradient_scale(q_mat: &DMatrix<f64>, q_vec: &DVector<f64>, x: &DVector<f64>) -> f64 {
    let qnorm = q_mat
        .row_iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0f64, f64::max);
    q_vec.amax() + qnorm * x.amax()
}

fn solve_passive(q_mat: &DMatrix<f64>, q_vec: &DVector<f64>, passive: &[usize]) -> Option<DVector<f64>> {
    let k = passive.len();
    let sub = DMatrix::from_fn(k, k, |i, j| q_mat[(passive[i], passive[j])]);
    let rhs = DVector::from_fn(k, |i, _| q_vec[passive[i]]);
    match sub.clone().cholesky() {
        Some(ch) => {
            let mut z = ch.solve(&rhs);
            // one step of iterative refinement
            let r = &rhs - &sub * &z;
            z += ch.solve(&r);
            Some(z)
        }
        None => sub.lu().solve(&rhs),
    }
}

pub fn nnls_gram(
    q_mat: &DMatrix<f64>,
    q_vec: &DVector<f64>,
    seed_passive: Option<&[bool]>,
    max_iter: usize,
) -> Result<NnlsOutput, NnlsError> {
    let m = q_vec.len();
    if q_mat.nrows() != m || q_mat.ncols() != m {
        return Err(NnlsError::Dimension);
    }
    let mut x = DVector::zeros(m);
    let mut in_p = vec![false; m];
    // indices that failed to enter because their column is dependent
    let mut barred = vec![false; m];
    let tol = 1e-13 * gradient_scale(q_mat, q_vec, &x).max(f64::MIN_POSITIVE);

    // warm start: shrink the seed until its least-squares solution is positive
    if let Some(seed) = seed_passive {
        let mut p: Vec<usize> = (0..m).filter(|&i| seed.get(i).copied().unwrap_or(false)).collect();
        while !p.is_empty() {
            let Some(z) = solve_passive(q_mat, q_vec, &p) else {
                break;
            };
            if z.iter().all(|&v| v > 0.0) {
                for (k, &i) in p.iter().enumerate() {
                    x[i] = z[k];
                    in_p[i] = true;
                }
                break;
            }
            p = p
                .into_iter()
                .zip(z.iter())
                .filter(|(_, &v)| v > 0.0)
                .map(|(i, _)| i)
                .collect();
        }
    }

    let mut iterations = 0;
    loop {
        let w = q_vec - q_mat * &x;
        let mut enter = None;
        let mut wmax = tol;
        for j in 0..m {
            if !in_p[j] && !barred[j] && w[j] > wmax {
                wmax = w[j];
                enter = Some(j);
            }
        }
        let Some(j) = enter else { break };
        iterations += 1;
        if iterations > max_iter {
            return Err(NnlsError::MaxIterations(max_iter));
        }
        in_p[j] = true;

        loop {
            let p: Vec<usize> = (0..m).filter(|&i| in_p[i]).collect();
            let Some(z) = solve_passive(q_mat, q_vec, &p) else {
                in_p[j] = false;
                barred[j] = true;
                break;
            };
            if z.iter().all(|&v| v > 0.0) {
                for (k, &i) in p.iter().enumerate() {
                    x[i] = z[k];
                }
                break;
            }
            // step toward z until the first passive coordinate hits zero
            let mut step = 1.0f64;
            for (k, &i) in p.iter().enumerate() {
                if z[k] <= 0.0 {
                    let denom = x[i] - z[k];
                    if denom > 0.0 {
                        step = step.min(x[i] / denom);
                    } else {
                        step = 0.0;
                    }
                }
            }
            for (k, &i) in p.iter().enumerate() {
                x[i] += step * (z[k] - x[i]);
            }
            let mut removed = false;
            for (k, &i) in p.iter().enumerate() {
                if x[i] <= 0.0 || (z[k] <= 0.0 && x[i] <= 1e-15 * x.amax()) {
                    x[i] = 0.0;
                    in_p[i] = false;
                    removed = true;
                }
            }
            if !removed {
                // guards against round-off stalling the inner loop
                let (k, _) = z.argmin();
                x[p[k]] = 0.0;
                in_p[p[k]] = false;
            }
            iterations += 1;
            if iterations > max_iter {
                return Err(NnlsError::MaxIterations(max_iter));
            }
        }
        if in_p[j] {
            // a newly entered index that survives clears the bar list
            barred.iter_mut().for_each(|b| *b = false);
        }
    }
    let active = in_p.iter().map(|p| !p).collect();
    Ok(NnlsOutput { x, active, iterations })
}
