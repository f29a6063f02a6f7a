//! Choice of the regularization weight by Mallows's Cp.
//!
//! `Cp(lambda) = RSS(lambda) / sigma^2 - n + 2 dof(lambda)`, with `dof` the
//! trace of the hat matrix `G (G'G + lambda P'P)^{-1} G'`. The noise
//! variance comes from a deliberately over-parametrized polynomial fit to the
//! observed series.
//!
//! All penalty operators used here are lower triangular with unit diagonal,
//! hence invertible. Substituting `z = P C` turns the problem into ridge
//! regression on `K = G P^{-1}`, and one SVD of `K` gives the whole Cp curve
//! in closed form: with `K = U S V'`, the hat matrix has eigenvalues
//! `s_i^2 / (s_i^2 + lambda)`.

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::deconv::{DeconvError, DeconvProblem, Loss};

#[derive(Debug, Error, PartialEq)]
pub enum SelectError {
    #[error("need more than {need} points for a degree-{degree} fit, got {got}")]
    TooFewPoints { got: usize, need: usize, degree: usize },
    #[error("polynomial basis lost orthogonality (deviation {0:e})")]
    IllConditioned(f64),
    #[error("noise variance must be positive and finite, got {0}")]
    BadSigma2(f64),
    #[error("lambda grid must be nonempty, positive and ascending")]
    BadGrid,
    #[error("Mallows's Cp needs quadratic loss")]
    WrongLoss,
    #[error("no grid point could be evaluated")]
    NoValidPoint,
    #[error(transparent)]
    Deconv(#[from] DeconvError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseEstimate {
    pub sigma2: f64,
    pub poly_degree: usize,
    pub fit_rss: f64,
    /// Residual degrees of freedom, `n - degree - 1`.
    pub dof_used: usize,
}

pub const DEFAULT_POLY_DEGREE: usize = 20;

/// Noise variance from a least-squares polynomial of `degree` on time
/// rescaled to `[-1, 1]`.
///
/// The basis is orthonormal over the sample points (three-term recurrence
/// with re-orthogonalization), so the fit is a sequence of projections and
/// no ill-conditioned Vandermonde system is ever formed.
pub fn estimate_sigma2(y: &[f64], degree: usize) -> Result<NoiseEstimate, SelectError> {
    let n = y.len();
    let need = degree + 1;
    if n <= need {
        return Err(SelectError::TooFewPoints { got: n, need, degree });
    }
    let x: Vec<f64> = if n == 1 {
        vec![0.0]
    } else {
        (0..n).map(|i| -1.0 + 2.0 * i as f64 / (n - 1) as f64).collect()
    };
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(a, b)| a * b).sum::<f64>();

    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(need);
    let mut resid = y.to_vec();
    let mut q = vec![1.0 / (n as f64).sqrt(); n];
    for k in 0..=degree {
        if k > 0 {
            // x * q_{k-1}, then orthogonalize twice against everything so far
            let prev = basis.last().unwrap();
            let mut v: Vec<f64> = prev.iter().zip(&x).map(|(q, x)| q * x).collect();
            for _ in 0..2 {
                for b in &basis {
                    let c = dot(&v, b);
                    v.iter_mut().zip(b).for_each(|(v, b)| *v -= c * b);
                }
            }
            let norm = dot(&v, &v).sqrt();
            if !(norm > 1e-12) {
                return Err(SelectError::IllConditioned(norm));
            }
            q = v.into_iter().map(|v| v / norm).collect();
        }
        let c = dot(&resid, &q);
        resid.iter_mut().zip(&q).for_each(|(r, q)| *r -= c * q);
        basis.push(q.clone());
    }
    // second projection pass removes what round-off left behind
    for b in &basis {
        let c = dot(&resid, b);
        resid.iter_mut().zip(b).for_each(|(r, b)| *r -= c * b);
    }
    let deviation = basis
        .iter()
        .enumerate()
        .flat_map(|(i, a)| basis[..=i].iter().enumerate().map(move |(j, b)| (i, j, a, b)))
        .map(|(i, j, a, b)| (dot(a, b) - if i == j { 1.0 } else { 0.0 }).abs())
        .fold(0.0f64, f64::max);
    if deviation > 1e-8 {
        return Err(SelectError::IllConditioned(deviation));
    }
    let fit_rss = dot(&resid, &resid);
    let dof_used = n - need;
    Ok(NoiseEstimate {
        sigma2: fit_rss / dof_used as f64,
        poly_degree: degree,
        fit_rss,
        dof_used,
    })
}

/// Spectral form of the quadratic deconvolution smoother for one `(G, P, Y)`,
/// reusable across any number of `lambda` values.
#[derive(Debug, Clone)]
pub struct SpectralSmoother {
    /// `P^{-1} V`, one column per singular value.
    pinv_v: DMatrix<f64>,
    u: DMatrix<f64>,
    singular: Vec<f64>,
    /// `U'Y`
    uty: Vec<f64>,
    /// Squared norm of the part of `Y` outside the range of `G`.
    out_of_range: f64,
    n_unknowns: usize,
}

impl SpectralSmoother {
    pub fn new(problem: &DeconvProblem) -> Result<Self, SelectError> {
        if problem.loss != Loss::Quadratic {
            return Err(SelectError::WrongLoss);
        }
        problem.validate()?;
        let g = problem.conv_matrix();
        let p = problem.penalty_matrix()?;
        let m = p.nrows();
        // K' = P^{-T} G'
        let kt = p
            .transpose()
            .solve_upper_triangular(&g.transpose())
            .ok_or(DeconvError::SingularSystem { lambda: problem.lambda })?;
        let k = kt.transpose();
        let svd = k.svd(true, true);
        let u = svd.u.unwrap();
        let vt = svd.v_t.unwrap();
        let pinv_v = p
            .solve_lower_triangular(&vt.transpose())
            .ok_or(DeconvError::SingularSystem { lambda: problem.lambda })?;
        let y = DVector::from_column_slice(&problem.y);
        let uty = u.transpose() * &y;
        let out_of_range = (&y - &u * &uty).norm_squared();
        Ok(SpectralSmoother {
            pinv_v,
            u,
            singular: svd.singular_values.as_slice().to_vec(),
            uty: uty.as_slice().to_vec(),
            out_of_range,
            n_unknowns: m,
        })
    }

    pub fn singular_values(&self) -> &[f64] {
        &self.singular
    }

    /// Numerical rank of `G`.
    pub fn rank(&self) -> usize {
        let smax = self.singular.iter().fold(0.0f64, |a, s| a.max(*s));
        let tol = smax * f64::EPSILON * self.u.nrows().max(self.n_unknowns) as f64;
        self.singular.iter().filter(|s| **s > tol).count()
    }

    fn check(&self, lambda: f64) -> Result<(), DeconvError> {
        if lambda < 0.0 || !lambda.is_finite() {
            return Err(DeconvError::BadLambda(lambda));
        }
        if lambda == 0.0 && self.rank() < self.n_unknowns {
            return Err(DeconvError::SingularSystem { lambda });
        }
        Ok(())
    }

    pub fn dof(&self, lambda: f64) -> Result<f64, DeconvError> {
        self.check(lambda)?;
        Ok(self.singular.iter().map(|s| s * s / (s * s + lambda)).sum())
    }

    pub fn rss(&self, lambda: f64) -> Result<f64, DeconvError> {
        self.check(lambda)?;
        let inside: f64 = self
            .singular
            .iter()
            .zip(&self.uty)
            .map(|(s, b)| {
                let shrink = lambda / (s * s + lambda);
                (shrink * b).powi(2)
            })
            .sum();
        Ok(inside + self.out_of_range)
    }

    pub fn solution(&self, lambda: f64) -> Result<Vec<f64>, DeconvError> {
        self.check(lambda)?;
        let coef = DVector::from_iterator(
            self.singular.len(),
            self.singular
                .iter()
                .zip(&self.uty)
                .map(|(s, b)| s * b / (s * s + lambda)),
        );
        Ok((&self.pinv_v * coef).as_slice().to_vec())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CpCurve {
    pub lambdas: Vec<f64>,
    pub cp: Vec<f64>,
    pub dofs: Vec<f64>,
    pub rss: Vec<f64>,
    pub selected_lambda: f64,
}

impl CpCurve {
    pub fn selected_index(&self) -> usize {
        self.lambdas
            .iter()
            .position(|l| *l == self.selected_lambda)
            .unwrap_or(0)
    }

    /// `lambda,cp,dof,rss` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("lambda,cp,dof,rss\n");
        for i in 0..self.lambdas.len() {
            out.push_str(&format!(
                "{:e},{:.10e},{:.10e},{:.10e}\n",
                self.lambdas[i], self.cp[i], self.dofs[i], self.rss[i]
            ));
        }
        out
    }
}

/// `points` values spaced evenly in log between `lo * s` and `hi * s`, where
/// `s = trace(G'G) / trace(P'P)` makes the grid scale-free.
pub fn default_lambda_grid(template: &DeconvProblem, points: usize, lo: f64, hi: f64) -> Result<Vec<f64>, SelectError> {
    let g = template.conv_matrix();
    let p = template.penalty_matrix()?;
    let scale = g.norm_squared() / p.norm_squared();
    Ok(log_grid(lo * scale, hi * scale, points))
}

pub fn log_grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    if points == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..points)
        .map(|i| (a + (b - a) * i as f64 / (points - 1) as f64).exp())
        .collect()
}

pub const DEFAULT_GRID_POINTS: usize = 40;
pub const DEFAULT_GRID_LO: f64 = 1e-4;
pub const DEFAULT_GRID_HI: f64 = 1e6;

/// Evaluate Cp over `lambdas` and pick its minimizer, preferring the larger
/// `lambda` on ties. Points that cannot be solved are skipped.
pub fn mallows_cp(template: &DeconvProblem, lambdas: &[f64], sigma2: f64) -> Result<CpCurve, SelectError> {
    if !(sigma2 > 0.0) || sigma2.is_nan() {
        return Err(SelectError::BadSigma2(sigma2));
    }
    if lambdas.is_empty()
        || lambdas.iter().any(|l| !(*l > 0.0) || !l.is_finite())
        || lambdas.windows(2).any(|w| w[0] >= w[1])
    {
        return Err(SelectError::BadGrid);
    }
    let smoother = SpectralSmoother::new(template)?;
    cp_curve(&smoother, template.y.len(), lambdas, sigma2)
}

pub fn cp_curve(smoother: &SpectralSmoother, n: usize, lambdas: &[f64], sigma2: f64) -> Result<CpCurve, SelectError> {
    let mut curve = CpCurve {
        lambdas: Vec::new(),
        cp: Vec::new(),
        dofs: Vec::new(),
        rss: Vec::new(),
        selected_lambda: f64::NAN,
    };
    let mut best = f64::INFINITY;
    for &lambda in lambdas {
        let (rss, dof) = match (smoother.rss(lambda), smoother.dof(lambda)) {
            (Ok(r), Ok(d)) => (r, d),
            (Err(e), _) | (_, Err(e)) => {
                warn!("skipping lambda {lambda:e}: {e}");
                continue;
            }
        };
        let cp = rss / sigma2 - n as f64 + 2.0 * dof;
        if cp <= best {
            best = cp;
            curve.selected_lambda = lambda;
        }
        curve.lambdas.push(lambda);
        curve.cp.push(cp);
        curve.dofs.push(dof);
        curve.rss.push(rss);
    }
    if curve.lambdas.is_empty() {
        return Err(SelectError::NoValidPoint);
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deconv::{solve_quadratic_closed_form, PenaltyKind};
    use crate::kernel::ExpKernel;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn exact_polynomial_has_no_residual() {
        let y: Vec<f64> = (0..60)
            .map(|i| {
                let t = i as f64 / 10.0;
                (0..=20)
                    .map(|k| (-0.6f64).powi(k) * t.powi(k) / (1.0 + k as f64))
                    .sum::<f64>()
                    + 3.0
            })
            .collect();
        let est = estimate_sigma2(&y, 20).unwrap();
        let norm2: f64 = y.iter().map(|v| v * v).sum();
        assert!(est.sigma2 <= 1e-16 * norm2 / 60.0, "sigma2 {}", est.sigma2);
        assert_eq!(est.dof_used, 39);
    }

    #[test]
    fn too_few_points() {
        assert!(matches!(
            estimate_sigma2(&[1.0; 21], 20),
            Err(SelectError::TooFewPoints {
                got: 21,
                need: 21,
                degree: 20
            })
        ));
        assert!(estimate_sigma2(&[1.0; 22], 20).is_ok());
    }

    #[test]
    fn recovers_known_variance() {
        let normal = Normal::new(0.0, 2.0).unwrap();
        let mut hits = 0;
        for seed in 0..200u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let y: Vec<f64> = (0..200).map(|_| 7.0 + normal.sample(&mut rng)).collect();
            let est = estimate_sigma2(&y, 20).unwrap();
            if (3.0..=5.0).contains(&est.sigma2) {
                hits += 1;
            }
        }
        assert!(hits >= 190, "{hits}/200");
    }

    fn problem(lambda: f64, pre: i64, penalty: PenaltyKind) -> DeconvProblem {
        let k = ExpKernel::new(0.8, 0.1, 0).unwrap();
        let y: Vec<f64> = (0..25)
            .map(|t| 5.0 + 3.0 * (t as f64 / 5.0).sin() + 0.3 * ((t * 17) % 7) as f64)
            .collect();
        DeconvProblem::new(y, k, pre, penalty, lambda).unwrap()
    }

    #[test]
    fn spectral_route_matches_closed_form() {
        for penalty in [
            PenaltyKind::Ridge,
            PenaltyKind::FirstDifference,
            PenaltyKind::SecondDifference,
        ] {
            for pre in [-1, 4] {
                let p = problem(0.5, pre, penalty);
                let sm = SpectralSmoother::new(&p).unwrap();
                let cf = solve_quadratic_closed_form(&p).unwrap();
                let c = sm.solution(0.5).unwrap();
                for (a, b) in c.iter().zip(&cf.c) {
                    assert!((a - b).abs() < 1e-8 * b.abs().max(1.0), "{penalty:?} {pre}: {a} vs {b}");
                }
                assert!((sm.dof(0.5).unwrap() - cf.dof.unwrap()).abs() < 1e-8);
                assert!((sm.rss(0.5).unwrap() - cf.rss).abs() < 1e-8 * cf.rss.max(1.0));
            }
        }
    }

    #[test]
    fn dof_at_zero_is_rank() {
        let p = problem(1.0, -1, PenaltyKind::SecondDifference);
        let sm = SpectralSmoother::new(&p).unwrap();
        assert!((sm.dof(0.0).unwrap() - 25.0).abs() < 1e-9);
        let p = problem(1.0, 3, PenaltyKind::SecondDifference);
        let sm = SpectralSmoother::new(&p).unwrap();
        assert_eq!(sm.rank(), 25);
        assert!(sm.dof(0.0).is_err());
    }

    #[test]
    fn monotone_rss_and_dof() {
        let p = problem(1.0, 5, PenaltyKind::SecondDifference);
        let grid = default_lambda_grid(&p, 40, DEFAULT_GRID_LO, DEFAULT_GRID_HI).unwrap();
        let curve = mallows_cp(&p, &grid, 0.1).unwrap();
        assert!(curve.rss.windows(2).all(|w| w[0] <= w[1]));
        assert!(curve.dofs.windows(2).all(|w| w[0] >= w[1]));
        assert!(curve.dofs.iter().all(|d| *d > 0.0 && *d <= 25.0));
        let i = curve.selected_index();
        assert!(curve.cp.iter().all(|c| curve.cp[i] <= *c));
    }

    #[test]
    fn huge_sigma_picks_largest_lambda() {
        let p = problem(1.0, -1, PenaltyKind::Ridge);
        let grid = log_grid(1e-3, 1e3, 13);
        let curve = mallows_cp(&p, &grid, 1e30).unwrap();
        assert_eq!(curve.selected_lambda, *grid.last().unwrap());
    }

    #[test]
    fn smaller_noise_picks_smaller_lambda() {
        let k = ExpKernel::new(0.7, 0.2, 0).unwrap();
        let truth: Vec<f64> = (0..30).map(|t| 100.0 + 40.0 * (t as f64 / 6.0).sin()).collect();
        let y = crate::kernel::convolve(&truth, &k);
        let p = DeconvProblem::new(y, k, -1, PenaltyKind::SecondDifference, 1.0).unwrap();
        let grid = log_grid(1e-10, 1e2, 25);
        let picks: Vec<f64> = [1e2, 1.0, 1e-4, 1e-8, 1e-14]
            .iter()
            .map(|s2| mallows_cp(&p, &grid, *s2).unwrap().selected_lambda)
            .collect();
        assert!(picks.windows(2).all(|w| w[0] >= w[1]), "{picks:?}");
        assert!(picks[4] < picks[0]);
    }

    #[test]
    fn scale_equivariance() {
        let p = problem(1.0, 2, PenaltyKind::FirstDifference);
        let grid = log_grid(1e-3, 1e3, 20);
        let a = mallows_cp(&p, &grid, 0.2).unwrap();
        let scaled = p.with_y(p.y.iter().map(|v| 10.0 * v).collect());
        let b = mallows_cp(&scaled, &grid, 20.0).unwrap();
        assert_eq!(a.selected_lambda, b.selected_lambda);
        for (x, y) in a.cp.iter().zip(&b.cp) {
            assert!((x - y).abs() < 1e-8 * x.abs().max(1.0));
        }
    }

    #[test]
    fn bad_arguments() {
        let p = problem(1.0, -1, PenaltyKind::Ridge);
        assert_eq!(mallows_cp(&p, &[1.0], 0.0).unwrap_err(), SelectError::BadSigma2(0.0));
        assert_eq!(mallows_cp(&p, &[], 1.0).unwrap_err(), SelectError::BadGrid);
        assert_eq!(mallows_cp(&p, &[0.0, 1.0], 1.0).unwrap_err(), SelectError::BadGrid);
        assert_eq!(mallows_cp(&p, &[2.0, 1.0], 1.0).unwrap_err(), SelectError::BadGrid);
    }

    #[test]
    fn csv_export() {
        let p = problem(1.0, -1, PenaltyKind::Ridge);
        let curve = mallows_cp(&p, &[0.1, 1.0], 1.0).unwrap();
        let csv = curve.to_csv();
        assert!(csv.starts_with("lambda,cp,dof,rss\n"));
        assert_eq!(csv.lines().count(), 3);
    }
}
