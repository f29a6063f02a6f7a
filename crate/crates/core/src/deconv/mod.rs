//! Regularized deconvolution: recover the input series from observed
//! outputs and a known kernel.
//!
//! Quadratic loss solves `min |Y - G C|^2 + lambda |P C|^2`, first in closed
//! form and, when that produces a negative entry and nonnegativity is
//! requested, again as a nonnegative least-squares problem on the stacked
//! system `[G; sqrt(lambda) P] C ~ [Y; 0]`. The L1 variant
//! `min |Y - G C|_1 + |lambda P C|_1, C >= 0` goes through a linear
//! program with auxiliary variables `b >= |Y - GC|` and `d >= |lambda PC|`.

pub mod nnls;
pub mod simplex;

use chrono::Duration;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernel::{build_conv_matrix, ConvMatrixSpec, ExpKernel, KernelError};
use crate::series::{DailySeries, Quantity};
use nnls::{nnls_gram, NnlsError};
use simplex::{InequalityLp, LpError};

#[derive(Debug, Error, PartialEq)]
pub enum DeconvError {
    #[error("penalty of kind {kind:?} needs at least {min} unknowns, got {got}")]
    SizeTooSmall { kind: PenaltyKind, min: usize, got: usize },
    #[error("normal equations are singular (lambda = {lambda}); use lambda > 0")]
    SingularSystem { lambda: f64 },
    #[error("solver did not converge within {0} iterations")]
    MaxIterations(usize),
    #[error("linear program is unbounded")]
    Unbounded,
    #[error("linear program is infeasible")]
    Infeasible,
    #[error("lambda must be finite and >= 0, got {0}")]
    BadLambda(f64),
    #[error("observation vector has length {got}, expected {expected}")]
    LengthMismatch { got: usize, expected: usize },
    #[error("observations contain non-finite values")]
    NonFiniteInput,
    #[error("{solver:?} cannot handle {loss:?} loss")]
    WrongLoss { solver: SolverKind, loss: Loss },
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

impl From<NnlsError> for DeconvError {
    fn from(e: NnlsError) -> Self {
        match e {
            NnlsError::MaxIterations(n) => DeconvError::MaxIterations(n),
            NnlsError::Dimension => DeconvError::LengthMismatch { got: 0, expected: 0 },
        }
    }
}

impl From<LpError> for DeconvError {
    fn from(e: LpError) -> Self {
        match e {
            LpError::MaxIterations(n) => DeconvError::MaxIterations(n),
            LpError::Unbounded => DeconvError::Unbounded,
            LpError::Infeasible | LpError::Dimension => DeconvError::Infeasible,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyKind {
    Ridge,
    FirstDifference,
    #[default]
    SecondDifference,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    #[default]
    Quadratic,
    L1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    ClosedForm,
    QpActiveSet,
    Lp,
}

/// `m x m` penalty operator.
///
/// The first-difference operator keeps `(1, 0, ...)` as its first row, so it
/// is lower bidiagonal with unit diagonal and invertible; the
/// second-difference operator is its square.
pub fn penalty_matrix(kind: PenaltyKind, m: usize) -> Result<DMatrix<f64>, DeconvError> {
    let min = match kind {
        PenaltyKind::Ridge => 1,
        _ => 2,
    };
    if m < min {
        return Err(DeconvError::SizeTooSmall { kind, min, got: m });
    }
    Ok(match kind {
        PenaltyKind::Ridge => DMatrix::identity(m, m),
        PenaltyKind::FirstDifference => first_difference(m),
        PenaltyKind::SecondDifference => {
            let d = first_difference(m);
            &d * &d
        }
    })
}

fn first_difference(m: usize) -> DMatrix<f64> {
    DMatrix::from_fn(m, m, |i, j| {
        if i == j {
            1.0
        } else if i == j + 1 {
            -1.0
        } else {
            0.0
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeconvProblem {
    pub y: Vec<f64>,
    pub spec: ConvMatrixSpec,
    pub penalty: PenaltyKind,
    pub lambda: f64,
    pub loss: Loss,
    pub nonneg: bool,
}

impl DeconvProblem {
    pub fn new(
        y: Vec<f64>,
        kernel: ExpKernel,
        pre_window: i64,
        penalty: PenaltyKind,
        lambda: f64,
    ) -> Result<Self, DeconvError> {
        let spec = ConvMatrixSpec::new(kernel, y.len(), pre_window)?;
        let p = DeconvProblem {
            y,
            spec,
            penalty,
            lambda,
            loss: Loss::Quadratic,
            nonneg: true,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn with_lambda(&self, lambda: f64) -> Self {
        DeconvProblem { lambda, ..self.clone() }
    }

    pub fn with_y(&self, y: Vec<f64>) -> Self {
        DeconvProblem { y, ..self.clone() }
    }

    pub fn validate(&self) -> Result<(), DeconvError> {
        self.spec.validate()?;
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(DeconvError::BadLambda(self.lambda));
        }
        if self.y.len() != self.spec.n_obs {
            return Err(DeconvError::LengthMismatch {
                got: self.y.len(),
                expected: self.spec.n_obs,
            });
        }
        if self.y.iter().any(|v| !v.is_finite()) {
            return Err(DeconvError::NonFiniteInput);
        }
        Ok(())
    }

    pub fn n_unknowns(&self) -> usize {
        self.spec.n_unknowns()
    }

    pub fn conv_matrix(&self) -> DMatrix<f64> {
        build_conv_matrix(&self.spec)
    }

    pub fn penalty_matrix(&self) -> Result<DMatrix<f64>, DeconvError> {
        penalty_matrix(self.penalty, self.n_unknowns())
    }

    /// `|Y - GC|^2 + lambda |PC|^2` for quadratic loss,
    /// `|Y - GC|_1 + lambda |PC|_1` for L1.
    pub fn objective(&self, c: &[f64]) -> Result<f64, DeconvError> {
        let g = self.conv_matrix();
        let p = self.penalty_matrix()?;
        let c = DVector::from_column_slice(c);
        let r = DVector::from_column_slice(&self.y) - &g * &c;
        let pc = &p * &c;
        Ok(match self.loss {
            Loss::Quadratic => r.norm_squared() + self.lambda * pc.norm_squared(),
            Loss::L1 => r.lp_norm(1) + self.lambda * pc.lp_norm(1),
        })
    }
}

/// Auxiliary values of the L1 linear program at its optimum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LpDiagnostics {
    pub objective: f64,
    pub b: Vec<f64>,
    pub d: Vec<f64>,
    /// Largest of `|b_t - |y_t - (Gc)_t||` and `|d_t - |lambda (Pc)_t||`.
    pub split_gap: f64,
    pub pivots: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeconvSolution {
    /// Reconstructed inputs, `L + 1` pre-window values first.
    pub c: Vec<f64>,
    pub residuals: Vec<f64>,
    pub rss: f64,
    /// `|PC|^2` for quadratic loss, `|PC|_1` for L1.
    pub penalty_value: f64,
    /// Trace of the hat matrix. For the constrained solver this is the
    /// trace restricted to the free coordinates.
    pub dof: Option<f64>,
    /// Coordinates held at zero by the nonnegativity constraint.
    pub active_set: Vec<usize>,
    pub solver: SolverKind,
    pub lp: Option<LpDiagnostics>,
}

struct Assembled {
    g: DMatrix<f64>,
    p: DMatrix<f64>,
    y: DVector<f64>,
}

fn assemble(problem: &DeconvProblem) -> Result<Assembled, DeconvError> {
    problem.validate()?;
    Ok(Assembled {
        g: problem.conv_matrix(),
        p: problem.penalty_matrix()?,
        y: DVector::from_column_slice(&problem.y),
    })
}

fn finish(
    a: &Assembled,
    problem: &DeconvProblem,
    c: DVector<f64>,
    dof: Option<f64>,
    solver: SolverKind,
) -> DeconvSolution {
    let r = &a.y - &a.g * &c;
    let pc = &a.p * &c;
    let penalty_value = match problem.loss {
        Loss::Quadratic => pc.norm_squared(),
        Loss::L1 => pc.lp_norm(1),
    };
    let active_set = if problem.nonneg {
        c.iter()
            .enumerate()
            .filter(|(_, v)| **v == 0.0)
            .map(|(i, _)| i)
            .collect()
    } else {
        Vec::new()
    };
    DeconvSolution {
        c: c.as_slice().to_vec(),
        rss: r.norm_squared(),
        residuals: r.as_slice().to_vec(),
        penalty_value,
        dof,
        active_set,
        solver,
        lp: None,
    }
}

/// Relative pivot below which the normal equations count as singular.
const SINGULAR_RTOL: f64 = 1e-14;

/// `C = (G'G + lambda P'P)^{-1} G'Y`, nonnegativity not enforced.
pub fn solve_quadratic_closed_form(problem: &DeconvProblem) -> Result<DeconvSolution, DeconvError> {
    if problem.loss != Loss::Quadratic {
        return Err(DeconvError::WrongLoss {
            solver: SolverKind::ClosedForm,
            loss: problem.loss,
        });
    }
    let a = assemble(problem)?;
    let n = problem.spec.n_obs;
    let m = problem.n_unknowns();
    let lambda = problem.lambda;

    if lambda == 0.0 && problem.spec.pre_window == -1 {
        // square lower-triangular G
        if a.g.diagonal().iter().any(|d| *d == 0.0) {
            return Err(DeconvError::SingularSystem { lambda });
        }
        let c =
            a.g.solve_lower_triangular(&a.y)
                .ok_or(DeconvError::SingularSystem { lambda })?;
        let mut sol = finish(&a, problem, c, Some(n as f64), SolverKind::ClosedForm);
        sol.active_set.clear();
        return Ok(sol);
    }
    if lambda == 0.0 && m > n {
        return Err(DeconvError::SingularSystem { lambda });
    }

    let gtg = a.g.transpose() * &a.g;
    let normal = &gtg + (a.p.transpose() * &a.p) * lambda;
    let chol = normal
        .clone()
        .cholesky()
        .ok_or(DeconvError::SingularSystem { lambda })?;
    let l = chol.l_dirty();
    let diag: Vec<f64> = (0..m).map(|i| l[(i, i)]).collect();
    let dmax = diag.iter().fold(0.0f64, |x, v| x.max(*v));
    let dmin = diag.iter().fold(f64::INFINITY, |x, v| x.min(*v));
    if !(dmin * dmin > SINGULAR_RTOL * dmax * dmax) {
        return Err(DeconvError::SingularSystem { lambda });
    }
    let rhs = a.g.transpose() * &a.y;
    let mut c = chol.solve(&rhs);
    let r = &rhs - &normal * &c;
    c += chol.solve(&r);
    // dof = trace(G (G'G + lambda P'P)^{-1} G') = trace((...)^{-1} G'G)
    let dof = chol.solve(&gtg).trace();
    let mut sol = finish(&a, problem, c, Some(dof), SolverKind::ClosedForm);
    sol.active_set.clear();
    Ok(sol)
}

/// Quadratic deconvolution with `C >= 0`.
///
/// The active-set iteration is seeded with the positive support of the
/// unconstrained solution when one exists.
pub fn solve_qp_nonneg(problem: &DeconvProblem) -> Result<DeconvSolution, DeconvError> {
    if problem.loss != Loss::Quadratic {
        return Err(DeconvError::WrongLoss {
            solver: SolverKind::QpActiveSet,
            loss: problem.loss,
        });
    }
    let seed = solve_quadratic_closed_form(problem)
        .ok()
        .map(|s| s.c.iter().map(|v| *v > 0.0).collect::<Vec<bool>>());
    solve_qp_seeded(problem, seed.as_deref())
}

fn solve_qp_seeded(problem: &DeconvProblem, seed: Option<&[bool]>) -> Result<DeconvSolution, DeconvError> {
    let a = assemble(problem)?;
    let m = problem.n_unknowns();
    let gtg = a.g.transpose() * &a.g;
    let q_mat = &gtg + (a.p.transpose() * &a.p) * problem.lambda;
    let q_vec = a.g.transpose() * &a.y;
    let out = nnls_gram(&q_mat, &q_vec, seed, 20 * m + 100)?;

    let free: Vec<usize> = (0..m).filter(|&i| !out.active[i]).collect();
    let dof = if free.is_empty() {
        Some(0.0)
    } else {
        let sub = DMatrix::from_fn(free.len(), free.len(), |i, j| q_mat[(free[i], free[j])]);
        let gsub = DMatrix::from_fn(free.len(), free.len(), |i, j| gtg[(free[i], free[j])]);
        sub.cholesky().map(|ch| ch.solve(&gsub).trace())
    };
    let mut x = out.x;
    for &i in (0..m).filter(|&i| out.active[i]).collect::<Vec<_>>().iter() {
        x[i] = 0.0;
    }
    let mut sol = finish(&a, problem, x, dof, SolverKind::QpActiveSet);
    sol.active_set = (0..m).filter(|&i| out.active[i]).collect();
    Ok(sol)
}

/// Gradient of `|Y - GC|^2 + lambda |PC|^2` (halved) and its scale, for
/// checking stationarity of a candidate solution.
pub fn kkt_residuals(problem: &DeconvProblem, c: &[f64]) -> Result<(Vec<f64>, f64), DeconvError> {
    let a = assemble(problem)?;
    let q_mat = a.g.transpose() * &a.g + (a.p.transpose() * &a.p) * problem.lambda;
    let q_vec = a.g.transpose() * &a.y;
    let x = DVector::from_column_slice(c);
    let grad = &q_mat * &x - &q_vec;
    let scale = nnls::gradient_scale(&q_mat, &q_vec, &x);
    Ok((grad.as_slice().to_vec(), scale))
}

/// L1 loss and L1 penalty through the linear program
///
/// ```text
/// min sum b + sum d
///   b >= y - Gc,  b >= Gc - y,  d >= lambda Pc,  d >= -lambda Pc,  c, b, d >= 0
/// ```
pub fn solve_lp(problem: &DeconvProblem) -> Result<DeconvSolution, DeconvError> {
    if problem.loss != Loss::L1 {
        return Err(DeconvError::WrongLoss {
            solver: SolverKind::Lp,
            loss: problem.loss,
        });
    }
    let a = assemble(problem)?;
    let n = problem.spec.n_obs;
    let m = problem.n_unknowns();
    let lp = lp_program(&a.g, &a.p, &problem.y, problem.lambda);
    let s = lp.solve()?;

    let c = DVector::from_column_slice(&s.x[..m]);
    let b = s.x[m..m + n].to_vec();
    let d = s.x[m + n..].to_vec();
    let r = &a.y - &a.g * &c;
    let lpc = (&a.p * &c) * problem.lambda;
    let gap_b = b.iter().zip(r.iter()).map(|(b, r)| (b - r.abs()).abs());
    let gap_d = d.iter().zip(lpc.iter()).map(|(d, v)| (d - v.abs()).abs());
    let split_gap = gap_b.chain(gap_d).fold(0.0f64, f64::max);

    let mut sol = finish(&a, problem, c, None, SolverKind::Lp);
    sol.lp = Some(LpDiagnostics {
        objective: s.objective,
        b,
        d,
        split_gap,
        pivots: s.pivots,
    });
    Ok(sol)
}

/// The inequality-form program behind [`solve_lp`]; variables are ordered
/// `c (m) | b (n) | d (m)`.
pub fn lp_program(g: &DMatrix<f64>, p: &DMatrix<f64>, y: &[f64], lambda: f64) -> InequalityLp {
    let n = g.nrows();
    let m = g.ncols();
    let nvar = m + n + m;
    let mut cost = vec![0.0; nvar];
    cost[m..].iter_mut().for_each(|c| *c = 1.0);
    let mut rows = Vec::with_capacity(2 * n + 2 * m);
    let mut rhs = Vec::with_capacity(2 * n + 2 * m);
    for t in 0..n {
        // (L1) b_t + (Gc)_t >= y_t
        let mut r = vec![0.0; nvar];
        for j in 0..m {
            r[j] = g[(t, j)];
        }
        r[m + t] = 1.0;
        rows.push(r);
        rhs.push(y[t]);
        // (L2) b_t - (Gc)_t >= -y_t
        let mut r = vec![0.0; nvar];
        for j in 0..m {
            r[j] = -g[(t, j)];
        }
        r[m + t] = 1.0;
        rows.push(r);
        rhs.push(-y[t]);
    }
    for t in 0..m {
        // (L3) d_t - lambda (Pc)_t >= 0
        let mut r = vec![0.0; nvar];
        for j in 0..m {
            r[j] = -lambda * p[(t, j)];
        }
        r[m + n + t] = 1.0;
        rows.push(r);
        rhs.push(0.0);
        // (L4) d_t + lambda (Pc)_t >= 0
        let mut r = vec![0.0; nvar];
        for j in 0..m {
            r[j] = lambda * p[(t, j)];
        }
        r[m + n + t] = 1.0;
        rows.push(r);
        rhs.push(0.0);
    }
    InequalityLp { cost, a: rows, rhs }
}

/// Solve with the loss-appropriate solver. For quadratic loss the closed
/// form is tried first and the constrained solver only runs when that
/// leaves a negative entry and `nonneg` is set.
pub fn solve(problem: &DeconvProblem) -> Result<DeconvSolution, DeconvError> {
    match problem.loss {
        Loss::L1 => solve_lp(problem),
        Loss::Quadratic => {
            let sol = solve_quadratic_closed_form(problem)?;
            if !problem.nonneg || sol.c.iter().all(|v| *v >= 0.0) {
                return Ok(sol);
            }
            let seed: Vec<bool> = sol.c.iter().map(|v| *v > 0.0).collect();
            solve_qp_seeded(problem, Some(&seed))
        }
    }
}

/// A solved deconvolution with dates attached to the reconstructed input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reconstruction {
    pub series: DailySeries,
    pub solution: DeconvSolution,
    pub kernel: ExpKernel,
    pub lambda: f64,
}

/// Reconstruct daily inputs behind a cohort's observed admissions.
///
/// Input value `k` sits on day `start(Y) - D - (L + 1) + k`: the `L + 1`
/// pre-window unknowns come first, and the whole grid is shifted by the
/// kernel delay so that values land on the dates the input was recorded.
pub fn reconstruct_cohort(
    observed: &DailySeries,
    kernel: &ExpKernel,
    penalty: PenaltyKind,
    lambda: f64,
    pre_window: i64,
    loss: Loss,
) -> Result<Reconstruction, DeconvError> {
    reconstruct_values(
        observed.values.clone(),
        observed,
        kernel,
        penalty,
        lambda,
        pre_window,
        loss,
    )
}

/// [`reconstruct_cohort`] on replacement observations `y` (which may be
/// negative, as bootstrap draws can be) laid on the dates of `like`.
pub fn reconstruct_values(
    y: Vec<f64>,
    like: &DailySeries,
    kernel: &ExpKernel,
    penalty: PenaltyKind,
    lambda: f64,
    pre_window: i64,
    loss: Loss,
) -> Result<Reconstruction, DeconvError> {
    if y.len() != like.len() {
        return Err(DeconvError::LengthMismatch {
            got: y.len(),
            expected: like.len(),
        });
    }
    let mut problem = DeconvProblem::new(y, *kernel, pre_window, penalty, lambda)?;
    problem.loss = loss;
    let solution = solve(&problem)?;
    Ok(attach_dates(like, kernel, pre_window, lambda, solution))
}

pub(crate) fn attach_dates(
    observed: &DailySeries,
    kernel: &ExpKernel,
    pre_window: i64,
    lambda: f64,
    solution: DeconvSolution,
) -> Reconstruction {
    let start = observed.start - Duration::days(kernel.delay() + pre_window + 1);
    let series = DailySeries {
        start,
        // the constrained solvers return exact zeros; clamp round-off only
        values: solution.c.iter().map(|v| v.max(0.0)).collect(),
        quantity: Quantity::NewCases,
        cohort: observed.cohort,
        smoothed: observed.smoothed,
    };
    Reconstruction {
        series,
        solution,
        kernel: *kernel,
        lambda,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kern(a: f64, b: f64) -> ExpKernel {
        ExpKernel::new(a, b, 0).unwrap()
    }

    #[test]
    fn penalty_examples() {
        let d3 = penalty_matrix(PenaltyKind::FirstDifference, 3).unwrap();
        assert_eq!(
            d3,
            DMatrix::from_row_slice(3, 3, &[1., 0., 0., -1., 1., 0., 0., -1., 1.])
        );
        let d33 = penalty_matrix(PenaltyKind::SecondDifference, 3).unwrap();
        assert_eq!(
            d33,
            DMatrix::from_row_slice(3, 3, &[1., 0., 0., -2., 1., 0., 1., -2., 1.])
        );
        assert_eq!(penalty_matrix(PenaltyKind::Ridge, 2).unwrap(), DMatrix::identity(2, 2));
        assert!(matches!(
            penalty_matrix(PenaltyKind::SecondDifference, 1),
            Err(DeconvError::SizeTooSmall { .. })
        ));
    }

    #[test]
    fn lambda_zero_square_inverts_exactly() {
        let k = kern(0.8, 0.3);
        let truth = [5.0, 3.0, 8.0, 1.0, 0.0, 2.0];
        let y = crate::kernel::convolve(&truth, &k);
        let p = DeconvProblem::new(y.clone(), k, -1, PenaltyKind::Ridge, 0.0).unwrap();
        let s = solve_quadratic_closed_form(&p).unwrap();
        for (a, b) in s.c.iter().zip(truth) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(s.dof, Some(6.0));
        assert!(s.rss < 1e-24);
    }

    #[test]
    fn lambda_zero_with_prewindow_is_singular() {
        let p = DeconvProblem::new(vec![1.0; 5], kern(0.5, 1.0), 2, PenaltyKind::Ridge, 0.0).unwrap();
        assert_eq!(
            solve_quadratic_closed_form(&p).unwrap_err(),
            DeconvError::SingularSystem { lambda: 0.0 }
        );
    }

    #[test]
    fn ridge_shrinks_monotonically() {
        let y: Vec<f64> = (0..12).map(|t| (t as f64 * 0.5).sin() + 2.0).collect();
        let base = DeconvProblem::new(y, kern(0.7, 0.4), 3, PenaltyKind::Ridge, 1e-3).unwrap();
        let mut prev = f64::INFINITY;
        for lam in [1e-3, 1e-1, 1.0, 10.0, 1e3, 1e6] {
            let s = solve_quadratic_closed_form(&base.with_lambda(lam)).unwrap();
            let norm = s.c.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(norm < prev);
            prev = norm;
        }
        assert!(prev < 1e-3);
    }

    #[test]
    fn closed_form_matches_augmented_least_squares() {
        // independent route: stacked system [G; sqrt(lambda) P] solved by QR
        let y = vec![2.0, 3.5, 1.0, 4.0, 2.5];
        let p = DeconvProblem::new(y.clone(), kern(0.6, 0.9), -1, PenaltyKind::FirstDifference, 0.7).unwrap();
        let g = p.conv_matrix();
        let pm = p.penalty_matrix().unwrap();
        let stacked = DMatrix::from_fn(10, 5, |i, j| {
            if i < 5 {
                g[(i, j)]
            } else {
                0.7f64.sqrt() * pm[(i - 5, j)]
            }
        });
        let rhs = DVector::from_fn(10, |i, _| if i < 5 { y[i] } else { 0.0 });
        let qr = stacked.qr();
        let c_oracle = qr.r().solve_upper_triangular(&(qr.q().transpose() * rhs)).unwrap();
        let s = solve_quadratic_closed_form(&p).unwrap();
        for (a, b) in s.c.iter().zip(c_oracle.iter()) {
            assert!((a - b).abs() < 1e-10 * b.abs().max(1.0));
        }
    }

    #[test]
    fn qp_projection_toy() {
        // G = I through alpha = 0, beta = 1
        let p = DeconvProblem::new(vec![1.0, -1.0], kern(0.0, 1.0), -1, PenaltyKind::Ridge, 0.0).unwrap();
        let s = solve_qp_nonneg(&p).unwrap();
        assert_eq!(s.c, vec![1.0, 0.0]);
        assert_eq!(s.active_set, vec![1]);
        assert_eq!(solve(&p).unwrap().c, vec![1.0, 0.0]);
    }

    #[test]
    fn qp_equals_closed_form_when_inactive() {
        let k = kern(0.7, 0.2);
        let truth: Vec<f64> = (0..20).map(|t| 10.0 + 5.0 * (t as f64 / 4.0).sin()).collect();
        let y = crate::kernel::convolve(&truth, &k);
        let p = DeconvProblem::new(y, k, -1, PenaltyKind::SecondDifference, 0.01).unwrap();
        let cf = solve_quadratic_closed_form(&p).unwrap();
        assert!(cf.c.iter().all(|v| *v > 0.0));
        let qp = solve_qp_nonneg(&p).unwrap();
        for (a, b) in qp.c.iter().zip(&cf.c) {
            assert!((a - b).abs() < 1e-9 * b.abs().max(1.0));
        }
        let auto = solve(&p).unwrap();
        assert_eq!(auto.solver, SolverKind::ClosedForm);
    }

    #[test]
    fn lp_zero_data() {
        let mut p = DeconvProblem::new(vec![0.0; 4], kern(0.5, 1.0), -1, PenaltyKind::FirstDifference, 0.3).unwrap();
        p.loss = Loss::L1;
        let s = solve_lp(&p).unwrap();
        assert!(s.c.iter().all(|v| *v == 0.0));
        assert_eq!(s.lp.unwrap().objective, 0.0);
    }

    #[test]
    fn lp_noise_free_exact_fit() {
        let k = kern(0.6, 0.5);
        let c0 = [1.0, 4.0, 2.0, 0.0, 3.0, 1.5];
        let y = crate::kernel::convolve(&c0, &k);
        let mut p = DeconvProblem::new(y, k, -1, PenaltyKind::Ridge, 0.0).unwrap();
        p.loss = Loss::L1;
        let s = solve_lp(&p).unwrap();
        let lp = s.lp.unwrap();
        assert!(lp.objective.abs() < 1e-10);
        assert!(s.residuals.iter().all(|r| r.abs() < 1e-10));
        assert!(lp.split_gap < 1e-10);
    }

    #[test]
    fn wrong_loss_rejected() {
        let mut p = DeconvProblem::new(vec![1.0; 3], kern(0.5, 1.0), -1, PenaltyKind::Ridge, 1.0).unwrap();
        assert!(solve_lp(&p).is_err());
        p.loss = Loss::L1;
        assert!(solve_quadratic_closed_form(&p).is_err());
        assert!(solve_qp_nonneg(&p).is_err());
    }

    #[test]
    fn bad_inputs() {
        assert!(matches!(
            DeconvProblem::new(vec![1.0; 3], kern(0.5, 1.0), -1, PenaltyKind::Ridge, -1.0),
            Err(DeconvError::BadLambda(_))
        ));
        assert!(matches!(
            DeconvProblem::new(vec![1.0, f64::NAN], kern(0.5, 1.0), -1, PenaltyKind::Ridge, 1.0),
            Err(DeconvError::NonFiniteInput)
        ));
    }

    #[test]
    fn reconstruction_dates() {
        let k = ExpKernel::new(0.8, 0.05, -8).unwrap();
        let obs = DailySeries::new(
            "2020-02-01".parse().unwrap(),
            vec![0.0; 30],
            Quantity::HospitalAdmissions,
            crate::series::AgeGroup::new(3).unwrap(),
        )
        .unwrap();
        let r = reconstruct_cohort(&obs, &k, PenaltyKind::SecondDifference, 1.0, 21, Loss::Quadratic).unwrap();
        // start - D - (L + 1) = start + 8 - 22
        assert_eq!(r.series.start, "2020-01-18".parse().unwrap());
        assert_eq!(r.series.len(), 52);
        assert_eq!(r.series.end(), "2020-03-09".parse().unwrap());
        assert!(r.series.values.iter().all(|v| *v == 0.0));
        assert_eq!(r.series.quantity, Quantity::NewCases);
    }
}
