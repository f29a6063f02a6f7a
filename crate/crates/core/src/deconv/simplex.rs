//! Dense two-phase primal simplex for
//!
//! ```text
//! minimize  c'x   subject to  A x >= r,  x >= 0
//! ```
//!
//! Each row gets a surplus column. Rows whose right-hand side is positive
//! also get an artificial column, removed by phase one. Bland's rule picks
//! both the entering and the leaving variable, so the method cannot cycle.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LpError {
    #[error("linear program is infeasible")]
    Infeasible,
    #[error("linear program is unbounded")]
    Unbounded,
    #[error("simplex did not finish within {0} pivots")]
    MaxIterations(usize),
    #[error("dimension mismatch")]
    Dimension,
}

/// `A x >= r`, `x >= 0`, minimize `c'x`. `a` is row-major, `rows x c.len()`.
#[derive(Debug, Clone)]
pub struct InequalityLp {
    pub cost: Vec<f64>,
    pub a: Vec<Vec<f64>>,
    pub rhs: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct LpSolution {
    pub x: Vec<f64>,
    pub objective: f64,
    pub pivots: usize,
}

const EPS: f64 = 1e-11;

struct Tableau {
    /// rows x (cols + 1), last column is the right-hand side
    t: Vec<Vec<f64>>,
    basis: Vec<usize>,
    cols: usize,
    pivots: usize,
    max_pivots: usize,
}

impl Tableau {
    fn pivot(&mut self, row: usize, col: usize) {
        let p = self.t[row][col];
        for v in self.t[row].iter_mut() {
            *v /= p;
        }
        let prow = self.t[row].clone();
        for (i, r) in self.t.iter_mut().enumerate() {
            if i == row {
                continue;
            }
            let f = r[col];
            if f != 0.0 {
                for (v, pv) in r.iter_mut().zip(&prow) {
                    *v -= f * pv;
                }
                r[col] = 0.0;
            }
        }
        self.basis[row] = col;
        self.pivots += 1;
    }

    /// Reduced costs of `cost` with respect to the current basis.
    fn reduced(&self, cost: &[f64]) -> Vec<f64> {
        let mut d = cost.to_vec();
        d.push(0.0);
        for (i, &b) in self.basis.iter().enumerate() {
            let cb = cost[b];
            if cb != 0.0 {
                for (dj, tj) in d.iter_mut().zip(&self.t[i]) {
                    *dj -= cb * tj;
                }
            }
        }
        d
    }

    /// Minimize `cost` over columns where `allowed` holds.
    fn optimize(&mut self, cost: &[f64], allowed: &[bool]) -> Result<(), LpError> {
        let scale = cost.iter().fold(1.0f64, |a, c| a.max(c.abs()));
        loop {
            let d = self.reduced(cost);
            let Some(enter) = (0..self.cols).find(|&j| allowed[j] && d[j] < -EPS * scale) else {
                return Ok(());
            };
            let mut leave: Option<(usize, f64)> = None;
            for (i, row) in self.t.iter().enumerate() {
                let a = row[enter];
                if a > EPS {
                    let ratio = row[self.cols] / a;
                    let better = match leave {
                        None => true,
                        Some((l, best)) => {
                            ratio < best - EPS * best.abs().max(1.0)
                                || (ratio <= best + EPS * best.abs().max(1.0) && self.basis[i] < self.basis[l])
                        }
                    };
                    if better {
                        leave = Some((i, ratio));
                    }
                }
            }
            let Some((row, _)) = leave else {
                return Err(LpError::Unbounded);
            };
            if self.pivots >= self.max_pivots {
                return Err(LpError::MaxIterations(self.max_pivots));
            }
            self.pivot(row, enter);
        }
    }
}

impl InequalityLp {
    pub fn solve(&self) -> Result<LpSolution, LpError> {
        let nx = self.cost.len();
        let rows = self.a.len();
        if self.rhs.len() != rows || self.a.iter().any(|r| r.len() != nx) {
            return Err(LpError::Dimension);
        }
        let needs_art: Vec<bool> = self.rhs.iter().map(|&r| r > 0.0).collect();
        let n_art = needs_art.iter().filter(|&&b| b).count();
        let cols = nx + rows + n_art;

        // columns: x | surplus | artificial
        let mut t = Vec::with_capacity(rows);
        let mut basis = Vec::with_capacity(rows);
        let mut art = nx + rows;
        for i in 0..rows {
            let mut row = vec![0.0; cols + 1];
            if needs_art[i] {
                row[..nx].copy_from_slice(&self.a[i]);
                row[nx + i] = -1.0;
                row[art] = 1.0;
                row[cols] = self.rhs[i];
                basis.push(art);
                art += 1;
            } else {
                // -a x + s = -r >= 0 keeps the surplus basic
                for (v, a) in row[..nx].iter_mut().zip(&self.a[i]) {
                    *v = -a;
                }
                row[nx + i] = 1.0;
                row[cols] = -self.rhs[i];
                basis.push(nx + i);
            }
            t.push(row);
        }
        let mut tab = Tableau {
            t,
            basis,
            cols,
            pivots: 0,
            max_pivots: 50 * (rows + cols).max(100),
        };

        let is_art = |j: usize| j >= nx + rows;
        if n_art > 0 {
            let mut phase1 = vec![0.0; cols];
            for c in phase1[nx + rows..].iter_mut() {
                *c = 1.0;
            }
            let allowed = vec![true; cols];
            tab.optimize(&phase1, &allowed)?;
            let infeas: f64 = tab
                .basis
                .iter()
                .enumerate()
                .filter(|(_, &b)| is_art(b))
                .map(|(i, _)| tab.t[i][cols])
                .sum();
            let rscale = self.rhs.iter().fold(1.0f64, |a, r| a.max(r.abs()));
            if infeas > 1e-9 * rscale {
                return Err(LpError::Infeasible);
            }
            // drive zero-level artificials out of the basis
            let mut i = 0;
            while i < tab.basis.len() {
                if is_art(tab.basis[i]) {
                    if let Some(j) = (0..nx + rows).find(|&j| tab.t[i][j].abs() > 1e-9) {
                        tab.pivot(i, j);
                    } else {
                        // redundant row
                        tab.t.remove(i);
                        tab.basis.remove(i);
                        continue;
                    }
                }
                i += 1;
            }
        }

        let mut cost = vec![0.0; cols];
        cost[..nx].copy_from_slice(&self.cost);
        let allowed: Vec<bool> = (0..cols).map(|j| !is_art(j)).collect();
        tab.optimize(&cost, &allowed)?;

        let mut x = vec![0.0; nx];
        for (i, &b) in tab.basis.iter().enumerate() {
            if b < nx {
                x[b] = tab.t[i][cols].max(0.0);
            }
        }
        let objective = x.iter().zip(&self.cost).map(|(x, c)| x * c).sum();
        Ok(LpSolution {
            x,
            objective,
            pivots: tab.pivots,
        })
    }
}
