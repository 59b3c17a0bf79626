//! Dense two-phase simplex for `max/min c·x  s.t.  A x <= b` with free `x`.
//!
//! Free variables are split as `x = x⁺ - x⁻`; every row gets a slack, and rows
//! with negative right-hand side get an artificial variable for phase one.
//! Pivoting uses Bland's rule, so the method terminates on degenerate problems.

use ndarray::{Array1, Array2, ArrayView1};

use super::sets::Polytope;
use crate::error::{check_dim, Error, Result};

/// Feasibility tolerance on constraint residuals and the phase-one objective.
pub const FEAS_TOL: f64 = 1e-9;
const PIVOT_TOL: f64 = 1e-12;
const MAX_PIVOTS: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sense {
    Max,
    Min,
}

#[derive(Debug, Clone)]
pub struct LpSolution {
    pub value: f64,
    pub argpoint: Array1<f64>,
}

struct Tableau {
    /// `m x (cols + 1)`; last column is the right-hand side.
    t: Array2<f64>,
    basis: Vec<usize>,
    cols: usize,
}

impl Tableau {
    fn pivot(&mut self, row: usize, col: usize) {
        let p = self.t[[row, col]];
        self.t.row_mut(row).mapv_inplace(|v| v / p);
        let pivot_row = self.t.row(row).to_owned();
        for i in 0..self.t.nrows() {
            if i == row {
                continue;
            }
            let f = self.t[[i, col]];
            if f != 0.0 {
                let mut r = self.t.row_mut(i);
                r.scaled_add(-f, &pivot_row);
                r.mapv_inplace(|v| if v.abs() < 1e-14 { 0.0 } else { v });
                r[col] = 0.0;
            }
        }
        self.basis[row] = col;
    }

    /// Minimizes `cost · z` over the columns allowed by `allowed`.
    fn run(&mut self, cost: &[f64], allowed: impl Fn(usize) -> bool) -> Result<()> {
        let rhs = self.cols;
        for _ in 0..MAX_PIVOTS {
            // Bland: first improving column.
            let entering = (0..self.cols).filter(|&j| allowed(j)).find(|&j| {
                let reduced = cost[j]
                    - self
                        .basis
                        .iter()
                        .enumerate()
                        .map(|(i, &b)| cost[b] * self.t[[i, j]])
                        .sum::<f64>();
                reduced < -PIVOT_TOL
            });
            let Some(col) = entering else {
                return Ok(());
            };
            let mut leaving: Option<(usize, f64)> = None;
            for i in 0..self.t.nrows() {
                let a = self.t[[i, col]];
                if a > PIVOT_TOL {
                    let ratio = self.t[[i, rhs]].max(0.0) / a;
                    let better = match leaving {
                        None => true,
                        Some((li, lr)) => {
                            ratio < lr - 1e-15 || (ratio <= lr + 1e-15 && self.basis[i] < self.basis[li])
                        }
                    };
                    if better {
                        leaving = Some((i, ratio));
                    }
                }
            }
            let Some((row, _)) = leaving else {
                return Err(Error::Unbounded);
            };
            self.pivot(row, col);
        }
        Err(Error::PivotLimit(MAX_PIVOTS))
    }

    fn value_of(&self, var: usize) -> f64 {
        self.basis
            .iter()
            .position(|&b| b == var)
            .map_or(0.0, |i| self.t[[i, self.cols]])
    }
}

/// Optimizes `c·x` over `{x : A x <= b}`.
pub fn lp_solve(c: ArrayView1<f64>, poly: &Polytope, sense: Sense) -> Result<LpSolution> {
    solve_raw(c, poly.a(), poly.b().view(), sense)
}

/// Whether `{x : A x <= b}` is nonempty (to [`FEAS_TOL`]).
pub fn is_feasible(poly: &Polytope) -> Result<bool> {
    let zero = Array1::zeros(poly.dim());
    match lp_solve(zero.view(), poly, Sense::Max) {
        Ok(_) => Ok(true),
        Err(Error::Infeasible) => Ok(false),
        Err(e) => Err(e),
    }
}

fn solve_raw(c: ArrayView1<f64>, a: &Array2<f64>, b: ArrayView1<f64>, sense: Sense) -> Result<LpSolution> {
    let (m, n) = a.dim();
    check_dim(n, c.len())?;
    check_dim(m, b.len())?;
    let neg_rows: Vec<usize> = (0..m).filter(|&i| b[i] < 0.0).collect();
    let n_art = neg_rows.len();
    let slack0 = 2 * n;
    let art0 = 2 * n + m;
    let cols = 2 * n + m + n_art;

    let mut t = Array2::<f64>::zeros((m, cols + 1));
    let mut basis = vec![0; m];
    let mut art_idx = 0;
    for i in 0..m {
        let sign = if b[i] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..n {
            t[[i, j]] = sign * a[[i, j]];
            t[[i, n + j]] = -sign * a[[i, j]];
        }
        t[[i, slack0 + i]] = sign;
        t[[i, cols]] = sign * b[i];
        if sign < 0.0 {
            t[[i, art0 + art_idx]] = 1.0;
            basis[i] = art0 + art_idx;
            art_idx += 1;
        } else {
            basis[i] = slack0 + i;
        }
    }
    let mut tab = Tableau { t, basis, cols };

    if n_art > 0 {
        let mut phase1 = vec![0.0; cols];
        phase1[art0..].iter_mut().for_each(|v| *v = 1.0);
        tab.run(&phase1, |_| true)?;
        let infeas: f64 = (art0..cols).map(|v| tab.value_of(v)).sum();
        if infeas > FEAS_TOL * (1.0 + b.iter().map(|v| v.abs()).fold(0.0, f64::max)) {
            return Err(Error::Infeasible);
        }
        // Drive zero-valued artificials out of the basis where possible.
        for i in 0..m {
            if tab.basis[i] >= art0 {
                if let Some(col) = (0..art0).find(|&j| tab.t[[i, j]].abs() > 1e-9) {
                    tab.pivot(i, col);
                }
            }
        }
    }

    let dir = match sense {
        Sense::Max => -1.0,
        Sense::Min => 1.0,
    };
    let mut phase2 = vec![0.0; cols];
    for j in 0..n {
        phase2[j] = dir * c[j];
        phase2[n + j] = -dir * c[j];
    }
    tab.run(&phase2, |j| j < art0)?;

    let argpoint = Array1::from_shape_fn(n, |j| tab.value_of(j) - tab.value_of(n + j));
    let value = c.dot(&argpoint);
    Ok(LpSolution { value, argpoint })
}
