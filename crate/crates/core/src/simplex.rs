//! Dense two-phase primal simplex for `min c^T z  s.t.  M z <= b, z >= 0`.
//!
//! Rows with `b_i < 0` are negated and given an artificial variable; phase one drives the
//! artificials to zero, phase two optimizes the real objective. Entering and leaving
//! variables follow Bland's smallest-index rule, so the method terminates on degenerate
//! problems and the returned vertex is a deterministic function of the input.
//!
//! Dual values are read off the final objective row (reduced costs are unchanged by the
//! row negations), and [`LpSolution::certify`] re-checks primal feasibility, dual
//! feasibility and the duality gap against the original data.

use nalgebra::{DMatrix, DVector};

/// Pivot elements and reduced costs smaller than this are treated as zero.
pub const PIVOT_TOL: f64 = 1e-11;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
    IterationLimit,
}

#[derive(Debug, Clone)]
pub struct LpSolution {
    pub status: LpStatus,
    pub x: DVector<f64>,
    pub objective: f64,
    /// Multipliers `w <= 0` of the inequality rows (dual of the `<=` form).
    pub duals: DVector<f64>,
    pub pivots: usize,
}

/// Primal/dual certificate measured on the original problem data.
#[derive(Debug, Clone, Copy)]
pub struct Certificate {
    /// `max_i (M z - b)_i` and `max_j (-z_j)`, floored at zero.
    pub primal_violation: f64,
    /// `max_j (M^T w - c)_j` and `max_i w_i`, floored at zero.
    pub dual_violation: f64,
    /// `c^T z - b^T w`.
    pub gap: f64,
}

impl LpSolution {
    pub fn certify(&self, c: &DVector<f64>, m: &DMatrix<f64>, b: &DVector<f64>) -> Certificate {
        let slack = m * &self.x - b;
        let primal_violation = slack
            .iter()
            .chain(self.x.iter().map(|v| -v).collect::<Vec<_>>().iter())
            .fold(0.0_f64, |acc, &v| acc.max(v));
        let reduced = m.transpose() * &self.duals - c;
        let dual_violation = reduced
            .iter()
            .chain(self.duals.iter())
            .fold(0.0_f64, |acc, &v| acc.max(v));
        let gap = c.dot(&self.x) - b.dot(&self.duals);
        Certificate {
            primal_violation,
            dual_violation,
            gap,
        }
    }
}

struct Tableau {
    rows: usize,
    cols: usize,
    // (rows + 1) x (cols + 1), row-major; last row is the objective, last column the rhs
    data: Vec<f64>,
    basis: Vec<usize>,
}

impl Tableau {
    fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * (self.cols + 1) + c]
    }

    fn rhs(&self, r: usize) -> f64 {
        self.at(r, self.cols)
    }

    fn obj_row(&self) -> usize {
        self.rows
    }

    fn pivot(&mut self, pr: usize, pc: usize) {
        let width = self.cols + 1;
        let piv = self.data[pr * width + pc];
        let (before, rest) = self.data.split_at_mut(pr * width);
        let (prow, after) = rest.split_at_mut(width);
        for v in prow.iter_mut() {
            *v /= piv;
        }
        prow[pc] = 1.0;
        let eliminate = |row: &mut [f64]| {
            let f = row[pc];
            if f != 0.0 {
                for (v, &pv) in row.iter_mut().zip(prow.iter()) {
                    *v -= f * pv;
                }
                row[pc] = 0.0;
            }
        };
        before.chunks_mut(width).for_each(eliminate);
        after.chunks_mut(width).for_each(eliminate);
        self.basis[pr] = pc;
    }

    /// Bland's rule on columns `< allowed`. Returns `Ok(true)` at optimality.
    fn optimize(&mut self, allowed: usize, pivots: &mut usize, max_pivots: usize) -> Result<bool, LpStatus> {
        loop {
            let obj = self.obj_row();
            let entering = (0..allowed).find(|&c| self.at(obj, c) < -PIVOT_TOL);
            let Some(pc) = entering else {
                return Ok(true);
            };
            let mut leave: Option<(usize, f64)> = None;
            for r in 0..self.rows {
                let coef = self.at(r, pc);
                if coef > PIVOT_TOL {
                    let ratio = self.rhs(r) / coef;
                    leave = match leave {
                        None => Some((r, ratio)),
                        Some((lr, lratio)) => {
                            if ratio < lratio
                                || (ratio == lratio && self.basis[r] < self.basis[lr])
                            {
                                Some((r, ratio))
                            } else {
                                Some((lr, lratio))
                            }
                        }
                    };
                }
            }
            let Some((pr, _)) = leave else {
                return Err(LpStatus::Unbounded);
            };
            self.pivot(pr, pc);
            *pivots += 1;
            if *pivots >= max_pivots {
                return Err(LpStatus::IterationLimit);
            }
        }
    }
}

/// Solves `min c^T z  s.t.  M z <= b, z >= 0`.
pub fn solve(c: &DVector<f64>, m: &DMatrix<f64>, b: &DVector<f64>) -> LpSolution {
    let (rows, n) = m.shape();
    assert_eq!(c.len(), n, "cost vector length");
    assert_eq!(b.len(), rows, "rhs length");

    let negated: Vec<bool> = b.iter().map(|&v| v < 0.0).collect();
    let artificial_rows: Vec<usize> = (0..rows).filter(|&r| negated[r]).collect();
    let n_art = artificial_rows.len();
    let slack0 = n;
    let art0 = n + rows;
    let cols = n + rows + n_art;
    let width = cols + 1;

    let mut t = Tableau {
        rows,
        cols,
        data: vec![0.0; (rows + 1) * width],
        basis: vec![0; rows],
    };
    let mut art_idx = 0;
    for r in 0..rows {
        let sign = if negated[r] { -1.0 } else { 1.0 };
        let row = &mut t.data[r * width..(r + 1) * width];
        for j in 0..n {
            row[j] = sign * m[(r, j)];
        }
        row[slack0 + r] = sign;
        row[cols] = sign * b[r];
        if negated[r] {
            row[art0 + art_idx] = 1.0;
            t.basis[r] = art0 + art_idx;
            art_idx += 1;
        } else {
            t.basis[r] = slack0 + r;
        }
    }

    let max_pivots = 50 * (rows + cols).max(10) * 10;
    let mut pivots = 0;
    let fail = |status: LpStatus, pivots: usize| LpSolution {
        status,
        x: DVector::zeros(n),
        objective: f64::NAN,
        duals: DVector::zeros(rows),
        pivots,
    };

    if n_art > 0 {
        // phase one: minimize the sum of artificials, i.e. objective row = -sum of their rows
        let obj = t.obj_row();
        for &r in &artificial_rows {
            for c in 0..=cols {
                let v = t.at(r, c);
                t.data[obj * width + c] -= v;
            }
        }
        for k in 0..n_art {
            t.data[obj * width + art0 + k] = 0.0;
        }
        if let Err(status) = t.optimize(art0, &mut pivots, max_pivots) {
            return fail(status, pivots);
        }
        let infeasibility = -t.rhs(obj);
        let scale = b.iter().fold(1.0_f64, |acc, v| acc.max(v.abs()));
        if infeasibility > 1e-9 * scale {
            return fail(LpStatus::Infeasible, pivots);
        }
        // drive zero-level artificials out of the basis where possible
        for r in 0..rows {
            if t.basis[r] >= art0 {
                if let Some(pc) = (0..art0).find(|&c| t.at(r, c).abs() > PIVOT_TOL) {
                    t.pivot(r, pc);
                    pivots += 1;
                }
            }
        }
    }

    // phase two objective row: c with basic columns eliminated
    let obj = t.obj_row();
    t.data[obj * width..].fill(0.0);
    for j in 0..n {
        t.data[obj * width + j] = c[j];
    }
    for r in 0..rows {
        let bc = t.basis[r];
        let cost = if bc < n { c[bc] } else { 0.0 };
        if cost != 0.0 {
            for col in 0..=cols {
                let v = t.at(r, col);
                t.data[obj * width + col] -= cost * v;
            }
        }
    }
    if let Err(status) = t.optimize(art0, &mut pivots, max_pivots) {
        return fail(status, pivots);
    }

    let mut x = DVector::zeros(n);
    for r in 0..rows {
        if t.basis[r] < n {
            x[t.basis[r]] = t.rhs(r).max(0.0);
        }
    }
    let duals = DVector::from_fn(rows, |r, _| -t.at(obj, slack0 + r));
    LpSolution {
        status: LpStatus::Optimal,
        objective: c.dot(&x),
        x,
        duals,
        pivots,
    }
}
