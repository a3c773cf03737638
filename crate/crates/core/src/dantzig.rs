//! Dantzig-selector M-step for the lag-one Yule-Walker relation.
//!
//! Given the moment averages `G0 = (T-1)^{-1} sum E[x_t x_t^T]` and
//! `G1 = (T-1)^{-1} sum E[x_t x_{t+1}^T]`, the transition estimate solves
//!
//! ```text
//! min ||A||_1   s.t.   ||G1 - G0 A^T||_max <= tau.
//! ```
//!
//! Column `i` of the constraint involves only row `i` of `A`, so the program splits into
//! `p` independent row problems `min ||a||_1 s.t. ||g - G0 a||_inf <= tau` with `g` the
//! `i`-th column of `G1`. Each is solved exactly as a linear program in `(a+, a-) >= 0`.
//! The minimizer need not be unique; only the objective value and feasibility are
//! guaranteed, the vertex returned is whatever the simplex pivot rule selects.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::simplex::{self, LpStatus};

/// Slack allowed on `||g - G0 a||_inf <= tau` at return.
pub const FEASIBILITY_TOL: f64 = 1e-9;
/// Largest accepted duality gap of a row solution.
pub const DUALITY_GAP_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct DantzigProblem {
    g0: DMatrix<f64>,
    g1: DMatrix<f64>,
    tau: f64,
}

impl DantzigProblem {
    /// `g0` is symmetrized on construction.
    pub fn new(g0: DMatrix<f64>, g1: DMatrix<f64>, tau: f64) -> Result<Self> {
        let p = g0.nrows();
        if p == 0 || g0.ncols() != p || g1.shape() != (p, p) {
            return Err(Error::Dimension(format!(
                "moment matrices must be square and equal-sized, got {:?} and {:?}",
                g0.shape(),
                g1.shape()
            )));
        }
        check_tau(tau)?;
        if g0.iter().chain(g1.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Numerical("moment matrices contain non-finite values".into()));
        }
        let g0 = (&g0 + g0.transpose()) * 0.5;
        Ok(Self { g0, g1, tau })
    }

    pub fn g0(&self) -> &DMatrix<f64> {
        &self.g0
    }

    pub fn g1(&self) -> &DMatrix<f64> {
        &self.g1
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau.is_finite() && tau >= 0.0) {
        return Err(Error::InvalidInput(format!("tau must be finite and >= 0, got {tau}")));
    }
    Ok(())
}

/// Solution of one row problem.
#[derive(Debug, Clone)]
pub struct RowSolution {
    pub a: DVector<f64>,
    /// `||a||_1`.
    pub objective: f64,
    /// `||g - G0 a||_inf`.
    pub residual: f64,
    pub duality_gap: f64,
}

/// `min ||a||_1  s.t.  ||g1 - g0 a||_inf <= tau`.
pub fn dantzig_row(g0: &DMatrix<f64>, g1: &DVector<f64>, tau: f64) -> Result<DVector<f64>> {
    check_tau(tau)?;
    Ok(solve_row(g0, g1, tau, 0)?.a)
}

/// Row solver with the full certificate. `row` only labels errors.
pub fn solve_row(g0: &DMatrix<f64>, g1: &DVector<f64>, tau: f64, row: usize) -> Result<RowSolution> {
    let p = g0.nrows();
    if g0.ncols() != p || g1.len() != p {
        return Err(Error::Dimension(format!(
            "row problem needs a square G0 and matching g, got {:?} and {}",
            g0.shape(),
            g1.len()
        )));
    }
    // z = (a+, a-):  G0 (a+ - a-) <= g + tau,  -G0 (a+ - a-) <= tau - g
    let mut m = DMatrix::zeros(2 * p, 2 * p);
    m.view_mut((0, 0), (p, p)).copy_from(g0);
    m.view_mut((0, p), (p, p)).copy_from(&(-g0));
    m.view_mut((p, 0), (p, p)).copy_from(&(-g0));
    m.view_mut((p, p), (p, p)).copy_from(g0);
    let mut b = DVector::zeros(2 * p);
    for k in 0..p {
        b[k] = g1[k] + tau;
        b[p + k] = tau - g1[k];
    }
    let c = DVector::from_element(2 * p, 1.0);
    let sol = simplex::solve(&c, &m, &b);
    match sol.status {
        LpStatus::Optimal => {}
        LpStatus::Infeasible => return Err(Error::Infeasible { row, tau }),
        LpStatus::Unbounded => {
            return Err(Error::LpCertificate {
                row,
                reason: "reported unbounded although the objective is bounded below".into(),
            })
        }
        LpStatus::IterationLimit => {
            return Err(Error::LpCertificate {
                row,
                reason: "pivot limit reached".into(),
            })
        }
    }
    let a = DVector::from_fn(p, |k, _| sol.x[k] - sol.x[p + k]);
    let residual = (g1 - g0 * &a).amax();
    let cert = sol.certify(&c, &m, &b);
    let scale = 1.0 + sol.objective.abs();
    if residual > tau + FEASIBILITY_TOL {
        return Err(Error::LpCertificate {
            row,
            reason: format!("residual {residual:e} exceeds tau {tau:e}"),
        });
    }
    if cert.gap.abs() > DUALITY_GAP_TOL * scale || cert.dual_violation > DUALITY_GAP_TOL * scale {
        return Err(Error::LpCertificate {
            row,
            reason: format!(
                "duality gap {:e}, dual violation {:e}",
                cert.gap, cert.dual_violation
            ),
        });
    }
    Ok(RowSolution {
        objective: a.lp_norm(1),
        a,
        residual,
        duality_gap: cert.gap,
    })
}

/// Solves every row problem (in parallel) and stacks the rows into `A`.
pub fn dantzig_matrix(problem: &DantzigProblem) -> Result<DMatrix<f64>> {
    let p = problem.g0.nrows();
    let rows: Vec<Result<RowSolution>> = (0..p)
        .into_par_iter()
        .map(|i| {
            let g = problem.g1.column(i).into_owned();
            solve_row(&problem.g0, &g, problem.tau, i)
        })
        .collect();
    let mut a = DMatrix::zeros(p, p);
    for (i, r) in rows.into_iter().enumerate() {
        a.row_mut(i).copy_from(&r?.a.transpose());
    }
    let violation = (&problem.g1 - &problem.g0 * a.transpose()).amax();
    if violation > problem.tau + FEASIBILITY_TOL {
        return Err(Error::Numerical(format!(
            "assembled estimate violates the constraint by {:e}",
            violation - problem.tau
        )));
    }
    Ok(a)
}
