//! Residual-based test statistics for entries of the transition matrix, the Gumbel-calibrated
//! global test and the FDR-controlled simultaneous test.
//!
//! With `e_t` the centered one-step residuals of the fitted model, the statistic for entry
//! `(i, j)` is
//!
//! ```text
//! H_ij = [ sum_{t=2}^{T-1} e_{t,i} e_{t-1,j} + (T-2) {(s_eta + s_eps) A_ij - s_eta A0_ij} ]
//!        / (sqrt(T-2) sigma_ij)
//! ```
//!
//! where `s_eta`, `s_eps` are the fitted noise variances and `sigma_ij` the plug-in
//! standard deviation from [`sigma_hat`]. Under `A = A0` each `H_ij` is approximately
//! standard normal.

use log::warn;
use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{Dataset, HypothesisSpec, ModelParams};

/// Floor applied to `sigma_ij` before dividing.
pub const SIGMA_FLOOR: f64 = 1e-6;

/// Standard normal tail functions.
pub mod normal {
    use statrs::function::erf::{erfc, erfc_inv};
    use std::f64::consts::SQRT_2;

    pub fn cdf(x: f64) -> f64 {
        0.5 * erfc(-x / SQRT_2)
    }

    /// `2 - 2 Phi(t)`.
    pub fn two_sided_tail(t: f64) -> f64 {
        erfc(t / SQRT_2)
    }

    /// The `t >= 0` with `2 - 2 Phi(t) = q`, for `q` in `(0, 1]`.
    pub fn two_sided_quantile(q: f64) -> f64 {
        SQRT_2 * erfc_inv(q)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestMatrix {
    pub h: DMatrix<f64>,
    /// Plug-in standard deviations, after flooring.
    pub sigma_hat: DMatrix<f64>,
    /// Number of lag products in each numerator, `T - 2`.
    pub t_used: usize,
    /// Entries of `sigma_hat` that were raised to [`SIGMA_FLOOR`].
    pub floored: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GlobalResult {
    #[serde(rename = "G_S")]
    pub g_s: f64,
    pub threshold: f64,
    pub p_value: f64,
    pub reject: bool,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FdrResult {
    pub t_hat: f64,
    /// Rejected pairs in the order of the hypothesis set.
    pub rejections: Vec<(usize, usize)>,
    pub fdp_estimate_at_t_hat: f64,
    pub beta: f64,
}

/// Centered one-step residuals `y_{t+1} - A y_t - mean`, one row per `t = 1..T-1`. The
/// statistic uses rows `2..T-1` together with their lag partners, which include row 1.
pub fn residuals(data: &Dataset, a_hat: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (t_len, p) = (data.len(), data.dim());
    if a_hat.shape() != (p, p) {
        return Err(Error::Dimension(format!(
            "A is {:?}, data has {p} coordinates",
            a_hat.shape()
        )));
    }
    if t_len < 4 {
        return Err(Error::InvalidInput(format!(
            "residual statistics need T >= 4, got {t_len}"
        )));
    }
    let mut r = data.y.rows(1, t_len - 1) - data.y.rows(0, t_len - 1) * a_hat.transpose();
    let n = (t_len - 1) as f64;
    for j in 0..p {
        let mean = r.column(j).sum() / n;
        r.column_mut(j).add_scalar_mut(-mean);
    }
    Ok(r)
}

/// Squared plug-in variance of `sqrt(T-2)` times the lag-one residual autocovariance,
/// before flooring.
pub fn sigma_sq_raw(params: &ModelParams) -> DMatrix<f64> {
    let a = &params.a;
    let p = params.dim();
    let (se, sn) = (params.sigma_eps_sq, params.sigma_eta_sq);
    let se2 = se * se;
    let row_sq: Vec<f64> = (0..p).map(|i| a.row(i).norm_squared()).collect();
    DMatrix::from_fn(p, p, |i, j| {
        (se + sn).powi(2)
            + se2 * a[(i, j)].powi(2)
            + 2.0 * se2 * a[(i, i)] * a[(j, j)]
            + se2 * row_sq[i] * row_sq[j]
            + (se2 + se * sn) * (row_sq[i] + row_sq[j])
    })
}

/// Plug-in standard deviations `sigma_ij`, floored at [`SIGMA_FLOOR`].
pub fn sigma_hat(params: &ModelParams) -> DMatrix<f64> {
    sigma_sq_raw(params).map(|v| v.max(0.0).sqrt().max(SIGMA_FLOOR))
}

/// The matrix of statistics `H` for the hypotheses `A = a0`.
pub fn test_matrix(data: &Dataset, params: &ModelParams, a0: &DMatrix<f64>) -> Result<TestMatrix> {
    let p = data.dim();
    if params.dim() != p || a0.shape() != (p, p) {
        return Err(Error::Dimension(format!(
            "data has {p} coordinates, A is {:?}, A0 is {:?}",
            params.a.shape(),
            a0.shape()
        )));
    }
    let r = residuals(data, &params.a)?;
    let m = r.nrows();
    let t_used = m - 1;
    let lagged = r.rows(1, t_used).transpose() * r.rows(0, t_used);
    let raw = sigma_sq_raw(params);
    let floored = raw.iter().filter(|v| v.max(0.0).sqrt() < SIGMA_FLOOR).count();
    if floored > 0 {
        warn!("{floored} variance entries raised to the floor; statistics may be unstable");
    }
    let sigma = raw.map(|v| v.max(0.0).sqrt().max(SIGMA_FLOOR));
    let n = t_used as f64;
    let bias = &params.a * (params.sigma_eta_sq + params.sigma_eps_sq) - a0 * params.sigma_eta_sq;
    let numer = lagged + bias * n;
    let h = numer.zip_map(&sigma, |num, s| num / (n.sqrt() * s));
    if h.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite test statistic".into()));
    }
    Ok(TestMatrix {
        h,
        sigma_hat: sigma,
        t_used,
        floored,
    })
}

fn check_set(tm: &TestMatrix, spec: &HypothesisSpec, min: usize) -> Result<()> {
    let p = tm.h.nrows();
    if spec.a0.shape() != (p, p) {
        return Err(Error::Dimension(format!(
            "hypothesis set is for {:?}, statistics are {p}x{p}",
            spec.a0.shape()
        )));
    }
    if spec.len() < min {
        return Err(Error::InvalidInput(format!(
            "hypothesis set needs at least {min} pairs, got {}",
            spec.len()
        )));
    }
    Ok(())
}

/// Rejection threshold for `max H^2` at level `alpha` over `n` hypotheses.
pub fn gumbel_threshold(n: usize, alpha: f64) -> f64 {
    let n = n as f64;
    if alpha >= 1.0 {
        return f64::NEG_INFINITY;
    }
    2.0 * n.ln() - n.ln().ln() - std::f64::consts::PI.ln() - 2.0 * (-(-alpha).ln_1p()).ln()
}

/// Limit-law p-value `1 - exp(-exp(-x/2)/sqrt(pi))`, `x = G - 2 log n + log log n`.
pub fn gumbel_p_value(g_s: f64, n: usize) -> f64 {
    let n = n as f64;
    let x = g_s - 2.0 * n.ln() + n.ln().ln();
    -(-(-x / 2.0).exp() / std::f64::consts::PI.sqrt()).exp_m1()
}

/// Gumbel CDF `exp(-exp(-x/2)/sqrt(pi))` of the centered maximum.
pub fn gumbel_cdf(x: f64) -> f64 {
    (-(-x / 2.0).exp() / std::f64::consts::PI.sqrt()).exp()
}

/// Global test of `A_ij = A0_ij` for all `(i, j)` in the set, at level `alpha` in `(0, 1]`.
pub fn global_test(tm: &TestMatrix, spec: &HypothesisSpec, alpha: f64) -> Result<GlobalResult> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidInput(format!("alpha must lie in (0, 1], got {alpha}")));
    }
    check_set(tm, spec, 3)?;
    let g_s = spec
        .pairs
        .iter()
        .map(|&(i, j)| tm.h[(i, j)].powi(2))
        .fold(f64::NEG_INFINITY, f64::max);
    let threshold = gumbel_threshold(spec.len(), alpha);
    Ok(GlobalResult {
        g_s,
        threshold,
        p_value: gumbel_p_value(g_s, spec.len()),
        reject: g_s > threshold,
        alpha,
    })
}

/// Simultaneous test with estimated-FDP thresholding at level `beta` in `(0, 1]`.
///
/// The estimated FDP `{2 - 2 Phi(t)} |S| / (R(t) v 1)` is decreasing in `t` on every
/// interval where the rejection count `R(t) = #{|H| > t}` is constant, so the infimum of
/// the feasible `t` on such an interval is either its left end or the point where the
/// normal tail meets the bound. Scanning the intervals in increasing order yields the
/// exact infimum over `(0, sqrt(2 log |S|)]`.
pub fn fdr_select(tm: &TestMatrix, spec: &HypothesisSpec, beta: f64) -> Result<FdrResult> {
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(Error::InvalidInput(format!("beta must lie in (0, 1], got {beta}")));
    }
    check_set(tm, spec, 2)?;
    let n = spec.len();
    let t_max = (2.0 * (n as f64).ln()).sqrt();
    let mut stats: Vec<f64> = spec.pairs.iter().map(|&(i, j)| tm.h[(i, j)].abs()).collect();
    stats.sort_by(f64::total_cmp);
    let count_above = |t: f64| stats.len() - stats.partition_point(|&v| v <= t);
    let mut breaks: Vec<f64> = stats
        .iter()
        .cloned()
        .filter(|&v| v > 0.0 && v < t_max)
        .collect();
    breaks.dedup();

    let mut t_hat = None;
    let mut lo = 0.0;
    for k in 0..=breaks.len() {
        let hi = breaks.get(k).copied().unwrap_or(t_max);
        let r = count_above(lo).max(1);
        let z = normal::two_sided_quantile(beta * r as f64 / n as f64);
        let cand = z.max(lo);
        let last = k == breaks.len();
        if cand < hi || (last && cand <= hi) {
            t_hat = Some(cand);
            break;
        }
        lo = hi;
    }
    let t_hat = t_hat.unwrap_or(t_max);
    let rejections: Vec<(usize, usize)> = spec
        .pairs
        .iter()
        .cloned()
        .filter(|&(i, j)| tm.h[(i, j)].abs() > t_hat)
        .collect();
    let fdp_estimate_at_t_hat =
        normal::two_sided_tail(t_hat) * n as f64 / rejections.len().max(1) as f64;
    Ok(FdrResult {
        t_hat,
        rejections,
        fdp_estimate_at_t_hat,
        beta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn tm_from(h: DMatrix<f64>) -> TestMatrix {
        let p = h.nrows();
        TestMatrix {
            h,
            sigma_hat: DMatrix::from_element(p, p, 1.0),
            t_used: 10,
            floored: 0,
        }
    }

    #[test]
    fn sigma_hat_examples() {
        let params = ModelParams::new(DMatrix::zeros(3, 3), 0.04, 0.04).unwrap();
        for v in sigma_hat(&params).iter() {
            assert_abs_diff_eq!(*v, 0.08, epsilon = 1e-15);
        }
        let params = ModelParams::new(DMatrix::identity(2, 2) * 0.5, 0.04, 0.04).unwrap();
        assert_abs_diff_eq!(sigma_hat(&params)[(0, 1)], 0.0089f64.sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn sigma_floor_applies() {
        let params = ModelParams::new(DMatrix::zeros(2, 2), 1e-20, 1e-20).unwrap();
        assert!(sigma_hat(&params).iter().all(|&v| v == SIGMA_FLOOR));
    }

    #[test]
    fn residuals_are_centered() {
        let y = DMatrix::from_fn(12, 3, |t, j| ((t * 7 + j * 3) % 5) as f64 - 1.3);
        let a = DMatrix::from_row_slice(3, 3, &[0.2, 0.1, 0.0, 0.0, -0.3, 0.4, 0.1, 0.0, 0.5]);
        let r = residuals(&Dataset::new(y.clone()).unwrap(), &a).unwrap();
        assert_eq!(r.nrows(), 11);
        for j in 0..3 {
            assert!(r.column(j).sum().abs() < 1e-12);
        }
        let r0 = residuals(&Dataset::new(y.clone()).unwrap(), &DMatrix::zeros(3, 3)).unwrap();
        let tail = y.rows(1, 11);
        for j in 0..3 {
            let mean = tail.column(j).mean();
            for t in 0..11 {
                assert_abs_diff_eq!(r0[(t, j)], y[(t + 1, j)] - mean, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn zero_residuals_give_zero_statistics() {
        let y = DMatrix::from_element(6, 2, 1.5);
        let params = ModelParams::new(DMatrix::zeros(2, 2), 0.1, 0.1).unwrap();
        let tm = test_matrix(&Dataset::new(y).unwrap(), &params, &DMatrix::zeros(2, 2)).unwrap();
        assert_eq!(tm.h, DMatrix::zeros(2, 2));
        assert_eq!(tm.t_used, 4);
    }

    #[test]
    fn threshold_and_p_value_examples() {
        assert_abs_diff_eq!(gumbel_threshold(900, 0.05), 16.4836, epsilon = 1e-3);
        let n = 900usize;
        let g = 2.0 * (n as f64).ln() - (n as f64).ln().ln();
        assert_abs_diff_eq!(gumbel_p_value(g, n), 0.4312, epsilon = 1e-4);
        assert!(gumbel_threshold(900, 0.01) > gumbel_threshold(900, 0.05));
        assert_eq!(gumbel_threshold(900, 1.0), f64::NEG_INFINITY);
    }

    #[test]
    fn global_test_rejects_small_sets() {
        let tm = tm_from(DMatrix::from_element(2, 2, 1.0));
        let spec = HypothesisSpec::new(DMatrix::zeros(2, 2), vec![(0, 0), (1, 1)]).unwrap();
        assert!(global_test(&tm, &spec, 0.05).is_err());
        let spec = HypothesisSpec::all_zero(2);
        assert!(global_test(&tm, &spec, 0.05).is_ok());
        assert!(global_test(&tm, &spec, 0.0).is_err());
    }

    #[test]
    fn fdr_all_large_statistics() {
        let tm = tm_from(DMatrix::from_element(10, 10, 10.0));
        let res = fdr_select(&tm, &HypothesisSpec::all_zero(10), 0.05).unwrap();
        assert_abs_diff_eq!(res.t_hat, 1.959964, epsilon = 1e-5);
        assert_eq!(res.rejections.len(), 100);
    }

    #[test]
    fn fdr_all_zero_statistics_fall_back() {
        let tm = tm_from(DMatrix::zeros(10, 10));
        let res = fdr_select(&tm, &HypothesisSpec::all_zero(10), 0.05).unwrap();
        assert_abs_diff_eq!(res.t_hat, (2.0 * 100f64.ln()).sqrt(), epsilon = 1e-15);
        assert!(res.rejections.is_empty());
        assert!(fdr_select(&tm, &HypothesisSpec::all_zero(10), 1.5).is_err());
    }

    #[test]
    fn normal_helpers() {
        assert_abs_diff_eq!(normal::cdf(0.0), 0.5, epsilon = 1e-16);
        // erfc is accurate to about 1e-12 here
        assert_abs_diff_eq!(normal::cdf(1.959963984540054), 0.975, epsilon = 1e-11);
        assert_abs_diff_eq!(normal::two_sided_quantile(0.05), 1.959963984540054, epsilon = 1e-12);
        for &t in &[0.1, 1.0, 2.5, 5.0] {
            let q = normal::two_sided_tail(t);
            assert_abs_diff_eq!(normal::two_sided_quantile(q), t, epsilon = 1e-10);
        }
    }
}
