//! E-step moments for the measurement-error VAR.
//!
//! [`kalman_smooth`] runs a Kalman filter followed by a fixed-interval RTS smoother and
//! the lag-one covariance recursion, returning the conditional moments
//! `E[x_t | y]`, `E[x_t x_t^T | y]` and `E[x_t x_{t+1}^T | y]`. The filter starts from the
//! stationary prior `x_1 ~ N(0, Sigma_x)`; covariances are propagated per time step
//! (no steady-state shortcut).
//!
//! [`exact_condition`] computes the same moments by conditioning the joint Gaussian of the
//! stacked `(x_{1:T}, y_{1:T})` directly. It is quadratic in memory and cubic in `pT` and
//! exists to cross-check the recursions.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::model::{stationary_covariance, symmetrize, Dataset, ModelParams};

/// Largest `p * T` accepted by [`exact_condition`].
pub const EXACT_CONDITION_MAX: usize = 2000;

/// Posterior moments of the latent states given all observations.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedMoments {
    /// `T x p`; row `t` is `E[x_t | y]`.
    pub mean: DMatrix<f64>,
    /// `E[x_t x_t^T | y]` for each `t`.
    pub second: Vec<DMatrix<f64>>,
    /// `E[x_t x_{t+1}^T | y]` for `t = 1..T-1`.
    pub cross: Vec<DMatrix<f64>>,
}

impl SmoothedMoments {
    pub fn len(&self) -> usize {
        self.mean.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.mean.ncols()
    }

    /// Posterior covariance `E[x_t x_t^T | y] - E_t E_t^T`.
    pub fn covariance(&self, t: usize) -> DMatrix<f64> {
        let m = self.mean.row(t).transpose();
        &self.second[t] - &m * m.transpose()
    }

    /// `(T-1)^{-1} sum_{t<T} E[x_t x_t^T]` and `(T-1)^{-1} sum_{t<T} E[x_t x_{t+1}^T]`,
    /// the two moment averages entering the M-step.
    pub fn lag_averages(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let p = self.dim();
        let n = self.len() - 1;
        let mut g0 = DMatrix::zeros(p, p);
        let mut g1 = DMatrix::zeros(p, p);
        for t in 0..n {
            g0 += &self.second[t];
            g1 += &self.cross[t];
        }
        (g0 / n as f64, g1 / n as f64)
    }

    pub fn is_finite(&self) -> bool {
        self.mean.iter().all(|v| v.is_finite())
            && self.second.iter().all(|m| m.iter().all(|v| v.is_finite()))
            && self.cross.iter().all(|m| m.iter().all(|v| v.is_finite()))
    }
}

/// Cholesky factor of a symmetric positive-definite matrix. If the plain factorization
/// fails, a diagonal jitter of `1e-10 * trace / p` is added (and grown if needed).
pub(crate) fn spd_factor(m: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    if let Some(c) = Cholesky::new(m.clone()) {
        return Ok(c);
    }
    let p = m.nrows();
    let base = (m.trace() / p as f64).abs().max(f64::MIN_POSITIVE);
    let mut jitter = 1e-10 * base;
    for _ in 0..6 {
        let mut shifted = m.clone();
        for i in 0..p {
            shifted[(i, i)] += jitter;
        }
        if let Some(c) = Cholesky::new(shifted) {
            return Ok(c);
        }
        jitter *= 100.0;
    }
    Err(Error::Singular(format!(
        "{p}x{p} matrix is not positive definite even with jitter {jitter:e}"
    )))
}

fn log_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

struct FilterPass {
    pred_mean: Vec<DVector<f64>>,
    pred_cov: Vec<DMatrix<f64>>,
    filt_mean: Vec<DVector<f64>>,
    filt_cov: Vec<DMatrix<f64>>,
    last_gain: DMatrix<f64>,
    log_likelihood: f64,
}

fn filter(data: &Dataset, params: &ModelParams) -> Result<FilterPass> {
    let p = data.dim();
    if params.dim() != p {
        return Err(Error::Dimension(format!(
            "parameters are {}-dimensional but the series has {p} coordinates",
            params.dim()
        )));
    }
    let t_len = data.len();
    let a = &params.a;
    let eye = DMatrix::<f64>::identity(p, p);
    let noiseless = params.sigma_eps_sq == 0.0;

    let mut pred_mean = Vec::with_capacity(t_len);
    let mut pred_cov = Vec::with_capacity(t_len);
    let mut filt_mean = Vec::with_capacity(t_len);
    let mut filt_cov = Vec::with_capacity(t_len);
    let mut last_gain = DMatrix::zeros(p, p);
    let mut log_likelihood = 0.0;

    let mut m_pred = DVector::zeros(p);
    let mut p_pred = stationary_covariance(params)?;
    for t in 0..t_len {
        let y_t = data.y.row(t).transpose();
        let mut s = p_pred.clone();
        for i in 0..p {
            s[(i, i)] += params.sigma_eps_sq;
        }
        let chol = spd_factor(&s)?;
        let innov = &y_t - &m_pred;
        let s_inv_innov = chol.solve(&innov);
        log_likelihood -= 0.5
            * (p as f64 * (2.0 * PI).ln() + log_det(&chol) + innov.dot(&s_inv_innov));

        let (m_filt, p_filt, gain) = if noiseless {
            (y_t, DMatrix::zeros(p, p), eye.clone())
        } else {
            // K = P S^{-1} = (S^{-1} P)^T since both are symmetric
            let gain = chol.solve(&p_pred).transpose();
            let m_filt = &m_pred + &p_pred * &s_inv_innov;
            let p_filt = symmetrize(&(&p_pred - &gain * &p_pred));
            (m_filt, p_filt, gain)
        };
        if t + 1 == t_len {
            last_gain = gain;
        }
        let next_mean = a * &m_filt;
        let mut next_cov = a * &p_filt * a.transpose();
        for i in 0..p {
            next_cov[(i, i)] += params.sigma_eta_sq;
        }
        pred_mean.push(std::mem::replace(&mut m_pred, next_mean));
        pred_cov.push(std::mem::replace(&mut p_pred, symmetrize(&next_cov)));
        filt_mean.push(m_filt);
        filt_cov.push(p_filt);
    }
    Ok(FilterPass {
        pred_mean,
        pred_cov,
        filt_mean,
        filt_cov,
        last_gain,
        log_likelihood,
    })
}

/// Smoothed first, second and lag-one cross moments of the latent states.
pub fn kalman_smooth(data: &Dataset, params: &ModelParams) -> Result<SmoothedMoments> {
    Ok(smooth_with_likelihood(data, params)?.0)
}

/// Smoothed moments together with the observed-data log-likelihood from the same filter
/// pass.
pub fn smooth_with_likelihood(
    data: &Dataset,
    params: &ModelParams,
) -> Result<(SmoothedMoments, f64)> {
    let f = filter(data, params)?;
    let t_len = data.len();
    let p = data.dim();
    let a = &params.a;
    let eye = DMatrix::<f64>::identity(p, p);

    let mut sm_mean = vec![DVector::zeros(p); t_len];
    let mut sm_cov = vec![DMatrix::zeros(p, p); t_len];
    // gains[t] = J_t = P_{t|t} A^T P_{t+1|t}^{-1}
    let mut gains = vec![DMatrix::zeros(p, p); t_len - 1];
    sm_mean[t_len - 1] = f.filt_mean[t_len - 1].clone();
    sm_cov[t_len - 1] = f.filt_cov[t_len - 1].clone();
    for t in (0..t_len - 1).rev() {
        let chol = spd_factor(&f.pred_cov[t + 1])?;
        let j = chol.solve(&(a * &f.filt_cov[t])).transpose();
        sm_mean[t] = &f.filt_mean[t] + &j * (&sm_mean[t + 1] - &f.pred_mean[t + 1]);
        let cov = &f.filt_cov[t] + &j * (&sm_cov[t + 1] - &f.pred_cov[t + 1]) * j.transpose();
        sm_cov[t] = symmetrize(&cov);
        gains[t] = j;
    }

    // lag[t] = Cov(x_{t+1}, x_t | y)
    let mut lag = vec![DMatrix::zeros(p, p); t_len - 1];
    lag[t_len - 2] = (&eye - &f.last_gain) * a * &f.filt_cov[t_len - 2];
    for t in (1..t_len - 1).rev() {
        let a_filt = a * &f.filt_cov[t];
        lag[t - 1] = &f.filt_cov[t] * gains[t - 1].transpose()
            + &gains[t] * (&lag[t] - a_filt) * gains[t - 1].transpose();
    }

    let mut mean = DMatrix::zeros(t_len, p);
    for (t, m) in sm_mean.iter().enumerate() {
        mean.row_mut(t).copy_from(&m.transpose());
    }
    let second = sm_mean
        .iter()
        .zip(&sm_cov)
        .map(|(m, c)| m * m.transpose() + c)
        .collect();
    let cross = (0..t_len - 1)
        .map(|t| &sm_mean[t] * sm_mean[t + 1].transpose() + lag[t].transpose())
        .collect();
    let moments = SmoothedMoments {
        mean,
        second,
        cross,
    };
    Ok((moments, f.log_likelihood))
}

/// Log density of the observed series under `params`, by the prediction-error
/// decomposition of the Kalman filter.
pub fn log_likelihood(data: &Dataset, params: &ModelParams) -> Result<f64> {
    Ok(filter(data, params)?.log_likelihood)
}

/// Joint covariance of the stacked latent states `(x_1, ..., x_T)`:
/// `Cov(x_t, x_s) = A^{t-s} Sigma_x` for `t >= s`.
fn joint_latent_covariance(params: &ModelParams, t_len: usize) -> Result<DMatrix<f64>> {
    let p = params.dim();
    let sigma_x = stationary_covariance(params)?;
    let n = p * t_len;
    let mut cov = DMatrix::zeros(n, n);
    let mut block = sigma_x;
    for lag in 0..t_len {
        for s in 0..t_len - lag {
            let t = s + lag;
            cov.view_mut((t * p, s * p), (p, p)).copy_from(&block);
            if lag > 0 {
                cov.view_mut((s * p, t * p), (p, p)).copy_from(&block.transpose());
            }
        }
        block = &params.a * block;
    }
    Ok(cov)
}

fn stacked(data: &Dataset) -> DVector<f64> {
    let (t_len, p) = (data.len(), data.dim());
    DVector::from_fn(t_len * p, |k, _| data.y[(k / p, k % p)])
}

fn check_oracle_size(data: &Dataset, params: &ModelParams) -> Result<()> {
    if params.dim() != data.dim() {
        return Err(Error::Dimension("parameter and data dimensions differ".into()));
    }
    let n = data.len() * data.dim();
    if n > EXACT_CONDITION_MAX {
        return Err(Error::InvalidInput(format!(
            "dense conditioning limited to pT <= {EXACT_CONDITION_MAX}, got {n}"
        )));
    }
    Ok(())
}

/// Conditional moments by dense Gaussian conditioning of the stacked joint law.
pub fn exact_condition(data: &Dataset, params: &ModelParams) -> Result<SmoothedMoments> {
    check_oracle_size(data, params)?;
    let (t_len, p) = (data.len(), data.dim());
    let n = t_len * p;
    let cov_x = joint_latent_covariance(params, t_len)?;
    let mut cov_y = cov_x.clone();
    for i in 0..n {
        cov_y[(i, i)] += params.sigma_eps_sq;
    }
    let chol = spd_factor(&cov_y)?;
    let y = stacked(data);
    // cov_x and cov_y are symmetric: Cov(x, y) Cov(y)^{-1} = (Cov(y)^{-1} Cov(x))^T
    let weights = chol.solve(&cov_x).transpose();
    let mean_stack = &weights * y;
    let post = symmetrize(&(&cov_x - &weights * &cov_x));

    let mean = DMatrix::from_fn(t_len, p, |t, k| mean_stack[t * p + k]);
    let m = |t: usize| mean.row(t).transpose();
    let second = (0..t_len)
        .map(|t| post.view((t * p, t * p), (p, p)).into_owned() + m(t) * m(t).transpose())
        .collect();
    let cross = (0..t_len - 1)
        .map(|t| post.view((t * p, (t + 1) * p), (p, p)).into_owned() + m(t) * m(t + 1).transpose())
        .collect();
    Ok(SmoothedMoments {
        mean,
        second,
        cross,
    })
}

/// Dense multivariate normal log density of the stacked observations.
pub fn exact_log_likelihood(data: &Dataset, params: &ModelParams) -> Result<f64> {
    check_oracle_size(data, params)?;
    let n = data.len() * data.dim();
    let mut cov_y = joint_latent_covariance(params, data.len())?;
    for i in 0..n {
        cov_y[(i, i)] += params.sigma_eps_sq;
    }
    let chol = spd_factor(&cov_y)?;
    let y = stacked(data);
    let quad = y.dot(&chol.solve(&y));
    Ok(-0.5 * (n as f64 * (2.0 * PI).ln() + log_det(&chol) + quad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{max_abs, spectral_rescale};
    use crate::rng::rng_from_seed;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn random_params(rng: &mut impl Rng, p: usize, norm: f64) -> ModelParams {
        let a = DMatrix::from_fn(p, p, |_, _| rng.gen_range(-1.0..1.0));
        let a = spectral_rescale(&a, norm).unwrap();
        ModelParams::new(a, rng.gen_range(0.2..2.0), rng.gen_range(0.1..2.0)).unwrap()
    }

    fn random_data(rng: &mut impl Rng, t: usize, p: usize) -> Dataset {
        Dataset::new(DMatrix::from_fn(t, p, |_, _| rng.gen_range(-2.0..2.0))).unwrap()
    }

    fn max_discrepancy(a: &SmoothedMoments, b: &SmoothedMoments) -> f64 {
        let mut d = max_abs(&(&a.mean - &b.mean));
        for (x, y) in a.second.iter().zip(&b.second) {
            d = d.max(max_abs(&(x - y)));
        }
        for (x, y) in a.cross.iter().zip(&b.cross) {
            d = d.max(max_abs(&(x - y)));
        }
        d
    }

    #[test]
    fn independent_time_points_shrink_by_half() {
        let mut rng = rng_from_seed(1);
        let data = random_data(&mut rng, 6, 2);
        let params = ModelParams::new(DMatrix::zeros(2, 2), 1.0, 1.0).unwrap();
        let m = kalman_smooth(&data, &params).unwrap();
        for t in 0..6 {
            let y = data.y.row(t).transpose();
            let expected_mean = &y / 2.0;
            assert_abs_diff_eq!(m.mean.row(t).transpose(), expected_mean, epsilon = 1e-14);
            let expected_second =
                &y * y.transpose() / 4.0 + DMatrix::<f64>::identity(2, 2) * 0.5;
            assert_abs_diff_eq!(m.second[t], expected_second, epsilon = 1e-14);
        }
        for t in 0..5 {
            let expected = m.mean.row(t).transpose() * m.mean.row(t + 1);
            assert_abs_diff_eq!(m.cross[t], expected, epsilon = 1e-14);
        }
        let oracle = exact_condition(&data, &params).unwrap();
        assert!(max_discrepancy(&m, &oracle) < 1e-12);
    }

    #[test]
    fn noiseless_moments_are_observations() {
        let mut rng = rng_from_seed(2);
        let data = random_data(&mut rng, 7, 3);
        let params = random_params(&mut rng, 3, 0.8);
        let params = ModelParams::new(params.a, params.sigma_eta_sq, 0.0).unwrap();
        let m = kalman_smooth(&data, &params).unwrap();
        assert_abs_diff_eq!(m.mean, data.y, epsilon = 1e-12);
        for t in 0..7 {
            let y = data.y.row(t).transpose();
            assert_abs_diff_eq!(m.second[t], &y * y.transpose(), epsilon = 1e-12);
        }
        for t in 0..6 {
            let expected = data.y.row(t).transpose() * data.y.row(t + 1);
            assert_abs_diff_eq!(m.cross[t], expected, epsilon = 1e-12);
        }
    }

    #[test]
    fn two_point_hand_inversion() {
        // p = 1, T = 2, A = 0.5, sigma_eta^2 = 0.75 so Sigma_x = 1; joint latent covariance
        // K = [[1, .5], [.5, 1]] and posterior mean K (K + I)^{-1} y by 2x2 inversion.
        let params = ModelParams::new(DMatrix::from_element(1, 1, 0.5), 0.75, 1.0).unwrap();
        let y = [0.8, -1.3];
        let data = Dataset {
            y: DMatrix::from_column_slice(2, 1, &y),
            x: None,
        };
        let k = [[1.0, 0.5], [0.5, 1.0]];
        let m = [[2.0, 0.5], [0.5, 2.0]];
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        let inv = [[m[1][1] / det, -m[0][1] / det], [-m[1][0] / det, m[0][0] / det]];
        let w = [inv[0][0] * y[0] + inv[0][1] * y[1], inv[1][0] * y[0] + inv[1][1] * y[1]];
        let expected = [k[0][0] * w[0] + k[0][1] * w[1], k[1][0] * w[0] + k[1][1] * w[1]];
        let oracle = exact_condition(&data, &params).unwrap();
        let ks = kalman_smooth(&data, &params).unwrap();
        for t in 0..2 {
            assert_abs_diff_eq!(oracle.mean[(t, 0)], expected[t], epsilon = 1e-14);
            assert_abs_diff_eq!(ks.mean[(t, 0)], expected[t], epsilon = 1e-12);
        }
        // posterior covariance K - K (K + I)^{-1} K
        let kik = |r: usize, c: usize| {
            (0..2)
                .map(|a| (0..2).map(|b| k[r][a] * inv[a][b] * k[b][c]).sum::<f64>())
                .sum::<f64>()
        };
        let cov00 = k[0][0] - kik(0, 0);
        let cov01 = k[0][1] - kik(0, 1);
        assert_abs_diff_eq!(ks.second[0][(0, 0)], cov00 + expected[0].powi(2), epsilon = 1e-12);
        assert_abs_diff_eq!(
            ks.cross[0][(0, 0)],
            cov01 + expected[0] * expected[1],
            epsilon = 1e-12
        );
    }

    #[test]
    fn iid_log_likelihood() {
        let mut rng = rng_from_seed(4);
        let data = random_data(&mut rng, 9, 1);
        let params = ModelParams::new(DMatrix::zeros(1, 1), 0.7, 0.6).unwrap();
        let v = 1.3;
        let expected: f64 = data
            .y
            .iter()
            .map(|y| -0.5 * (2.0 * PI * v).ln() - y * y / (2.0 * v))
            .sum();
        assert_abs_diff_eq!(log_likelihood(&data, &params).unwrap(), expected, epsilon = 1e-10);
    }

    #[test]
    fn log_likelihood_matches_dense_density() {
        let mut rng = rng_from_seed(5);
        for _ in 0..10 {
            let p = rng.gen_range(1..=3);
            let t = rng.gen_range(3..=15);
            let params = random_params(&mut rng, p, 0.85);
            let data = random_data(&mut rng, t, p);
            let ll = log_likelihood(&data, &params).unwrap();
            let dense = exact_log_likelihood(&data, &params).unwrap();
            assert_abs_diff_eq!(ll, dense, epsilon = 1e-6);
        }
    }

    #[test]
    fn log_likelihood_decreases_in_excess_noise() {
        // unit-variance iid data, A = 0, sigma_eta^2 = 1: v = 1 + s, closed-form
        // l(s) = -T/2 log(2 pi v) - SS / (2 v) is decreasing for v > SS / T
        let mut rng = rng_from_seed(6);
        let raw: Vec<f64> = (0..200).map(|_| rng.gen_range(-1.0..1.0f64)).collect();
        let mean = raw.iter().sum::<f64>() / raw.len() as f64;
        let sd = (raw.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / raw.len() as f64).sqrt();
        let ys: Vec<f64> = raw.iter().map(|v| (v - mean) / sd).collect();
        let data = Dataset::new(DMatrix::from_column_slice(ys.len(), 1, &ys)).unwrap();
        let grid = [0.5, 1.0, 2.0, 5.0, 10.0, 50.0, 100.0];
        let lls: Vec<f64> = grid
            .iter()
            .map(|&s| {
                log_likelihood(&data, &ModelParams::new(DMatrix::zeros(1, 1), 1.0, s).unwrap())
                    .unwrap()
            })
            .collect();
        for w in lls.windows(2) {
            assert!(w[1] < w[0]);
        }
    }

    #[test]
    fn lag_one_recursion_matches_direct_identity() {
        // Cov(x_t, x_{t+1} | y) = J_t P_{t+1|T}: an independent closed form for the lag term
        let mut rng = rng_from_seed(8);
        let params = random_params(&mut rng, 3, 0.9);
        let data = random_data(&mut rng, 12, 3);
        let m = kalman_smooth(&data, &params).unwrap();
        let oracle = exact_condition(&data, &params).unwrap();
        for t in 0..11 {
            let lag = &m.cross[t] - m.mean.row(t).transpose() * m.mean.row(t + 1);
            let lag_oracle = &oracle.cross[t] - oracle.mean.row(t).transpose() * oracle.mean.row(t + 1);
            assert!(max_abs(&(lag - lag_oracle)) < 1e-9);
        }
    }

    #[test]
    fn posterior_covariances_are_psd() {
        let mut rng = rng_from_seed(9);
        for _ in 0..10 {
            let p = rng.gen_range(1..=4);
            let params = random_params(&mut rng, p, 0.95);
            let data = random_data(&mut rng, 30, p);
            let m = kalman_smooth(&data, &params).unwrap();
            for t in 0..30 {
                let min_eig = m.covariance(t).symmetric_eigenvalues().min();
                assert!(min_eig >= -1e-10);
            }
        }
    }

    #[test]
    fn coordinate_permutation_is_equivariant() {
        let mut rng = rng_from_seed(10);
        let params = random_params(&mut rng, 4, 0.8);
        let data = random_data(&mut rng, 15, 4);
        let perm = [2, 0, 3, 1];
        let m = kalman_smooth(&data, &params).unwrap();
        let mp = kalman_smooth(&data.permuted(&perm), &params.permuted(&perm)).unwrap();
        let pm = |x: &DMatrix<f64>| crate::model::permute_matrix(x, &perm);
        for t in 0..15 {
            for k in 0..4 {
                assert_abs_diff_eq!(mp.mean[(t, k)], m.mean[(t, perm[k])], epsilon = 1e-12);
            }
            assert_abs_diff_eq!(mp.second[t], pm(&m.second[t]), epsilon = 1e-12);
        }
        for t in 0..14 {
            assert_abs_diff_eq!(mp.cross[t], pm(&m.cross[t]), epsilon = 1e-12);
        }
    }

    #[test]
    fn errors() {
        let data = Dataset::new(DMatrix::zeros(5, 2)).unwrap();
        let params = ModelParams::new(DMatrix::identity(2, 2), 1.0, 1.0).unwrap();
        assert!(matches!(kalman_smooth(&data, &params), Err(Error::NonStationary { .. })));
        let big = Dataset::new(DMatrix::zeros(1001, 2)).unwrap();
        let ok = ModelParams::new(DMatrix::zeros(2, 2), 1.0, 1.0).unwrap();
        assert!(exact_condition(&big, &ok).is_err());
    }
}
