//! Domain types for the latent VAR(1) model observed with additive noise,
//!
//! ```text
//! y_t     = x_t + eps_t,         eps_t ~ N(0, sigma_eps^2 I)
//! x_{t+1} = A x_t + eta_t,       eta_t ~ N(0, sigma_eta^2 I)
//! ```
//!
//! plus the small amount of linear algebra every other module needs: the stationary
//! covariance of `x_t`, the spectral norm, and the companion-form embedding of a
//! lag-`d` model.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Parameters `{A, sigma_eta^2, sigma_eps^2}` of the measurement-error VAR model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub a: DMatrix<f64>,
    pub sigma_eta_sq: f64,
    pub sigma_eps_sq: f64,
}

impl ModelParams {
    pub fn new(a: DMatrix<f64>, sigma_eta_sq: f64, sigma_eps_sq: f64) -> Result<Self> {
        if a.nrows() == 0 || a.nrows() != a.ncols() {
            return Err(Error::Dimension(format!(
                "transition matrix must be square and non-empty, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("transition matrix has non-finite entries".into()));
        }
        if !(sigma_eta_sq.is_finite() && sigma_eta_sq > 0.0) {
            return Err(Error::InvalidInput(format!(
                "sigma_eta_sq must be finite and > 0, got {sigma_eta_sq}"
            )));
        }
        if !(sigma_eps_sq.is_finite() && sigma_eps_sq >= 0.0) {
            return Err(Error::InvalidInput(format!(
                "sigma_eps_sq must be finite and >= 0, got {sigma_eps_sq}"
            )));
        }
        Ok(Self {
            a,
            sigma_eta_sq,
            sigma_eps_sq,
        })
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    /// Applies the coordinate permutation `perm` (new index `k` takes old index `perm[k]`).
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            a: permute_matrix(&self.a, perm),
            ..self.clone()
        }
    }
}

/// An observed `T x p` series, optionally paired with the latent states that generated it.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub y: DMatrix<f64>,
    pub x: Option<DMatrix<f64>>,
}

impl Dataset {
    pub fn new(y: DMatrix<f64>) -> Result<Self> {
        Self::validate(&y)?;
        Ok(Self { y, x: None })
    }

    pub fn with_latent(y: DMatrix<f64>, x: DMatrix<f64>) -> Result<Self> {
        Self::validate(&y)?;
        if x.shape() != y.shape() {
            return Err(Error::Dimension(format!(
                "latent states {:?} do not match observations {:?}",
                x.shape(),
                y.shape()
            )));
        }
        Ok(Self { y, x: Some(x) })
    }

    fn validate(y: &DMatrix<f64>) -> Result<()> {
        if y.nrows() < 3 {
            return Err(Error::InvalidInput(format!(
                "need at least 3 time points, got {}",
                y.nrows()
            )));
        }
        if y.ncols() == 0 {
            return Err(Error::InvalidInput("series has no coordinates".into()));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("series contains missing or non-finite values".into()));
        }
        Ok(())
    }

    /// Number of time points `T`.
    pub fn len(&self) -> usize {
        self.y.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.y.nrows() == 0
    }

    /// Number of coordinates `p`.
    pub fn dim(&self) -> usize {
        self.y.ncols()
    }

    /// Rows `start..end` as a new dataset.
    pub fn segment(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.len() {
            return Err(Error::InvalidInput(format!(
                "segment {start}..{end} out of range for T = {}",
                self.len()
            )));
        }
        let y = self.y.rows(start, end - start).into_owned();
        match &self.x {
            Some(x) => Self::with_latent(y, x.rows(start, end - start).into_owned()),
            None => Self::new(y),
        }
    }

    /// Permutes the coordinates (columns) of the series.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let pick = |m: &DMatrix<f64>| DMatrix::from_fn(m.nrows(), m.ncols(), |t, k| m[(t, perm[k])]);
        Self {
            y: pick(&self.y),
            x: self.x.as_ref().map(pick),
        }
    }
}

/// Null matrix `A0` and the index set `S` under test.
#[derive(Debug, Clone, PartialEq)]
pub struct HypothesisSpec {
    pub a0: DMatrix<f64>,
    pub pairs: Vec<(usize, usize)>,
}

impl HypothesisSpec {
    pub fn new(a0: DMatrix<f64>, pairs: Vec<(usize, usize)>) -> Result<Self> {
        let p = a0.nrows();
        if p == 0 || a0.ncols() != p {
            return Err(Error::Dimension("null matrix must be square and non-empty".into()));
        }
        if pairs.is_empty() {
            return Err(Error::InvalidInput("hypothesis index set is empty".into()));
        }
        if let Some(&(i, j)) = pairs.iter().find(|&&(i, j)| i >= p || j >= p) {
            return Err(Error::InvalidInput(format!(
                "index pair ({i}, {j}) out of range for p = {p}"
            )));
        }
        let mut pairs = pairs;
        pairs.sort_unstable();
        pairs.dedup();
        Ok(Self { a0, pairs })
    }

    /// `A0 = 0` and `S = [p] x [p]`.
    pub fn all_zero(p: usize) -> Self {
        Self {
            a0: DMatrix::zeros(p, p),
            pairs: all_pairs(p),
        }
    }

    /// All pairs against the given null matrix.
    pub fn all_pairs_against(a0: DMatrix<f64>) -> Result<Self> {
        let p = a0.nrows();
        Self::new(a0, all_pairs(p))
    }

    /// Builds `S` from a `p x p` mask; nonzero entries are included.
    pub fn with_mask(a0: DMatrix<f64>, mask: &DMatrix<f64>) -> Result<Self> {
        if mask.shape() != a0.shape() {
            return Err(Error::Dimension(format!(
                "mask {:?} does not match null matrix {:?}",
                mask.shape(),
                a0.shape()
            )));
        }
        let pairs = all_pairs(a0.nrows())
            .into_iter()
            .filter(|&(i, j)| mask[(i, j)] != 0.0)
            .collect();
        Self::new(a0, pairs)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

pub fn all_pairs(p: usize) -> Vec<(usize, usize)> {
    (0..p).flat_map(|i| (0..p).map(move |j| (i, j))).collect()
}

pub(crate) fn permute_matrix(m: &DMatrix<f64>, perm: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(perm[i], perm[j])])
}

/// Largest singular value.
pub fn spectral_norm(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.singular_values().max()
}

pub(crate) fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// Solves the discrete Lyapunov equation `S = A S A^T + sigma_eta^2 I` for the stationary
/// covariance of the latent process.
///
/// Uses the doubling iteration `S <- S + M S M^T`, `M <- M^2` started from
/// `S = sigma_eta^2 I`, `M = A`, which sums the series `sum_k A^k Q (A^k)^T` in
/// `O(log)` sweeps, followed by a few plain fixed-point sweeps to polish the residual.
pub fn stationary_covariance(params: &ModelParams) -> Result<DMatrix<f64>> {
    let a = &params.a;
    let p = params.dim();
    let norm = spectral_norm(a);
    if norm >= 1.0 {
        return Err(Error::NonStationary { norm });
    }
    let q = DMatrix::<f64>::identity(p, p) * params.sigma_eta_sq;
    let mut sigma = q.clone();
    let mut m = a.clone();
    for _ in 0..64 {
        let incr = &m * &sigma * m.transpose();
        sigma += &incr;
        let scale = max_abs(&sigma).max(f64::MIN_POSITIVE);
        if max_abs(&incr) <= 1e-17 * scale {
            break;
        }
        m = &m * &m;
    }
    for _ in 0..3 {
        let next = a * &sigma * a.transpose() + &q;
        let change = max_abs(&(&next - &sigma));
        sigma = next;
        if change == 0.0 {
            break;
        }
    }
    Ok(symmetrize(&sigma))
}

pub(crate) fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Rescales `a` so that its spectral norm equals `target`. The zero pattern is unchanged.
pub fn spectral_rescale(a: &DMatrix<f64>, target: f64) -> Result<DMatrix<f64>> {
    if !(target.is_finite() && target > 0.0) {
        return Err(Error::InvalidInput(format!("target norm must be > 0, got {target}")));
    }
    let norm = spectral_norm(a);
    if norm == 0.0 {
        return Err(Error::InvalidInput("cannot rescale the zero matrix".into()));
    }
    Ok(a * (target / norm))
}

/// Stacks the lag matrices `[A_1, ..., A_d]` of a VAR(d) into its `pd x pd` companion
/// matrix: the first block row holds the lags, the block subdiagonal holds identities.
pub fn companion_embed(blocks: &[DMatrix<f64>]) -> Result<DMatrix<f64>> {
    let first = blocks
        .first()
        .ok_or_else(|| Error::InvalidInput("companion form needs at least one lag".into()))?;
    let p = first.nrows();
    if p == 0 {
        return Err(Error::Dimension("lag blocks must be non-empty".into()));
    }
    if let Some((l, b)) = blocks
        .iter()
        .enumerate()
        .find(|(_, b)| b.nrows() != p || b.ncols() != p)
    {
        return Err(Error::Dimension(format!(
            "lag block {} is {}x{}, expected {p}x{p}",
            l + 1,
            b.nrows(),
            b.ncols()
        )));
    }
    let d = blocks.len();
    let mut out = DMatrix::zeros(p * d, p * d);
    for (l, b) in blocks.iter().enumerate() {
        out.view_mut((0, l * p), (p, p)).copy_from(b);
    }
    for l in 1..d {
        out.view_mut((l * p, (l - 1) * p), (p, p))
            .fill_with_identity();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn lyapunov_residual(params: &ModelParams, s: &DMatrix<f64>) -> f64 {
        let p = params.dim();
        let r = s - &params.a * s * params.a.transpose()
            - DMatrix::<f64>::identity(p, p) * params.sigma_eta_sq;
        max_abs(&r)
    }

    // Independent route: truncated series sum_k a^{2k} s2 for the scalar case.
    fn scalar_series(a: f64, s2: f64) -> f64 {
        let mut total = 0.0;
        let mut term = s2;
        while term > 1e-300 && term > total * 1e-18 {
            total += term;
            term *= a * a;
        }
        total
    }

    #[test]
    fn stationary_covariance_zero_matrix_is_identity() {
        let params = ModelParams::new(DMatrix::zeros(4, 4), 1.0, 0.0).unwrap();
        let s = stationary_covariance(&params).unwrap();
        assert_eq!(s, DMatrix::identity(4, 4));
    }

    #[test]
    fn stationary_covariance_scalar_matches_series() {
        let expected = scalar_series(0.5, 1.0);
        assert_abs_diff_eq!(expected, 4.0 / 3.0, epsilon = 1e-15);
        let params = ModelParams::new(DMatrix::from_element(1, 1, 0.5), 1.0, 0.0).unwrap();
        let s = stationary_covariance(&params).unwrap();
        assert_abs_diff_eq!(s[(0, 0)], expected, epsilon = 1e-12);
    }

    #[test]
    fn stationary_covariance_diagonal_per_coordinate() {
        let expected = scalar_series(0.5, 2.0);
        let params = ModelParams::new(DMatrix::identity(3, 3) * 0.5, 2.0, 0.0).unwrap();
        let s = stationary_covariance(&params).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let e = if i == j { expected } else { 0.0 };
                assert_abs_diff_eq!(s[(i, j)], e, epsilon = 1e-12);
            }
        }
        assert_abs_diff_eq!(expected, 8.0 / 3.0, epsilon = 1e-14);
    }

    #[test]
    fn stationary_covariance_rejects_nonstationary() {
        let params = ModelParams::new(DMatrix::identity(2, 2), 1.0, 0.0).unwrap();
        assert!(matches!(
            stationary_covariance(&params),
            Err(Error::NonStationary { .. })
        ));
        let non_square = ModelParams::new(DMatrix::zeros(2, 3), 1.0, 0.0);
        assert!(matches!(non_square, Err(Error::Dimension(_))));
    }

    #[test]
    fn stationary_covariance_near_unit_norm() {
        let params = ModelParams::new(DMatrix::identity(2, 2) * 0.999, 1.0, 0.0).unwrap();
        let s = stationary_covariance(&params).unwrap();
        assert!(lyapunov_residual(&params, &s) <= 1e-10 * max_abs(&s));
    }

    #[test]
    fn spectral_rescale_examples() {
        let r = spectral_rescale(&DMatrix::identity(2, 2), 0.97).unwrap();
        assert_abs_diff_eq!(r, DMatrix::identity(2, 2) * 0.97, epsilon = 1e-15);
        let d = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![2.0, 1.0]));
        let r = spectral_rescale(&d, 0.5).unwrap();
        assert_abs_diff_eq!(r[(0, 0)], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(r[(1, 1)], 0.25, epsilon = 1e-15);
        assert!(spectral_rescale(&DMatrix::zeros(2, 2), 0.5).is_err());
    }

    #[test]
    fn spectral_norm_handles_all_ones_null_direction() {
        // all-ones lies in the null space of A^T A here
        let a = DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]);
        assert_abs_diff_eq!(spectral_norm(&a), 2.0, epsilon = 1e-12);
    }

    #[test]
    fn companion_examples() {
        let a = DMatrix::from_row_slice(2, 2, &[0.1, 0.2, 0.3, 0.4]);
        assert_eq!(companion_embed(&[a.clone()]).unwrap(), a);
        let c = companion_embed(&[
            DMatrix::from_element(1, 1, 0.3),
            DMatrix::from_element(1, 1, 0.2),
        ])
        .unwrap();
        assert_eq!(c, DMatrix::from_row_slice(2, 2, &[0.3, 0.2, 1.0, 0.0]));
        let z = companion_embed(&[DMatrix::zeros(1, 1), DMatrix::zeros(1, 1)]).unwrap();
        assert_eq!(z, DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, 0.0]));
        assert!(companion_embed(&[]).is_err());
        assert!(companion_embed(&[DMatrix::zeros(2, 2), DMatrix::zeros(3, 3)]).is_err());
    }

    #[test]
    fn hypothesis_spec_validation() {
        assert!(HypothesisSpec::new(DMatrix::zeros(2, 2), vec![]).is_err());
        assert!(HypothesisSpec::new(DMatrix::zeros(2, 2), vec![(0, 2)]).is_err());
        let mask = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let h = HypothesisSpec::with_mask(DMatrix::zeros(2, 2), &mask).unwrap();
        assert_eq!(h.pairs, vec![(0, 0), (1, 1)]);
    }

    fn small_matrix(max_p: usize) -> impl Strategy<Value = DMatrix<f64>> {
        (1..=max_p).prop_flat_map(|p| {
            proptest::collection::vec(-1.0..1.0f64, p * p)
                .prop_map(move |v| DMatrix::from_vec(p, p, v))
        })
    }

    proptest! {
        #[test]
        fn lyapunov_residual_is_tiny(a in small_matrix(6), norm in 0.05..0.98f64, s2 in 0.01..4.0f64) {
            prop_assume!(spectral_norm(&a) > 1e-3);
            let a = spectral_rescale(&a, norm).unwrap();
            let params = ModelParams::new(a, s2, 0.0).unwrap();
            let s = stationary_covariance(&params).unwrap();
            prop_assert!(lyapunov_residual(&params, &s) <= 1e-10);
            let min_eig = s.clone().symmetric_eigenvalues().min();
            prop_assert!(min_eig > 0.0);
        }

        #[test]
        fn rescale_is_idempotent(a in small_matrix(6), target in 0.1..2.0f64) {
            prop_assume!(spectral_norm(&a) > 1e-3);
            let once = spectral_rescale(&a, target).unwrap();
            let twice = spectral_rescale(&once, target).unwrap();
            prop_assert!(max_abs(&(&once - &twice)) <= 1e-12);
            prop_assert!((spectral_norm(&once) - target).abs() <= 1e-10);
            for (x, y) in a.iter().zip(once.iter()) {
                prop_assert_eq!(*x == 0.0, *y == 0.0);
            }
        }
    }
}
