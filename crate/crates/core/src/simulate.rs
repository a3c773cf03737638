//! Transition-matrix generators for the four network topologies and a sampler for the
//! measurement-error VAR model.
//!
//! Topologies (all with `p` coordinates):
//!
//! * `banded`: nonzero iff `|i - j| <= BAND_HALF_WIDTH` (tridiagonal).
//! * `erdos_renyi`: diagonal always nonzero, each off-diagonal entry independently with
//!   probability `2 / p`.
//! * `stochastic_block`: 5 contiguous equal blocks; diagonal always nonzero, off-diagonal
//!   entries with probability `10 / p` within a block and `0.2 / p` between blocks.
//! * `hub`: `ceil(p / 10)` hub rows (every tenth row, starting at row 0), each nonzero on
//!   the diagonal and on a uniformly random `round(0.3 p)` columns; all other rows are
//!   nonzero only on the diagonal.
//!
//! Nonzero magnitudes are Uniform(0.5, 1) with independent random signs, and the matrix
//! is then rescaled to the requested spectral norm.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{spectral_norm, spectral_rescale, stationary_covariance, Dataset, ModelParams};
use crate::rng::{derive_seed, rng_from_seed, stream, SimRng};

pub const BAND_HALF_WIDTH: usize = 1;
pub const SBM_BLOCKS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetworkKind {
    Banded,
    ErdosRenyi,
    StochasticBlock,
    Hub,
}

impl NetworkKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            NetworkKind::Banded => "banded",
            NetworkKind::ErdosRenyi => "erdos_renyi",
            NetworkKind::StochasticBlock => "stochastic_block",
            NetworkKind::Hub => "hub",
        }
    }
}

impl std::str::FromStr for NetworkKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "banded" => Ok(NetworkKind::Banded),
            "erdos_renyi" | "er" => Ok(NetworkKind::ErdosRenyi),
            "stochastic_block" | "sbm" => Ok(NetworkKind::StochasticBlock),
            "hub" => Ok(NetworkKind::Hub),
            other => Err(Error::InvalidInput(format!("unknown network kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub kind: NetworkKind,
    pub p: usize,
    pub target_spectral_norm: f64,
    #[serde(default)]
    pub seed: u64,
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        if self.p == 0 {
            return Err(Error::InvalidInput("p must be positive".into()));
        }
        if !(self.target_spectral_norm > 0.0 && self.target_spectral_norm < 1.0) {
            return Err(Error::InvalidInput(format!(
                "target spectral norm must lie in (0, 1), got {}",
                self.target_spectral_norm
            )));
        }
        if matches!(self.kind, NetworkKind::StochasticBlock | NetworkKind::Hub) && self.p < 4 {
            return Err(Error::InvalidInput(format!(
                "{} networks need p >= 4, got {}",
                self.kind.as_str(),
                self.p
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub network: NetworkSpec,
    #[serde(rename = "T")]
    pub t: usize,
    pub sigma_eta: f64,
    pub sigma_eps: f64,
    #[serde(default)]
    pub burn_in: usize,
    pub seed: u64,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        if self.t < 3 {
            return Err(Error::InvalidInput(format!("T must be >= 3, got {}", self.t)));
        }
        if !(self.sigma_eta > 0.0 && self.sigma_eta.is_finite()) {
            return Err(Error::InvalidInput("sigma_eta must be > 0".into()));
        }
        if !(self.sigma_eps >= 0.0 && self.sigma_eps.is_finite()) {
            return Err(Error::InvalidInput("sigma_eps must be >= 0".into()));
        }
        Ok(())
    }
}

/// Boolean support pattern of the requested topology.
pub fn support_pattern(kind: NetworkKind, p: usize, rng: &mut SimRng) -> Vec<Vec<bool>> {
    let mut s = vec![vec![false; p]; p];
    match kind {
        NetworkKind::Banded => {
            for (i, row) in s.iter_mut().enumerate() {
                for (j, cell) in row.iter_mut().enumerate() {
                    *cell = i.abs_diff(j) <= BAND_HALF_WIDTH;
                }
            }
        }
        NetworkKind::ErdosRenyi => {
            let prob = (2.0 / p as f64).min(1.0);
            for (i, row) in s.iter_mut().enumerate() {
                for (j, cell) in row.iter_mut().enumerate() {
                    *cell = i == j || rng.gen::<f64>() < prob;
                }
            }
        }
        NetworkKind::StochasticBlock => {
            let within = (10.0 / p as f64).min(1.0);
            let between = (0.2 / p as f64).min(1.0);
            let block = |i: usize| i * SBM_BLOCKS / p;
            for (i, row) in s.iter_mut().enumerate() {
                for (j, cell) in row.iter_mut().enumerate() {
                    let prob = if block(i) == block(j) { within } else { between };
                    *cell = i == j || rng.gen::<f64>() < prob;
                }
            }
        }
        NetworkKind::Hub => {
            let n_hubs = p.div_ceil(10);
            let n_cols = ((0.3 * p as f64).round() as usize).clamp(1, p);
            for (i, row) in s.iter_mut().enumerate() {
                row[i] = true;
            }
            for h in 0..n_hubs {
                let row = h * 10;
                for j in sample(rng, p, n_cols).into_iter() {
                    s[row][j] = true;
                }
            }
        }
    }
    s
}

/// Draws a transition matrix with the requested topology and spectral norm.
pub fn gen_structure(spec: &NetworkSpec) -> Result<DMatrix<f64>> {
    spec.validate()?;
    let p = spec.p;
    let mut rng = rng_from_seed(derive_seed(spec.seed, &[stream::STRUCTURE]));
    let support = support_pattern(spec.kind, p, &mut rng);
    let mut a = DMatrix::zeros(p, p);
    for i in 0..p {
        for j in 0..p {
            if support[i][j] {
                let mag = rng.gen_range(0.5..1.0);
                let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                a[(i, j)] = sign * mag;
            }
        }
    }
    spectral_rescale(&a, spec.target_spectral_norm)
}

fn normal_vector(rng: &mut SimRng, p: usize) -> DVector<f64> {
    DVector::from_fn(p, |_, _| rng.sample(StandardNormal))
}

/// Samples `(x, y)` from the model with `x_1` drawn from the stationary law (or, when
/// `config.burn_in > 0`, from `x = 0` run forward `burn_in` steps).
///
/// The latent path and the measurement noise use separate substreams of `config.seed`,
/// so changing `sigma_eps` leaves `x` unchanged.
pub fn gen_data(params: &ModelParams, config: &SimConfig) -> Result<Dataset> {
    if config.t < 3 {
        return Err(Error::InvalidInput(format!("T must be >= 3, got {}", config.t)));
    }
    let p = params.dim();
    let norm = spectral_norm(&params.a);
    if norm >= 1.0 {
        return Err(Error::NonStationary { norm });
    }
    let t_len = config.t;
    let eta_sd = params.sigma_eta_sq.sqrt();
    let eps_sd = params.sigma_eps_sq.sqrt();
    let mut latent_rng = rng_from_seed(derive_seed(config.seed, &[stream::DATA, 0]));
    let mut noise_rng = rng_from_seed(derive_seed(config.seed, &[stream::DATA, 1]));

    let mut state = if config.burn_in == 0 {
        let sigma_x = stationary_covariance(params)?;
        let chol = Cholesky::new(sigma_x)
            .ok_or_else(|| Error::Numerical("stationary covariance is not positive definite".into()))?;
        chol.l() * normal_vector(&mut latent_rng, p)
    } else {
        let mut s = DVector::zeros(p);
        for _ in 0..config.burn_in {
            s = &params.a * s + normal_vector(&mut latent_rng, p) * eta_sd;
        }
        s
    };

    let mut x = DMatrix::zeros(t_len, p);
    for t in 0..t_len {
        if t > 0 {
            state = &params.a * &state + normal_vector(&mut latent_rng, p) * eta_sd;
        }
        x.row_mut(t).copy_from(&state.transpose());
    }
    let mut y = x.clone();
    if eps_sd > 0.0 {
        for t in 0..t_len {
            for k in 0..p {
                let e: f64 = noise_rng.sample(StandardNormal);
                y[(t, k)] += eps_sd * e;
            }
        }
    }
    Dataset::with_latent(y, x)
}

/// Generates the transition matrix from `config.network` and samples data from it, with
/// variances `sigma_eta^2`, `sigma_eps^2` taken from the config.
pub fn simulate(config: &SimConfig) -> Result<(ModelParams, Dataset)> {
    config.validate()?;
    let a = gen_structure(&config.network)?;
    let params = ModelParams::new(a, config.sigma_eta.powi(2), config.sigma_eps.powi(2))?;
    let data = gen_data(&params, config)?;
    Ok((params, data))
}
