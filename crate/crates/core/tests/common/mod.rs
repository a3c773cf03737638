#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand::SeedableRng;
use rand_distr::StandardNormal;

use varme::model::{spectral_rescale, ModelParams};
use varme::simulate::{gen_data, NetworkKind, NetworkSpec, SimConfig};
use varme::Dataset;

pub fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

pub fn gaussian_matrix(rng: &mut ChaCha20Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
}

/// Dense Gaussian transition matrix rescaled to spectral norm `norm`.
pub fn random_transition(rng: &mut ChaCha20Rng, p: usize, norm: f64) -> DMatrix<f64> {
    spectral_rescale(&gaussian_matrix(rng, p, p), norm).unwrap()
}

/// Random parameters with `||A||_2 = norm` and variances in `[0.05, 1]`.
pub fn random_params(rng: &mut ChaCha20Rng, p: usize, norm: f64) -> ModelParams {
    let a = random_transition(rng, p, norm);
    let eta = rng.gen_range(0.05..1.0);
    let eps = rng.gen_range(0.05..1.0);
    ModelParams::new(a, eta, eps).unwrap()
}

/// A series of length `t` drawn from the stationary model.
pub fn sample(params: &ModelParams, t: usize, seed: u64) -> Dataset {
    let config = SimConfig {
        network: NetworkSpec {
            kind: NetworkKind::Banded,
            p: params.dim(),
            target_spectral_norm: 0.5,
            seed,
        },
        t,
        sigma_eta: params.sigma_eta_sq.sqrt(),
        sigma_eps: params.sigma_eps_sq.sqrt(),
        burn_in: 0,
        seed,
    };
    gen_data(params, &config).unwrap()
}

pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax()
}

/// Solves the square system, `None` if it is (numerically) singular.
fn solve_square(m: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let lu = m.clone().lu();
    let x = lu.solve(b)?;
    if !x.iter().all(|v| v.is_finite()) || (m * &x - b).amax() > 1e-9 * (1.0 + b.amax()) {
        return None;
    }
    Some(x)
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::with_capacity(k);
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            if n - i < k - cur.len() {
                break;
            }
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    rec(0, n, k, &mut cur, &mut out);
    out
}

/// Optimal value of `min ||a||_1 s.t. ||g - G0 a||_inf <= tau` by enumerating every
/// vertex of `{z = (a+, a-) >= 0 : M z <= b}`. `None` if the program is infeasible.
pub fn dantzig_vertex_optimum(g0: &DMatrix<f64>, g: &DVector<f64>, tau: f64) -> Option<f64> {
    let p = g0.nrows();
    let n = 2 * p;
    // rows: M z <= b (2p of them), then -z <= 0 (2p)
    let mut rows = DMatrix::zeros(4 * p, n);
    let mut rhs = DVector::zeros(4 * p);
    for i in 0..p {
        for j in 0..p {
            rows[(i, j)] = g0[(i, j)];
            rows[(i, p + j)] = -g0[(i, j)];
            rows[(p + i, j)] = -g0[(i, j)];
            rows[(p + i, p + j)] = g0[(i, j)];
        }
        rhs[i] = g[i] + tau;
        rhs[p + i] = tau - g[i];
    }
    for j in 0..n {
        rows[(2 * p + j, j)] = -1.0;
    }
    let mut best: Option<f64> = None;
    for active in combinations(4 * p, n) {
        let sub = DMatrix::from_fn(n, n, |r, c| rows[(active[r], c)]);
        let sub_b = DVector::from_fn(n, |r, _| rhs[active[r]]);
        let Some(z) = solve_square(&sub, &sub_b) else { continue };
        let slack = &rows * &z - &rhs;
        if slack.max() > 1e-9 * (1.0 + rhs.amax()) {
            continue;
        }
        let obj = z.sum();
        best = Some(best.map_or(obj, |b: f64| b.min(obj)));
    }
    best
}

/// A random positive-definite `p x p` matrix with condition number at most about 50.
pub fn random_spd(rng: &mut ChaCha20Rng, p: usize) -> DMatrix<f64> {
    let b = gaussian_matrix(rng, p, p);
    &b * b.transpose() / p as f64 + DMatrix::identity(p, p) * 0.1
}
