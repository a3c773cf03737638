mod common;

use nalgebra::DMatrix;
use proptest::prelude::*;

use common::{random_params, rng, sample};
use varme::model::{stationary_covariance, spectral_norm};
use varme::simulate::{gen_structure, simulate, NetworkKind, NetworkSpec, SimConfig};

fn lag_covariance(x: &DMatrix<f64>, lag: usize) -> DMatrix<f64> {
    let n = x.nrows() - lag;
    x.rows(lag, n).transpose() * x.rows(0, n) / n as f64
}

#[test]
fn sample_moments_match_the_stationary_law() {
    for seed in 0..3u64 {
        let mut r = rng(seed);
        let params = random_params(&mut r, 3, 0.7);
        let data = sample(&params, 40_000, seed);
        let x = data.x.as_ref().unwrap();
        let sigma = stationary_covariance(&params).unwrap();
        let scale = sigma.amax();
        let c0 = lag_covariance(x, 0);
        assert!((&c0 - &sigma).amax() < 0.08 * scale, "seed {seed}: {c0} vs {sigma}");
        // E[x_{t+1} x_t^T] = A Sigma_x
        let c1 = lag_covariance(x, 1);
        assert!((&c1 - &params.a * &sigma).amax() < 0.08 * scale, "seed {seed}");
        let noise = &data.y - x;
        let v = noise.norm_squared() / noise.len() as f64;
        assert!((v / params.sigma_eps_sq - 1.0).abs() < 0.03, "seed {seed}: {v}");
    }
}

#[test]
fn burn_in_start_reaches_the_same_law() {
    let a = gen_structure(&NetworkSpec {
        kind: NetworkKind::Banded,
        p: 4,
        target_spectral_norm: 0.6,
        seed: 1,
    })
    .unwrap();
    let config = SimConfig {
        network: NetworkSpec {
            kind: NetworkKind::Banded,
            p: 4,
            target_spectral_norm: 0.6,
            seed: 1,
        },
        t: 40_000,
        sigma_eta: 0.5,
        sigma_eps: 0.1,
        burn_in: 200,
        seed: 9,
    };
    let (params, data) = simulate(&config).unwrap();
    assert_eq!(params.a, a);
    let sigma = stationary_covariance(&params).unwrap();
    let c0 = lag_covariance(data.x.as_ref().unwrap(), 0);
    assert!((&c0 - &sigma).amax() < 0.08 * sigma.amax());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn every_topology_is_stationary_and_seeded(seed in any::<u64>(), k in 0usize..4, p in 10usize..=25, norm in 0.1f64..0.99) {
        let kind = [NetworkKind::Banded, NetworkKind::ErdosRenyi, NetworkKind::StochasticBlock, NetworkKind::Hub][k];
        let spec = NetworkSpec { kind, p, target_spectral_norm: norm, seed };
        let a = gen_structure(&spec).unwrap();
        prop_assert!((spectral_norm(&a) - norm).abs() < 1e-9);
        prop_assert_eq!(&a, &gen_structure(&spec).unwrap());
        for i in 0..p {
            prop_assert!(a[(i, i)] != 0.0);
        }
        let config = SimConfig { network: spec, t: 20, sigma_eta: 0.3, sigma_eps: 0.2, burn_in: 0, seed };
        let (_, d1) = simulate(&config).unwrap();
        let (_, d2) = simulate(&config).unwrap();
        prop_assert_eq!(d1, d2);
    }
}
