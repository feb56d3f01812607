use mid_core::backbone::{build_network, NetworkConfig};
use mid_core::macd::{compose_filters, decomposed_param_count, full_param_count, init_decomposition};
use mid_tensor::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;

/// `W[o, c, u, v] = Σ_k α[k, u, v] Ψ[k, c, o]` by explicit loops.
fn compose_oracle(alpha: &Tensor, psi: &Tensor) -> Vec<f64> {
    let (k, s) = (alpha.shape()[0], alpha.shape()[1]);
    let (ci, co) = (psi.shape()[1], psi.shape()[2]);
    let a = |kk: usize, u: usize, v: usize| alpha.data()[(kk * s + u) * s + v] as f64;
    let p = |kk: usize, c: usize, o: usize| psi.data()[(kk * ci + c) * co + o] as f64;
    let mut w = Vec::with_capacity(co * ci * s * s);
    for o in 0..co {
        for c in 0..ci {
            for u in 0..s {
                for v in 0..s {
                    w.push((0..k).map(|kk| a(kk, u, v) * p(kk, c, o)).sum());
                }
            }
        }
    }
    w
}

#[test]
fn composition_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10 {
        let (k, s, ci, co) =
            (rng.random_range(1..6), [1, 3, 5][rng.random_range(0..3)], rng.random_range(1..5), rng.random_range(1..5));
        let alpha = Tensor::randn(&[k, s, s], 1.0, &mut rng);
        let psi = Tensor::randn(&[k, ci, co], 1.0, &mut rng);
        let mut g = Graph::new();
        let (a, p) = (g.constant(alpha.clone()), g.constant(psi.clone()));
        let w = compose_filters(&mut g, a, p).unwrap();
        assert_eq!(g.value(w).shape(), &[co, ci, s, s]);
        for (got, want) in g.value(w).data().iter().zip(compose_oracle(&alpha, &psi)) {
            assert!((*got as f64 - want).abs() < 1e-5);
        }
    }
}

#[test]
fn two_stage_and_composed_paths_agree() {
    let worst = common::check_macd_equivalence(12).unwrap();
    println!("worst max-abs difference {worst:e}");
}

#[test]
fn parameter_counts_follow_formula() {
    assert_eq!(decomposed_param_count(9, 3, 64, 64), 3 * 9 * 9 + 9 * 64 * 64);
    assert_eq!(full_param_count(3, 64, 64), 3 * 9 * 64 * 64);
    // The decomposition is smaller than three separate filter banks.
    assert!(decomposed_param_count(9, 3, 16, 16) < full_param_count(3, 16, 16));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let p = init_decomposition(4, 3, 5, 7, &mut rng).unwrap();
    let stored = 3 * p.alpha_rgb.numel() + p.psi.numel();
    assert_eq!(stored, decomposed_param_count(4, 3, 5, 7));
    common::check_param_counts().unwrap();
}

#[test]
fn network_counts_modality_specific_bases() {
    let cfg = NetworkConfig::default();
    let net = build_network(&cfg, 12, (72, 36), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let k = cfg.k_bases();
    // Two decomposed 3×3 layers per decomposed block, three banks each.
    let want = cfg.n_decomposed * 2 * 3 * k * cfg.kernel * cfg.kernel;
    assert_eq!(net.modality_specific_count(), want);
    let plain =
        build_network(&NetworkConfig { n_decomposed: 0, ..cfg }, 12, (72, 36), &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
    assert_eq!(plain.modality_specific_count(), 0);
}

#[test]
fn initialization_gives_he_variance() {
    let (k, s, ci, co) = (9, 3, 16, 8);
    let mut samples = Vec::new();
    for seed in 0..100 {
        let p = init_decomposition(k, s, ci, co, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        assert_eq!(p.alpha_rgb, p.alpha_ir);
        assert_eq!(p.alpha_rgb, p.alpha_mix);
        samples.extend(compose_oracle(&p.alpha_rgb, &p.psi));
    }
    let mean = samples.iter().sum::<f64>() / samples.len() as f64;
    let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / samples.len() as f64;
    let target = 2.0 / (s * s * ci) as f64;
    println!("composed filter variance {var:.5}, target {target:.5}");
    assert!(mean.abs() < 0.01);
    assert!((var / target - 1.0).abs() < 0.1, "variance {var} vs {target}");
}
