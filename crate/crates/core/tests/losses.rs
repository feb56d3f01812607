use mid_core::losses::{compute_centers, id_loss, smoothed_cross_entropy, total_loss, LossWeights, ModalityOutputs};
use mid_tensor::{Graph, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

mod common;
use common::{brute_center_triplet, center_triplet_value as triplet};

#[test]
fn uniform_predictions_cost_log_p() {
    let gap = common::uniform_id_loss_gap();
    assert!(gap < 1e-6, "{gap}");
}

#[test]
fn smoothing_matches_hand_formula() {
    let logits = [2.0f64, 0.5, -1.0];
    let lse = logits.iter().map(|z| z.exp()).sum::<f64>().ln();
    let logp: Vec<f64> = logits.iter().map(|z| z - lse).collect();
    let xi = 0.1;
    let want = -((1.0 - xi * 2.0 / 3.0) * logp[0] + xi / 3.0 * (logp[1] + logp[2]));
    let mut g = Graph::new();
    let z = g.constant(Tensor::new(&[1, 3], logits.iter().map(|&v| v as f32).collect()).unwrap());
    let l = smoothed_cross_entropy(&mut g, z, &[0], xi as f32).unwrap();
    assert!((g.value(l).item().unwrap() as f64 - want).abs() < 1e-6);
}

#[test]
fn center_triplet_hand_case_matches_enumeration() {
    let (got, want) = common::center_triplet_hand_case(0.3);
    assert!(want > 0.0);
    assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    // A wide margin makes every hinge active.
    let (got, want) = common::center_triplet_hand_case(3.0);
    assert!((got - want).abs() < 1e-6, "{got} vs {want}");
}

#[test]
fn centers_are_first_appearance_ordered_means() {
    let mut g = Graph::new();
    let f = g.constant(Tensor::new(&[4, 1], vec![1.0, 3.0, 5.0, 9.0]).unwrap());
    let (c, ids) = compute_centers(&mut g, f, &[7, 2, 7, 2]).unwrap();
    assert_eq!(ids, vec![7, 2]);
    assert_eq!(g.value(c).data(), &[3.0, 6.0]);
}

fn outputs(g: &mut Graph, rng: &mut ChaCha8Rng) -> [ModalityOutputs; 3] {
    let labels = vec![0usize, 0, 1, 1, 2, 2];
    std::array::from_fn(|_| ModalityOutputs {
        features: g.constant(Tensor::randn(&[6, 4], 1.0, rng)),
        logits: vec![g.constant(Tensor::randn(&[6, 3], 1.0, rng))],
        labels: labels.clone(),
    })
}

#[test]
fn total_loss_is_linear_in_weights() {
    let mut g = Graph::new();
    let [a, b, c] = outputs(&mut g, &mut ChaCha8Rng::seed_from_u64(9));
    let base = LossWeights::default();
    let one = total_loss(&mut g, &a, &b, Some(&c), &base).unwrap();
    let expected: f32 = one.parts.iter().zip(base.lambdas).map(|(p, l)| p * l).sum();
    assert!((g.value(one.total).item().unwrap() - expected).abs() < 1e-4);
    let doubled = LossWeights { lambdas: base.lambdas.map(|l| 2.0 * l), ..base.clone() };
    let two = total_loss(&mut g, &a, &b, Some(&c), &doubled).unwrap();
    let (l1, l2) = (g.value(one.total).item().unwrap(), g.value(two.total).item().unwrap());
    assert!((l2 - 2.0 * l1).abs() < 1e-4 * l1.abs().max(1.0));
}

#[test]
fn two_modality_loss_needs_no_mixed_outputs() {
    let mut g = Graph::new();
    let [a, b, _] = outputs(&mut g, &mut ChaCha8Rng::seed_from_u64(2));
    let w = LossWeights::default();
    assert!(total_loss(&mut g, &a, &b, None, &w).is_err());
    let l = total_loss(&mut g, &a, &b, None, &w.without_mix()).unwrap();
    assert_eq!([l.parts[1], l.parts[2], l.parts[5]], [0.0; 3]);
}

#[test]
fn id_loss_averages_heads() {
    let mut g = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let h1 = g.constant(Tensor::randn(&[2, 3], 1.0, &mut rng));
    let h2 = g.constant(Tensor::randn(&[2, 3], 1.0, &mut rng));
    let labels = [1, 2];
    let l1 = smoothed_cross_entropy(&mut g, h1, &labels, 0.1).unwrap();
    let l2 = smoothed_cross_entropy(&mut g, h2, &labels, 0.1).unwrap();
    let both = id_loss(&mut g, &[h1, h2], &labels, 0.1).unwrap();
    let want = (g.value(l1).item().unwrap() + g.value(l2).item().unwrap()) / 2.0;
    assert!((g.value(both).item().unwrap() - want).abs() < 1e-6);
}

#[test]
fn loss_gradients_match_finite_differences() {
    for c in common::model_cases() {
        match common::run_grad_case(&c) {
            Ok(worst) => println!("{}: worst error {worst:.2e}", c.name),
            Err(e) => panic!("{e}"),
        }
    }
}

proptest! {
    #[test]
    fn center_triplet_is_translation_invariant(
        seed in any::<u64>(),
        shift in proptest::collection::vec(-3.0f64..3.0, 3),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = || -> Vec<Vec<f64>> {
            (0..4).map(|_| Tensor::randn(&[3], 1.0, &mut rng).data().iter().map(|&v| v as f64).collect()).collect()
        };
        let (ca, cb) = (draw(), draw());
        let moved = |c: &[Vec<f64>]| -> Vec<Vec<f64>> { c.iter().map(|r| r.iter().zip(&shift).map(|(a, b)| a + b).collect()).collect() };
        let (l0, l1) = (triplet(&ca, &cb, 0.3), triplet(&moved(&ca), &moved(&cb), 0.3));
        prop_assert!((l0 - l1).abs() < 1e-4, "{} vs {}", l0, l1);
        prop_assert!((l0 - brute_center_triplet(&ca, &cb, 0.3)).abs() < 1e-4);
    }
}
