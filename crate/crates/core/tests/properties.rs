mod common;

use common::*;
use fedmix::augment::AugmentFamily;
use fedmix::data::{dirichlet_partition, largest_remainder, make_synthetic, split_labeled, DirichletConfig};
use fedmix::federation::{aggregate_unsupervised, fedfreq_from_counts, fedmix_mix, weighted_average, MixWeights};
use fedmix::nn::{backward, ModelParams};
use fedmix::ssl_loss::{make_pseudo_labels, LossSpec, LossTerm, PseudoLabelConfig};
use proptest::prelude::*;

fn counts() -> impl Strategy<Value = Vec<u64>> {
    prop::collection::vec(1u64..1000, 2..=20)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn fedfreq_weights_sum_to_one_and_match_oracle(q in counts()) {
        let fw = fedfreq_from_counts(&q.iter().copied().enumerate().collect::<Vec<_>>()).unwrap();
        let w: Vec<f64> = fw.entries.iter().map(|e| e.w).collect();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(w.iter().all(|&x| x >= 0.0));
        for (a, b) in w.iter().zip(oracle_fedfreq(&q)) {
            prop_assert!((a - b).abs() <= 1e-15);
        }
    }

    #[test]
    fn fedfreq_is_strictly_anti_monotone(q in counts()) {
        let fw = fedfreq_from_counts(&q.iter().copied().enumerate().collect::<Vec<_>>()).unwrap();
        for a in &fw.entries {
            for b in &fw.entries {
                if a.q > b.q {
                    prop_assert!(a.w < b.w);
                }
                if a.q == b.q {
                    prop_assert_eq!(a.w, b.w);
                }
            }
        }
    }

    #[test]
    fn mixing_stays_in_the_coordinate_hull(seed in any::<u64>(), a in 0.0f64..1.0, split in 0.0f64..1.0) {
        let mut r = rng(seed);
        let dims = [3, 4, 2];
        let (psi, sigma, omega) = (random_model(&dims, 5.0, &mut r), random_model(&dims, 5.0, &mut r), random_model(&dims, 5.0, &mut r));
        let b = (1.0 - a) * split;
        let mix = MixWeights::new(a, b, 1.0 - a - b).unwrap();
        let out = fedmix_mix(&psi, &sigma, &omega, &mix).unwrap();
        for j in 0..out.len() {
            let xs = [psi.values()[j], sigma.values()[j], omega.values()[j]];
            let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(lo <= out.values()[j] && out.values()[j] <= hi);
        }
    }

    #[test]
    fn aggregation_ignores_client_order(seed in any::<u64>(), n in 2usize..8) {
        let mut r = rng(seed);
        let dims = [4, 3];
        let uploads: Vec<(usize, ModelParams)> = (0..n).map(|k| (k * 3 + 1, random_model(&dims, 2.0, &mut r))).collect();
        let q: Vec<(usize, u64)> = uploads.iter().map(|(id, _)| (*id, 1 + (seed ^ *id as u64) % 17)).collect();
        let w = fedfreq_from_counts(&q).unwrap();
        let forward_order = aggregate_unsupervised(&uploads, &w).unwrap();

        let mut reversed = uploads.clone();
        reversed.reverse();
        let mut q_rev = q.clone();
        q_rev.rotate_left(1);
        let w_rev = fedfreq_from_counts(&q_rev).unwrap();
        prop_assert_eq!(&w, &w_rev);
        prop_assert_eq!(forward_order, aggregate_unsupervised(&reversed, &w_rev).unwrap());
    }

    #[test]
    fn uniform_weights_average_exactly(seed in any::<u64>(), n in 1usize..9) {
        let mut r = rng(seed);
        let models: Vec<ModelParams> = (0..n).map(|_| random_model(&[3, 2], 4.0, &mut r)).collect();
        let entries: Vec<(&ModelParams, f64)> = models.iter().map(|m| (m, 1.0 / n as f64)).collect();
        let avg = weighted_average(&entries).unwrap();
        for j in 0..avg.len() {
            let mean = models.iter().map(|m| m.values()[j]).sum::<f64>() / n as f64;
            prop_assert_eq!(avg.values()[j], mean);
        }
    }

    #[test]
    fn composite_gradient_is_linear_in_weights(seed in any::<u64>(), l1 in 0.0f64..4.0, l2 in 0.0f64..4.0, l3 in 0.0f64..4.0) {
        let mut r = rng(seed);
        let dims = [3, 5, 3];
        let model = random_model(&dims, 1.0, &mut r);
        let anchor = random_model(&dims, 1.0, &mut r);
        let x = random_matrix(5, 3, 1.0, &mut r);
        let x2 = random_matrix(5, 3, 1.0, &mut r);
        let t = random_targets(5, 3, &mut r);
        let terms = [
            (l1, LossTerm::CrossEntropy { inputs: &x, targets: &t }),
            (l2, LossTerm::ConsistencyL2 { view1: &x, view2: &x2 }),
            (l3, LossTerm::Proximal { anchor: &anchor }),
        ];
        let mut spec = LossSpec::default();
        let mut expected_value = 0.0;
        let mut expected_grad = model.zeros_like();
        for (w, term) in terms {
            spec.push(w, term);
            let (v, g) = term.value_and_gradient(&model).unwrap();
            if w != 0.0 {
                expected_value += w * v;
                expected_grad.add_scaled(&g, w).unwrap();
            }
        }
        let eval = backward(&model, &spec).unwrap();
        prop_assert!((eval.total - expected_value).abs() <= 1e-12 * expected_value.abs().max(1.0));
        prop_assert!(eval.gradient.sub(&expected_grad).unwrap().norm() <= 1e-12 * expected_grad.norm().max(1.0));
    }

    #[test]
    fn acceptance_shrinks_as_tau_rises(seed in any::<u64>(), lo in 0.0f64..1.0, gap in 0.0f64..0.5) {
        let mut r = rng(seed);
        let model = random_model(&[4, 6, 5], 3.0, &mut r);
        let u = random_matrix(40, 4, 2.0, &mut r);
        let family = AugmentFamily::Jitter { stddev: 0.1 };
        let hi = (lo + gap).min(1.0);
        let a = make_pseudo_labels(&model, &u, &PseudoLabelConfig { tau: lo, augment_count: 5 }, &family, seed).unwrap();
        let b = make_pseudo_labels(&model, &u, &PseudoLabelConfig { tau: hi, augment_count: 5 }, &family, seed).unwrap();
        prop_assert!(b.acceptance_rate <= a.acceptance_rate);
        for (x, y) in a.accepted_mask.iter().zip(&b.accepted_mask) {
            prop_assert!(*x || !*y);
        }
    }

    #[test]
    fn largest_remainder_preserves_total(total in 0usize..5000, w in prop::collection::vec(0.0f64..10.0, 1..30)) {
        prop_assume!(w.iter().sum::<f64>() > 0.0);
        let parts = largest_remainder(total, &w);
        prop_assert_eq!(parts.iter().sum::<usize>(), total);
        for (p, wi) in parts.iter().zip(&w) {
            if *wi == 0.0 {
                prop_assert_eq!(*p, 0);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn partition_assigns_each_sample_once(seed in any::<u64>(), mu in 0.05f64..200.0, k in 1usize..30, imbalance in any::<bool>()) {
        let ds = make_synthetic(5, 40, 3, 0.3, seed).unwrap();
        let (_, pool) = split_labeled(&ds, 10, seed).unwrap();
        let plan = dirichlet_partition(&pool, &DirichletConfig { mu, client_count: k, seed, quantity_imbalance: imbalance }).unwrap();
        let mut seen = vec![0u8; pool.len()];
        for c in &plan.clients {
            prop_assert!(!c.sample_indices.is_empty());
            prop_assert!(c.sample_indices.windows(2).all(|w| w[0] < w[1]));
            prop_assert!((c.target_proportions.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for &i in &c.sample_indices {
                seen[i] += 1;
            }
        }
        prop_assert!(seen.iter().all(|&s| s == 1));
        prop_assert_eq!(plan.unassigned, 0);
        prop_assert_eq!(plan.clients.len(), k);
    }
}
