//! Property tests for the mask, projection, Hamming, attack and autodiff invariants.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use s2ap::attacks::{pgd_attack_traced, AttackConfig, AttackObjective};
use s2ap::autodiff::{l2_norm, Graph, Tensor};
use s2ap::diagnostics::PackedMask;
use s2ap::model::{topk_mask, Network, Ranking};
use s2ap::pruner::project_layerwise;

fn scores_strategy() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, 1..64)
}

proptest! {
    #[test]
    fn topk_has_exact_cardinality(scores in scores_strategy(), frac in 0.0f64..1.0) {
        let k = 1 + ((scores.len() - 1) as f64 * frac) as usize;
        for ranking in [Ranking::Magnitude, Ranking::Signed] {
            let m = topk_mask(&scores, k, ranking).unwrap();
            prop_assert_eq!(m.iter().filter(|&&v| v == 1.0).count(), k);
            prop_assert!(m.iter().all(|&v| v == 0.0 || v == 1.0));
        }
    }

    #[test]
    fn topk_is_invariant_to_positive_scaling(scores in scores_strategy(), c in 1e-3f64..1e3, frac in 0.0f64..1.0) {
        let k = 1 + ((scores.len() - 1) as f64 * frac) as usize;
        let scaled: Vec<f64> = scores.iter().map(|s| s * c).collect();
        for ranking in [Ranking::Magnitude, Ranking::Signed] {
            prop_assert_eq!(topk_mask(&scores, k, ranking).unwrap(), topk_mask(&scaled, k, ranking).unwrap());
        }
    }

    #[test]
    fn raising_a_retained_score_keeps_it(scores in scores_strategy(), frac in 0.0f64..1.0, bump in 0.0f64..5.0, pick in any::<prop::sample::Index>()) {
        let k = 1 + ((scores.len() - 1) as f64 * frac) as usize;
        let m = topk_mask(&scores, k, Ranking::Magnitude).unwrap();
        let retained: Vec<usize> = (0..scores.len()).filter(|&i| m[i] == 1.0).collect();
        let i = retained[pick.index(retained.len())];
        let mut raised = scores.clone();
        raised[i] = raised[i].signum() * (raised[i].abs() + bump);
        if raised[i] == 0.0 {
            raised[i] = bump;
        }
        prop_assert_eq!(topk_mask(&raised, k, Ranking::Magnitude).unwrap()[i], 1.0);
    }

    #[test]
    fn topk_is_deterministic_with_ties(value in -3.0f64..3.0, n in 2usize..40, k in 1usize..40) {
        let k = k.min(n);
        let scores = vec![value; n];
        let m = topk_mask(&scores, k, Ranking::Magnitude).unwrap();
        let expected: Vec<f64> = (0..n).map(|i| if i < k { 1.0 } else { 0.0 }).collect();
        prop_assert_eq!(m, expected);
    }

    #[test]
    fn projection_bounds_norm_and_keeps_direction(
        layers in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 1..20), 1..4),
        refs in prop::collection::vec(0.01f64..100.0, 4),
        gamma in 1e-4f64..0.1,
    ) {
        let mut projected = layers.clone();
        let norms = &refs[..layers.len()];
        project_layerwise(&mut projected, norms, gamma);
        for ((before, after), r) in layers.iter().zip(&projected).zip(norms) {
            prop_assert!(l2_norm(after) <= gamma * r * (1.0 + 1e-12));
            let nb = l2_norm(before);
            let na = l2_norm(after);
            if nb > 0.0 && na > 0.0 {
                let cos: f64 = before.iter().zip(after).map(|(a, b)| a * b).sum::<f64>() / (nb * na);
                prop_assert!((cos - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn hamming_is_a_normalised_metric(a in prop::collection::vec(any::<bool>(), 1..200), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b: Vec<bool> = (0..a.len()).map(|_| rand::Rng::random_bool(&mut rng, 0.5)).collect();
        let (pa, pb) = (PackedMask::from_mask(&a), PackedMask::from_mask(&b));
        let h = pa.hamming(&pb).unwrap();
        prop_assert!((0.0..=1.0).contains(&h));
        prop_assert_eq!(h, pb.hamming(&pa).unwrap());
        prop_assert_eq!(pa.hamming(&pa).unwrap(), 0.0);
        let complement: Vec<bool> = a.iter().map(|v| !v).collect();
        prop_assert_eq!(pa.hamming(&PackedMask::from_mask(&complement)).unwrap(), 1.0);
    }

    #[test]
    fn pgd_stays_in_ball_and_box(seed in any::<u64>(), eps in 0.01f64..0.3, steps in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Network::new(&[3, 5, 2], &mut rng).unwrap();
        let view = net.dense_view();
        let data: Vec<f64> = (0..12).map(|_| rand::Rng::random_range(&mut rng, 0.0..=1.0)).collect();
        let x = Tensor::matrix(4, 3, data).unwrap();
        let cfg = AttackConfig { epsilon: eps, alpha: eps / 4.0, steps, random_start: true, clamp_lo: 0.0, clamp_hi: 1.0 };
        let mut ok = true;
        pgd_attack_traced(&view, &x, &[0, 1, 1, 0], &cfg, AttackObjective::CrossEntropy, &mut rng, |_, adv| {
            for (a, o) in adv.data().iter().zip(x.data()) {
                ok &= (a - o).abs() <= eps + 1e-12 && (0.0..=1.0).contains(a);
            }
        }).unwrap();
        prop_assert!(ok);
    }

    #[test]
    fn matmul_gradient_matches_finite_differences(seed in any::<u64>(), n in 1usize..5, d in 1usize..5, o in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |len: usize| -> Vec<f64> { (0..len).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect() };
        let x = draw(n * d);
        let w = draw(d * o);
        let f = |w: &[f64]| {
            let mut g = Graph::new();
            let xv = g.constant(Tensor::matrix(n, d, x.clone()).unwrap());
            let wv = g.leaf(Tensor::matrix(d, o, w.to_vec()).unwrap().with_requires_grad(true));
            let y = g.matmul(xv, wv).unwrap();
            let r = g.relu(y).unwrap();
            let s = g.sum(r).unwrap();
            let value = g.value(s).item();
            (value, g.backward(s).unwrap().wrt(wv))
        };
        let (_, grad) = f(&w);
        let h = 1e-6;
        for i in 0..w.len() {
            let mut wp = w.clone();
            wp[i] += h;
            let mut wm = w.clone();
            wm[i] -= h;
            let fd = (f(&wp).0 - f(&wm).0) / (2.0 * h);
            // skip points where a relu input sits within the FD step of its kink
            let near_kink = (0..n).any(|r| (0..o).any(|c| {
                let z: f64 = (0..d).map(|k| x[r * d + k] * w[k * o + c]).sum();
                z.abs() < 1e-4
            }));
            if !near_kink {
                prop_assert!((fd - grad[i]).abs() <= 1e-6 * (1.0 + grad[i].abs()), "fd {} vs {}", fd, grad[i]);
            }
        }
    }
}
