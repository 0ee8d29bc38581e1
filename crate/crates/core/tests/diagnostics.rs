//! Curvature, loss-difference and STE-surrogate checks against dense oracles.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use s2ap::attacks::AttackConfig;
use s2ap::autodiff::Tensor;
use s2ap::data::{gen_two_moons, Batch, Split};
use s2ap::diagnostics::{
    hvp, lambda_max, lambda_max_from, LossDiffConfig, LossDiffProbe, QuadraticObjective, ScoreObjective,
    SurrogateObjective, DEFAULT_RHO_GRID,
};
use s2ap::losses::{adversarial_examples, LossKind};
use s2ap::model::{Exemptions, Network, ScoreSource};

fn attack() -> AttackConfig {
    AttackConfig {
        epsilon: 0.08,
        alpha: 0.02,
        steps: 3,
        random_start: true,
        clamp_lo: 0.0,
        clamp_hi: 1.0,
    }
}

struct Fixture {
    net: Network,
    masks: Vec<Vec<f64>>,
    batch: Batch,
    x_adv: Tensor,
}

fn fixture(dims: &[usize], seed: u64) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = Network::new(dims, &mut rng).unwrap();
    net.init_scores();
    net.apply_sparsity(0.5, Exemptions::default()).unwrap();
    let data = gen_two_moons(120, 0.1, seed).unwrap().subset(Split::Train).unwrap();
    let batch = data.head(24);
    let view = net.search_view(ScoreSource::Scores, false).unwrap();
    let x_adv = adversarial_examples(&view, &batch, LossKind::default(), &attack(), &mut rng).unwrap();
    let masks = net.stored_masks();
    Fixture { net, masks, batch, x_adv }
}

/// Dense Hessian from second differences of the objective value alone.
fn fd_hessian(obj: &dyn ScoreObjective, s: &[f64], h: f64) -> DMatrix<f64> {
    let n = s.len();
    let f = |di: usize, dj: usize, a: f64, b: f64| {
        let mut p = s.to_vec();
        p[di] += a * h;
        p[dj] += b * h;
        obj.value(&p).unwrap()
    };
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = (f(i, j, 1.0, 1.0) - f(i, j, 1.0, -1.0) - f(i, j, -1.0, 1.0) + f(i, j, -1.0, -1.0)) / (4.0 * h * h);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}

fn dominant(m: DMatrix<f64>) -> f64 {
    let eig = SymmetricEigen::new(m).eigenvalues;
    eig.iter().copied().fold(0.0, |a: f64, b| if b.abs() > a.abs() { b } else { a })
}

#[test]
fn hvp_matches_dense_hessian_on_small_model() {
    let fx = fixture(&[2, 2, 2], 4);
    let obj = SurrogateObjective::new(&fx.net, &fx.masks, &fx.batch, &fx.x_adv, LossKind::default());
    let s = obj.origin().to_vec();
    let dense = fd_hessian(&obj, &s, 1e-4);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..5 {
        let v: Vec<f64> = (0..s.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let got = hvp(&obj, &s, &v).unwrap();
        let expected = &dense * DMatrix::from_column_slice(v.len(), 1, &v);
        let scale = expected.norm().max(1e-8);
        for (g, e) in got.iter().zip(expected.iter()) {
            assert!((g - e).abs() / scale < 1e-3, "hvp {g} vs dense {e}");
        }
    }
}

#[test]
fn hvp_is_linear_in_direction() {
    let fx = fixture(&[2, 4, 2], 2);
    let obj = SurrogateObjective::new(&fx.net, &fx.masks, &fx.batch, &fx.x_adv, LossKind::default());
    let s = obj.origin().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut draw = || (0..s.len()).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    let (u, v) = (draw(), draw());
    let (a, b) = (0.7, -1.3);
    let combo: Vec<f64> = u.iter().zip(&v).map(|(x, y)| a * x + b * y).collect();
    let lhs = hvp(&obj, &s, &combo).unwrap();
    let (hu, hv) = (hvp(&obj, &s, &u).unwrap(), hvp(&obj, &s, &v).unwrap());
    let scale = lhs.iter().map(|x| x.abs()).fold(1e-8, f64::max);
    for i in 0..s.len() {
        assert!((lhs[i] - (a * hu[i] + b * hv[i])).abs() / scale < 1e-5);
    }
}

#[test]
fn power_iteration_matches_eigensolver_on_quadratics() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..10 {
        let n = 8;
        let raw = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let q = raw.qr().q();
        // a clear spectral gap so 50 iterations converge
        let mut spectrum: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        spectrum[0] = if rng.random_bool(0.5) { 3.0 } else { -3.0 };
        let a = &q * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(spectrum)) * q.transpose();
        let obj = QuadraticObjective::new(n, a.as_slice().to_vec()).unwrap();
        let s: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let est = lambda_max(&obj, &s, 50, 5).unwrap();
        let oracle = dominant(a);
        assert!((est.value - oracle).abs() / oracle.abs() < 1e-3, "{} vs {oracle}", est.value);
    }
}

#[test]
fn lambda_ignores_start_sign() {
    let fx = fixture(&[2, 4, 2], 6);
    let obj = SurrogateObjective::new(&fx.net, &fx.masks, &fx.batch, &fx.x_adv, LossKind::default());
    let s = obj.origin().to_vec();
    let start: Vec<f64> = (0..s.len()).map(|i| ((i * 7 % 5) as f64) - 2.0).collect();
    let flipped: Vec<f64> = start.iter().map(|x| -x).collect();
    let a = lambda_max_from(&obj, &s, 10, start).unwrap();
    let b = lambda_max_from(&obj, &s, 10, flipped).unwrap();
    assert!((a.value - b.value).abs() <= 1e-6 * a.value.abs().max(1.0));
}

#[test]
fn quadratic_examples() {
    let obj = QuadraticObjective::new(2, vec![3.0, 0.0, 0.0, 1.0]).unwrap();
    let est = lambda_max(&obj, &[0.5, -0.2], 50, 0).unwrap();
    assert!((est.value - 3.0).abs() < 1e-6);
    assert!(!est.flat);

    let zero = QuadraticObjective::new(3, vec![0.0; 9]).unwrap();
    let est = lambda_max(&zero, &[1.0, 2.0, 3.0], 10, 0).unwrap();
    assert!(est.flat);
    assert_eq!(est.value, 0.0);
}

#[test]
fn surrogate_gradient_is_the_ste_chain_rule() {
    let fx = fixture(&[2, 6, 2], 9);
    let obj = SurrogateObjective::new(&fx.net, &fx.masks, &fx.batch, &fx.x_adv, LossKind::default());
    let s = obj.origin().to_vec();
    let (_, grad) = obj.value_and_grad(&s).unwrap();
    let h = 1e-6;
    for i in 0..s.len() {
        let mut p = s.clone();
        p[i] += h;
        let mut m = s.clone();
        m[i] -= h;
        let fd = (obj.value(&p).unwrap() - obj.value(&m).unwrap()) / (2.0 * h);
        assert!((fd - grad[i]).abs() <= 1e-6 * (1.0 + grad[i].abs()), "index {i}: fd {fd} vs {}", grad[i]);
    }
}

#[test]
fn loss_difference_is_zero_at_origin_and_monotone() {
    for seed in 0..10 {
        let fx = fixture(&[2, 6, 2], 100 + seed);
        let cfg = LossDiffConfig {
            seed,
            ..LossDiffConfig::default()
        };
        let mut probe = LossDiffProbe::new(&fx.net, &fx.batch, LossKind::default(), &attack(), seed).unwrap();
        assert_eq!(probe.sharpness(0.0, &cfg).unwrap().value, 0.0);
        let mut rhos = DEFAULT_RHO_GRID.to_vec();
        rhos.reverse();
        rhos.push(0.0);
        let mut grid = probe.grid(&rhos, &cfg).unwrap();
        grid.sort_by(|a, b| a.0.total_cmp(&b.0));
        assert_eq!(grid[0], (0.0, 0.0));
        assert!(grid.windows(2).all(|w| w[1].1 >= w[0].1), "{grid:?}");
    }
}
