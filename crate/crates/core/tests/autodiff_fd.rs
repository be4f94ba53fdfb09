mod common;

use common::{fd_grad, max_abs_diff};
use cnfm::autodiff::{gradient, jacobian_trace_exact, Dual, Scalar};
use cnfm::field::{Activation, Field, MlpConfig, VectorField};
use cnfm::Manifold;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn perturbed(manifold: &Manifold, cfg: MlpConfig, seed: u64) -> VectorField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut f = VectorField::init(cfg, manifold, seed).unwrap();
    for p in f.params_mut() {
        *p += 0.3 * rng.sample::<f64, _>(StandardNormal);
    }
    f
}

/// A scalar program mixing every primitive.
fn program<T: Scalar>(p: &[T]) -> T {
    let a = p[0] * p[1] + p[2].tanh();
    let b = (p[3] * p[3] + 1.0).sqrt().ln() - p[0].sigmoid();
    let c = (a / (b * b + 2.0)).exp() + p[1].softplus() * p[2];
    c.powi(3) - p[3] * 0.5 + (-a).one_minus_square()
}

proptest! {
    #[test]
    fn tape_gradient_matches_differences(p in proptest::collection::vec(-1.5f64..1.5, 4)) {
        let (v, g) = gradient(&p, |_, theta| program(theta));
        prop_assert!((v - program(&p)).abs() < 1e-12);
        let fd = fd_grad(|q| program(q), &p, 1e-6);
        let scale = fd.iter().map(|x| x.abs()).fold(1.0, f64::max);
        prop_assert!(max_abs_diff(&g, &fd) < 1e-6 * scale);
    }

    #[test]
    fn dual_tangent_matches_differences(p in proptest::collection::vec(-1.5f64..1.5, 4), dir in proptest::collection::vec(-1.0f64..1.0, 4)) {
        let xs: Vec<Dual<f64>> = p.iter().zip(&dir).map(|(&x, &d)| Dual::new(x, d)).collect();
        let out = program(&xs);
        let h = 1e-6;
        let shift = |s: f64| -> Vec<f64> { p.iter().zip(&dir).map(|(x, d)| x + s * d).collect() };
        let fd = (program(&shift(h)) - program(&shift(-h))) / (2.0 * h);
        prop_assert!((out.tangent - fd).abs() < 1e-6 * fd.abs().max(1.0));
    }
}

#[test]
fn exact_divergence_matches_finite_differences() {
    for (k, (manifold, act, x)) in [
        ("R^3", Activation::Tanh, vec![0.3, -1.2, 0.5]),
        ("S^2", Activation::Softplus, vec![0.36, 0.48, 0.8]),
        ("R^2 x S^1", Activation::Tanh, vec![0.4, -0.2, 0.6, 0.8]),
    ]
    .into_iter()
    .enumerate()
    {
        let m: Manifold = manifold.parse().unwrap();
        let cfg = MlpConfig { hidden_layers: 2, width: 16, activation: act, ..MlpConfig::default() };
        let field = perturbed(&m, cfg, k as u64);
        let t = 0.42;
        let div = field.divergence_exact(t, &x);
        let h = 1e-5;
        let mut fd = 0.0;
        let mut y = x.clone();
        for i in 0..x.len() {
            y[i] = x[i] + h;
            let up = field.eval(t, &y)[i];
            y[i] = x[i] - h;
            let down = field.eval(t, &y)[i];
            y[i] = x[i];
            fd += (up - down) / (2.0 * h);
        }
        assert!((div - fd).abs() < 1e-6 * fd.abs().max(1.0), "{manifold}: {div} vs {fd}");
        let tr = jacobian_trace_exact(|z: &[Dual<f64>]| field.forward(t, z), &x);
        assert!((tr - div).abs() < 1e-12);
    }
}

#[test]
fn sphere_fields_are_tangent() {
    let m: Manifold = "S^2 x S^3".parse().unwrap();
    let field = perturbed(&m, MlpConfig::default(), 4);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let x = m.sample_uniform(&mut rng).unwrap();
        let v = field.eval(rng.random(), &x);
        for (_, r) in m.blocks() {
            let radial: f64 = v[r.clone()].iter().zip(&x[r]).map(|(a, b)| a * b).sum();
            assert!(radial.abs() < 1e-12);
        }
    }
}

#[test]
fn hutchinson_average_converges_to_trace() {
    let m = Manifold::euclidean(5);
    let field = perturbed(&m, MlpConfig { hidden_layers: 2, width: 24, ..MlpConfig::default() }, 2);
    let x = [0.3, -0.2, 0.9, 0.1, -1.1];
    let exact = field.divergence_exact(0.5, &x);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 20_000;
    let draws: Vec<f64> = (0..n).map(|_| field.divergence_hutchinson(0.5, &x, 1, &mut rng)).collect();
    let mean = draws.iter().sum::<f64>() / n as f64;
    let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let se = (var / n as f64).sqrt();
    assert!((mean - exact).abs() < 4.0 * se, "{mean} vs {exact} (se {se})");
}
