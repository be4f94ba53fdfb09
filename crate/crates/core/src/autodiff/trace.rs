use rand::Rng;

use super::{Dual, Scalar};

/// Push `x + eps v` through `f`; returns `(f(x), J_f(x) v)`.
pub fn directional_derivative<T, F>(f: F, x: &[T], v: &[f64]) -> (Vec<T>, Vec<T>)
where
    T: Scalar,
    F: Fn(&[Dual<T>]) -> Vec<Dual<T>>,
{
    assert_eq!(x.len(), v.len(), "direction length");
    let input: Vec<Dual<T>> = x
        .iter()
        .zip(v)
        .map(|(&xi, &vi)| Dual::new(xi, xi.lift(vi)))
        .collect();
    f(&input).into_iter().map(|d| (d.value, d.tangent)).unzip()
}

/// `tr J_f(x)` using one forward pass per input coordinate, plus `f(x)`.
pub fn jacobian_trace_exact_with_output<T, F>(f: F, x: &[T]) -> (Vec<T>, T)
where
    T: Scalar,
    F: Fn(&[Dual<T>]) -> Vec<Dual<T>>,
{
    let n = x.len();
    assert!(n > 0, "trace of an empty Jacobian");
    let mut e = vec![0.0; n];
    let mut out = Vec::new();
    let mut trace = x[0].lift(0.0);
    for i in 0..n {
        e[i] = 1.0;
        let (value, jv) = directional_derivative(&f, x, &e);
        assert_eq!(jv.len(), n, "trace needs a square Jacobian");
        trace = trace + jv[i];
        if i == 0 {
            out = value;
        }
        e[i] = 0.0;
    }
    (out, trace)
}

pub fn jacobian_trace_exact<T, F>(f: F, x: &[T]) -> T
where
    T: Scalar,
    F: Fn(&[Dual<T>]) -> Vec<Dual<T>>,
{
    jacobian_trace_exact_with_output(f, x).1
}

/// A vector of independent +-1 entries.
pub fn rademacher_probe<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
        .collect()
}

/// Unbiased estimate `mean_k eps_k^T J eps_k` over `probes` Rademacher vectors, plus `f(x)`.
pub fn jacobian_trace_hutchinson_with_output<T, F, R>(
    f: F,
    x: &[T],
    probes: usize,
    rng: &mut R,
) -> (Vec<T>, T)
where
    T: Scalar,
    F: Fn(&[Dual<T>]) -> Vec<Dual<T>>,
    R: Rng + ?Sized,
{
    assert!(probes > 0, "at least one probe");
    assert!(!x.is_empty(), "trace of an empty Jacobian");
    let mut out = Vec::new();
    let mut acc = x[0].lift(0.0);
    for k in 0..probes {
        let eps = rademacher_probe(rng, x.len());
        let (value, jv) = directional_derivative(&f, x, &eps);
        assert_eq!(jv.len(), x.len(), "trace needs a square Jacobian");
        for (j, e) in jv.into_iter().zip(&eps) {
            acc = acc + j * *e;
        }
        if k == 0 {
            out = value;
        }
    }
    (out, acc / probes as f64)
}

pub fn jacobian_trace_hutchinson<T, F, R>(f: F, x: &[T], probes: usize, rng: &mut R) -> T
where
    T: Scalar,
    F: Fn(&[Dual<T>]) -> Vec<Dual<T>>,
    R: Rng + ?Sized,
{
    jacobian_trace_hutchinson_with_output(f, x, probes, rng).1
}
