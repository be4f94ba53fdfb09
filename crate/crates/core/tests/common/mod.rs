//! Quadrature oracles shared by the integration tests.
#![allow(dead_code)]

/// Composite Simpson's rule on `[a, b]` with `n` (even) intervals.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    assert!(n % 2 == 0);
    let h = (b - a) / n as f64;
    let mut acc = f(a) + f(b);
    for i in 1..n {
        acc += if i % 2 == 1 { 4.0 } else { 2.0 } * f(a + i as f64 * h);
    }
    acc * h / 3.0
}

/// Tensor-product Simpson over `[a, b]^2`.
pub fn simpson_2d(f: impl Fn(f64, f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    simpson(|x| simpson(|y| f(x, y), a, b, n), a, b, n)
}

/// `int_{S^2} f` in polar coordinates, `n` intervals per angle.
pub fn sphere2(f: impl Fn(&[f64]) -> f64, n: usize) -> f64 {
    use std::f64::consts::PI;
    simpson(
        |th| {
            let (s, c) = th.sin_cos();
            s * simpson(|ph| f(&[s * ph.cos(), s * ph.sin(), c]), 0.0, 2.0 * PI, n)
        },
        0.0,
        PI,
        n,
    )
}

/// Central differences of a scalar function's gradient.
pub fn fd_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut y = x.to_vec();
    (0..x.len())
        .map(|i| {
            y[i] = x[i] + h;
            let up = f(&y);
            y[i] = x[i] - h;
            let down = f(&y);
            y[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max)
}
