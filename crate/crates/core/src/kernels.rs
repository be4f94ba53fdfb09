//! Probability kernels `p_tau(x | y)`: isotropic Gaussians on `R^d`,
//! von Mises-Fisher densities on spheres, and products of those.
//!
//! Every kernel exposes its log-density, the Riemannian gradient of the
//! log-density in `x`, the derivative with respect to its scale parameter
//! (`sigma` or `kappa`) and an exact sampler.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};

use crate::error::{input, Error, Result};
use crate::manifold::{dot, norm, sample_unit_sphere, Factor, Manifold, SPHERE_NORM_TOL};
use crate::special::{d_log_norm_const_vmf, log_norm_const_vmf};

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianKernel {
    center: Vec<f64>,
    sigma: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VmfKernel {
    mu: Vec<f64>,
    kappa: f64,
    log_norm: f64,
}

/// Independent kernels on the factors of a product manifold.
#[derive(Clone, Debug, PartialEq)]
pub struct ProductKernel {
    manifold: Manifold,
    factors: Vec<Kernel>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Kernel {
    Gaussian(GaussianKernel),
    Vmf(VmfKernel),
    Product(ProductKernel),
}

fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return input(format!("{what} has length {got}, kernel dimension is {want}"));
    }
    Ok(())
}

fn check_unit(what: &str, x: &[f64]) -> Result<()> {
    let n = norm(x);
    if (n - 1.0).abs() > SPHERE_NORM_TOL {
        return input(format!("{what} must be unit norm, got {n}"));
    }
    Ok(())
}

impl GaussianKernel {
    pub fn new(center: Vec<f64>, sigma: f64) -> Result<Self> {
        if center.is_empty() {
            return input("Gaussian kernel needs a non-empty center");
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return input(format!("Gaussian sigma must be positive, got {sigma}"));
        }
        Ok(Self { center, sigma })
    }

    pub fn center(&self) -> &[f64] {
        &self.center
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        check_len("point", x.len(), self.dim())?;
        Ok(gaussian_log_density(x, &self.center, self.sigma))
    }

    /// `-(x - y) / sigma^2`.
    pub fn grad_log_density(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len("point", x.len(), self.dim())?;
        let s2 = self.sigma * self.sigma;
        Ok(x.iter().zip(&self.center).map(|(a, c)| -(a - c) / s2).collect())
    }

    /// `d/dsigma log p = -d/sigma + |x - y|^2 / sigma^3`.
    pub fn dscale_log_density(&self, x: &[f64]) -> Result<f64> {
        check_len("point", x.len(), self.dim())?;
        Ok(gaussian_dsigma(sq_dist(x, &self.center), self.dim(), self.sigma))
    }

    /// Gradient of the log-density with respect to the center, `(x - y) / sigma^2`.
    pub fn center_grad_log_density(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.grad_log_density(x)?.into_iter().map(|g| -g).collect())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        sample_gaussian(&self.center, self.sigma, rng, &mut out);
        out
    }
}

impl VmfKernel {
    /// vMF kernel on `S^{p-1}` with mode `mu` (length `p`).
    pub fn new(mu: Vec<f64>, kappa: f64) -> Result<Self> {
        if mu.len() < 2 {
            return input("vMF mode must have at least 2 ambient coordinates");
        }
        check_unit("vMF mode", &mu)?;
        if !(kappa >= 0.0 && kappa.is_finite()) {
            return input(format!("vMF kappa must be >= 0, got {kappa}"));
        }
        let log_norm = log_norm_const_vmf(mu.len(), kappa)?;
        Ok(Self {
            mu,
            kappa,
            log_norm,
        })
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    /// Ambient dimension `p`.
    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        check_len("point", x.len(), self.dim())?;
        check_unit("point", x)
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        self.check(x)?;
        Ok(self.log_norm + self.kappa * dot(x, &self.mu))
    }

    /// Tangent projection of `kappa mu` at `x`.
    pub fn grad_log_density(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check(x)?;
        Ok(project_scaled(x, &self.mu, self.kappa))
    }

    /// `d/dkappa log p = d/dkappa log C_p(kappa) + x^T mu`.
    pub fn dscale_log_density(&self, x: &[f64]) -> Result<f64> {
        self.check(x)?;
        Ok(d_log_norm_const_vmf(self.dim(), self.kappa)? + dot(x, &self.mu))
    }

    /// Gradient with respect to the mode, projected onto the tangent space at `mu`.
    pub fn center_grad_log_density(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check(x)?;
        Ok(project_scaled(&self.mu, x, self.kappa))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        sample_vmf(&self.mu, self.kappa, rng, &mut out);
        out
    }
}

impl ProductKernel {
    pub fn new(manifold: Manifold, factors: Vec<Kernel>) -> Result<Self> {
        if factors.len() != manifold.factors().len() {
            return input(format!(
                "{} kernels given for {} factors of {manifold}",
                factors.len(),
                manifold.factors().len()
            ));
        }
        for (j, (k, f)) in factors.iter().zip(manifold.factors()).enumerate() {
            let ok = match (k, f) {
                (Kernel::Gaussian(g), Factor::Euclidean(d)) => g.dim() == *d,
                (Kernel::Vmf(v), Factor::Sphere(d)) => v.dim() == d + 1,
                _ => false,
            };
            if !ok {
                return input(format!("kernel {j} does not match factor {f} of {manifold}"));
            }
        }
        Ok(Self { manifold, factors })
    }

    pub fn factors(&self) -> &[Kernel] {
        &self.factors
    }

    pub fn manifold(&self) -> &Manifold {
        &self.manifold
    }

    fn split<'a>(&self, x: &'a [f64]) -> Result<Vec<&'a [f64]>> {
        check_len("point", x.len(), self.manifold.ambient_dim())?;
        Ok(self.manifold.blocks().map(|(_, r)| &x[r]).collect())
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        let parts = self.split(x)?;
        self.factors
            .iter()
            .zip(parts)
            .map(|(k, xb)| k.log_density(xb))
            .sum()
    }

    pub fn grad_log_density(&self, x: &[f64]) -> Result<Vec<f64>> {
        let parts = self.split(x)?;
        let mut out = Vec::with_capacity(x.len());
        for (k, xb) in self.factors.iter().zip(parts) {
            out.extend(k.grad_log_density(xb)?);
        }
        Ok(out)
    }

    /// One scale derivative per factor.
    pub fn dscale_log_density(&self, x: &[f64]) -> Result<Vec<f64>> {
        let parts = self.split(x)?;
        self.factors
            .iter()
            .zip(parts)
            .map(|(k, xb)| k.dscale_log_density(xb))
            .collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.manifold.ambient_dim());
        for k in &self.factors {
            out.extend(k.sample(rng));
        }
        out
    }
}

impl Kernel {
    pub fn gaussian(center: Vec<f64>, sigma: f64) -> Result<Self> {
        GaussianKernel::new(center, sigma).map(Kernel::Gaussian)
    }

    pub fn vmf(mu: Vec<f64>, kappa: f64) -> Result<Self> {
        VmfKernel::new(mu, kappa).map(Kernel::Vmf)
    }

    pub fn product(factors: Vec<Kernel>) -> Result<Self> {
        let manifold = Manifold::product(factors.iter().map(Kernel::manifold))?;
        ProductKernel::new(manifold, factors).map(Kernel::Product)
    }

    pub fn manifold(&self) -> Manifold {
        match self {
            Kernel::Gaussian(g) => Manifold::euclidean(g.dim()),
            Kernel::Vmf(v) => Manifold::sphere(v.dim() - 1),
            Kernel::Product(p) => p.manifold.clone(),
        }
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        match self {
            Kernel::Gaussian(k) => k.log_density(x),
            Kernel::Vmf(k) => k.log_density(x),
            Kernel::Product(k) => k.log_density(x),
        }
    }

    pub fn grad_log_density(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            Kernel::Gaussian(k) => k.grad_log_density(x),
            Kernel::Vmf(k) => k.grad_log_density(x),
            Kernel::Product(k) => k.grad_log_density(x),
        }
    }

    /// Derivative in the single scale parameter; products have one scale per
    /// factor, see [`ProductKernel::dscale_log_density`].
    pub fn dscale_log_density(&self, x: &[f64]) -> Result<f64> {
        match self {
            Kernel::Gaussian(k) => k.dscale_log_density(x),
            Kernel::Vmf(k) => k.dscale_log_density(x),
            Kernel::Product(_) => Err(Error::Unsupported(
                "a product kernel has one scale per factor".into(),
            )),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match self {
            Kernel::Gaussian(k) => k.sample(rng),
            Kernel::Vmf(k) => k.sample(rng),
            Kernel::Product(k) => k.sample(rng),
        }
    }
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub(crate) fn gaussian_log_norm(d: usize, sigma: f64) -> f64 {
    -0.5 * d as f64 * (2.0 * PI * sigma * sigma).ln()
}

pub(crate) fn gaussian_log_density(x: &[f64], c: &[f64], sigma: f64) -> f64 {
    gaussian_log_norm(x.len(), sigma) - sq_dist(x, c) / (2.0 * sigma * sigma)
}

pub(crate) fn gaussian_dsigma(sq: f64, d: usize, sigma: f64) -> f64 {
    -(d as f64) / sigma + sq / (sigma * sigma * sigma)
}

/// `kappa (b - (a^T b) a)`: the tangent projection of `kappa b` at `a`.
pub(crate) fn project_scaled(a: &[f64], b: &[f64], kappa: f64) -> Vec<f64> {
    let s = dot(a, b);
    a.iter().zip(b).map(|(ai, bi)| kappa * (bi - s * ai)).collect()
}

pub(crate) fn sample_gaussian<R: Rng + ?Sized>(c: &[f64], sigma: f64, rng: &mut R, out: &mut [f64]) {
    for (o, ci) in out.iter_mut().zip(c) {
        let z: f64 = rng.sample(StandardNormal);
        *o = ci + sigma * z;
    }
}

/// Draw `w = x^T mu` from the vMF marginal on `S^{p-1}` (Wood's rejection scheme).
/// Returns `(w, 1 - w)` with the second entry computed without cancellation.
pub(crate) fn sample_vmf_cosine<R: Rng + ?Sized>(p: usize, kappa: f64, rng: &mut R) -> (f64, f64) {
    let pm1 = (p - 1) as f64;
    let b = pm1 / (2.0 * kappa + (4.0 * kappa * kappa + pm1 * pm1).sqrt());
    let x0 = (1.0 - b) / (1.0 + b);
    let c = kappa * x0 + pm1 * (1.0 - x0 * x0).ln();
    let beta = Beta::new(pm1 / 2.0, pm1 / 2.0).expect("valid beta parameters");
    loop {
        let z: f64 = beta.sample(rng);
        let denom = 1.0 - (1.0 - b) * z;
        let one_minus_w = 2.0 * b * z / denom;
        let w = 1.0 - one_minus_w;
        let u: f64 = rng.random();
        if kappa * w + pm1 * (1.0 - x0 * w).ln() - c >= u.ln() {
            return (w, one_minus_w);
        }
    }
}

/// Exact vMF draw on the sphere with mode `mu`; `kappa = 0` is uniform.
pub(crate) fn sample_vmf<R: Rng + ?Sized>(mu: &[f64], kappa: f64, rng: &mut R, out: &mut [f64]) {
    let p = mu.len();
    if kappa == 0.0 {
        sample_unit_sphere(rng, out);
        return;
    }
    let (w, omw) = sample_vmf_cosine(p, kappa, rng);
    let radial = (omw * (2.0 - omw)).max(0.0).sqrt();
    // Draw around e_1, then reflect e_1 onto mu.
    out[0] = w;
    sample_unit_sphere(rng, &mut out[1..]);
    out[1..].iter_mut().for_each(|c| *c *= radial);
    householder_e1_to(mu, out);
    let n = norm(out);
    out.iter_mut().for_each(|c| *c /= n);
}

/// Apply the reflection that maps `e_1` to the unit vector `mu`.
fn householder_e1_to(mu: &[f64], x: &mut [f64]) {
    let mut u = mu.to_vec();
    u[0] -= 1.0;
    let uu = dot(&u, &u);
    if uu < 1e-30 {
        return;
    }
    // u = mu - e_1, H x = x - 2 u (u^T x) / (u^T u)
    let s = 2.0 * dot(&u, x) / uu;
    x.iter_mut().zip(&u).for_each(|(xi, ui)| *xi -= s * ui);
}
