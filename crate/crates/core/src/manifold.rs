//! Geometry of the supported spaces.
//!
//! Points and tangent vectors are plain ambient-coordinate slices. A sphere
//! `S^d` is stored as the unit sphere in `R^{d+1}`; products are a flat list of
//! factors whose coordinate blocks are concatenated in order.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{input, Error, Result};

/// Tolerance on the unit norm of sphere blocks.
pub const SPHERE_NORM_TOL: f64 = 1e-9;

/// `x^T y` below this is treated as antipodal by [`Manifold::log_map`].
const ANTIPODAL_DOT: f64 = -1.0 + 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Factor {
    Euclidean(usize),
    Sphere(usize),
}

impl Factor {
    pub fn ambient_dim(self) -> usize {
        match self {
            Factor::Euclidean(d) => d,
            Factor::Sphere(d) => d + 1,
        }
    }

    pub fn intrinsic_dim(self) -> usize {
        match self {
            Factor::Euclidean(d) | Factor::Sphere(d) => d,
        }
    }

    pub fn is_sphere(self) -> bool {
        matches!(self, Factor::Sphere(_))
    }
}

impl fmt::Display for Factor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Factor::Euclidean(d) => write!(f, "R^{d}"),
            Factor::Sphere(d) => write!(f, "S^{d}"),
        }
    }
}

/// A Euclidean space, a sphere, or a (flattened) product of those.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Manifold {
    factors: Vec<Factor>,
    offsets: Vec<usize>,
    ambient: usize,
}

impl Manifold {
    pub fn euclidean(dim: usize) -> Self {
        Self::from_factors(vec![Factor::Euclidean(dim)]).expect("dimension must be positive")
    }

    pub fn sphere(dim: usize) -> Self {
        Self::from_factors(vec![Factor::Sphere(dim)]).expect("dimension must be positive")
    }

    /// Product of the given manifolds; nested products are flattened.
    pub fn product(parts: impl IntoIterator<Item = Manifold>) -> Result<Self> {
        let factors: Vec<Factor> = parts.into_iter().flat_map(|m| m.factors).collect();
        if factors.len() < 2 {
            return input("a product manifold needs at least two factors");
        }
        Self::from_factors(factors)
    }

    pub fn from_factors(factors: Vec<Factor>) -> Result<Self> {
        if factors.is_empty() {
            return input("manifold has no factors");
        }
        if let Some(f) = factors.iter().find(|f| f.intrinsic_dim() == 0) {
            return input(format!("factor {f} has zero dimension"));
        }
        let mut offsets = Vec::with_capacity(factors.len());
        let mut ambient = 0;
        for f in &factors {
            offsets.push(ambient);
            ambient += f.ambient_dim();
        }
        Ok(Self {
            factors,
            offsets,
            ambient,
        })
    }

    pub fn factors(&self) -> &[Factor] {
        &self.factors
    }

    pub fn is_product(&self) -> bool {
        self.factors.len() > 1
    }

    pub fn ambient_dim(&self) -> usize {
        self.ambient
    }

    pub fn intrinsic_dim(&self) -> usize {
        self.factors.iter().map(|f| f.intrinsic_dim()).sum()
    }

    pub fn is_compact(&self) -> bool {
        self.factors.iter().all(|f| f.is_sphere())
    }

    /// Coordinate range of factor `j`.
    pub fn block(&self, j: usize) -> Range<usize> {
        let start = self.offsets[j];
        start..start + self.factors[j].ambient_dim()
    }

    /// Iterate `(factor, coordinate range)` pairs.
    pub fn blocks(&self) -> impl Iterator<Item = (Factor, Range<usize>)> + '_ {
        self.factors
            .iter()
            .zip(&self.offsets)
            .map(|(&f, &o)| (f, o..o + f.ambient_dim()))
    }

    pub(crate) fn check_len(&self, what: &str, v: &[f64]) -> Result<()> {
        if v.len() != self.ambient {
            return input(format!(
                "{what} has {} coordinates, manifold {self} expects {}",
                v.len(),
                self.ambient
            ));
        }
        Ok(())
    }

    /// Validate that `x` is a point: finite, right length, unit sphere blocks.
    pub fn check_point(&self, x: &[f64]) -> Result<()> {
        self.check_len("point", x)?;
        if x.iter().any(|c| !c.is_finite()) {
            return input("point has non-finite coordinates");
        }
        for (f, r) in self.blocks() {
            if f.is_sphere() {
                let n = norm(&x[r]);
                if (n - 1.0).abs() > SPHERE_NORM_TOL {
                    return input(format!("sphere block {f} has norm {n}, expected 1"));
                }
            }
        }
        Ok(())
    }

    /// Orthogonal projection of an ambient vector onto `T_x`.
    pub fn project_tangent(&self, x: &[f64], w: &[f64]) -> Result<Vec<f64>> {
        self.check_len("point", x)?;
        self.check_len("vector", w)?;
        let mut out = w.to_vec();
        self.project_tangent_in_place(x, &mut out);
        Ok(out)
    }

    pub fn project_tangent_in_place(&self, x: &[f64], w: &mut [f64]) {
        for (f, r) in self.blocks() {
            if f.is_sphere() {
                let (xb, wb) = (&x[r.clone()], &mut w[r]);
                let s = dot(xb, wb) / dot(xb, xb);
                wb.iter_mut().zip(xb).for_each(|(wi, xi)| *wi -= s * xi);
            }
        }
    }

    pub fn exp_map(&self, x: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        self.check_len("point", x)?;
        self.check_len("tangent", v)?;
        let mut out = vec![0.0; self.ambient];
        for (f, r) in self.blocks() {
            let (xb, vb, ob) = (&x[r.clone()], &v[r.clone()], &mut out[r]);
            match f {
                Factor::Euclidean(_) => ob
                    .iter_mut()
                    .zip(xb.iter().zip(vb))
                    .for_each(|(o, (a, b))| *o = a + b),
                Factor::Sphere(_) => sphere_exp(xb, vb, ob),
            }
        }
        Ok(out)
    }

    /// Inverse of [`Self::exp_map`]; antipodal sphere blocks are a domain error.
    pub fn log_map(&self, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        self.check_len("point", x)?;
        self.check_len("point", y)?;
        let mut out = vec![0.0; self.ambient];
        for (j, (f, r)) in self.blocks().enumerate() {
            let (xb, yb, ob) = (&x[r.clone()], &y[r.clone()], &mut out[r]);
            match f {
                Factor::Euclidean(_) => ob
                    .iter_mut()
                    .zip(yb.iter().zip(xb))
                    .for_each(|(o, (a, b))| *o = a - b),
                Factor::Sphere(_) => {
                    if !sphere_log(xb, yb, ob) {
                        return Err(Error::Domain(format!(
                            "log map undefined for antipodal points in factor {j}"
                        )));
                    }
                }
            }
        }
        Ok(out)
    }

    /// Geodesic distance in the product metric.
    pub fn distance(&self, x: &[f64], y: &[f64]) -> f64 {
        let mut sq = 0.0;
        for (f, r) in self.blocks() {
            let (xb, yb) = (&x[r.clone()], &y[r]);
            sq += match f {
                Factor::Euclidean(_) => xb.iter().zip(yb).map(|(a, b)| (a - b) * (a - b)).sum(),
                Factor::Sphere(_) => {
                    let c = dot(xb, yb) / (norm(xb) * norm(yb));
                    let a = c.clamp(-1.0, 1.0).acos();
                    a * a
                }
            };
        }
        sq.sqrt()
    }

    /// Normalize every sphere block back onto the unit sphere.
    pub fn retract(&self, x: &mut [f64]) {
        for (f, r) in self.blocks() {
            if f.is_sphere() {
                let xb = &mut x[r];
                let n = norm(xb);
                if n > 0.0 {
                    xb.iter_mut().for_each(|c| *c /= n);
                }
            }
        }
    }

    /// Uniform draw on a compact manifold.
    pub fn sample_uniform<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<f64>> {
        if !self.is_compact() {
            return Err(Error::Unsupported(format!(
                "uniform density undefined on {self} (Euclidean factor)"
            )));
        }
        let mut out = vec![0.0; self.ambient];
        for (_, r) in self.blocks() {
            sample_unit_sphere(rng, &mut out[r]);
        }
        Ok(out)
    }

    /// Log of the Riemannian volume; products sum over factors.
    pub fn log_volume(&self) -> Result<f64> {
        self.factors
            .iter()
            .map(|&f| match f {
                Factor::Sphere(d) => Ok(log_sphere_area(d)),
                Factor::Euclidean(_) => Err(Error::Unsupported(format!(
                    "{self} has infinite volume (Euclidean factor)"
                ))),
            })
            .sum()
    }

    /// Column labels for CSV headers, e.g. `f0_R2_0, f0_R2_1, f1_S1_0, ...`.
    pub fn column_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.ambient);
        for (j, (f, r)) in self.blocks().enumerate() {
            let tag = match f {
                Factor::Euclidean(d) => format!("R{d}"),
                Factor::Sphere(d) => format!("S{d}"),
            };
            for k in 0..r.len() {
                names.push(format!("f{j}_{tag}_{k}"));
            }
        }
        names
    }
}

impl fmt::Display for Manifold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, factor) in self.factors.iter().enumerate() {
            if i > 0 {
                f.write_str(" x ")?;
            }
            write!(f, "{factor}")?;
        }
        Ok(())
    }
}

impl FromStr for Manifold {
    type Err = Error;

    /// Grammar: factors `R^<n>` or `S^<n>` joined by `x`, whitespace-insensitive.
    fn from_str(s: &str) -> Result<Self> {
        let compact: String = s.chars().filter(|c| !c.is_whitespace()).collect();
        if compact.is_empty() {
            return Err(Error::Parse("empty manifold string".into()));
        }
        let factors = compact
            .split('x')
            .map(|tok| {
                let (kind, dim) = tok
                    .split_once('^')
                    .ok_or_else(|| Error::Parse(format!("bad manifold factor `{tok}`")))?;
                let dim: usize = dim
                    .parse()
                    .map_err(|_| Error::Parse(format!("bad dimension in factor `{tok}`")))?;
                match kind {
                    "R" => Ok(Factor::Euclidean(dim)),
                    "S" => Ok(Factor::Sphere(dim)),
                    _ => Err(Error::Parse(format!("unknown factor kind in `{tok}`"))),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_factors(factors).map_err(|e| Error::Parse(e.to_string()))
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `log |S^d|`.
pub fn log_sphere_area(d: usize) -> f64 {
    let h = (d as f64 + 1.0) / 2.0;
    std::f64::consts::LN_2 + h * std::f64::consts::PI.ln() - libm::lgamma(h)
}

pub(crate) fn sample_unit_sphere<R: Rng + ?Sized>(rng: &mut R, out: &mut [f64]) {
    loop {
        for c in out.iter_mut() {
            *c = rng.sample(StandardNormal);
        }
        let n = norm(out);
        if n > 1e-300 {
            out.iter_mut().for_each(|c| *c /= n);
            return;
        }
    }
}

fn sphere_exp(x: &[f64], v: &[f64], out: &mut [f64]) {
    let nv = norm(v);
    if nv == 0.0 {
        out.copy_from_slice(x);
        return;
    }
    let (s, c) = nv.sin_cos();
    for ((o, a), b) in out.iter_mut().zip(x).zip(v) {
        *o = c * a + s * b / nv;
    }
    let n = norm(out);
    out.iter_mut().for_each(|o| *o /= n);
}

/// Returns false on antipodal input.
fn sphere_log(x: &[f64], y: &[f64], out: &mut [f64]) -> bool {
    let c = dot(x, y);
    if c < ANTIPODAL_DOT {
        return false;
    }
    for ((o, a), b) in out.iter_mut().zip(x).zip(y) {
        *o = b - c * a;
    }
    let n = norm(out);
    if n < 1e-300 {
        out.iter_mut().for_each(|o| *o = 0.0);
        return true;
    }
    let theta = c.clamp(-1.0, 1.0).acos();
    // acos loses precision near 1; atan2 of (|y - cx|, c) does not.
    let theta = if c > 0.9 { n.atan2(c) } else { theta };
    out.iter_mut().for_each(|o| *o *= theta / n);
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn parse_and_display() {
        let m: Manifold = " R^3 x S^1 xS^1 x S^3 ".parse().unwrap();
        assert_eq!(m.to_string(), "R^3 x S^1 x S^1 x S^3");
        assert_eq!(m.ambient_dim(), 3 + 2 + 2 + 4);
        assert_eq!(m.intrinsic_dim(), 3 + 1 + 1 + 3);
        assert!(m.is_product());
        assert!("T^2".parse::<Manifold>().is_err());
        assert!("S^".parse::<Manifold>().is_err());
        assert!("R^0".parse::<Manifold>().is_err());
        assert!("".parse::<Manifold>().is_err());
    }

    #[test]
    fn product_flattens() {
        let inner = Manifold::product([Manifold::euclidean(2), Manifold::sphere(1)]).unwrap();
        let m = Manifold::product([inner, Manifold::sphere(2)]).unwrap();
        assert_eq!(m.factors().len(), 3);
        assert_eq!(m.block(2), 4..7);
        assert!(Manifold::product([Manifold::sphere(2)]).is_err());
    }

    #[test]
    fn projection_examples() {
        let s2 = Manifold::sphere(2);
        let x = [0.0, 0.0, 1.0];
        assert_eq!(s2.project_tangent(&x, &[1.0, 2.0, 3.0]).unwrap(), vec![1.0, 2.0, 0.0]);
        assert_eq!(s2.project_tangent(&x, &[0.0, 0.0, 5.0]).unwrap(), vec![0.0, 0.0, 0.0]);
        let r3 = Manifold::euclidean(3);
        assert_eq!(
            r3.project_tangent(&[4.0, -1.0, 0.5], &[1.0, 2.0, 3.0]).unwrap(),
            vec![1.0, 2.0, 3.0]
        );
        assert!(s2.project_tangent(&x, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn exp_log_examples() {
        let s2 = Manifold::sphere(2);
        let y = s2.exp_map(&[1.0, 0.0, 0.0], &[0.0, FRAC_PI_2, 0.0]).unwrap();
        assert!(close(&y, &[0.0, 1.0, 0.0], 1e-15));
        let v = s2.log_map(&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]).unwrap();
        assert!(close(&v, &[0.0, FRAC_PI_2, 0.0], 1e-15));
        let x = [0.6, 0.0, 0.8];
        assert_eq!(s2.exp_map(&x, &[0.0; 3]).unwrap(), x.to_vec());
        assert_eq!(s2.log_map(&x, &x).unwrap(), vec![0.0; 3]);

        let r2 = Manifold::euclidean(2);
        assert_eq!(r2.exp_map(&[1.0, 1.0], &[2.0, -1.0]).unwrap(), vec![3.0, 0.0]);
        assert_eq!(r2.log_map(&[1.0, 1.0], &[3.0, 0.0]).unwrap(), vec![2.0, -1.0]);
    }

    #[test]
    fn antipodal_log_is_domain_error() {
        let s2 = Manifold::sphere(2);
        let err = s2.log_map(&[1.0, 0.0, 0.0], &[-1.0, 0.0, 0.0]).unwrap_err();
        assert!(matches!(err, Error::Domain(_)));
    }

    #[test]
    fn log_volume_examples() {
        assert!((Manifold::sphere(2).log_volume().unwrap() - (4.0 * PI).ln()).abs() < 1e-14);
        assert!((Manifold::sphere(2).log_volume().unwrap() - 2.53102).abs() < 1e-5);
        assert!((Manifold::sphere(1).log_volume().unwrap() - (2.0 * PI).ln()).abs() < 1e-14);
        // |S^15| = 2 pi^8 / 7!
        let expected = (2.0 * PI.powi(8) / 5040.0).ln();
        let got = Manifold::sphere(15).log_volume().unwrap();
        assert!((got - expected).abs() < 1e-12);
        assert!((got - 1.3257).abs() < 5e-4);
        assert!(Manifold::euclidean(2).log_volume().is_err());

        let a = Manifold::sphere(3);
        let b = Manifold::sphere(1);
        let p = Manifold::product([a.clone(), b.clone()]).unwrap();
        assert_eq!(
            p.log_volume().unwrap(),
            a.log_volume().unwrap() + b.log_volume().unwrap()
        );
    }

    #[test]
    fn uniform_requires_compact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m: Manifold = "R^2 x S^1".parse().unwrap();
        assert!(matches!(m.sample_uniform(&mut rng), Err(Error::Unsupported(_))));
        let m: Manifold = "S^3 x S^1".parse().unwrap();
        for _ in 0..100 {
            m.check_point(&m.sample_uniform(&mut rng).unwrap()).unwrap();
        }
    }

    #[test]
    fn uniform_sphere_mean_is_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = Manifold::sphere(2);
        let n = 1_000_000;
        let mut mean = [0.0; 3];
        for _ in 0..n {
            let x = m.sample_uniform(&mut rng).unwrap();
            for k in 0..3 {
                mean[k] += x[k] / n as f64;
            }
        }
        assert!(norm(&mean) < 0.005, "mean norm {}", norm(&mean));
    }

    #[test]
    fn circle_angles_pass_chi_square() {
        // 64 bins, alpha = 0.01: critical value of chi^2 with 63 dof is 92.01.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = Manifold::sphere(1);
        let n = 64_000;
        let mut bins = [0usize; 64];
        for _ in 0..n {
            let x = m.sample_uniform(&mut rng).unwrap();
            let a = x[1].atan2(x[0]) + PI;
            bins[((a / (2.0 * PI) * 64.0) as usize).min(63)] += 1;
        }
        let e = n as f64 / 64.0;
        let chi2: f64 = bins.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
        assert!(chi2 < 92.01, "chi2 = {chi2}");
    }

    #[test]
    fn retract_normalizes_sphere_blocks_only() {
        let m: Manifold = "R^1 x S^1".parse().unwrap();
        let mut x = [5.0, 3.0, 4.0];
        m.retract(&mut x);
        assert_eq!(x, [5.0, 0.6, 0.8]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn unit(v: Vec<f64>) -> Vec<f64> {
            let n = norm(&v);
            v.into_iter().map(|c| c / n).collect()
        }

        proptest! {
            #[test]
            fn projection_idempotent(x in prop::collection::vec(-1.0..1.0f64, 4),
                                     w in prop::collection::vec(-10.0..10.0f64, 4)) {
                prop_assume!(norm(&x) > 0.1);
                let x = unit(x);
                let m = Manifold::sphere(3);
                let p = m.project_tangent(&x, &w).unwrap();
                let pp = m.project_tangent(&x, &p).unwrap();
                prop_assert!(close(&p, &pp, 1e-12));
                prop_assert!(dot(&p, &x).abs() < 1e-9);
            }

            #[test]
            fn exp_inverts_log(x in prop::collection::vec(-1.0..1.0f64, 3),
                               y in prop::collection::vec(-1.0..1.0f64, 3)) {
                prop_assume!(norm(&x) > 0.1 && norm(&y) > 0.1);
                let (x, y) = (unit(x), unit(y));
                prop_assume!(dot(&x, &y) > -1.0 + 1e-6);
                let m = Manifold::sphere(2);
                let v = m.log_map(&x, &y).unwrap();
                let back = m.exp_map(&x, &v).unwrap();
                prop_assert!(close(&back, &y, 1e-9));
                prop_assert!((norm(&back) - 1.0).abs() < 1e-12);
            }
        }
    }
}
