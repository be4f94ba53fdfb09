//! Target probability paths: mixtures of kernels centred at deformed anchors
//! with a time-dependent scale.
//!
//! For anchors `y_1..y_m`, a factor-wise scale schedule `tau(t)` and a
//! deformation `gamma_t`,
//!
//! ```text
//! log p_t(x) = logsumexp_i log p_{tau(t)}(x | gamma_t(y_i)) - log m
//! ```
//!
//! [`TargetPath::evaluate`] returns `log p_t`, its Riemannian gradient and its
//! time derivative in a single pass over the anchors. The time derivative is
//! assembled from the mixture responsibilities, the kernel scale derivative and
//! the derivative of the kernel in its centre.

use rand::Rng;

use crate::error::{input, Error, Result};
use crate::kernels::{
    gaussian_dsigma, gaussian_log_norm, sample_gaussian, sample_vmf, sq_dist,
};
use crate::manifold::{dot, norm, Factor, Manifold};
use crate::special::{d_log_norm_const_vmf, log_norm_const_vmf};

/// Distance below which an anchor counts as antipodal to the origin.
const ANTIPODAL_NUDGE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ScaleSchedule {
    /// `sigma(t) = sigma0^(1-t) sigma1^t` for Gaussian kernels.
    GeometricSigma { sigma0: f64, sigma1: f64 },
    /// `kappa(t) = (1 + kappa1)^t - 1` for vMF kernels.
    VmfKappa { kappa1: f64 },
}

impl ScaleSchedule {
    pub fn value(&self, t: f64) -> f64 {
        match *self {
            ScaleSchedule::GeometricSigma { sigma0, sigma1 } => {
                (sigma0.ln() * (1.0 - t) + sigma1.ln() * t).exp()
            }
            ScaleSchedule::VmfKappa { kappa1 } => (t * kappa1.ln_1p()).exp_m1(),
        }
    }

    pub fn derivative(&self, t: f64) -> f64 {
        match *self {
            ScaleSchedule::GeometricSigma { sigma0, sigma1 } => {
                self.value(t) * (sigma1.ln() - sigma0.ln())
            }
            ScaleSchedule::VmfKappa { kappa1 } => {
                let l = kappa1.ln_1p();
                l * (t * l).exp()
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            ScaleSchedule::GeometricSigma { sigma0, sigma1 } => {
                sigma0 > 0.0 && sigma1 > 0.0 && sigma0.is_finite() && sigma1.is_finite()
            }
            ScaleSchedule::VmfKappa { kappa1 } => kappa1 > 0.0 && kappa1.is_finite(),
        };
        if !ok {
            return input(format!("invalid scale schedule {self:?}"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DeformationMap {
    /// `gamma_t(y) = exp_o(t log_o y)`: starts at `o`, ends at `y`.
    GeodesicToOrigin(Vec<f64>),
    Identity,
}

/// Schedule and deformation for one factor of the path's manifold.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorPath {
    pub schedule: ScaleSchedule,
    pub deformation: DeformationMap,
}

#[derive(Clone, Debug)]
pub struct TargetPath {
    manifold: Manifold,
    factors: Vec<FactorPath>,
    /// `m x ambient`, row-major.
    anchors: Vec<f64>,
    /// Per anchor, the origin log-map blocks used by spherical geodesic deformations.
    logs: Vec<f64>,
    m: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PathEvaluation {
    pub log_p: f64,
    pub grad_log_p: Vec<f64>,
    pub dt_log_p: f64,
    pub responsibilities: Vec<f64>,
}

/// The time-0 density of a [`TargetPath`]: a Gaussian at the origin on
/// Euclidean factors, uniform on sphere factors.
#[derive(Clone, Debug, PartialEq)]
pub struct Prior {
    manifold: Manifold,
    factors: Vec<PriorFactor>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum PriorFactor {
    Gaussian { center: Vec<f64>, sigma: f64 },
    Uniform,
}

/// Per-factor quantities that depend on `t` only.
struct FactorState {
    scale: f64,
    dscale: f64,
    /// Gaussian: log normalizer. vMF: `log C_p(kappa)`.
    log_norm: f64,
    /// vMF only: `d/dkappa log C_p(kappa)`.
    dlog_norm: f64,
}

impl TargetPath {
    pub fn new(manifold: Manifold, anchors: &[Vec<f64>], factors: Vec<FactorPath>) -> Result<Self> {
        if anchors.is_empty() {
            return input("a target path needs at least one anchor");
        }
        if factors.len() != manifold.factors().len() {
            return input(format!(
                "{} factor paths given for {} factors of {manifold}",
                factors.len(),
                manifold.factors().len()
            ));
        }
        for (j, (fp, (f, r))) in factors.iter().zip(manifold.blocks()).enumerate() {
            fp.schedule.validate()?;
            match (f, fp.schedule) {
                (Factor::Euclidean(_), ScaleSchedule::GeometricSigma { .. })
                | (Factor::Sphere(_), ScaleSchedule::VmfKappa { .. }) => {}
                _ => return input(format!("factor {j} ({f}) does not accept schedule {:?}", fp.schedule)),
            }
            if let DeformationMap::GeodesicToOrigin(o) = &fp.deformation {
                if o.len() != r.len() {
                    return input(format!("origin of factor {j} has length {}, expected {}", o.len(), r.len()));
                }
                Manifold::from_factors(vec![f])?.check_point(o)?;
            }
        }
        let d = manifold.ambient_dim();
        let mut flat = Vec::with_capacity(anchors.len() * d);
        let mut logs = vec![0.0; anchors.len() * d];
        for (i, y) in anchors.iter().enumerate() {
            manifold
                .check_point(y)
                .map_err(|e| Error::Input(format!("anchor {i}: {e}")))?;
            let start = flat.len();
            flat.extend_from_slice(y);
            for (fp, (f, r)) in factors.iter().zip(manifold.blocks()) {
                if let (DeformationMap::GeodesicToOrigin(o), Factor::Sphere(_)) = (&fp.deformation, f) {
                    let yb = &mut flat[start + r.start..start + r.end];
                    nudge_from_antipode(o, yb);
                    let u = sphere_log(o, yb);
                    logs[i * d + r.start..i * d + r.end].copy_from_slice(&u);
                }
            }
        }
        Ok(Self {
            manifold,
            factors,
            anchors: flat,
            logs,
            m: anchors.len(),
        })
    }

    /// The standard construction: Gaussian factors shrink from `N(origin, 1)`
    /// to `sigma1` along straight lines; sphere factors sharpen a vMF from the
    /// uniform density to `kappa1` in place.
    pub fn standard(
        manifold: &Manifold,
        anchors: &[Vec<f64>],
        sigma1: f64,
        kappa1: f64,
        origin: Option<&[f64]>,
    ) -> Result<Self> {
        let factors = standard_factors(manifold, sigma1, kappa1, origin)?;
        Self::new(manifold.clone(), anchors, factors)
    }

    pub fn manifold(&self) -> &Manifold {
        &self.manifold
    }

    pub fn factors(&self) -> &[FactorPath] {
        &self.factors
    }

    pub fn num_anchors(&self) -> usize {
        self.m
    }

    pub fn anchor(&self, i: usize) -> &[f64] {
        let d = self.manifold.ambient_dim();
        &self.anchors[i * d..(i + 1) * d]
    }

    fn check_t(t: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&t) {
            return input(format!("path time must lie in [0, 1], got {t}"));
        }
        Ok(())
    }

    fn factor_states(&self, t: f64) -> Result<Vec<FactorState>> {
        self.factors
            .iter()
            .zip(self.manifold.factors())
            .map(|(fp, f)| {
                let scale = fp.schedule.value(t);
                let dscale = fp.schedule.derivative(t);
                Ok(match f {
                    Factor::Euclidean(d) => FactorState {
                        scale,
                        dscale,
                        log_norm: gaussian_log_norm(*d, scale),
                        dlog_norm: 0.0,
                    },
                    Factor::Sphere(d) => FactorState {
                        scale,
                        dscale,
                        log_norm: log_norm_const_vmf(d + 1, scale)?,
                        dlog_norm: d_log_norm_const_vmf(d + 1, scale)?,
                    },
                })
            })
            .collect()
    }

    /// Kernel centre `gamma_t(y_i)` and its time derivative for every factor.
    pub fn center(&self, i: usize, t: f64) -> (Vec<f64>, Vec<f64>) {
        let d = self.manifold.ambient_dim();
        let mut c = vec![0.0; d];
        let mut dc = vec![0.0; d];
        self.center_into(i, t, &mut c, &mut dc);
        (c, dc)
    }

    fn center_into(&self, i: usize, t: f64, c: &mut [f64], dc: &mut [f64]) {
        let d = self.manifold.ambient_dim();
        let y = &self.anchors[i * d..(i + 1) * d];
        for (fp, (f, r)) in self.factors.iter().zip(self.manifold.blocks()) {
            let (yb, cb, db) = (&y[r.clone()], &mut c[r.clone()], &mut dc[r.clone()]);
            match (&fp.deformation, f) {
                (DeformationMap::Identity, _) => {
                    cb.copy_from_slice(yb);
                    db.iter_mut().for_each(|v| *v = 0.0);
                }
                (DeformationMap::GeodesicToOrigin(o), Factor::Euclidean(_)) => {
                    for k in 0..yb.len() {
                        cb[k] = (1.0 - t) * o[k] + t * yb[k];
                        db[k] = yb[k] - o[k];
                    }
                }
                (DeformationMap::GeodesicToOrigin(o), Factor::Sphere(_)) => {
                    let u = &self.logs[i * d + r.start..i * d + r.end];
                    let theta = norm(u);
                    if theta == 0.0 {
                        cb.copy_from_slice(o);
                        db.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let (s, co) = (t * theta).sin_cos();
                    for k in 0..o.len() {
                        cb[k] = co * o[k] + s * u[k] / theta;
                        db[k] = -theta * s * o[k] + co * u[k];
                    }
                }
            }
        }
    }

    /// `log p_t(x)`, `grad log p_t(x)` and `d/dt log p_t(x)`.
    pub fn evaluate(&self, t: f64, x: &[f64]) -> Result<PathEvaluation> {
        Self::check_t(t)?;
        self.manifold.check_point(x)?;
        self.evaluate_unchecked(t, x)
    }

    /// Two passes over the anchors: log kernel values and their time
    /// derivatives first, then the softmax-weighted centre sums that give
    /// the mixture gradient (per-anchor gradients are never materialized).
    pub(crate) fn evaluate_unchecked(&self, t: f64, x: &[f64]) -> Result<PathEvaluation> {
        let d = self.manifold.ambient_dim();
        let states = self.factor_states(t)?;
        let blocks: Vec<_> = self.manifold.blocks().collect();
        let moving = self.factors.iter().any(|f| f.deformation != DeformationMap::Identity);
        let mut cbuf = vec![0.0; d];
        let mut dcbuf = vec![0.0; d];

        let mut logk = vec![0.0; self.m];
        let mut dtk = vec![0.0; self.m];
        for i in 0..self.m {
            let c: &[f64] = if moving {
                self.center_into(i, t, &mut cbuf, &mut dcbuf);
                &cbuf
            } else {
                self.anchor(i)
            };
            let (mut lk, mut dk) = (0.0, 0.0);
            for ((f, r), st) in blocks.iter().zip(&states) {
                let (xb, cb) = (&x[r.clone()], &c[r.clone()]);
                match f {
                    Factor::Euclidean(n) => {
                        let s2 = st.scale * st.scale;
                        let sq = sq_dist(xb, cb);
                        lk += st.log_norm - sq / (2.0 * s2);
                        dk += gaussian_dsigma(sq, *n, st.scale) * st.dscale;
                        if moving {
                            let db = &dcbuf[r.clone()];
                            dk += xb.iter().zip(cb).zip(db).map(|((a, b), e)| (a - b) * e).sum::<f64>() / s2;
                        }
                    }
                    Factor::Sphere(_) => {
                        let kappa = st.scale;
                        let cos = dot(xb, cb);
                        lk += st.log_norm + kappa * cos;
                        dk += (st.dlog_norm + cos) * st.dscale;
                        if moving {
                            // Centre gradient kappa (x - cos c) is tangent at c, and so is dc.
                            let db = &dcbuf[r.clone()];
                            dk += kappa * (dot(xb, db) - cos * dot(cb, db));
                        }
                    }
                }
            }
            if !(lk.is_finite() && dk.is_finite()) {
                return Err(Error::Numeric(format!(
                    "component {i} of the target path is not finite at t = {t} (log k = {lk}, dt = {dk})"
                )));
            }
            logk[i] = lk;
            dtk[i] = dk;
        }

        let max = logk.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut w: Vec<f64> = logk.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = w.iter().sum();
        w.iter_mut().for_each(|wi| *wi /= z);
        let log_p = max + z.ln() - (self.m as f64).ln();

        // Weighted centre mean (all blocks) and weighted cosine (sphere blocks).
        let mut mean_c = vec![0.0; d];
        let mut mean_cos = vec![0.0; blocks.len()];
        let mut dt = 0.0;
        for (i, &wi) in w.iter().enumerate() {
            if wi == 0.0 {
                continue;
            }
            let c: &[f64] = if moving {
                self.center_into(i, t, &mut cbuf, &mut dcbuf);
                &cbuf
            } else {
                self.anchor(i)
            };
            dt += wi * dtk[i];
            mean_c.iter_mut().zip(c).for_each(|(m, ci)| *m += wi * ci);
            for (b, (f, r)) in blocks.iter().enumerate() {
                if f.is_sphere() {
                    mean_cos[b] += wi * dot(&x[r.clone()], &c[r.clone()]);
                }
            }
        }
        let mut grad = vec![0.0; d];
        for (b, ((f, r), st)) in blocks.iter().zip(&states).enumerate() {
            let (xb, mb, gb) = (&x[r.clone()], &mean_c[r.clone()], &mut grad[r.clone()]);
            match f {
                Factor::Euclidean(_) => {
                    let s2 = st.scale * st.scale;
                    gb.iter_mut().zip(xb.iter().zip(mb)).for_each(|(g, (xk, mk))| *g = (mk - xk) / s2);
                }
                Factor::Sphere(_) => {
                    gb.iter_mut()
                        .zip(xb.iter().zip(mb))
                        .for_each(|(g, (xk, mk))| *g = st.scale * (mk - mean_cos[b] * xk));
                }
            }
        }
        Ok(PathEvaluation {
            log_p,
            grad_log_p: grad,
            dt_log_p: dt,
            responsibilities: w,
        })
    }

    pub fn log_density(&self, t: f64, x: &[f64]) -> Result<f64> {
        Ok(self.evaluate(t, x)?.log_p)
    }

    /// Draw from `p_t`: a uniformly chosen anchor, then its kernel at time `t`.
    pub fn sample<R: Rng + ?Sized>(&self, t: f64, rng: &mut R) -> Result<Vec<f64>> {
        Self::check_t(t)?;
        let i = rng.random_range(0..self.m);
        let (c, _) = self.center(i, t);
        let mut out = vec![0.0; c.len()];
        for (fp, (f, r)) in self.factors.iter().zip(self.manifold.blocks()) {
            let scale = fp.schedule.value(t);
            match f {
                Factor::Euclidean(_) => sample_gaussian(&c[r.clone()], scale, rng, &mut out[r]),
                Factor::Sphere(_) => sample_vmf(&c[r.clone()], scale, rng, &mut out[r]),
            }
        }
        Ok(out)
    }

    /// Central difference `(log p_{t+h} - log p_{t-h}) / 2h`.
    pub fn dt_log_p_fd_check(&self, t: f64, x: &[f64], h: f64) -> Result<f64> {
        Self::check_t(t - h)?;
        Self::check_t(t + h)?;
        Ok((self.log_density(t + h, x)? - self.log_density(t - h, x)?) / (2.0 * h))
    }

    /// The closed-form density at `t = 0`.
    pub fn prior(&self) -> Result<Prior> {
        let mut factors = Vec::new();
        for (fp, f) in self.factors.iter().zip(self.manifold.factors()) {
            factors.push(match (f, &fp.schedule, &fp.deformation) {
                (Factor::Euclidean(_), ScaleSchedule::GeometricSigma { sigma0, .. }, DeformationMap::GeodesicToOrigin(o)) => {
                    PriorFactor::Gaussian {
                        center: o.clone(),
                        sigma: *sigma0,
                    }
                }
                (Factor::Sphere(_), ScaleSchedule::VmfKappa { .. }, _) => PriorFactor::Uniform,
                _ => {
                    return Err(Error::Unsupported(format!(
                        "factor {f} keeps anchor-dependent structure at t = 0; its prior is not closed form"
                    )))
                }
            });
        }
        Ok(Prior {
            manifold: self.manifold.clone(),
            factors,
        })
    }
}

/// Per-factor defaults of [`TargetPath::standard`].
pub fn standard_factors(
    manifold: &Manifold,
    sigma1: f64,
    kappa1: f64,
    origin: Option<&[f64]>,
) -> Result<Vec<FactorPath>> {
    if let Some(o) = origin {
        if o.len() != manifold.ambient_dim() {
            return input(format!(
                "origin has length {}, manifold {manifold} needs {}",
                o.len(),
                manifold.ambient_dim()
            ));
        }
    }
    Ok(manifold
        .blocks()
        .map(|(f, r)| match f {
            Factor::Euclidean(d) => FactorPath {
                schedule: ScaleSchedule::GeometricSigma { sigma0: 1.0, sigma1 },
                deformation: DeformationMap::GeodesicToOrigin(
                    origin.map_or_else(|| vec![0.0; d], |o| o[r].to_vec()),
                ),
            },
            Factor::Sphere(_) => FactorPath {
                schedule: ScaleSchedule::VmfKappa { kappa1 },
                deformation: DeformationMap::Identity,
            },
        })
        .collect())
}

impl Prior {
    /// Standard prior on `manifold`: `N(origin, I)` on Euclidean blocks, uniform on spheres.
    pub fn standard(manifold: &Manifold, origin: Option<&[f64]>) -> Result<Self> {
        let factors = standard_factors(manifold, 1.0, 1.0, origin)?;
        TargetPath::new(manifold.clone(), &[manifold_default_point(manifold)], factors)?.prior()
    }

    pub fn manifold(&self) -> &Manifold {
        &self.manifold
    }

    pub fn factors(&self) -> &[PriorFactor] {
        &self.factors
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        self.manifold.check_len("point", x)?;
        let mut total = 0.0;
        for (pf, (f, r)) in self.factors.iter().zip(self.manifold.blocks()) {
            total += match pf {
                PriorFactor::Gaussian { center, sigma } => {
                    crate::kernels::gaussian_log_density(&x[r], center, *sigma)
                }
                PriorFactor::Uniform => -crate::manifold::log_sphere_area(f.intrinsic_dim()),
            };
        }
        Ok(total)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut out = vec![0.0; self.manifold.ambient_dim()];
        for (pf, (_, r)) in self.factors.iter().zip(self.manifold.blocks()) {
            match pf {
                PriorFactor::Gaussian { center, sigma } => sample_gaussian(center, *sigma, rng, &mut out[r]),
                PriorFactor::Uniform => crate::manifold::sample_unit_sphere(rng, &mut out[r]),
            }
        }
        out
    }
}

/// The first basis vector on sphere blocks, zero on Euclidean blocks.
pub fn manifold_default_point(manifold: &Manifold) -> Vec<f64> {
    let mut p = vec![0.0; manifold.ambient_dim()];
    for (f, r) in manifold.blocks() {
        if f.is_sphere() {
            p[r.start] = 1.0;
        }
    }
    p
}

fn sphere_log(o: &[f64], y: &[f64]) -> Vec<f64> {
    let c = dot(o, y).clamp(-1.0, 1.0);
    let mut u: Vec<f64> = y.iter().zip(o).map(|(yi, oi)| yi - c * oi).collect();
    let nu = norm(&u);
    if nu == 0.0 {
        return u;
    }
    let theta = nu.atan2(c);
    u.iter_mut().for_each(|v| *v *= theta / nu);
    u
}

fn nudge_from_antipode(o: &[f64], y: &mut [f64]) {
    let gap = y.iter().zip(o).map(|(a, b)| (a + b) * (a + b)).sum::<f64>().sqrt();
    if gap >= ANTIPODAL_NUDGE {
        return;
    }
    // Rotate y towards the coordinate axis least aligned with o.
    let k = (0..o.len())
        .min_by(|&a, &b| o[a].abs().total_cmp(&o[b].abs()))
        .unwrap_or(0);
    let mut e = vec![0.0; o.len()];
    e[k] = 1.0;
    let s = dot(&e, y);
    let mut dir: Vec<f64> = e.iter().zip(y.iter()).map(|(ei, yi)| ei - s * yi).collect();
    let nd = norm(&dir);
    dir.iter_mut().for_each(|v| *v /= nd);
    let (sn, cs) = ANTIPODAL_NUDGE.sin_cos();
    y.iter_mut().zip(&dir).for_each(|(yi, di)| *yi = cs * *yi + sn * di);
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn euclid_path(anchors: &[Vec<f64>], sigma1: f64) -> TargetPath {
        let m = Manifold::euclidean(anchors[0].len());
        TargetPath::standard(&m, anchors, sigma1, 1.0, None).unwrap()
    }

    #[test]
    fn schedules_hit_their_endpoints() {
        let g = ScaleSchedule::GeometricSigma { sigma0: 1.0, sigma1: 0.01 };
        assert!((g.value(0.0) - 1.0).abs() < 1e-15);
        assert!((g.value(1.0) - 0.01).abs() < 1e-15);
        let k = ScaleSchedule::VmfKappa { kappa1: 5000.0 };
        assert_eq!(k.value(0.0), 0.0);
        assert!((k.value(1.0) - 5000.0).abs() < 1e-9);
        for s in [g, k] {
            let h = 1e-6;
            let fd = (s.value(0.4 + h) - s.value(0.4 - h)) / (2.0 * h);
            assert!(((fd - s.derivative(0.4)) / fd).abs() < 1e-8);
        }
    }

    #[test]
    fn single_anchor_matches_closed_form() {
        // N(x | t y, sigma1^(2t)), sigma0 = 1, origin 0
        let y = vec![2.0, 0.0];
        let s1: f64 = 0.01;
        let path = euclid_path(&[y.clone()], s1);
        let (t, x) = (0.3, [1.4, 0.0]);
        let ev = path.evaluate(t, &x).unwrap();
        let logp = |t: f64| {
            let s = s1.powf(t);
            let sq = (x[0] - t * y[0]).powi(2) + (x[1] - t * y[1]).powi(2);
            -(2.0 * PI * s * s).ln() - sq / (2.0 * s * s)
        };
        assert!((ev.log_p - logp(t)).abs() < 1e-10);
        // symbolic d/dt: -2 ln s1 + [ (x - t y).y ] / s^2 + |x - t y|^2 ln s1 / s^2
        let s2 = s1.powf(2.0 * t);
        let r = [x[0] - t * y[0], x[1] - t * y[1]];
        let sq = r[0] * r[0] + r[1] * r[1];
        let want = -2.0 * s1.ln() + (r[0] * y[0] + r[1] * y[1]) / s2 + sq * s1.ln() / s2;
        assert!(((ev.dt_log_p - want) / want).abs() < 1e-10, "{} vs {want}", ev.dt_log_p);
    }

    #[test]
    fn identical_anchors_equal_single_kernel() {
        let y = vec![0.3, -0.7];
        let one = euclid_path(&[y.clone()], 0.1);
        let many = euclid_path(&vec![y.clone(); 5], 0.1);
        let x = [0.1, 0.2];
        let a = one.evaluate(0.6, &x).unwrap();
        let b = many.evaluate(0.6, &x).unwrap();
        assert!((a.log_p - b.log_p).abs() < 1e-12);
        assert!((a.dt_log_p - b.dt_log_p).abs() < 1e-12);
        for (p, q) in a.grad_log_p.iter().zip(&b.grad_log_p) {
            assert!((p - q).abs() < 1e-12);
        }
        assert!((b.responsibilities.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn vmf_path_starts_uniform() {
        let m = Manifold::sphere(2);
        let anchors = vec![vec![0.0, 0.0, 1.0], vec![1.0, 0.0, 0.0], vec![0.0, 0.6, 0.8]];
        let path = TargetPath::standard(&m, &anchors, 0.01, 50.0, None).unwrap();
        let x = [0.6, 0.0, 0.8];
        let ev = path.evaluate(0.0, &x).unwrap();
        assert!((ev.log_p + (4.0 * PI).ln()).abs() < 1e-12);
        assert!(ev.grad_log_p.iter().all(|g| g.abs() < 1e-15));
        assert!(ev.dt_log_p.is_finite());
        // Identity deformation: dt = kappa'(t) sum_i w_i (dlogC + x.y_i)
        let t = 0.5;
        let ev = path.evaluate(t, &x).unwrap();
        let sched = ScaleSchedule::VmfKappa { kappa1: 50.0 };
        let dlogc = d_log_norm_const_vmf(3, sched.value(t)).unwrap();
        let want = sched.derivative(t)
            * ev.responsibilities
                .iter()
                .zip(&anchors)
                .map(|(w, y)| w * (dlogc + dot(&x, y)))
                .sum::<f64>();
        assert!((ev.dt_log_p - want).abs() < 1e-10);
    }

    #[test]
    fn translation_path_dt_is_the_chain_rule() {
        // sigma0 = sigma1 = sigma: only the centre moves.
        let m = Manifold::euclidean(2);
        let (o, y, s) = (vec![0.5, -1.0], vec![2.0, 1.0], 0.7);
        let f = vec![FactorPath {
            schedule: ScaleSchedule::GeometricSigma { sigma0: s, sigma1: s },
            deformation: DeformationMap::GeodesicToOrigin(o.clone()),
        }];
        let path = TargetPath::new(m, &[y.clone()], f).unwrap();
        let (t, x) = (0.25, [0.1, 0.9]);
        let c: Vec<f64> = (0..2).map(|k| (1.0 - t) * o[k] + t * y[k]).collect();
        let want: f64 = (0..2).map(|k| (x[k] - c[k]) / (s * s) * (y[k] - o[k])).sum();
        assert!((path.evaluate(t, &x).unwrap().dt_log_p - want).abs() < 1e-12);
    }

    #[test]
    fn sphere_geodesic_deformation_moves_anchor_to_origin() {
        let m = Manifold::sphere(2);
        let o = vec![0.0, 0.0, 1.0];
        let y = vec![1.0, 0.0, 0.0];
        let f = vec![FactorPath {
            schedule: ScaleSchedule::VmfKappa { kappa1: 10.0 },
            deformation: DeformationMap::GeodesicToOrigin(o.clone()),
        }];
        let path = TargetPath::new(m.clone(), &[y.clone()], f).unwrap();
        let (c0, _) = path.center(0, 0.0);
        let (c1, _) = path.center(0, 1.0);
        for k in 0..3 {
            assert!((c0[k] - o[k]).abs() < 1e-15);
            assert!((c1[k] - y[k]).abs() < 1e-15);
        }
        let h = 1e-6;
        let (cp, _) = path.center(0, 0.4 + h);
        let (cm, _) = path.center(0, 0.4 - h);
        let (_, dc) = path.center(0, 0.4);
        for k in 0..3 {
            assert!(((cp[k] - cm[k]) / (2.0 * h) - dc[k]).abs() < 1e-8);
        }
        let x = [0.6, 0.0, 0.8];
        let ev = path.evaluate(0.4, &x).unwrap();
        let fd = path.dt_log_p_fd_check(0.4, &x, 1e-5).unwrap();
        assert!(((ev.dt_log_p - fd) / fd).abs() < 1e-6);
    }

    #[test]
    fn antipodal_anchor_is_nudged() {
        let m = Manifold::sphere(2);
        let o = vec![0.0, 0.0, 1.0];
        let f = vec![FactorPath {
            schedule: ScaleSchedule::VmfKappa { kappa1: 10.0 },
            deformation: DeformationMap::GeodesicToOrigin(o),
        }];
        let path = TargetPath::new(m, &[vec![0.0, 0.0, -1.0]], f).unwrap();
        let ev = path.evaluate(0.5, &[1.0, 0.0, 0.0]).unwrap();
        assert!(ev.log_p.is_finite() && ev.dt_log_p.is_finite());
        assert!((norm(path.anchor(0)) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bad_inputs() {
        let path = euclid_path(&[vec![0.0]], 0.1);
        assert!(matches!(path.evaluate(1.5, &[0.0]), Err(Error::Input(_))));
        assert!(matches!(path.evaluate(0.5, &[0.0, 1.0]), Err(Error::Input(_))));
        assert!(TargetPath::standard(&Manifold::euclidean(1), &[], 0.1, 1.0, None).is_err());
    }

    #[test]
    fn extreme_scales_stay_finite() {
        let m = Manifold::sphere(63);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let anchors: Vec<Vec<f64>> = (0..8).map(|_| m.sample_uniform(&mut rng).unwrap()).collect();
        let path = TargetPath::standard(&m, &anchors, 0.01, 5e5, None).unwrap();
        let x = m.sample_uniform(&mut rng).unwrap();
        let ev = path.evaluate(1.0, &x).unwrap();
        assert!(ev.log_p.is_finite() && ev.dt_log_p.is_finite());

        let e = Manifold::euclidean(64);
        let anchors: Vec<Vec<f64>> = (0..8).map(|i| vec![i as f64; 64]).collect();
        let path = TargetPath::standard(&e, &anchors, 1e-4, 1.0, None).unwrap();
        let ev = path.evaluate(1.0, &vec![3.3; 64]).unwrap();
        assert!(ev.log_p.is_finite() && ev.dt_log_p.is_finite());
    }

    #[test]
    fn prior_matches_time_zero() {
        let m: Manifold = "R^2 x S^2".parse().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let anchors: Vec<Vec<f64>> = (0..4)
            .map(|_| {
                let mut a = vec![rng.random::<f64>(), rng.random::<f64>()];
                a.extend(Manifold::sphere(2).sample_uniform(&mut rng).unwrap());
                a
            })
            .collect();
        let path = TargetPath::standard(&m, &anchors, 0.05, 20.0, Some(&[0.5, 0.5, 0.0, 0.0, 1.0])).unwrap();
        let prior = path.prior().unwrap();
        let x = prior.sample(&mut rng);
        let a = path.log_density(0.0, &x).unwrap();
        let b = prior.log_density(&x).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn samples_concentrate_on_anchors_at_t1() {
        let anchors = vec![vec![1.0, 1.0], vec![-1.0, 0.5]];
        let s1 = 0.01;
        let path = euclid_path(&anchors, s1);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 2000;
        let mean: f64 = (0..n)
            .map(|_| {
                let x = path.sample(1.0, &mut rng).unwrap();
                anchors.iter().map(|a| sq_dist(&x, a).sqrt()).fold(f64::INFINITY, f64::min)
            })
            .sum::<f64>()
            / n as f64;
        assert!(mean < 3.0 * s1 * 2f64.sqrt());
    }
}
