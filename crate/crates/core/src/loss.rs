//! The probability path divergence and its Monte Carlo estimators.
//!
//! The residual of the logarithmic mass conservation equation,
//!
//! ```text
//! r(t, x) = d/dt log p_t(x) + <grad log p_t(x), v(t, x)> + div v(t, x),
//! ```
//!
//! vanishes identically exactly when `v` generates the path `p`. The training
//! loss is `E_{t, x ~ p_t} |r|^ell`; [`ppd_batch`] returns its value and exact
//! parameter gradient, with the divergence term differentiated by running
//! forward-mode duals over the reverse-mode tape.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{
    jacobian_trace_exact_with_output, jacobian_trace_hutchinson_with_output, Dual, Scalar, Tape,
};
use crate::error::{Error, Result};
use crate::field::{Field, VectorField};
use crate::flow::{integrate, trajectory, OdeSolverConfig};
use crate::paths::{PathEvaluation, TargetPath};

/// Exponent of the path divergence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ell {
    Finite(u32),
    Infinite,
}

impl fmt::Display for Ell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Ell::Finite(l) => write!(f, "{l}"),
            Ell::Infinite => f.write_str("inf"),
        }
    }
}

impl FromStr for Ell {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "inf" {
            return Ok(Ell::Infinite);
        }
        match s.parse::<u32>() {
            Ok(l) if l >= 1 => Ok(Ell::Finite(l)),
            _ => Err(Error::Parse(format!("ell must be an integer >= 1 or `inf`, got `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DivergenceEstimator {
    Exact,
    /// Rademacher probes per sample.
    Hutchinson(usize),
}

impl fmt::Display for DivergenceEstimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DivergenceEstimator::Exact => f.write_str("exact"),
            DivergenceEstimator::Hutchinson(n) => write!(f, "hutchinson:{n}"),
        }
    }
}

impl FromStr for DivergenceEstimator {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "exact" {
            return Ok(DivergenceEstimator::Exact);
        }
        if let Some(n) = s.strip_prefix("hutchinson:") {
            if let Ok(n @ 1..) = n.parse::<usize>() {
                return Ok(DivergenceEstimator::Hutchinson(n));
            }
        }
        Err(Error::Parse(format!(
            "bad divergence estimator `{s}` (expected exact or hutchinson:<probes>)"
        )))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TimeSampling {
    /// Independent `t ~ U[0, 1]` per sample.
    Uniform,
    /// One uniform draw inside each of `n` equal strata of `[0, 1]`.
    Stratified,
}

impl TimeSampling {
    /// `n` times in `[0, 1]`, in sample order.
    pub fn draw<R: Rng + ?Sized>(self, n: usize, rng: &mut R) -> Vec<f64> {
        match self {
            TimeSampling::Uniform => (0..n).map(|_| rng.random::<f64>()).collect(),
            TimeSampling::Stratified => (0..n)
                .map(|k| (k as f64 + rng.random::<f64>()) / n as f64)
                .collect(),
        }
    }
}

impl fmt::Display for TimeSampling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TimeSampling::Uniform => "uniform",
            TimeSampling::Stratified => "stratified",
        })
    }
}

impl FromStr for TimeSampling {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "uniform" => Ok(TimeSampling::Uniform),
            "stratified" => Ok(TimeSampling::Stratified),
            other => Err(Error::Parse(format!(
                "bad time sampling `{other}` (expected uniform or stratified)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PpdConfig {
    pub ell: Ell,
    pub divergence: DivergenceEstimator,
    pub time_sampling: TimeSampling,
    /// Smoothing of `|r|` for `ell = 1`: `sqrt(r^2 + delta^2)`.
    pub delta_abs: f64,
}

impl Default for PpdConfig {
    fn default() -> Self {
        Self {
            ell: Ell::Finite(2),
            divergence: DivergenceEstimator::Exact,
            time_sampling: TimeSampling::Uniform,
            delta_abs: 1e-8,
        }
    }
}

/// `|r|^ell`, smoothed at zero for `ell = 1`.
pub fn ell_power<T: Scalar>(r: T, ell: u32, delta: f64) -> T {
    match ell {
        1 => (r * r + delta * delta).sqrt(),
        l if l % 2 == 0 => r.powi(l),
        l => {
            let p = r.powi(l);
            if r.value() < 0.0 {
                -p
            } else {
                p
            }
        }
    }
}

/// The residual in arbitrary scalar arithmetic, given the path quantities at `(t, x)`.
pub fn residual_generic<T, F, R>(
    field: &F,
    t: f64,
    x: &[T],
    ev: &PathEvaluation,
    estimator: DivergenceEstimator,
    rng: &mut R,
) -> T
where
    T: Scalar,
    F: Field,
    R: Rng + ?Sized,
{
    let f = |y: &[Dual<T>]| field.forward(t, y);
    let (v, div) = match estimator {
        DivergenceEstimator::Exact => jacobian_trace_exact_with_output(f, x),
        DivergenceEstimator::Hutchinson(n) => jacobian_trace_hutchinson_with_output(f, x, n, rng),
    };
    v.iter()
        .zip(&ev.grad_log_p)
        .fold(div + ev.dt_log_p, |acc, (vi, gi)| acc + *vi * *gi)
}

/// `d/dt log p_t + <grad log p_t, v> + div v` at `(t, x)`.
pub fn lmc_residual<F: Field, R: Rng + ?Sized>(
    path: &TargetPath,
    field: &F,
    t: f64,
    x: &[f64],
    estimator: DivergenceEstimator,
    rng: &mut R,
) -> Result<f64> {
    let ev = path.evaluate(t, x)?;
    let r = residual_generic(field, t, x, &ev, estimator, rng);
    if !r.is_finite() {
        return Err(Error::Numeric(format!("non-finite residual at t = {t}")));
    }
    Ok(r)
}

/// Value, gradient and per-sample residuals of one minibatch loss.
#[derive(Clone, Debug, PartialEq)]
pub struct PpdBatch {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub residuals: Vec<f64>,
}

fn check_trainable(cfg: &PpdConfig) -> Result<u32> {
    match cfg.ell {
        Ell::Finite(l) => Ok(l),
        Ell::Infinite => Err(Error::Unsupported(
            "ell = inf cannot be trained; use it only in bound checks".into(),
        )),
    }
}

fn sample_rng(seed: u64, j: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(j as u64);
    rng
}

/// Mean of `|r|^ell` over `batch` with its exact parameter gradient.
///
/// Hutchinson probes for sample `j` come from stream `j` of a generator
/// seeded with `seed`, so the result does not depend on `workers`. Gradients
/// are reduced per worker in sample order and then across workers in order.
pub fn ppd_batch(
    path: &TargetPath,
    field: &VectorField,
    batch: &[(f64, Vec<f64>)],
    cfg: &PpdConfig,
    seed: u64,
    workers: usize,
) -> Result<PpdBatch> {
    let ell = check_trainable(cfg)?;
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let n = batch.len();
    let params = &field.params().values;
    let workers = workers.max(1).min(n);
    let chunk = n.div_ceil(workers);

    let run = |start: usize, items: &[(f64, Vec<f64>)]| -> Result<(Vec<f64>, Vec<(f64, f64)>)> {
        let mut tape = Tape::new(params);
        let mut grad = vec![0.0; params.len()];
        let mut out = Vec::with_capacity(items.len());
        for (k, (t, x)) in items.iter().enumerate() {
            let j = start + k;
            let ev = path
                .evaluate(*t, x)
                .map_err(|e| Error::Numeric(format!("sample {j} (t = {t}): {e}")))?;
            tape.clear();
            let xs: Vec<_> = x.iter().map(|&c| tape.constant(c)).collect();
            let mut rng = sample_rng(seed, j);
            let r = residual_generic(field, *t, &xs, &ev, cfg.divergence, &mut rng);
            let term = ell_power(r, ell, cfg.delta_abs);
            if !term.value().is_finite() {
                return Err(Error::Numeric(format!("non-finite residual at sample {j} (t = {t})")));
            }
            tape.backward_into(term, 1.0 / n as f64, &mut grad)
                .map_err(|e| Error::Numeric(format!("sample {j} (t = {t}): {e}")))?;
            out.push((r.value(), term.value()));
        }
        Ok((grad, out))
    };

    let parts: Vec<Result<(Vec<f64>, Vec<(f64, f64)>)>> = if workers == 1 {
        vec![run(0, batch)]
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = batch
                .chunks(chunk)
                .enumerate()
                .map(|(c, items)| {
                    let run = &run;
                    s.spawn(move || run(c * chunk, items))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("loss worker panicked"))
                .collect()
        })
    };

    let mut grad = vec![0.0; params.len()];
    let mut residuals = Vec::with_capacity(n);
    let mut total = 0.0;
    for part in parts {
        let (g, rs) = part?;
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        for (r, term) in rs {
            residuals.push(r);
            total += term;
        }
    }
    Ok(PpdBatch {
        loss: total / n as f64,
        grad,
        residuals,
    })
}

/// Loss value only, for any field (no gradient).
pub fn ppd_value<F: Field>(
    path: &TargetPath,
    field: &F,
    batch: &[(f64, Vec<f64>)],
    cfg: &PpdConfig,
    seed: u64,
) -> Result<f64> {
    let ell = check_trainable(cfg)?;
    let mut total = 0.0;
    for (j, (t, x)) in batch.iter().enumerate() {
        let r = lmc_residual(path, field, *t, x, cfg.divergence, &mut sample_rng(seed, j))?;
        total += ell_power(r, ell, cfg.delta_abs);
    }
    Ok(total / batch.len() as f64)
}

/// Draw `n` pairs `(t, x ~ p_t)` with the given time law.
pub fn sample_batch<R: Rng + ?Sized>(
    path: &TargetPath,
    n: usize,
    time_sampling: TimeSampling,
    rng: &mut R,
) -> Result<Vec<(f64, Vec<f64>)>> {
    time_sampling
        .draw(n, rng)
        .into_iter()
        .map(|t| Ok((t, path.sample(t, rng)?)))
        .collect()
}

/// The `f` of an f-divergence `D_f(p || q) = E_q f(p / q)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FDivKind {
    /// `|t - 1|`.
    TotalVariation,
    /// `ell (1 - t^(1/ell))`.
    Alpha(f64),
    /// `-log t`.
    ReverseKL,
}

impl FDivKind {
    /// The divergence bounded by the path divergence with exponent `ell`.
    pub fn for_ell(ell: Ell) -> Self {
        match ell {
            Ell::Finite(1) => FDivKind::TotalVariation,
            Ell::Finite(l) => FDivKind::Alpha(f64::from(l)),
            Ell::Infinite => FDivKind::ReverseKL,
        }
    }

    /// `f(exp(log_ratio))`, evaluated in log space where possible.
    pub fn f_of_log_ratio(self, log_ratio: f64) -> f64 {
        match self {
            FDivKind::TotalVariation => log_ratio.exp_m1().abs(),
            FDivKind::Alpha(l) => -l * (log_ratio / l).exp_m1(),
            FDivKind::ReverseKL => -log_ratio,
        }
    }

    pub fn f(self, t: f64) -> f64 {
        self.f_of_log_ratio(t.ln())
    }
}

/// Monte Carlo mean and its standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub std_err: f64,
}

impl Estimate {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = if xs.len() > 1 {
            xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self {
            mean,
            std_err: (var / n).sqrt(),
        }
    }
}

/// `E_{x ~ q} f(p(x) / q(x))` from log-densities at samples of `q`.
pub fn f_divergence(kind: FDivKind, logp: &[f64], logq: &[f64]) -> Result<Estimate> {
    if logp.len() != logq.len() || logp.is_empty() {
        return Err(Error::Input("log-density vectors must be non-empty and of equal length".into()));
    }
    let vals: Vec<f64> = logp
        .iter()
        .zip(logq)
        .enumerate()
        .map(|(i, (p, q))| {
            let v = kind.f_of_log_ratio(p - q);
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::Numeric(format!("non-finite density ratio at sample {i} (log p = {p}, log q = {q})")))
            }
        })
        .collect::<Result<_>>()?;
    Ok(Estimate::from_samples(&vals))
}

/// Both sides of the bound `D_ell(p || q)^(1/ell) >= D_f(p_T || q_T)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundCheck {
    pub lhs: Estimate,
    pub rhs: Estimate,
}

impl BoundCheck {
    /// `lhs >= rhs` up to `z` combined standard errors.
    pub fn holds(&self, z: f64) -> bool {
        self.lhs.mean >= self.rhs.mean - z * self.lhs.std_err.hypot(self.rhs.std_err)
    }
}

/// Monte Carlo estimate of both sides of the f-divergence bound at time `t_end`.
///
/// The left side samples `t ~ U[0, 1]`, `x ~ p_t` and averages `|r|^ell`; the
/// right side pushes `n_mc` prior draws through the flow to `t_end`, tracking
/// `log q_T`, and compares with `log p_T`.
pub fn bound_check<F: Field, R: Rng + ?Sized>(
    path: &TargetPath,
    field: &F,
    t_end: f64,
    ell: u32,
    n_mc: usize,
    solver: &OdeSolverConfig,
    rng: &mut R,
) -> Result<BoundCheck> {
    if ell == 0 {
        return Err(Error::Input("ell must be >= 1".into()));
    }
    let mut terms = Vec::with_capacity(n_mc);
    for _ in 0..n_mc {
        let t: f64 = rng.random();
        let x = path.sample(t, rng)?;
        let r = lmc_residual(path, field, t, &x, DivergenceEstimator::Exact, rng)?;
        terms.push(r.abs().powi(ell as i32));
    }
    let m = Estimate::from_samples(&terms);
    let l = f64::from(ell);
    let root = m.mean.powf(1.0 / l);
    // Delta method for m^(1/ell).
    let lhs_se = if m.mean > 0.0 {
        root / (l * m.mean) * m.std_err
    } else {
        0.0
    };

    let prior = path.prior()?;
    let mut logp = Vec::with_capacity(n_mc);
    let mut logq = Vec::with_capacity(n_mc);
    for _ in 0..n_mc {
        let x0 = prior.sample(rng);
        let end = integrate(field, &x0, 0.0, t_end, solver, true)?;
        logq.push(prior.log_density(&x0)? + end.log_det_accum);
        logp.push(path.log_density(t_end, &end.x)?);
    }
    let kind = FDivKind::for_ell(Ell::Finite(ell));
    Ok(BoundCheck {
        lhs: Estimate {
            mean: root,
            std_err: lhs_se,
        },
        rhs: f_divergence(kind, &logp, &logq)?,
    })
}

/// The trajectory form of the path divergence,
/// `E_{x ~ p_0} int_0^1 (p_t / q_t)(x_t) |d/dt log (p_t / q_t)(x_t)|^ell dt`,
/// integrated with Simpson's rule on an RK4 grid of `steps` (even) intervals.
pub fn trajectory_form<F: Field, R: Rng + ?Sized>(
    path: &TargetPath,
    field: &F,
    ell: u32,
    n_traj: usize,
    steps: usize,
    rng: &mut R,
) -> Result<Estimate> {
    if steps == 0 || steps % 2 != 0 {
        return Err(Error::Input("Simpson's rule needs an even, positive step count".into()));
    }
    let prior = path.prior()?;
    let h = 1.0 / steps as f64;
    let mut vals = Vec::with_capacity(n_traj);
    for _ in 0..n_traj {
        let x0 = prior.sample(rng);
        let lp0 = prior.log_density(&x0)?;
        let states = trajectory(field, &x0, 0.0, 1.0, steps, true, true)?;
        let mut acc = 0.0;
        for (k, s) in states.iter().enumerate() {
            let t = s.t.clamp(0.0, 1.0);
            let ev = path.evaluate(t, &s.x)?;
            let r = residual_generic(field, t, &s.x, &ev, DivergenceEstimator::Exact, rng);
            let log_ratio = ev.log_p - (lp0 + s.log_det_accum);
            let g = log_ratio.exp() * r.abs().powi(ell as i32);
            let w = if k == 0 || k == steps {
                1.0
            } else if k % 2 == 1 {
                4.0
            } else {
                2.0
            };
            acc += w * g;
        }
        vals.push(acc * h / 3.0);
    }
    Ok(Estimate::from_samples(&vals))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::AffineField;
    use crate::manifold::Manifold;
    use crate::paths::{DeformationMap, FactorPath, ScaleSchedule};

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(17)
    }

    fn translating(o: Vec<f64>, y: Vec<f64>, s: f64) -> TargetPath {
        let m = Manifold::euclidean(o.len());
        let f = vec![FactorPath {
            schedule: ScaleSchedule::GeometricSigma { sigma0: s, sigma1: s },
            deformation: DeformationMap::GeodesicToOrigin(o),
        }];
        TargetPath::new(m, &[y], f).unwrap()
    }

    #[test]
    fn parse_config_values() {
        assert_eq!("2".parse::<Ell>().unwrap(), Ell::Finite(2));
        assert_eq!("inf".parse::<Ell>().unwrap(), Ell::Infinite);
        assert!("0".parse::<Ell>().is_err());
        assert_eq!("hutchinson:3".parse::<DivergenceEstimator>().unwrap(), DivergenceEstimator::Hutchinson(3));
        assert!("hutchinson:0".parse::<DivergenceEstimator>().is_err());
        assert_eq!("stratified".parse::<TimeSampling>().unwrap(), TimeSampling::Stratified);
    }

    #[test]
    fn generating_pair_has_zero_residual() {
        let (o, y) = (vec![0.5, -0.5], vec![2.0, 1.0]);
        let path = translating(o.clone(), y.clone(), 0.4);
        let field = AffineField::constant(vec![1.5, 1.5]);
        let mut r = rng();
        for _ in 0..100 {
            let t: f64 = r.random();
            let x = path.sample(t, &mut r).unwrap();
            let res = lmc_residual(&path, &field, t, &x, DivergenceEstimator::Exact, &mut r).unwrap();
            assert!(res.abs() < 1e-10, "{res}");
        }
    }

    #[test]
    fn zero_field_residual_is_dt_log_p() {
        let path = translating(vec![0.0], vec![1.0], 0.5);
        let x = [0.3];
        let ev = path.evaluate(0.4, &x).unwrap();
        let r = lmc_residual(&path, &AffineField::zero(1), 0.4, &x, DivergenceEstimator::Exact, &mut rng()).unwrap();
        assert_eq!(r, ev.dt_log_p);
    }

    #[test]
    fn ell_powers() {
        for l in 1..=4 {
            let v = ell_power(-0.7, l, 1e-8);
            assert!((v - 0.7f64.powi(l as i32)).abs() < 1e-12);
        }
    }

    #[test]
    fn f_functions_vanish_at_one_and_alpha_increases_to_reverse_kl() {
        for kind in [FDivKind::TotalVariation, FDivKind::Alpha(3.0), FDivKind::ReverseKL] {
            assert_eq!(kind.f(1.0), 0.0);
        }
        for t in [0.05, 0.5, 2.0, 9.0] {
            let mut prev = f64::NEG_INFINITY;
            for l in 1..200 {
                let v = FDivKind::Alpha(l as f64).f(t);
                assert!(v >= prev - 1e-12);
                prev = v;
            }
            assert!(prev <= -f64::ln(t) + 1e-12);
        }
    }

    #[test]
    fn reverse_kl_between_unit_gaussians() {
        let mut r = rng();
        let n = 200_000;
        let mut logp = Vec::new();
        let mut logq = Vec::new();
        for _ in 0..n {
            let x: f64 = r.sample(rand_distr::StandardNormal);
            logq.push(-0.5 * x * x);
            logp.push(-0.5 * (x - 0.5) * (x - 0.5));
        }
        let e = f_divergence(FDivKind::ReverseKL, &logp, &logq).unwrap();
        assert!((e.mean - 0.125).abs() < 3.0 * e.std_err + 1e-3, "{e:?}");
        let same = f_divergence(FDivKind::TotalVariation, &logq, &logq).unwrap();
        assert_eq!(same.mean, 0.0);
    }

    #[test]
    fn infinite_ell_is_not_trainable() {
        let path = translating(vec![0.0], vec![1.0], 0.5);
        let cfg = PpdConfig {
            ell: Ell::Infinite,
            ..PpdConfig::default()
        };
        let err = ppd_value(&path, &AffineField::zero(1), &[(0.5, vec![0.0])], &cfg, 0).unwrap_err();
        assert!(matches!(err, Error::Unsupported(_)));
    }
}
