//! Self-checks run by `cnfm validate`: each suite returns named checks with
//! the measured value, the tolerance and a verdict.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::field::{AffineField, Field, MlpConfig, VectorField};
use crate::flow::{integrate, roundtrip_error, OdeSolverConfig};
use crate::loss::{bound_check, lmc_residual, ppd_batch, ppd_value, sample_batch, DivergenceEstimator, Ell, PpdConfig, TimeSampling};
use crate::manifold::Manifold;
use crate::paths::{DeformationMap, FactorPath, ScaleSchedule, TargetPath};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Lmc,
    Bounds,
    Gradcheck,
    Solver,
}

pub const SUITES: [Suite; 4] = [Suite::Lmc, Suite::Bounds, Suite::Gradcheck, Suite::Solver];

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Suite::Lmc => "lmc",
            Suite::Bounds => "bounds",
            Suite::Gradcheck => "gradcheck",
            Suite::Solver => "solver",
        })
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SUITES
            .into_iter()
            .find(|x| x.to_string() == s)
            .ok_or_else(|| Error::Parse(format!("unknown suite `{s}` (expected lmc, bounds, gradcheck or solver)")))
    }
}

/// One verdict. `pass` means `value <= tolerance` unless the check says otherwise.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub suite: String,
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl Check {
    fn at_most(suite: Suite, name: impl Into<String>, value: f64, tolerance: f64) -> Self {
        Self {
            suite: suite.to_string(),
            name: name.into(),
            value,
            tolerance,
            pass: value <= tolerance,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ValidateOptions {
    pub seed: u64,
    /// Monte Carlo sample count for the bound suite.
    pub n_mc: usize,
    pub workers: usize,
}

impl Default for ValidateOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            n_mc: 20_000,
            workers: 1,
        }
    }
}

pub fn run_suite(suite: Suite, opts: &ValidateOptions) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    match suite {
        Suite::Lmc => lmc_suite(&mut rng),
        Suite::Bounds => bounds_suite(opts, &mut rng),
        Suite::Gradcheck => gradcheck_suite(opts, &mut rng),
        Suite::Solver => solver_suite(&mut rng),
    }
}

/// A Gaussian of scale `sigma0 -> sigma1` whose centre slides from `o` to `y`.
pub fn gaussian_path(o: Vec<f64>, y: Vec<f64>, sigma0: f64, sigma1: f64) -> Result<TargetPath> {
    let m = Manifold::euclidean(o.len());
    let f = vec![FactorPath {
        schedule: ScaleSchedule::GeometricSigma { sigma0, sigma1 },
        deformation: DeformationMap::GeodesicToOrigin(o),
    }];
    TargetPath::new(m, &[y], f)
}

fn gauss_vec<R: Rng + ?Sized>(d: usize, s: f64, rng: &mut R) -> Vec<f64> {
    (0..d).map(|_| s * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn max_residual<F: Field, R: Rng + ?Sized>(path: &TargetPath, field: &F, n: usize, rng: &mut R) -> Result<f64> {
    let mut worst = 0.0_f64;
    for _ in 0..n {
        let t: f64 = rng.random();
        let x = path.sample(t, rng)?;
        let r = lmc_residual(path, field, t, &x, DivergenceEstimator::Exact, rng)?;
        worst = worst.max(r.abs());
    }
    Ok(worst)
}

fn lmc_suite<R: Rng + ?Sized>(rng: &mut R) -> Result<Vec<Check>> {
    let d = 3;
    let (o, y) = (gauss_vec(d, 1.0, rng), gauss_vec(d, 1.0, rng));
    let shift: Vec<f64> = y.iter().zip(&o).map(|(a, b)| a - b).collect();
    let translating = gaussian_path(o, y, 0.7, 0.7)?;
    let r1 = max_residual(&translating, &AffineField::constant(shift), 1000, rng)?;

    let (s0, s1) = (1.0, 0.1);
    let shrinking = gaussian_path(vec![0.0; d], vec![0.0; d], s0, s1)?;
    let r2 = max_residual(&shrinking, &AffineField::radial(d, (s1 / s0).ln()), 1000, rng)?;
    Ok(vec![
        Check::at_most(Suite::Lmc, "translating_gaussian_constant_field", r1, 1e-10),
        Check::at_most(Suite::Lmc, "shrinking_gaussian_radial_field", r2, 1e-10),
    ])
}

fn bounds_suite<R: Rng + ?Sized>(opts: &ValidateOptions, rng: &mut R) -> Result<Vec<Check>> {
    let path = gaussian_path(vec![0.0], vec![1.0], 1.0, 0.8)?;
    let field = AffineField::zero(1);
    let solver = OdeSolverConfig::rk4(4);
    let mut out = Vec::new();
    for ell in [1u32, 2, 4] {
        for t_end in [0.25, 0.5, 0.75, 1.0] {
            let b = bound_check(&path, &field, t_end, ell, opts.n_mc, &solver, rng)?;
            let slack = 3.0 * b.lhs.std_err.hypot(b.rhs.std_err);
            out.push(Check {
                suite: Suite::Bounds.to_string(),
                name: format!("ell={ell} T={t_end} lhs={:.6} rhs={:.6}", b.lhs.mean, b.rhs.mean),
                value: b.rhs.mean - b.lhs.mean,
                tolerance: slack,
                pass: b.holds(3.0),
            });
        }
    }
    Ok(out)
}

/// A small MLP on `R^2` with every weight perturbed, so no gradient vanishes.
pub fn random_mlp<R: Rng + ?Sized>(hidden_layers: usize, width: usize, rng: &mut R) -> Result<VectorField> {
    let cfg = MlpConfig {
        hidden_layers,
        width,
        ..MlpConfig::default()
    };
    let mut f = VectorField::init(cfg, &Manifold::euclidean(2), rng.random())?;
    for p in f.params_mut() {
        *p += 0.2 * rng.sample::<f64, _>(StandardNormal);
    }
    Ok(f)
}

fn gradcheck_suite<R: Rng + ?Sized>(opts: &ValidateOptions, rng: &mut R) -> Result<Vec<Check>> {
    let m = Manifold::euclidean(2);
    let mut out = Vec::new();
    for (ell, div) in [
        (2, DivergenceEstimator::Exact),
        (1, DivergenceEstimator::Exact),
        (2, DivergenceEstimator::Hutchinson(2)),
    ] {
        let mut worst = 0.0_f64;
        for _ in 0..5 {
            let anchors: Vec<Vec<f64>> = (0..5).map(|_| gauss_vec(2, 1.0, rng)).collect();
            let path = TargetPath::standard(&m, &anchors, 0.1, 1.0, None)?;
            let mut field = random_mlp(2, 32, rng)?;
            let batch = sample_batch(&path, 16, TimeSampling::Uniform, rng)?;
            let cfg = PpdConfig {
                ell: Ell::Finite(ell),
                divergence: div,
                ..PpdConfig::default()
            };
            let seed = rng.random();
            let g = ppd_batch(&path, &field, &batch, &cfg, seed, opts.workers)?.grad;
            for _ in 0..20 {
                let i = rng.random_range(0..field.num_params());
                let p0 = field.params().values[i];
                let h = 1e-5;
                field.params_mut()[i] = p0 + h;
                let up = ppd_value(&path, &field, &batch, &cfg, seed)?;
                field.params_mut()[i] = p0 - h;
                let down = ppd_value(&path, &field, &batch, &cfg, seed)?;
                field.params_mut()[i] = p0;
                let fd = (up - down) / (2.0 * h);
                worst = worst.max((fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-6));
            }
        }
        out.push(Check::at_most(
            Suite::Gradcheck,
            format!("ppd_gradient ell={ell} divergence={div}"),
            worst,
            1e-4,
        ));
    }
    Ok(out)
}

/// `A = [[a, -b], [b, a]]`: `exp(tA) = e^{at} R(bt)`.
fn rotation_field(a: f64, b: f64) -> AffineField {
    AffineField::new(vec![a, -b, b, a], vec![0.0, 0.0]).expect("2x2")
}

fn rotation_solution(a: f64, b: f64, t: f64, x: &[f64]) -> Vec<f64> {
    let (s, c) = (b * t).sin_cos();
    let e = (a * t).exp();
    vec![e * (c * x[0] - s * x[1]), e * (s * x[0] + c * x[1])]
}

fn solver_suite<R: Rng + ?Sized>(rng: &mut R) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let (a, b) = (-0.3, 2.0);
    let field = rotation_field(a, b);
    let x0 = [0.8, -0.4];
    let exact = rotation_solution(a, b, 1.0, &x0);
    for (name, cfg) in [
        ("linear_field_rk4_100", OdeSolverConfig::rk4(100)),
        ("linear_field_dopri5", OdeSolverConfig::dopri5(1e-10, 1e-12)),
    ] {
        let s = integrate(&field, &x0, 0.0, 1.0, &cfg, true)?;
        let err = s.x.iter().zip(&exact).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        out.push(Check::at_most(Suite::Solver, name, err, 1e-6));
        // div v = 2a, so the log-det channel is exactly -2a over unit time.
        let ld = (s.log_det_accum + 2.0 * a).abs();
        out.push(Check::at_most(Suite::Solver, format!("{name}_logdet"), ld, 1e-6));
    }

    let errs: Vec<f64> = [8usize, 16, 32, 64]
        .iter()
        .map(|&n| {
            let s = integrate(&field, &x0, 0.0, 1.0, &OdeSolverConfig::rk4(n), false)?;
            Ok(s.x.iter().zip(&exact).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt())
        })
        .collect::<Result<_>>()?;
    let slope = log_log_slope(&[8.0, 16.0, 32.0, 64.0], &errs);
    out.push(Check::at_most(Suite::Solver, "rk4_order_slope_vs_-4", (slope + 4.0).abs(), 0.3));

    let mlp = random_mlp(3, 64, rng)?;
    let mut worst = 0.0_f64;
    for _ in 0..20 {
        let x = gauss_vec(2, 1.0, rng);
        worst = worst.max(roundtrip_error(&mlp, &x, &OdeSolverConfig::rk4(100))?);
    }
    out.push(Check::at_most(Suite::Solver, "mlp_roundtrip_rk4_100", worst, 1e-4));

    let sphere = Manifold::sphere(2);
    let sfield = VectorField::init(MlpConfig::default(), &sphere, rng.random())?;
    let mut sfield = sfield;
    for p in sfield.params_mut() {
        *p += 0.2 * rng.sample::<f64, _>(StandardNormal);
    }
    let mut drift = 0.0_f64;
    for _ in 0..20 {
        let x0 = sphere.sample_uniform(rng)?;
        let s = integrate(&sfield, &x0, 0.0, 1.0, &OdeSolverConfig::rk4(100), false)?;
        drift = drift.max((s.x.iter().map(|c| c * c).sum::<f64>().sqrt() - 1.0).abs());
    }
    out.push(Check::at_most(Suite::Solver, "sphere_norm_drift_with_retraction", drift, 1e-9));
    Ok(out)
}

/// Least-squares slope of `log err` against `log n`.
pub fn log_log_slope(n: &[f64], err: &[f64]) -> f64 {
    let xs: Vec<f64> = n.iter().map(|v| v.ln()).collect();
    let ys: Vec<f64> = err.iter().map(|v| v.ln()).collect();
    let k = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / k;
    let my = ys.iter().sum::<f64>() / k;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}
