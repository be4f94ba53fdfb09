//! ODE integration of a vector field with an optional log-density channel.
//!
//! Along a trajectory `x_t` of `dx/dt = v(t, x)` the model log-density obeys
//! `d log q_t(x_t) / dt = -div v(t, x_t)`. [`integrate`] solves both together;
//! `log_det_accum` is the integral of `-div v` from `t0` to `t1`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::field::Field;
use crate::paths::Prior;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OdeMethod {
    /// Classical fourth-order Runge-Kutta with a fixed number of steps.
    Rk4 { steps: usize },
    /// Adaptive Dormand-Prince 5(4).
    Dopri5 { rtol: f64, atol: f64, max_steps: usize },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OdeSolverConfig {
    pub method: OdeMethod,
    /// Renormalize sphere blocks after every accepted step.
    pub retraction: bool,
}

impl Default for OdeSolverConfig {
    fn default() -> Self {
        Self::rk4(100)
    }
}

impl OdeSolverConfig {
    pub fn rk4(steps: usize) -> Self {
        Self {
            method: OdeMethod::Rk4 { steps },
            retraction: true,
        }
    }

    pub fn dopri5(rtol: f64, atol: f64) -> Self {
        Self {
            method: OdeMethod::Dopri5 {
                rtol,
                atol,
                max_steps: 100_000,
            },
            retraction: true,
        }
    }

    fn validate(&self) -> Result<()> {
        match self.method {
            OdeMethod::Rk4 { steps } if steps == 0 => {
                Err(Error::Input("rk4 needs at least one step".into()))
            }
            OdeMethod::Dopri5 { rtol, atol, max_steps } if !(rtol > 0.0 && atol > 0.0 && max_steps > 0) => {
                Err(Error::Input("dopri5 tolerances and step limit must be positive".into()))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for OdeSolverConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.method {
            OdeMethod::Rk4 { steps } => write!(f, "rk4:{steps}")?,
            OdeMethod::Dopri5 { rtol, atol, max_steps } => write!(f, "dopri5:{rtol:e}:{atol:e}:{max_steps}")?,
        }
        if !self.retraction {
            f.write_str(":noretract")?;
        }
        Ok(())
    }
}

impl FromStr for OdeSolverConfig {
    type Err = Error;

    /// `rk4:<steps>` or `dopri5:<rtol>:<atol>[:<max_steps>]`, optionally
    /// followed by `:noretract`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Parse(format!("bad solver `{s}` (expected rk4:<steps> or dopri5:<rtol>:<atol>[:<max_steps>])"));
        let mut parts: Vec<&str> = s.trim().split(':').collect();
        let retraction = if parts.last() == Some(&"noretract") {
            parts.pop();
            false
        } else {
            true
        };
        let method = match parts.as_slice() {
            ["rk4", n] => OdeMethod::Rk4 {
                steps: n.parse().map_err(|_| bad())?,
            },
            ["dopri5", r, a] | ["dopri5", r, a, _] => OdeMethod::Dopri5 {
                rtol: r.parse().map_err(|_| bad())?,
                atol: a.parse().map_err(|_| bad())?,
                max_steps: match parts.get(3) {
                    Some(m) => m.parse().map_err(|_| bad())?,
                    None => 100_000,
                },
            },
            _ => return Err(bad()),
        };
        let cfg = Self { method, retraction };
        cfg.validate().map_err(|e| Error::Parse(e.to_string()))?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedFlowState {
    pub x: Vec<f64>,
    /// Integral of `-div v` along the trajectory.
    pub log_det_accum: f64,
    pub t: f64,
    /// Accepted steps taken.
    pub steps: usize,
}

fn rhs<F: Field>(field: &F, t: f64, x: &[f64], with_logdet: bool) -> (Vec<f64>, f64) {
    if with_logdet {
        let (v, div) = field.eval_with_divergence(t, x);
        (v, -div)
    } else {
        (field.eval(t, x), 0.0)
    }
}

fn axpy(x: &[f64], h: f64, k: &[f64]) -> Vec<f64> {
    x.iter().zip(k).map(|(a, b)| a + h * b).collect()
}

fn rk4_step<F: Field>(field: &F, t: f64, h: f64, x: &[f64], with_logdet: bool) -> (Vec<f64>, f64) {
    let (k1, l1) = rhs(field, t, x, with_logdet);
    let (k2, l2) = rhs(field, t + 0.5 * h, &axpy(x, 0.5 * h, &k1), with_logdet);
    let (k3, l3) = rhs(field, t + 0.5 * h, &axpy(x, 0.5 * h, &k2), with_logdet);
    let (k4, l4) = rhs(field, t + h, &axpy(x, h, &k3), with_logdet);
    let xn = (0..x.len())
        .map(|i| x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect();
    (xn, h / 6.0 * (l1 + 2.0 * l2 + 2.0 * l3 + l4))
}

fn check_finite(x: &[f64], l: f64, t: f64) -> Result<()> {
    if x.iter().all(|c| c.is_finite()) && l.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("trajectory left the finite range at t = {t}")))
    }
}

/// Solve `dx/dt = v(t, x)` (and the log-density channel) from `t0` to `t1`.
/// Either direction of time is allowed.
pub fn integrate<F: Field>(
    field: &F,
    x0: &[f64],
    t0: f64,
    t1: f64,
    cfg: &OdeSolverConfig,
    with_logdet: bool,
) -> Result<AugmentedFlowState> {
    cfg.validate()?;
    let manifold = field.manifold();
    if x0.len() != manifold.ambient_dim() {
        return Err(Error::Input(format!(
            "initial point has {} coordinates, field lives on {manifold}",
            x0.len()
        )));
    }
    match cfg.method {
        OdeMethod::Rk4 { steps } => {
            let mut traj = rk4_trajectory(field, x0, t0, t1, steps, cfg.retraction, with_logdet, false)?;
            Ok(traj.pop().expect("at least the end state"))
        }
        OdeMethod::Dopri5 { rtol, atol, max_steps } => {
            dopri5(field, x0, t0, t1, rtol, atol, max_steps, cfg.retraction, with_logdet)
        }
    }
}

/// Fixed-step RK4 states at every grid node `t0 + k (t1 - t0) / steps`.
pub fn trajectory<F: Field>(
    field: &F,
    x0: &[f64],
    t0: f64,
    t1: f64,
    steps: usize,
    retraction: bool,
    with_logdet: bool,
) -> Result<Vec<AugmentedFlowState>> {
    if steps == 0 {
        return Err(Error::Input("trajectory needs at least one step".into()));
    }
    rk4_trajectory(field, x0, t0, t1, steps, retraction, with_logdet, true)
}

#[allow(clippy::too_many_arguments)]
fn rk4_trajectory<F: Field>(
    field: &F,
    x0: &[f64],
    t0: f64,
    t1: f64,
    steps: usize,
    retraction: bool,
    with_logdet: bool,
    keep_all: bool,
) -> Result<Vec<AugmentedFlowState>> {
    let manifold = field.manifold();
    let h = (t1 - t0) / steps as f64;
    let mut x = x0.to_vec();
    let mut l = 0.0;
    let mut out = Vec::with_capacity(if keep_all { steps + 1 } else { 1 });
    if keep_all {
        out.push(AugmentedFlowState {
            x: x.clone(),
            log_det_accum: 0.0,
            t: t0,
            steps: 0,
        });
    }
    for k in 0..steps {
        let t = t0 + k as f64 * h;
        let (xn, dl) = rk4_step(field, t, h, &x, with_logdet);
        x = xn;
        l += dl;
        if retraction {
            manifold.retract(&mut x);
        }
        let tn = if k + 1 == steps { t1 } else { t0 + (k + 1) as f64 * h };
        check_finite(&x, l, tn)?;
        if keep_all || k + 1 == steps {
            out.push(AugmentedFlowState {
                x: x.clone(),
                log_det_accum: l,
                t: tn,
                steps: k + 1,
            });
        }
    }
    Ok(out)
}

// Dormand-Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const B5: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

#[allow(clippy::too_many_arguments)]
fn dopri5<F: Field>(
    field: &F,
    x0: &[f64],
    t0: f64,
    t1: f64,
    rtol: f64,
    atol: f64,
    max_steps: usize,
    retraction: bool,
    with_logdet: bool,
) -> Result<AugmentedFlowState> {
    let manifold = field.manifold();
    let n = x0.len();
    let span = t1 - t0;
    let mut state = AugmentedFlowState {
        x: x0.to_vec(),
        log_det_accum: 0.0,
        t: t0,
        steps: 0,
    };
    if span == 0.0 {
        return Ok(state);
    }
    let dir = span.signum();
    let mut h = 0.01 * span;
    let mut attempts = 0usize;
    let mut last_err = f64::NAN;
    // Augmented vector: x followed by the log-density channel.
    let mut y: Vec<f64> = state.x.iter().cloned().chain([0.0]).collect();
    while (t1 - state.t) * dir > 0.0 {
        if attempts >= max_steps {
            return Err(Error::Convergence(format!(
                "dopri5 exhausted {max_steps} steps at t = {} (last scaled error {last_err:.3e}, rtol {rtol:e}, atol {atol:e})",
                state.t
            )));
        }
        attempts += 1;
        if (state.t + h - t1) * dir > 0.0 {
            h = t1 - state.t;
        }
        let mut k: Vec<Vec<f64>> = Vec::with_capacity(7);
        for s in 0..7 {
            let mut ys = y.clone();
            for (j, kj) in k.iter().enumerate() {
                let a = A[s][j];
                if a != 0.0 {
                    ys.iter_mut().zip(kj).for_each(|(yi, ki)| *yi += h * a * ki);
                }
            }
            let (v, dl) = rhs(field, state.t + C[s] * h, &ys[..n], with_logdet);
            let mut ks = v;
            ks.push(dl);
            k.push(ks);
        }
        let mut y5 = y.clone();
        let mut err = 0.0;
        for i in 0..=n {
            let s5: f64 = (0..7).map(|s| B5[s] * k[s][i]).sum();
            let s4: f64 = (0..7).map(|s| B4[s] * k[s][i]).sum();
            y5[i] += h * s5;
            let sc = atol + rtol * y[i].abs().max(y5[i].abs());
            let e = h * (s5 - s4) / sc;
            err += e * e;
        }
        err = (err / (n + 1) as f64).sqrt();
        last_err = err;
        if !err.is_finite() {
            return Err(Error::Numeric(format!("dopri5 produced a non-finite state near t = {}", state.t)));
        }
        if err <= 1.0 {
            state.t = if (state.t + h - t1) * dir >= 0.0 { t1 } else { state.t + h };
            y = y5;
            if retraction {
                manifold.retract(&mut y[..n]);
            }
            state.steps += 1;
        }
        let factor = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
        h *= factor;
        if h.abs() < 1e-14 * span.abs() {
            return Err(Error::Convergence(format!(
                "dopri5 step size underflow at t = {} (scaled error {err:.3e})",
                state.t
            )));
        }
    }
    state.log_det_accum = y[n];
    y.truncate(n);
    state.x = y;
    Ok(state)
}

fn parallel_map<T, U, G>(items: &[T], workers: usize, f: G) -> Vec<U>
where
    T: Sync,
    U: Send,
    G: Fn(&T) -> U + Sync,
{
    let workers = workers.max(1).min(items.len().max(1));
    if workers == 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| {
                let f = &f;
                s.spawn(move || c.iter().map(f).collect::<Vec<U>>())
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

/// Push `n` prior draws through the flow from `t = 0` to `t = 1`.
pub fn sample_model<F: Field, R: Rng + ?Sized>(
    field: &F,
    prior: &Prior,
    n: usize,
    cfg: &OdeSolverConfig,
    rng: &mut R,
    workers: usize,
) -> Result<Vec<Vec<f64>>> {
    let x0: Vec<Vec<f64>> = (0..n).map(|_| prior.sample(rng)).collect();
    parallel_map(&x0, workers, |x| integrate(field, x, 0.0, 1.0, cfg, false).map(|s| s.x))
        .into_iter()
        .collect()
}

/// `log q_1(x)`: integrate backwards to `t = 0` and apply the change of variables.
pub fn log_likelihood<F: Field>(field: &F, prior: &Prior, x: &[f64], cfg: &OdeSolverConfig) -> Result<f64> {
    field.manifold().check_point(x)?;
    let end = integrate(field, x, 1.0, 0.0, cfg, true)?;
    // log_det_accum = int_1^0 -div = int_0^1 div, and log q_1 = log p_0 - int_0^1 div.
    Ok(prior.log_density(&end.x)? - end.log_det_accum)
}

pub fn log_likelihood_batch<F: Field>(
    field: &F,
    prior: &Prior,
    xs: &[Vec<f64>],
    cfg: &OdeSolverConfig,
    workers: usize,
) -> Result<Vec<f64>> {
    parallel_map(xs, workers, |x| log_likelihood(field, prior, x, cfg))
        .into_iter()
        .collect()
}

/// Geodesic distance between `x` and its image under the flow 0 -> 1 -> 0.
pub fn roundtrip_error<F: Field>(field: &F, x: &[f64], cfg: &OdeSolverConfig) -> Result<f64> {
    let fwd = integrate(field, x, 0.0, 1.0, cfg, false)?;
    let back = integrate(field, &fwd.x, 1.0, 0.0, cfg, false)?;
    Ok(field.manifold().distance(x, &back.x))
}
