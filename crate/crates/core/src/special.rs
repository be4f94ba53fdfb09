//! Exponentially scaled modified Bessel functions and the von Mises-Fisher
//! normalizer.
//!
//! `log_ive(nu, kappa) = log(I_nu(kappa) * exp(-kappa))` is evaluated by
//!
//! * the ascending power series (all terms positive) when `kappa < nu + 30`,
//! * the large-argument Hankel expansion when it converges to full precision,
//! * the power series again up to `kappa = 2e4` (this is where Hankel fails,
//!   i.e. `nu` is moderately large compared to `sqrt(kappa)`),
//! * the uniform (Debye) expansion otherwise, which then has `nu > 200`.
//!
//! The kappa-derivative comes from the Bessel ratio `I_{nu+1} / I_nu`, which is
//! itself a difference of two well-conditioned logs.

use crate::error::{Error, Result};
use crate::manifold::log_sphere_area;

const SERIES_GAP: f64 = 30.0;
const SERIES_MAX_KAPPA: f64 = 2.0e4;

fn check_args(nu: f64, kappa: f64) -> Result<()> {
    if !(kappa > 0.0) || !kappa.is_finite() {
        return Err(Error::Domain(format!("log_ive needs kappa > 0, got {kappa}")));
    }
    if !(nu >= 0.0) || !nu.is_finite() {
        return Err(Error::Domain(format!("log_ive needs nu >= 0, got {nu}")));
    }
    Ok(())
}

/// `log(I_nu(kappa) e^{-kappa})` for `nu >= 0`, `kappa > 0`.
pub fn log_ive(nu: f64, kappa: f64) -> Result<f64> {
    check_args(nu, kappa)?;
    if kappa < nu + SERIES_GAP {
        return Ok(log_ive_series(nu, kappa));
    }
    if let Some(v) = log_ive_hankel(nu, kappa) {
        return Ok(v);
    }
    if kappa <= SERIES_MAX_KAPPA {
        return Ok(log_ive_series(nu, kappa));
    }
    Ok(log_ive_debye(nu, kappa))
}

fn log_ive_series(nu: f64, kappa: f64) -> f64 {
    const RESCALE: f64 = 1e250;
    let q = 0.25 * kappa * kappa;
    let mut term = 1.0_f64;
    let mut sum = 1.0_f64;
    let mut log_scale = 0.0;
    let mut k = 0.0_f64;
    loop {
        k += 1.0;
        let ratio = q / (k * (k + nu));
        term *= ratio;
        sum += term;
        if sum > RESCALE {
            sum /= RESCALE;
            term /= RESCALE;
            log_scale += RESCALE.ln();
        }
        if ratio < 1.0 && term < 1e-17 * sum {
            break;
        }
    }
    nu * (0.5 * kappa).ln() - libm::lgamma(nu + 1.0) + sum.ln() + log_scale - kappa
}

/// `I_nu(z) e^{-z} ~ (2 pi z)^{-1/2} sum_k (-1)^k a_k(nu) / z^k`; `None` when the
/// asymptotic series starts growing before reaching double precision.
fn log_ive_hankel(nu: f64, kappa: f64) -> Option<f64> {
    let mu = 4.0 * nu * nu;
    let mut term = 1.0_f64;
    let mut sum = 1.0_f64;
    for k in 1..200 {
        let kf = k as f64;
        let odd = 2.0 * kf - 1.0;
        let next = term * (odd * odd - mu) / (8.0 * kf * kappa);
        if next == 0.0 || next.abs() < 1e-17 * sum.abs() {
            sum += next;
            return Some(sum.ln() - 0.5 * (2.0 * std::f64::consts::PI * kappa).ln());
        }
        if next.abs() >= term.abs() {
            return None;
        }
        sum += next;
        term = next;
    }
    None
}

fn log_ive_debye(nu: f64, kappa: f64) -> f64 {
    let r = (nu * nu + kappa * kappa).sqrt();
    let t = nu / r;
    let t2 = t * t;
    let u1 = t * (3.0 - 5.0 * t2) / 24.0;
    let u2 = t2 * (81.0 - 462.0 * t2 + 385.0 * t2 * t2) / 1152.0;
    let u3 = t * t2 * (30375.0 - 369603.0 * t2 + 765765.0 * t2 * t2 - 425425.0 * t2 * t2 * t2)
        / 414720.0;
    let u4 = t2
        * t2
        * (4465125.0 - 94121676.0 * t2 + 349922430.0 * t2 * t2 - 446185740.0 * t2 * t2 * t2
            + 185910725.0 * t2 * t2 * t2 * t2)
        / 39813120.0;
    let series = 1.0 + u1 / nu + u2 / (nu * nu) + u3 / nu.powi(3) + u4 / nu.powi(4);
    // sqrt(nu^2 + kappa^2) - kappa without cancellation.
    let excess = nu * nu / (r + kappa);
    excess + nu * (kappa / (nu + r)).ln()
        - 0.5 * (2.0 * std::f64::consts::PI).ln()
        - 0.5 * r.ln()
        + series.ln()
}

/// `I_{nu+1}(kappa) / I_nu(kappa)`.
pub fn bessel_ratio(nu: f64, kappa: f64) -> Result<f64> {
    Ok((log_ive(nu + 1.0, kappa)? - log_ive(nu, kappa)?).exp())
}

/// Exact `d/dkappa log_ive(nu, kappa) = I_{nu+1}/I_nu + nu/kappa - 1`.
pub fn d_log_ive(nu: f64, kappa: f64) -> Result<f64> {
    Ok(bessel_ratio(nu, kappa)? + nu / kappa - 1.0)
}

/// Lower and upper bounds on `d/dkappa log_ive` obtained from the
/// Ruiz-Antolin/Segura bounds on `I_{nu-1}/I_nu`.
pub fn d_log_ive_bounds(nu: f64, kappa: f64) -> Result<(f64, f64)> {
    check_args(nu, kappa)?;
    let a = nu + 1.0;
    let b = nu + 0.5;
    // (nu - 1 + sqrt(a^2 + k^2)) / k - nu / k - 1, written without cancellation.
    let lower = (-1.0 + a * a / ((a * a + kappa * kappa).sqrt() + kappa)) / kappa;
    let upper = (-0.5 + b * b / ((b * b + kappa * kappa).sqrt() + kappa)) / kappa;
    Ok((lower, upper))
}

/// Midpoint of [`d_log_ive_bounds`]:
/// `(-1.5 + sqrt((nu+1)^2 + k^2) + sqrt((nu+1/2)^2 + k^2)) / (2k) - 1`.
pub fn d_log_ive_bound_average(nu: f64, kappa: f64) -> Result<f64> {
    let (lo, hi) = d_log_ive_bounds(nu, kappa)?;
    Ok(0.5 * (lo + hi))
}

fn check_vmf_dim(p: usize) -> Result<()> {
    if p < 2 {
        return Err(Error::Input(format!(
            "von Mises-Fisher needs ambient dimension >= 2, got {p}"
        )));
    }
    Ok(())
}

/// `log C_p(kappa)` of the vMF density `C_p(kappa) exp(kappa x^T mu)` on
/// `S^{p-1}`; `kappa = 0` is the uniform density.
pub fn log_norm_const_vmf(p: usize, kappa: f64) -> Result<f64> {
    check_vmf_dim(p)?;
    if kappa == 0.0 {
        return Ok(-log_sphere_area(p - 1));
    }
    if !(kappa > 0.0) {
        return Err(Error::Domain(format!("vMF concentration must be >= 0, got {kappa}")));
    }
    let nu = 0.5 * p as f64 - 1.0;
    Ok(nu * kappa.ln() - 0.5 * p as f64 * (2.0 * std::f64::consts::PI).ln()
        - kappa
        - log_ive(nu, kappa)?)
}

/// Mean resultant length `A_p(kappa) = I_{p/2}(kappa) / I_{p/2-1}(kappa)`,
/// which is also `-d/dkappa log C_p(kappa)`.
pub fn vmf_mean_resultant(p: usize, kappa: f64) -> Result<f64> {
    check_vmf_dim(p)?;
    if kappa == 0.0 {
        return Ok(0.0);
    }
    bessel_ratio(0.5 * p as f64 - 1.0, kappa)
}

/// `d/dkappa log C_p(kappa) = (p/2-1)/kappa - 1 - d_log_ive(p/2-1, kappa)`,
/// evaluated as `-A_p(kappa)` to avoid the cancellation at small kappa.
pub fn d_log_norm_const_vmf(p: usize, kappa: f64) -> Result<f64> {
    Ok(-vmf_mean_resultant(p, kappa)?)
}
