//! C ABI over the `cnfm` library.
//!
//! Models are opaque handles created by [`cnfm_model_load`] and released with
//! [`cnfm_model_free`]. Every fallible call returns a [`CnfmStatus`]; on
//! failure, [`cnfm_last_error_message`] describes the most recent error on the
//! calling thread. Arrays are row-major `double` buffers owned by the caller.
//! Panics never cross the boundary; they surface as `CNFM_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use cnfm::field::Field;
use cnfm::flow::{log_likelihood, sample_model, OdeSolverConfig};
use cnfm::train::Model;
use cnfm::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Result codes shared by every fallible function.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CnfmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Numeric = 5,
    Unsupported = 6,
    Panic = 7,
}

/// A loaded model: vector field, prior and training metadata.
pub struct CnfmModel {
    inner: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> CnfmStatus {
    match e {
        Error::Input(_) | Error::Domain(_) | Error::Parse(_) => CnfmStatus::InvalidArgument,
        Error::Io(_) | Error::Csv(_) => CnfmStatus::Io,
        Error::Format(_) => CnfmStatus::Format,
        Error::Numeric(_) | Error::Convergence(_) => CnfmStatus::Numeric,
        Error::Unsupported(_) => CnfmStatus::Unsupported,
    }
}

/// Run `f`, recording any error or panic for [`cnfm_last_error_message`].
fn guard(f: impl FnOnce() -> Result<(), (CnfmStatus, String)>) -> CnfmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CnfmStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(&msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(&format!("internal panic: {msg}"));
            CnfmStatus::Panic
        }
    }
}

fn lib(e: Error) -> (CnfmStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (CnfmStatus, String) {
    (CnfmStatus::NullPointer, format!("{what} is null"))
}

fn bad(msg: String) -> (CnfmStatus, String) {
    (CnfmStatus::InvalidArgument, msg)
}

unsafe fn model_ref<'a>(m: *const CnfmModel) -> Result<&'a Model, (CnfmStatus, String)> {
    m.as_ref().map(|m| &m.inner).ok_or_else(|| null("model"))
}

unsafe fn solver_arg(s: *const c_char) -> Result<OdeSolverConfig, (CnfmStatus, String)> {
    if s.is_null() {
        return Ok(OdeSolverConfig::dopri5(1e-6, 1e-8));
    }
    let text = CStr::from_ptr(s).to_str().map_err(|_| bad("solver is not UTF-8".into()))?;
    text.parse().map_err(lib)
}

unsafe fn slice_arg<'a>(p: *const f64, n: usize, what: &str) -> Result<&'a [f64], (CnfmStatus, String)> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn slice_out<'a>(p: *mut f64, n: usize, what: &str) -> Result<&'a mut [f64], (CnfmStatus, String)> {
    if n == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, n))
}

fn check_dim(model: &Model, dim: usize) -> Result<(), (CnfmStatus, String)> {
    let want = model.manifold().ambient_dim();
    if dim != want {
        return Err(bad(format!("dimension {dim} given, model on {} needs {want}", model.manifold())));
    }
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cnfm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread (empty if none).
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn cnfm_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Load a checkpoint (and its `.manifest`, if present) into a new handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cnfm_model_load(path: *const c_char, out: *mut *mut CnfmModel) -> CnfmStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let p = CStr::from_ptr(path).to_str().map_err(|_| bad("path is not UTF-8".into()))?;
        let inner = Model::load(Path::new(p)).map_err(lib)?;
        *out = Box::into_raw(Box::new(CnfmModel { inner }));
        Ok(())
    })
}

/// Release a handle. Null is ignored.
///
/// # Safety
/// `model` must come from [`cnfm_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cnfm_model_free(model: *mut CnfmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Ambient dimension of the model's manifold, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cnfm_model_ambient_dim(model: *const CnfmModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.manifold().ambient_dim())
}

/// Copy the manifold description (e.g. `R^3 x S^1`) into `buf`, NUL-terminated.
/// `needed` (if non-null) receives the buffer size required, including the NUL.
///
/// # Safety
/// `buf` must hold `len` bytes; `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn cnfm_model_manifold(
    model: *const CnfmModel,
    buf: *mut c_char,
    len: usize,
    needed: *mut usize,
) -> CnfmStatus {
    guard(|| {
        let m = model_ref(model)?;
        let s = m.manifold().to_string();
        if !needed.is_null() {
            *needed = s.len() + 1;
        }
        if len < s.len() + 1 {
            return Err(bad(format!("buffer of {len} bytes, need {}", s.len() + 1)));
        }
        if buf.is_null() {
            return Err(null("buf"));
        }
        std::ptr::copy_nonoverlapping(s.as_ptr().cast::<c_char>(), buf, s.len());
        *buf.add(s.len()) = 0;
        Ok(())
    })
}

/// `v(t, x)` into `out` (length `dim`).
///
/// # Safety
/// `x` and `out` must hold `dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn cnfm_model_eval(
    model: *const CnfmModel,
    t: f64,
    x: *const f64,
    dim: usize,
    out: *mut f64,
) -> CnfmStatus {
    guard(|| {
        let m = model_ref(model)?;
        check_dim(m, dim)?;
        let x = slice_arg(x, dim, "x")?;
        let out = slice_out(out, dim, "out")?;
        out.copy_from_slice(&m.field.eval(t, x));
        Ok(())
    })
}

/// Exact divergence `div v(t, x)`.
///
/// # Safety
/// `x` must hold `dim` doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn cnfm_model_divergence(
    model: *const CnfmModel,
    t: f64,
    x: *const f64,
    dim: usize,
    out: *mut f64,
) -> CnfmStatus {
    guard(|| {
        let m = model_ref(model)?;
        check_dim(m, dim)?;
        let x = slice_arg(x, dim, "x")?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = m.field.divergence_exact(t, x);
        Ok(())
    })
}

/// `log q_1` at `n` points stored row-major in `xs` (`n * dim` doubles).
/// `solver` is `rk4:N` or `dopri5:RTOL:ATOL`; null selects `dopri5:1e-6:1e-8`.
///
/// # Safety
/// `xs` must hold `n * dim` doubles and `out` `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn cnfm_model_log_likelihood(
    model: *const CnfmModel,
    xs: *const f64,
    n: usize,
    dim: usize,
    solver: *const c_char,
    out: *mut f64,
) -> CnfmStatus {
    guard(|| {
        let m = model_ref(model)?;
        check_dim(m, dim)?;
        let solver = solver_arg(solver)?;
        let xs = slice_arg(xs, n * dim, "xs")?;
        let out = slice_out(out, n, "out")?;
        for (o, x) in out.iter_mut().zip(xs.chunks_exact(dim.max(1))) {
            *o = log_likelihood(&m.field, &m.prior, x, &solver).map_err(lib)?;
        }
        Ok(())
    })
}

/// Draw `n` samples into `out` (`n * dim` doubles, row-major).
///
/// # Safety
/// `out` must hold `n * dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn cnfm_model_sample(
    model: *const CnfmModel,
    n: usize,
    seed: u64,
    solver: *const c_char,
    out: *mut f64,
    dim: usize,
) -> CnfmStatus {
    guard(|| {
        let m = model_ref(model)?;
        check_dim(m, dim)?;
        let solver = solver_arg(solver)?;
        let out = slice_out(out, n * dim, "out")?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs = sample_model(&m.field, &m.prior, n, &solver, &mut rng, 1).map_err(lib)?;
        for (o, x) in out.chunks_exact_mut(dim.max(1)).zip(&xs) {
            o.copy_from_slice(x);
        }
        Ok(())
    })
}

/// Log volume of a manifold given as text, e.g. `S^2` or `S^1 x S^1`.
///
/// # Safety
/// `manifold` must be NUL-terminated; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn cnfm_manifold_log_volume(manifold: *const c_char, out: *mut f64) -> CnfmStatus {
    guard(|| {
        if manifold.is_null() {
            return Err(null("manifold"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let s = CStr::from_ptr(manifold).to_str().map_err(|_| bad("manifold is not UTF-8".into()))?;
        let m: cnfm::Manifold = s.parse().map_err(lib)?;
        *out = m.log_volume().map_err(lib)?;
        Ok(())
    })
}

/// Log normalizing constant of the von Mises-Fisher density on `S^(p-1)`.
///
/// # Safety
/// `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn cnfm_log_norm_const_vmf(p: usize, kappa: f64, out: *mut f64) -> CnfmStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = cnfm::special::log_norm_const_vmf(p, kappa).map_err(lib)?;
        Ok(())
    })
}
