//! C ABI over `neural-sheaf`. Models live behind an opaque [`NsModel`]
//! handle; every fallible call returns an [`NsStatus`] and leaves a
//! message for [`ns_last_error_message`] on failure. No call unwinds across
//! the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use neural_sheaf::diagnostics::{restricted_operator, spectrum};
use neural_sheaf::diffusion::{run_diffusion, DiffusionConfig};
use neural_sheaf::network::forward_pass;
use neural_sheaf::sheaf::unitriangular_det;
use neural_sheaf::{NetworkSpec, NeuralSheaf, SheafError};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Dimension = 3,
    InvalidModel = 4,
    Diverged = 5,
    NotConverged = 6,
    Io = 7,
    Internal = 8,
}

/// Opaque network handle.
pub struct NsModel {
    spec: NetworkSpec,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(e: &SheafError) -> NsStatus {
    match e {
        SheafError::Dimension(_) => NsStatus::Dimension,
        SheafError::Construction(_) | SheafError::Json(_) => NsStatus::InvalidModel,
        SheafError::Diverged { .. } => NsStatus::Diverged,
        SheafError::Io(_) => NsStatus::Io,
        _ => NsStatus::InvalidArgument,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (NsStatus, String)>) -> NsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => NsStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            NsStatus::Internal
        }
    }
}

fn lift<T>(r: neural_sheaf::Result<T>) -> Result<T, (NsStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (NsStatus, String) {
    (NsStatus::NullPointer, format!("{what} is null"))
}

unsafe fn model_ref<'a>(m: *const NsModel) -> Result<&'a NsModel, (NsStatus, String)> {
    m.as_ref().ok_or_else(|| null("model"))
}

unsafe fn input<'a>(x: *const f64, n: usize, model: &NsModel) -> Result<&'a [f64], (NsStatus, String)> {
    if x.is_null() {
        return Err(null("input"));
    }
    if n != model.spec.input_dim() {
        return Err((
            NsStatus::Dimension,
            format!("input length {n}, model expects {}", model.spec.input_dim()),
        ));
    }
    Ok(std::slice::from_raw_parts(x, n))
}

unsafe fn output<'a>(y: *mut f64, n: usize, model: &NsModel) -> Result<&'a mut [f64], (NsStatus, String)> {
    if y.is_null() {
        return Err(null("output"));
    }
    if n != model.spec.output_dim() {
        return Err((
            NsStatus::Dimension,
            format!("output length {n}, model produces {}", model.spec.output_dim()),
        ));
    }
    Ok(std::slice::from_raw_parts_mut(y, n))
}

unsafe fn cstr<'a>(s: *const c_char, what: &str) -> Result<&'a str, (NsStatus, String)> {
    if s.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(s)
        .to_str()
        .map_err(|_| (NsStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn store(out: *mut *mut NsModel, spec: NetworkSpec) -> Result<(), (NsStatus, String)> {
    *out = Box::into_raw(Box::new(NsModel { spec }));
    Ok(())
}

/// Parse a model from its JSON text. On success `*out` owns a handle that
/// must be released with [`ns_model_free`].
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ns_model_from_json(json: *const c_char, out: *mut *mut NsModel) -> NsStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let text = cstr(json, "json")?;
        let spec = lift(NetworkSpec::from_json_str(text))?;
        store(out, spec)
    })
}

/// Load a model JSON file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ns_model_load(path: *const c_char, out: *mut *mut NsModel) -> NsStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let p = cstr(path, "path")?;
        let spec = lift(NetworkSpec::load(p))?;
        store(out, spec)
    })
}

/// Release a handle; null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ns_model_free(model: *mut NsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Input and output widths.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn ns_model_dims(
    model: *const NsModel,
    input_dim: *mut usize,
    output_dim: *mut usize,
) -> NsStatus {
    guard(|| {
        let m = model_ref(model)?;
        if input_dim.is_null() || output_dim.is_null() {
            return Err(null("dimension output"));
        }
        *input_dim = m.spec.input_dim();
        *output_dim = m.spec.output_dim();
        Ok(())
    })
}

/// Forward pass `ŷ = φ(z⁽ᵏ⁺¹⁾)`.
///
/// # Safety
/// `x` must hold `nx` values and `y` room for `ny`.
#[no_mangle]
pub unsafe extern "C" fn ns_forward(
    model: *const NsModel,
    x: *const f64,
    nx: usize,
    y: *mut f64,
    ny: usize,
) -> NsStatus {
    guard(|| {
        let m = model_ref(model)?;
        let x = input(x, nx, m)?;
        let y = output(y, ny, m)?;
        let t = lift(forward_pass(&m.spec, x))?;
        y.copy_from_slice(t.y_hat.as_slice().unwrap());
        Ok(())
    })
}

/// Diffuse from a zero cochain until the velocity sup-norm drops below
/// `tol`; writes the equilibrium output and, if `steps` is non-null, the
/// number of steps. Returns `NotConverged` (with the last output written)
/// when `max_steps` runs out.
///
/// # Safety
/// `x` must hold `nx` values, `y` room for `ny`; `steps` may be null.
#[no_mangle]
pub unsafe extern "C" fn ns_converge(
    model: *const NsModel,
    x: *const f64,
    nx: usize,
    dt: f64,
    max_steps: usize,
    tol: f64,
    y: *mut f64,
    ny: usize,
    steps: *mut usize,
) -> NsStatus {
    guard(|| {
        let m = model_ref(model)?;
        let x = input(x, nx, m)?;
        let y = output(y, ny, m)?;
        let sheaf = lift(NeuralSheaf::new(m.spec.clone()))?;
        let config = DiffusionConfig {
            dt,
            max_steps,
            tol,
            record_every: max_steps.max(1),
            record_crossings: false,
            ..DiffusionConfig::default()
        };
        let start = lift(sheaf.boundary_cochain(x))?;
        let traj = lift(run_diffusion(&sheaf, start, &config))?;
        y.copy_from_slice(traj.output.last().expect("final record"));
        if !steps.is_null() {
            *steps = traj.steps_taken;
        }
        if traj.converged {
            Ok(())
        } else {
            Err((
                NsStatus::NotConverged,
                format!("no convergence within {max_steps} steps"),
            ))
        }
    })
}

/// `det δ_Ω` at the forward-pass activation pattern of `x` (always 1).
///
/// # Safety
/// `x` must hold `nx` values and `det` be valid.
#[no_mangle]
pub unsafe extern "C" fn ns_unit_determinant(
    model: *const NsModel,
    x: *const f64,
    nx: usize,
    det: *mut f64,
) -> NsStatus {
    guard(|| {
        let m = model_ref(model)?;
        let x = input(x, nx, m)?;
        if det.is_null() {
            return Err(null("det"));
        }
        let sheaf = lift(NeuralSheaf::new(m.spec.clone()))?;
        let pattern = lift(forward_pass(&m.spec, x))?.pattern;
        *det = lift(unitriangular_det(&sheaf, &pattern))?;
        Ok(())
    })
}

/// Smallest and largest eigenvalue of the restricted Laplacian at the
/// forward-pass pattern of `x`. `lambda_max` may be null.
///
/// # Safety
/// `x` must hold `nx` values and `lambda1` be valid.
#[no_mangle]
pub unsafe extern "C" fn ns_spectral_gap(
    model: *const NsModel,
    x: *const f64,
    nx: usize,
    lambda1: *mut f64,
    lambda_max: *mut f64,
) -> NsStatus {
    guard(|| {
        let m = model_ref(model)?;
        let x = input(x, nx, m)?;
        if lambda1.is_null() {
            return Err(null("lambda1"));
        }
        let op = lift(restricted_operator(&m.spec, x))?;
        let r = lift(spectrum(&op.matrix))?;
        *lambda1 = r.lambda1;
        if !lambda_max.is_null() {
            *lambda_max = r.lambda_max;
        }
        Ok(())
    })
}

/// Copy the calling thread's last error message into `buf` (truncated,
/// always NUL-terminated when `len > 0`). Returns the full message length
/// plus one, so a caller can size the buffer with a null `buf`.
///
/// # Safety
/// `buf` must have room for `len` bytes or be null.
#[no_mangle]
pub unsafe extern "C" fn ns_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        bytes.len() + 1
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ns_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}
