//! C ABI over the `moica` library.
//!
//! Models are opaque handles created by `moica_model_load` or
//! `moica_model_from_bytes` and released with `moica_model_free`. Every
//! fallible call returns a [`MoicaStatus`]; on failure the message is kept
//! per thread and can be copied out with `moica_last_error`.
//!
//! Matrices cross the boundary as column-major `f64` buffers with one datum
//! per column. Non-finite input is rejected with `InvalidArgument`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use moica::classify::patch_size_for;
use moica::model_file::SavedModel;
use moica::moica::{component_posteriors, model_loglik};
use moica::Error;
use nalgebra::DMatrix;

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MoicaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    ShapeMismatch = 5,
    Numerical = 6,
    NoWhitening = 7,
    Panic = 8,
}

/// Opaque model handle.
pub struct MoicaModel {
    saved: SavedModel,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(err: &Error) -> MoicaStatus {
    match err {
        Error::Io(_) => MoicaStatus::Io,
        Error::Format { .. } => MoicaStatus::Format,
        Error::ShapeMismatch { .. } => MoicaStatus::ShapeMismatch,
        Error::NonFinite(_) | Error::Singular(_) | Error::DegenerateStep { .. } => {
            MoicaStatus::Numerical
        }
        Error::EmptyDataset | Error::InvalidParameter(_) => MoicaStatus::InvalidArgument,
    }
}

struct Failure(MoicaStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(MoicaStatus::NullPointer, format!("{what} is null"))
}

fn guard(body: impl FnOnce() -> Result<(), Failure>) -> MoicaStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => {
            set_error("");
            MoicaStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            MoicaStatus::Panic
        }
    }
}

unsafe fn model_ref<'a>(model: *const MoicaModel) -> Result<&'a MoicaModel, Failure> {
    model.as_ref().ok_or_else(|| null("model"))
}

unsafe fn slice<'a>(data: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if data.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(data, len))
}

unsafe fn slice_mut<'a>(data: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if data.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(data, len))
}

fn checked_len(rows: usize, cols: usize) -> Result<usize, Failure> {
    rows.checked_mul(cols)
        .ok_or_else(|| Failure(MoicaStatus::InvalidArgument, "buffer size overflows".into()))
}

unsafe fn store(out: *mut *mut MoicaModel, saved: SavedModel) {
    *out = Box::into_raw(Box::new(MoicaModel { saved }));
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn moica_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (truncated and
/// always NUL-terminated when `len > 0`). Returns the full message length in
/// bytes, excluding the terminator.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn moica_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Loads a model file. On success `*out` receives a new handle.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn moica_model_load(
    path: *const c_char,
    out: *mut *mut MoicaModel,
) -> MoicaStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Failure(MoicaStatus::InvalidArgument, "path is not UTF-8".into()))?;
        store(out, SavedModel::load(path)?);
        Ok(())
    })
}

/// Parses a model from an in-memory model file image.
///
/// # Safety
/// `bytes` must point to `len` readable bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn moica_model_from_bytes(
    bytes: *const u8,
    len: usize,
    out: *mut *mut MoicaModel,
) -> MoicaStatus {
    guard(|| {
        if bytes.is_null() {
            return Err(null("bytes"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        store(
            out,
            SavedModel::from_bytes(std::slice::from_raw_parts(bytes, len))?,
        );
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn moica_model_free(model: *mut MoicaModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Model dimension M (the whitened dimension when whitening is stored).
/// Returns 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn moica_model_dim(model: *const MoicaModel) -> usize {
    model.as_ref().map_or(0, |m| m.saved.model.dim())
}

/// Number of mixture components K; 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn moica_model_n_components(model: *const MoicaModel) -> usize {
    model.as_ref().map_or(0, |m| m.saved.model.n_components())
}

/// Raw patch dimension D of the stored whitening; 0 without whitening.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn moica_model_input_dim(model: *const MoicaModel) -> usize {
    model
        .as_ref()
        .and_then(|m| m.saved.whitening.as_ref())
        .map_or(0, |tf| tf.input_dim())
}

/// Patch side length implied by the stored whitening; 0 without whitening.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn moica_model_patch_size(model: *const MoicaModel) -> usize {
    model
        .as_ref()
        .and_then(|m| m.saved.whitening.as_ref())
        .and_then(|tf| patch_size_for(tf).ok())
        .unwrap_or(0)
}

/// Copies the K component priors into `out`.
///
/// # Safety
/// `out` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn moica_model_priors(
    model: *const MoicaModel,
    out: *mut f64,
    len: usize,
) -> MoicaStatus {
    guard(|| {
        let priors = model_ref(model)?.saved.model.priors();
        if len != priors.len() {
            return Err(Failure(
                MoicaStatus::ShapeMismatch,
                format!("expected {} priors, buffer holds {len}", priors.len()),
            ));
        }
        slice_mut(out, len, "out")?.copy_from_slice(priors);
        Ok(())
    })
}

/// Copies the M×M mixing matrix of component `k` (column-major) into `out`.
///
/// # Safety
/// `out` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn moica_model_mixing(
    model: *const MoicaModel,
    k: usize,
    out: *mut f64,
    len: usize,
) -> MoicaStatus {
    guard(|| {
        let m = &model_ref(model)?.saved.model;
        let comp = m.components().get(k).ok_or_else(|| {
            Failure(
                MoicaStatus::InvalidArgument,
                format!("component {k} out of range for K = {}", m.n_components()),
            )
        })?;
        let a = comp.mixing().as_matrix().as_slice();
        if len != a.len() {
            return Err(Failure(
                MoicaStatus::ShapeMismatch,
                format!("expected {} entries, buffer holds {len}", a.len()),
            ));
        }
        slice_mut(out, len, "out")?.copy_from_slice(a);
        Ok(())
    })
}

fn finite(x: &[f64]) -> Result<&[f64], Failure> {
    match x.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Failure(
            MoicaStatus::InvalidArgument,
            format!("non-finite input at index {i}"),
        )),
        None => Ok(x),
    }
}

unsafe fn data_matrix(
    model: &MoicaModel,
    data: *const f64,
    n: usize,
) -> Result<DMatrix<f64>, Failure> {
    let dim = model.saved.model.dim();
    let x = finite(slice(data, checked_len(dim, n)?, "data")?)?;
    Ok(DMatrix::from_column_slice(dim, n, x))
}

/// Total log-likelihood of `n` data columns of length M.
///
/// # Safety
/// `data` must point to `M·n` readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn moica_model_loglik(
    model: *const MoicaModel,
    data: *const f64,
    n: usize,
    out: *mut f64,
) -> MoicaStatus {
    guard(|| {
        let m = model_ref(model)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let x = data_matrix(m, data, n)?;
        *out = model_loglik(&m.saved.model, &x)?;
        Ok(())
    })
}

/// Component posteriors of `n` data columns, written as a K×n column-major
/// matrix (the K posteriors of each datum are contiguous).
///
/// # Safety
/// `data` must point to `M·n` readable doubles and `out` to `K·n` writable
/// doubles.
#[no_mangle]
pub unsafe extern "C" fn moica_model_posteriors(
    model: *const MoicaModel,
    data: *const f64,
    n: usize,
    out: *mut f64,
) -> MoicaStatus {
    guard(|| {
        let m = model_ref(model)?;
        let k = m.saved.model.n_components();
        let dst = slice_mut(out, checked_len(k, n)?, "out")?;
        let x = data_matrix(m, data, n)?;
        if n == 0 {
            return Ok(());
        }
        let post = component_posteriors(&m.saved.model, &x)?;
        dst.copy_from_slice(post.transpose().as_slice());
        Ok(())
    })
}

/// Whitens `n` raw patch columns of length D into `n` columns of length M.
///
/// # Safety
/// `data` must point to `D·n` readable doubles and `out` to `M·n` writable
/// doubles.
#[no_mangle]
pub unsafe extern "C" fn moica_model_whiten(
    model: *const MoicaModel,
    data: *const f64,
    n: usize,
    out: *mut f64,
) -> MoicaStatus {
    guard(|| {
        let m = model_ref(model)?;
        let tf = m.saved.whitening.as_ref().ok_or_else(|| {
            Failure(
                MoicaStatus::NoWhitening,
                "model file carries no whitening transform".into(),
            )
        })?;
        let (big_d, d) = (tf.input_dim(), tf.output_dim());
        let x = finite(slice(data, checked_len(big_d, n)?, "data")?)?;
        let dst = slice_mut(out, checked_len(d, n)?, "out")?;
        if n == 0 {
            return Ok(());
        }
        let y = tf.whiten_all(&DMatrix::from_column_slice(big_d, n, x))?;
        dst.copy_from_slice(y.as_slice());
        Ok(())
    })
}
