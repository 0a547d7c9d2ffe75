//! C interface to the super-resolution model.
//!
//! Models are opaque handles created by [`mcm_model_load`] and released with
//! [`mcm_model_free`]. Every fallible call returns an [`McmStatus`]; the message
//! for the most recent failure on the calling thread is available from
//! [`mcm_last_error`]. Images are row-major `double` arrays of `grid * grid` values.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use mcm_sr::model::ConditionTuple;
use mcm_sr::phantom::kspace;
use mcm_sr::service::{load_model, super_resolve, ModelHandle};
use mcm_sr::{Error, Field, Metabolite};
use ndarray::Array2;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum McmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    UnknownMetabolite = 4,
    NotFound = 5,
    Load = 6,
    Checksum = 7,
    Consistency = 8,
    Io = 9,
    Internal = 10,
    Panic = 11,
}

/// A loaded model. Opaque to C callers.
pub struct McmModel {
    handle: ModelHandle,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(e: &Error) -> McmStatus {
    match e {
        Error::Argument(_) | Error::Config(_) | Error::Degenerate(_) | Error::Pairing(_) => McmStatus::InvalidArgument,
        Error::Shape(_) => McmStatus::Shape,
        Error::Vocabulary(_) => McmStatus::UnknownMetabolite,
        Error::NotFound(_) => McmStatus::NotFound,
        Error::Load(_) | Error::Json(_) => McmStatus::Load,
        Error::Checksum(_) => McmStatus::Checksum,
        Error::Consistency(_) => McmStatus::Consistency,
        Error::Io(_) => McmStatus::Io,
        Error::NonFinite { .. } | Error::Tensor(_) => McmStatus::Internal,
    }
}

fn fail(status: McmStatus, msg: impl Into<String>) -> McmStatus {
    set_error(msg);
    status
}

/// Runs `f`, recording any error or panic as the thread's last error.
fn guarded(f: impl FnOnce() -> Result<(), McmStatus>) -> McmStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => McmStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => fail(McmStatus::Panic, "internal panic"),
    }
}

fn lift<T>(r: mcm_sr::Result<T>) -> Result<T, McmStatus> {
    r.map_err(|e| fail(status_of(&e), e.to_string()))
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, McmStatus> {
    if p.is_null() {
        return Err(fail(McmStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| fail(McmStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn field(p: *const f64, grid: usize, what: &str) -> Result<Field, McmStatus> {
    if p.is_null() {
        return Err(fail(McmStatus::NullPointer, format!("{what} is null")));
    }
    let values = std::slice::from_raw_parts(p, grid * grid);
    Ok(Array2::from_shape_vec((grid, grid), values.to_vec()).expect("length matches the grid"))
}

unsafe fn write_out(out: *mut f64, f: &Field) -> Result<(), McmStatus> {
    if out.is_null() {
        return Err(fail(McmStatus::NullPointer, "output buffer is null"));
    }
    let dst = std::slice::from_raw_parts_mut(out, f.len());
    for (d, v) in dst.iter_mut().zip(f.iter()) {
        *d = *v;
    }
    Ok(())
}

/// Loads a checkpoint. On success `*out` receives a handle owned by the caller.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mcm_model_load(path: *const c_char, out: *mut *mut McmModel) -> McmStatus {
    guarded(|| {
        if out.is_null() {
            return Err(fail(McmStatus::NullPointer, "out is null"));
        }
        *out = std::ptr::null_mut();
        let path = c_str(path, "path")?;
        let handle = lift(load_model(Path::new(path)))?;
        *out = Box::into_raw(Box::new(McmModel { handle }));
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must come from [`mcm_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mcm_model_free(model: *mut McmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Side length of the images the model works on, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mcm_model_grid_size(model: *const McmModel) -> usize {
    model.as_ref().map_or(0, |m| m.handle.grid_size())
}

/// Number of metabolite names accepted by [`mcm_super_resolve`].
#[no_mangle]
pub extern "C" fn mcm_metabolite_count() -> usize {
    Metabolite::COUNT
}

/// Zero-fills `image` outside the central `n`x`n` k-space window.
///
/// # Safety
/// `image` and `out` must each hold `grid * grid` doubles.
#[no_mangle]
pub unsafe extern "C" fn mcm_degrade(image: *const f64, grid: usize, n: u32, out: *mut f64) -> McmStatus {
    guarded(|| {
        let x = field(image, grid, "image")?;
        let low = lift(kspace::degrade(&x, n as usize))?;
        write_out(out, &low)
    })
}

/// Super-resolves one acquisition.
///
/// `lowres` is the zero-filled measurement, `t1` and `flair` the anatomical images, all
/// `grid * grid` doubles on the model grid. The result goes to `out`; if `residual` is
/// not null it receives the relative k-space deviation of the output from the measurement.
///
/// # Safety
/// All array pointers must hold `grid * grid` doubles and `metabolite` must be a
/// NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn mcm_super_resolve(
    model: *const McmModel,
    lowres: *const f64,
    t1: *const f64,
    flair: *const f64,
    grid: usize,
    n: u32,
    metabolite: *const c_char,
    lambda: f64,
    out: *mut f64,
    residual: *mut f64,
) -> McmStatus {
    guarded(|| {
        let model = model.as_ref().ok_or_else(|| fail(McmStatus::NullPointer, "model is null"))?;
        let size = model.handle.grid_size();
        if grid != size {
            return Err(fail(McmStatus::Shape, format!("grid {grid} does not match the model grid {size}")));
        }
        let met: Metabolite = lift(c_str(metabolite, "metabolite")?.parse())?;
        let inputs = (field(lowres, grid, "lowres")?, field(t1, grid, "t1")?, field(flair, grid, "flair")?);
        let cond = ConditionTuple::new(n as usize, met, lambda);
        let (y, r) = lift(super_resolve(&model.handle, inputs.0, inputs.1, inputs.2, cond))?;
        write_out(out, &y)?;
        if !residual.is_null() {
            *residual = r;
        }
        Ok(())
    })
}

/// Message for the most recent failure on this thread, or null. Valid until the next call
/// on the same thread.
#[no_mangle]
pub extern "C" fn mcm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |s| s.as_ptr()))
}
