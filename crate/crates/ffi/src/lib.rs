//! C ABI over the `ikd` library: model checkpoints behind an opaque handle,
//! ECE and temperature fitting on caller-owned buffers.
//!
//! Every fallible function returns an [`IkdStatus`]; on failure a message is
//! kept per thread and can be read with [`ikd_last_error_message`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use ikd::calibration::{compute_ece, fit_temperature};
use ikd::data::Labels;
use ikd::model::{checkpoint_load, predict_logits, Model};

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IkdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Checkpoint = 4,
    Model = 5,
    Calibration = 6,
    Panic = 7,
}

/// A loaded model. Create with `ikd_model_load`, release with `ikd_model_free`.
pub struct IkdModel {
    inner: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn fail(status: IkdStatus, msg: impl Into<String>) -> IkdStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
    status
}

fn guard(f: impl FnOnce() -> IkdStatus) -> IkdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            fail(IkdStatus::Panic, msg)
        }
    }
}

/// Slice from a caller pointer; null is accepted only for `len == 0`.
unsafe fn slice<'a, T>(ptr: *const T, len: usize) -> Option<&'a [T]> {
    if ptr.is_null() {
        return (len == 0).then_some(&[]);
    }
    Some(std::slice::from_raw_parts(ptr, len))
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length without the NUL.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn ikd_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Loads a checkpoint written by the `ikd` tool.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ikd_model_load(path: *const c_char, out: *mut *mut IkdModel) -> IkdStatus {
    guard(|| {
        if path.is_null() || out.is_null() {
            return fail(IkdStatus::NullPointer, "path and out must not be null");
        }
        let Ok(p) = CStr::from_ptr(path).to_str() else {
            return fail(IkdStatus::InvalidArgument, "path is not UTF-8");
        };
        match checkpoint_load(Path::new(p)) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(IkdModel { inner }));
                IkdStatus::Ok
            }
            Err(ikd::model::CheckpointError::Io(e)) => fail(IkdStatus::Io, format!("{p}: {e}")),
            Err(e) => fail(IkdStatus::Checkpoint, format!("{p}: {e}")),
        }
    })
}

/// Releases a model; null is ignored.
///
/// # Safety
/// `model` must come from `ikd_model_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ikd_model_free(model: *mut IkdModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

unsafe fn with_model(model: *const IkdModel, out: *mut usize, f: impl FnOnce(&Model) -> usize) -> IkdStatus {
    guard(|| {
        if model.is_null() || out.is_null() {
            return fail(IkdStatus::NullPointer, "model and out must not be null");
        }
        *out = f(&(*model).inner);
        IkdStatus::Ok
    })
}

/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ikd_model_param_count(model: *const IkdModel, out: *mut usize) -> IkdStatus {
    with_model(model, out, Model::param_count)
}

/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ikd_model_num_classes(model: *const IkdModel, out: *mut usize) -> IkdStatus {
    with_model(model, out, |m| m.structure.num_classes)
}

/// Feature values per example (channel-first for convolutional models).
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ikd_model_input_len(model: *const IkdModel, out: *mut usize) -> IkdStatus {
    with_model(model, out, |m| m.structure.input_len())
}

/// Logits for `n` examples. `features` holds `n * input_len` values and
/// `logits` receives `n * num_classes`.
///
/// # Safety
/// Buffers must hold the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn ikd_model_forward(
    model: *const IkdModel,
    features: *const f32,
    n: usize,
    logits: *mut f32,
    logits_len: usize,
) -> IkdStatus {
    guard(|| {
        if model.is_null() || (logits.is_null() && logits_len > 0) {
            return fail(IkdStatus::NullPointer, "model and logits must not be null");
        }
        let m = &(*model).inner;
        let (d, c) = (m.structure.input_len(), m.structure.num_classes);
        if logits_len != n * c {
            return fail(IkdStatus::InvalidArgument, format!("logits holds {logits_len} values, need {}", n * c));
        }
        let Some(x) = slice(features, n * d) else { return fail(IkdStatus::NullPointer, "features is null") };
        match predict_logits(m, x, n) {
            Ok(t) => {
                std::slice::from_raw_parts_mut(logits, logits_len).copy_from_slice(t.data());
                IkdStatus::Ok
            }
            Err(e) => fail(IkdStatus::Model, e.to_string()),
        }
    })
}

/// Top-label ECE of `n` probability rows over `classes` classes with
/// `n_bins` equal-width bins.
///
/// # Safety
/// `probs` holds `n * classes` values, `labels` holds `n`; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn ikd_compute_ece(
    probs: *const f64,
    labels: *const usize,
    n: usize,
    classes: usize,
    n_bins: usize,
    out: *mut f64,
) -> IkdStatus {
    guard(|| {
        if out.is_null() {
            return fail(IkdStatus::NullPointer, "out must not be null");
        }
        let (Some(p), Some(l)) = (slice(probs, n * classes), slice(labels, n)) else {
            return fail(IkdStatus::NullPointer, "probs and labels must not be null");
        };
        if let Some(bad) = l.iter().find(|&&y| y >= classes) {
            return fail(IkdStatus::InvalidArgument, format!("label {bad} out of range for {classes} classes"));
        }
        match compute_ece(p, classes, l, n_bins) {
            Ok(e) => {
                *out = e;
                IkdStatus::Ok
            }
            Err(e) => fail(IkdStatus::Calibration, e.to_string()),
        }
    })
}

/// Temperature minimizing the mean negative log-likelihood of `labels`
/// under softmax(`logits` / T).
///
/// # Safety
/// `logits` holds `n * classes` values, `labels` holds `n`; `t_out` is writable.
#[no_mangle]
pub unsafe extern "C" fn ikd_fit_temperature(
    logits: *const f64,
    labels: *const usize,
    n: usize,
    classes: usize,
    t_out: *mut f64,
) -> IkdStatus {
    guard(|| {
        if t_out.is_null() {
            return fail(IkdStatus::NullPointer, "t_out must not be null");
        }
        let (Some(z), Some(l)) = (slice(logits, n * classes), slice(labels, n)) else {
            return fail(IkdStatus::NullPointer, "logits and labels must not be null");
        };
        if classes == 0 || l.iter().any(|&y| y >= classes) {
            return fail(IkdStatus::InvalidArgument, "labels must lie in [0, classes)");
        }
        let labels = Labels::Classes { labels: l.to_vec(), num_classes: classes };
        match fit_temperature(z, &labels) {
            Ok(fit) => {
                *t_out = fit.t;
                IkdStatus::Ok
            }
            Err(e) => fail(IkdStatus::Calibration, e.to_string()),
        }
    })
}
