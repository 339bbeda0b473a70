//! C ABI over `samda-core`: load a checkpoint, run point-prompted
//! inference, and query parameter counts.
//!
//! Every function returns a [`SamdaStatus`]. On failure the message is kept
//! per thread and can be copied out with [`samda_last_error`]. Models are
//! opaque handles released with [`samda_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use samda_core::adapter::{adapter_layer_param_count, registry_adapter_count, AdapterConfig};
use samda_core::engine::train::load_model;
use samda_core::model::{PointLabel, PointPrompt, PromptSet, SamModel};
use samda_core::tensor::Tensor;
use samda_core::Error;

/// Result codes shared by every entry point.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamdaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Format = 3,
    Integrity = 4,
    Io = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

/// Opaque model handle.
pub struct SamdaModel {
    model: SamModel<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> SamdaStatus {
    match e {
        Error::Format { .. } => SamdaStatus::Format,
        Error::Integrity(_) => SamdaStatus::Integrity,
        Error::Io { .. } => SamdaStatus::Io,
        _ => SamdaStatus::InvalidArgument,
    }
}

fn fail(status: SamdaStatus, msg: impl Into<String>) -> SamdaStatus {
    set_error(msg.into());
    status
}

/// Runs `f`, turning errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), SamdaStatus>) -> SamdaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            SamdaStatus::Ok
        }
        Ok(Err(s)) => s,
        Err(_) => fail(SamdaStatus::Panic, "panic inside samda"),
    }
}

fn core(e: Error) -> SamdaStatus {
    fail(status_of(&e), e.to_string())
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), SamdaStatus> {
    if p.is_null() {
        Err(fail(SamdaStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

/// Copies the last error message of this thread into `buf` as a
/// NUL-terminated string. `*len` receives the byte length without the NUL;
/// a null `buf` only queries the length.
///
/// # Safety
/// `len` must be valid for writes; `buf`, when non-null, for `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn samda_last_error(buf: *mut c_char, cap: usize, len: *mut usize) -> SamdaStatus {
    if len.is_null() {
        return SamdaStatus::NullPointer;
    }
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        *len = msg.len();
        if buf.is_null() {
            return SamdaStatus::Ok;
        }
        if cap < msg.len() + 1 {
            return SamdaStatus::BufferTooSmall;
        }
        std::ptr::copy_nonoverlapping(msg.as_ptr(), buf as *mut u8, msg.len());
        *buf.add(msg.len()) = 0;
        SamdaStatus::Ok
    })
}

/// Loads an `SDCK` checkpoint together with its `.json` sidecar.
///
/// # Safety
/// `path` must be a NUL-terminated UTF-8 string; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn samda_model_load(path: *const c_char, out: *mut *mut SamdaModel) -> SamdaStatus {
    guard(|| {
        non_null(path, "path")?;
        non_null(out, "out")?;
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| fail(SamdaStatus::InvalidArgument, "path is not UTF-8"))?;
        let (model, _) = load_model(Path::new(path)).map_err(core)?;
        *out = Box::into_raw(Box::new(SamdaModel { model }));
        Ok(())
    })
}

/// Releases a handle from [`samda_model_load`]. Null is ignored.
///
/// # Safety
/// `model` must come from [`samda_model_load`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn samda_model_free(model: *mut SamdaModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Side length of the square input image.
///
/// # Safety
/// `model` must be a live handle; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn samda_model_image_size(model: *const SamdaModel, out: *mut usize) -> SamdaStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(out, "out")?;
        *out = (*model).model.cfg.image_size;
        Ok(())
    })
}

/// Number of parameters, all of them or only the trainable ones.
///
/// # Safety
/// `model` must be a live handle; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn samda_model_param_count(
    model: *const SamdaModel,
    trainable_only: bool,
    out: *mut usize,
) -> SamdaStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(out, "out")?;
        *out = (*model).model.store.param_count(trainable_only);
        Ok(())
    })
}

/// Predicts mask logits for one image.
///
/// `image` holds `size * size` intensities in row-major order. Points are
/// given as `n_points` pairs `(x, y)` in `points` with one label each in
/// `labels` (1 positive, 0 negative). `logits` receives `size * size`
/// values; `iou` the predicted IoU.
///
/// # Safety
/// All pointers must be valid for the lengths described above.
#[no_mangle]
pub unsafe extern "C" fn samda_model_predict(
    model: *const SamdaModel,
    image: *const f32,
    image_len: usize,
    points: *const f32,
    labels: *const i32,
    n_points: usize,
    logits: *mut f32,
    logits_len: usize,
    iou: *mut f32,
) -> SamdaStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(image, "image")?;
        non_null(logits, "logits")?;
        non_null(iou, "iou")?;
        if n_points > 0 {
            non_null(points, "points")?;
            non_null(labels, "labels")?;
        }
        let m = &(*model).model;
        let n = m.cfg.image_size;
        if image_len != n * n {
            return Err(fail(
                SamdaStatus::InvalidArgument,
                format!("image has {image_len} values, expected {}", n * n),
            ));
        }
        if logits_len < n * n {
            return Err(fail(
                SamdaStatus::BufferTooSmall,
                format!("logits buffer holds {logits_len} values, need {}", n * n),
            ));
        }
        let pts = if n_points == 0 { &[][..] } else { std::slice::from_raw_parts(points, 2 * n_points) };
        let lbl = if n_points == 0 { &[][..] } else { std::slice::from_raw_parts(labels, n_points) };
        let mut prompts = PromptSet { points: Vec::with_capacity(n_points) };
        for (xy, &l) in pts.chunks_exact(2).zip(lbl) {
            let label = match l {
                1 => PointLabel::Positive,
                0 => PointLabel::Negative,
                _ => return Err(fail(SamdaStatus::InvalidArgument, format!("point label {l} is not 0 or 1"))),
            };
            prompts.points.push(PointPrompt {
                x: xy[0] as f64,
                y: xy[1] as f64,
                label,
            });
        }
        let img = Tensor::new(vec![n, n], std::slice::from_raw_parts(image, image_len).to_vec()).map_err(core)?;
        let p = m.predict(&img, &prompts).map_err(core)?;
        std::ptr::copy_nonoverlapping(p.logits.data().as_ptr(), logits, n * n);
        *iou = p.iou_pred as f32;
        Ok(())
    })
}

/// Adapter parameter count for `layers` adapted layers of width `d_t`,
/// from the closed form. `registry` (optional) receives the count obtained
/// by registering the tensors.
///
/// # Safety
/// `out` must be valid for writes; `registry` null or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn samda_adapter_param_count(
    n_prompts: usize,
    d_a: usize,
    d_k: usize,
    d_v: usize,
    d_t: usize,
    layers: usize,
    out: *mut usize,
    registry: *mut usize,
) -> SamdaStatus {
    guard(|| {
        non_null(out, "out")?;
        let cfg = AdapterConfig {
            n_prompts,
            d_a,
            d_k,
            d_v,
            ..AdapterConfig::default()
        };
        cfg.validate().map_err(core)?;
        if d_t == 0 {
            return Err(fail(SamdaStatus::InvalidArgument, "d_t must be positive"));
        }
        *out = adapter_layer_param_count(&cfg, d_t) * layers;
        if !registry.is_null() {
            *registry = registry_adapter_count(&cfg, d_t, layers).map_err(core)?;
        }
        Ok(())
    })
}
