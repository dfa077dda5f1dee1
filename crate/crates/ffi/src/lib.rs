//! C ABI over the vmcnet backbone and the score-fusion head.
//!
//! Every entry point returns a [`VmcStatus`]. On failure a message is kept
//! per thread and can be read with [`vmc_last_error_message`]. Handles are
//! opaque and must be released with the matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use vmcnet::backbone::{ForwardOptions, Mode, VmcNet};
use vmcnet::config::RunConfig;
use vmcnet::container::Container;
use vmcnet::{roi, Error, Tensor};

/// Result code of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VmcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Shape = 4,
    Io = 5,
    Format = 6,
    Numeric = 7,
    Panic = 8,
}

/// Values accepted by the `mode` argument of [`vmc_model_forward`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VmcMode {
    /// Use the mode the model was configured with.
    Configured = -1,
    Full = 0,
    FmStar = 1,
    CnnOnly = 2,
    Baseline = 3,
}

/// Opaque model handle.
pub struct VmcModel {
    cfg: RunConfig,
    net: VmcNet,
}

/// Opaque forward-pass result.
pub struct VmcPyramid {
    levels: [Tensor; 4],
    dense_final: Option<Tensor>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

struct Failure(VmcStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Shape { .. } | Error::ParameterShape { .. } | Error::NonScalarLoss(_) => VmcStatus::Shape,
            Error::InvalidArgument { .. } | Error::Disconnected(_) => VmcStatus::InvalidArgument,
            Error::NonFinite { .. } => VmcStatus::Numeric,
            Error::Io { .. } => VmcStatus::Io,
            Error::Format { .. } => VmcStatus::Format,
            _ => VmcStatus::Config,
        };
        Failure(status, e.to_string())
    }
}

fn fail(status: VmcStatus, msg: impl Into<String>) -> Failure {
    Failure(status, msg.into())
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

/// Runs `f`, converting errors and panics into a status.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> VmcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            VmcStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(&format!("internal panic: {msg}"));
            VmcStatus::Panic
        }
    }
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(fail(VmcStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(VmcStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if p.is_null() {
        return Err(fail(VmcStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if p.is_null() {
        return Err(fail(VmcStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

fn checked_len(dims: &[usize], what: &str) -> Result<usize, Failure> {
    dims.iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .filter(|&n| n > 0)
        .ok_or_else(|| fail(VmcStatus::InvalidArgument, format!("{what}: bad dimensions {dims:?}")))
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn vmc_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Builds a model from a JSON run configuration. `config_json` may be null
/// for the defaults; `seed` always overrides the configured seed.
///
/// # Safety
/// `config_json` is null or a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn vmc_model_new(config_json: *const c_char, seed: u64, out: *mut *mut VmcModel) -> VmcStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(VmcStatus::NullPointer, "out is null"));
        }
        *out = ptr::null_mut();
        let mut cfg = if config_json.is_null() {
            RunConfig::with_seed(seed)
        } else {
            let text = c_str(config_json, "config_json")?;
            let mut v: serde_json::Value =
                serde_json::from_str(text).map_err(|e| fail(VmcStatus::Config, e.to_string()))?;
            if let Some(obj) = v.as_object_mut() {
                obj.entry("seed").or_insert(seed.into());
            }
            RunConfig::from_json(&v.to_string())?
        };
        cfg.seed = seed;
        cfg.validate()?;
        let net = VmcNet::new(cfg.model(), seed)?;
        *out = Box::into_raw(Box::new(VmcModel { cfg, net }));
        Ok(())
    })
}

/// # Safety
/// `model` is null or a handle from [`vmc_model_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn vmc_model_free(model: *mut VmcModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Replaces the model weights with a `VMCW` container.
///
/// # Safety
/// `model` is a live handle; `path` is a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn vmc_model_load_weights(model: *mut VmcModel, path: *const c_char) -> VmcStatus {
    guard(|| {
        let m = model
            .as_mut()
            .ok_or_else(|| fail(VmcStatus::NullPointer, "model is null"))?;
        let path = Path::new(c_str(path, "path")?);
        let c = Container::load(path)?;
        let mut params = m.net.params().clone();
        let mut bn = m.net.bn_states().clone();
        c.apply_to(&mut params, &mut bn, path)?;
        *m.net.params_mut() = params;
        *m.net.bn_states_mut() = bn;
        Ok(())
    })
}

/// Element counts of the frozen and trainable parameters.
///
/// # Safety
/// `model` is a live handle; `frozen` and `trainable` are writable.
#[no_mangle]
pub unsafe extern "C" fn vmc_model_parameter_counts(
    model: *const VmcModel,
    frozen: *mut u64,
    trainable: *mut u64,
) -> VmcStatus {
    guard(|| {
        let m = model
            .as_ref()
            .ok_or_else(|| fail(VmcStatus::NullPointer, "model is null"))?;
        if frozen.is_null() || trainable.is_null() {
            return Err(fail(VmcStatus::NullPointer, "output pointer is null"));
        }
        let (f, t) = m.net.params().counts();
        *frozen = f as u64;
        *trainable = t as u64;
        Ok(())
    })
}

/// Forward pass on `image` (`n×h×w×3`, row-major, values as `double`).
/// `mode` is a [`VmcMode`] value.
///
/// # Safety
/// `model` is a live handle; `image` holds `n·h·w·3` doubles; `out` is
/// writable.
#[no_mangle]
pub unsafe extern "C" fn vmc_model_forward(
    model: *const VmcModel,
    image: *const f64,
    n: usize,
    h: usize,
    w: usize,
    mode: i32,
    full_depth: bool,
    out: *mut *mut VmcPyramid,
) -> VmcStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(VmcStatus::NullPointer, "out is null"));
        }
        *out = ptr::null_mut();
        let m = model
            .as_ref()
            .ok_or_else(|| fail(VmcStatus::NullPointer, "model is null"))?;
        let mode = match mode {
            -1 => m.cfg.mode,
            0 => Mode::Full,
            1 => Mode::FmStar,
            2 => Mode::CnnOnly,
            3 => Mode::Baseline,
            other => return Err(fail(VmcStatus::InvalidArgument, format!("unknown mode {other}"))),
        };
        let len = checked_len(&[n, h, w, 3], "image")?;
        let data = slice(image, len, "image")?.to_vec();
        let img = Tensor::new(vec![n, h, w, 3], data)?;
        let p = m.net.forward(&img, ForwardOptions { mode, full_depth })?;
        *out = Box::into_raw(Box::new(VmcPyramid {
            levels: p.levels,
            dense_final: p.dense_final,
        }));
        Ok(())
    })
}

/// # Safety
/// `pyramid` is null or a handle from [`vmc_model_forward`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn vmc_pyramid_free(pyramid: *mut VmcPyramid) {
    if !pyramid.is_null() {
        drop(Box::from_raw(pyramid));
    }
}

fn level<'a>(p: &'a VmcPyramid, level: usize) -> Result<&'a Tensor, Failure> {
    if level == 4 {
        return p
            .dense_final
            .as_ref()
            .ok_or_else(|| fail(VmcStatus::InvalidArgument, "dense feature not computed (full_depth was false)"));
    }
    p.levels
        .get(level)
        .ok_or_else(|| fail(VmcStatus::InvalidArgument, format!("level {level} outside 0..=4")))
}

/// Writes the extents of `level` (0..3 for the pyramid at 1/4..1/32, 4 for
/// the dense ViT feature) into `shape[0..4]`, padding with 1, and its rank
/// into `rank`.
///
/// # Safety
/// `pyramid` is a live handle; `shape` has room for 4 values; `rank` is
/// writable.
#[no_mangle]
pub unsafe extern "C" fn vmc_pyramid_level_shape(
    pyramid: *const VmcPyramid,
    level_index: usize,
    shape: *mut usize,
    rank: *mut usize,
) -> VmcStatus {
    guard(|| {
        let p = pyramid
            .as_ref()
            .ok_or_else(|| fail(VmcStatus::NullPointer, "pyramid is null"))?;
        let t = level(p, level_index)?;
        let dst = slice_mut(shape, 4, "shape")?;
        if rank.is_null() {
            return Err(fail(VmcStatus::NullPointer, "rank is null"));
        }
        dst.fill(1);
        dst[..t.rank()].copy_from_slice(t.shape());
        *rank = t.rank();
        Ok(())
    })
}

/// Copies `level` into `dst`, which must hold exactly its element count.
///
/// # Safety
/// `pyramid` is a live handle; `dst` has room for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn vmc_pyramid_level_data(
    pyramid: *const VmcPyramid,
    level_index: usize,
    dst: *mut f64,
    len: usize,
) -> VmcStatus {
    guard(|| {
        let p = pyramid
            .as_ref()
            .ok_or_else(|| fail(VmcStatus::NullPointer, "pyramid is null"))?;
        let t = level(p, level_index)?;
        if len != t.numel() {
            return Err(fail(
                VmcStatus::Shape,
                format!("buffer holds {len} values, level has {}", t.numel()),
            ));
        }
        slice_mut(dst, len, "dst")?.copy_from_slice(t.data());
        Ok(())
    })
}

/// `out = s_p^γ · s_vlm^(1−γ)` over `len` scores.
///
/// # Safety
/// `s_p`, `s_vlm` and `out` each hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn vmc_fuse_scores(
    s_p: *const f64,
    s_vlm: *const f64,
    len: usize,
    gamma: f64,
    out: *mut f64,
) -> VmcStatus {
    guard(|| {
        let n = checked_len(&[len], "len")?;
        let a = Tensor::new(vec![n], slice(s_p, n, "s_p")?.to_vec())?;
        let b = Tensor::new(vec![n], slice(s_vlm, n, "s_vlm")?.to_vec())?;
        let fused = roi::fuse_scores(&a, &b, gamma)?;
        slice_mut(out, n, "out")?.copy_from_slice(fused.data());
        Ok(())
    })
}

/// `out[r, k] = softmax_k(β · cos(region[r], text[k]))` for `n` regions,
/// `k` unit-length text rows and feature width `d`.
///
/// # Safety
/// `region` holds `n·d`, `text` holds `k·d` and `out` holds `n·k` doubles.
#[no_mangle]
pub unsafe extern "C" fn vmc_vlm_scores(
    region: *const f64,
    n: usize,
    text: *const f64,
    k: usize,
    d: usize,
    beta: f64,
    out: *mut f64,
) -> VmcStatus {
    guard(|| {
        let rl = checked_len(&[n, d], "region")?;
        let tl = checked_len(&[k, d], "text")?;
        let ol = checked_len(&[n, k], "out")?;
        let r = Tensor::new(vec![n, d], slice(region, rl, "region")?.to_vec())?;
        let t = Tensor::new(vec![k, d], slice(text, tl, "text")?.to_vec())?;
        let s = roi::vlm_score(&r, &t, beta)?;
        slice_mut(out, ol, "out")?.copy_from_slice(s.data());
        Ok(())
    })
}
