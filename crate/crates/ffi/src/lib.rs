//! C ABI for `ssattn`.
//!
//! Every function returns an [`SsattnStatus`]; on failure the message is
//! available from [`ssattn_last_error`] on the same thread. Objects cross the
//! boundary as opaque handles that the caller releases with the matching
//! `*_free` function. Tensors are `float` (f32), row-major.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use ssattn::io::{load_checkpoint, load_tensor, save_checkpoint, save_tensor};
use ssattn::model::{build_model, count_flops, count_params, model_forward, ModelConfig, ModelParams};
use ssattn::s3a::{s3a_forward, S3AConfig, S3AParams, StridePolicy};
use ssattn::{Error, FormatError, Rng, Tensor};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SsattnStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Config = 4,
    Format = 5,
    Numeric = 6,
    State = 7,
    Io = 8,
    BufferTooSmall = 9,
    Panic = 10,
}

/// Attention layer settings. A stride of 0 on either axis selects the
/// automatic stride.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct SsattnS3aConfig {
    pub channels: usize,
    pub heads: usize,
    pub window_h: usize,
    pub window_w: usize,
    pub anchors_h: usize,
    pub anchors_w: usize,
    pub stride_h: usize,
    pub stride_w: usize,
    pub lce: bool,
}

/// Opaque f32 tensor.
pub struct SsattnTensor {
    inner: Tensor<f32>,
}

/// Opaque SSViT model with f32 weights.
pub struct SsattnModel {
    inner: ModelParams<f32>,
}

/// Opaque attention layer: configuration plus f32 weights.
pub struct SsattnS3a {
    cfg: S3AConfig,
    params: S3AParams<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let clean = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = clean);
}

fn status_of(e: &Error) -> SsattnStatus {
    match e {
        Error::Shape(_) | Error::Size(_) | Error::EmptyDomain(_) => SsattnStatus::Shape,
        Error::Config(_) => SsattnStatus::Config,
        Error::Numeric(_) => SsattnStatus::Numeric,
        Error::State(_) => SsattnStatus::State,
        Error::Format(FormatError::Io { .. }) => SsattnStatus::Io,
        Error::Format(_) => SsattnStatus::Format,
    }
}

struct Fail(SsattnStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(SsattnStatus::NullPointer, format!("`{what}` is null"))
}

/// Runs `f`, converting errors and panics into a status plus message.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> SsattnStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            SsattnStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
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
            SsattnStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(SsattnStatus::InvalidArgument, format!("`{what}` is not UTF-8")))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    str_arg(p, what).map(PathBuf::from)
}

unsafe fn out_arg<'a, X>(p: *mut X, what: &str) -> Result<&'a mut X, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn handle<'a, X>(p: *const X, what: &str) -> Result<&'a X, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

fn boxed<X>(x: X) -> *mut X {
    Box::into_raw(Box::new(x))
}

/// Message for the last failed call on this thread; empty after a success.
/// Valid until the next `ssattn_*` call on the same thread.
#[no_mangle]
pub extern "C" fn ssattn_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Static name of a status code.
#[no_mangle]
pub extern "C" fn ssattn_status_name(status: SsattnStatus) -> *const c_char {
    let s: &'static CStr = match status {
        SsattnStatus::Ok => c"ok",
        SsattnStatus::NullPointer => c"null pointer",
        SsattnStatus::InvalidArgument => c"invalid argument",
        SsattnStatus::Shape => c"shape error",
        SsattnStatus::Config => c"config error",
        SsattnStatus::Format => c"format error",
        SsattnStatus::Numeric => c"numeric error",
        SsattnStatus::State => c"state error",
        SsattnStatus::Io => c"io error",
        SsattnStatus::BufferTooSmall => c"buffer too small",
        SsattnStatus::Panic => c"panic",
    };
    s.as_ptr()
}

/// Creates a tensor of `shape[0..rank]`, copying `data` (`NULL` for zeros).
///
/// # Safety
/// `shape` must point to `rank` values; `data`, when non-null, to as many
/// floats as the shape holds; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ssattn_tensor_new(
    shape: *const usize,
    rank: usize,
    data: *const f32,
    out: *mut *mut SsattnTensor,
) -> SsattnStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        if shape.is_null() && rank > 0 {
            return Err(null("shape"));
        }
        let dims = if rank == 0 { &[][..] } else { std::slice::from_raw_parts(shape, rank) };
        let n = ssattn::tensor::checked_numel(dims)?;
        let inner = if data.is_null() {
            Tensor::new(dims, 0.0)?
        } else {
            Tensor::from_vec(dims, std::slice::from_raw_parts(data, n).to_vec())?
        };
        *out = boxed(SsattnTensor { inner });
        Ok(())
    })
}

/// # Safety
/// `t` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ssattn_tensor_free(t: *mut SsattnTensor) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}

/// Number of axes; 0 for a null handle.
///
/// # Safety
/// `t` must be null or a live tensor handle.
#[no_mangle]
pub unsafe extern "C" fn ssattn_tensor_rank(t: *const SsattnTensor) -> usize {
    t.as_ref().map_or(0, |t| t.inner.rank())
}

/// Number of elements; 0 for a null handle.
///
/// # Safety
/// `t` must be null or a live tensor handle.
#[no_mangle]
pub unsafe extern "C" fn ssattn_tensor_numel(t: *const SsattnTensor) -> usize {
    t.as_ref().map_or(0, |t| t.inner.len())
}

/// Copies the shape into `dims[0..cap]`.
///
/// # Safety
/// `t` must be a live handle and `dims` writable for `cap` values.
#[no_mangle]
pub unsafe extern "C" fn ssattn_tensor_shape(t: *const SsattnTensor, dims: *mut usize, cap: usize) -> SsattnStatus {
    guard(|| {
        let t = handle(t, "tensor")?;
        let shape = t.inner.shape();
        if cap < shape.len() {
            return Err(Fail(
                SsattnStatus::BufferTooSmall,
                format!("shape has {} axes, buffer holds {cap}", shape.len()),
            ));
        }
        if !shape.is_empty() {
            if dims.is_null() {
                return Err(null("dims"));
            }
            std::slice::from_raw_parts_mut(dims, shape.len()).copy_from_slice(shape);
        }
        Ok(())
    })
}

/// Copies the elements into `buf[0..len]`.
///
/// # Safety
/// `t` must be a live handle and `buf` writable for `len` floats.
#[no_mangle]
pub unsafe extern "C" fn ssattn_tensor_read(t: *const SsattnTensor, buf: *mut f32, len: usize) -> SsattnStatus {
    guard(|| {
        let t = handle(t, "tensor")?;
        let data = t.inner.data();
        if len < data.len() {
            return Err(Fail(
                SsattnStatus::BufferTooSmall,
                format!("tensor has {} elements, buffer holds {len}", data.len()),
            ));
        }
        if !data.is_empty() {
            if buf.is_null() {
                return Err(null("buf"));
            }
            std::slice::from_raw_parts_mut(buf, data.len()).copy_from_slice(data);
        }
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ssattn_tensor_load(path: *const c_char, out: *mut *mut SsattnTensor) -> SsattnStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let inner = load_tensor::<f32>(path_arg(path, "path")?)?;
        *out = boxed(SsattnTensor { inner });
        Ok(())
    })
}

/// # Safety
/// `t` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ssattn_tensor_save(t: *const SsattnTensor, path: *const c_char) -> SsattnStatus {
    guard(|| {
        let t = handle(t, "tensor")?;
        save_tensor(path_arg(path, "path")?, &t.inner)?;
        Ok(())
    })
}

/// Builds a randomly initialized preset (`"ssvit-t"`, `"ssvit-s"`, ...).
///
/// # Safety
/// `preset` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ssattn_model_new(preset: *const c_char, seed: u64, out: *mut *mut SsattnModel) -> SsattnStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let cfg = ModelConfig::preset(str_arg(preset, "preset")?)?;
        let inner = build_model::<f32>(&cfg, &mut Rng::seed(seed))?;
        *out = boxed(SsattnModel { inner });
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ssattn_model_load(path: *const c_char, out: *mut *mut SsattnModel) -> SsattnStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let inner = load_checkpoint::<f32>(path_arg(path, "path")?)?;
        *out = boxed(SsattnModel { inner });
        Ok(())
    })
}

/// # Safety
/// `m` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ssattn_model_save(m: *const SsattnModel, path: *const c_char) -> SsattnStatus {
    guard(|| {
        let m = handle(m, "model")?;
        save_checkpoint(path_arg(path, "path")?, &m.inner)?;
        Ok(())
    })
}

/// # Safety
/// `m` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ssattn_model_free(m: *mut SsattnModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Scalar parameter count of a live model; 0 for a null handle.
///
/// # Safety
/// `m` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ssattn_model_num_params(m: *const SsattnModel) -> u64 {
    m.as_ref().map_or(0, |m| m.inner.num_scalars())
}

/// Logits for a `[3, H, W]` image. Handles may be shared across threads.
///
/// # Safety
/// `m` and `image` must be live handles and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ssattn_model_forward(
    m: *const SsattnModel,
    image: *const SsattnTensor,
    out: *mut *mut SsattnTensor,
) -> SsattnStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let m = handle(m, "model")?;
        let image = handle(image, "image")?;
        let inner = model_forward(&m.inner, &image.inner)?;
        *out = boxed(SsattnTensor { inner });
        Ok(())
    })
}

/// Analytic parameter count of a preset.
///
/// # Safety
/// `preset` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ssattn_count_params(preset: *const c_char, out: *mut u64) -> SsattnStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = count_params(&ModelConfig::preset(str_arg(preset, "preset")?)?)?.total;
        Ok(())
    })
}

/// Multiply-accumulates of one forward pass of a preset at `height × width`.
///
/// # Safety
/// `preset` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ssattn_count_flops(
    preset: *const c_char,
    height: usize,
    width: usize,
    out: *mut u64,
) -> SsattnStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = count_flops(&ModelConfig::preset(str_arg(preset, "preset")?)?, height, width)?.total;
        Ok(())
    })
}

fn to_config(c: &SsattnS3aConfig) -> Result<S3AConfig, Fail> {
    let stride = match (c.stride_h, c.stride_w) {
        (0, _) | (_, 0) => StridePolicy::Auto,
        (a, b) => StridePolicy::Fixed(a, b),
    };
    let cfg = S3AConfig {
        channels: c.channels,
        heads: c.heads,
        window: (c.window_h, c.window_w),
        anchors: (c.anchors_h, c.anchors_w),
        stride,
        lce: c.lce,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Attention layer with `N(0, weight_std²)` weights and zero biases.
///
/// # Safety
/// `config` must be readable and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ssattn_s3a_new(
    config: *const SsattnS3aConfig,
    seed: u64,
    weight_std: f64,
    out: *mut *mut SsattnS3a,
) -> SsattnStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let cfg = to_config(handle(config, "config")?)?;
        if !(weight_std >= 0.0 && weight_std.is_finite()) {
            return Err(Fail(SsattnStatus::InvalidArgument, format!("weight_std {weight_std} is not >= 0")));
        }
        let params = S3AParams::random(&cfg, &mut Rng::seed(seed), weight_std, 0.0);
        *out = boxed(SsattnS3a { cfg, params });
        Ok(())
    })
}

/// # Safety
/// `layer` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ssattn_s3a_free(layer: *mut SsattnS3a) {
    if !layer.is_null() {
        drop(Box::from_raw(layer));
    }
}

/// Applies the layer to a `[C, H, W]` tensor.
///
/// # Safety
/// `layer` and `x` must be live handles and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ssattn_s3a_forward(
    layer: *const SsattnS3a,
    x: *const SsattnTensor,
    out: *mut *mut SsattnTensor,
) -> SsattnStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let layer = handle(layer, "layer")?;
        let x = handle(x, "x")?;
        let (inner, _) = s3a_forward(&x.inner, &layer.cfg, &layer.params)?;
        *out = boxed(SsattnTensor { inner });
        Ok(())
    })
}
