//! C ABI for `finegrain`.
//!
//! Networks are opaque `FgNetwork` handles created by [`fg_network_build`],
//! [`fg_network_fuse`] or [`fg_checkpoint_load`] and released with
//! [`fg_network_free`]. Every fallible call returns an [`FgStatus`]; on failure
//! [`fg_last_error_message`] describes the most recent error on the calling
//! thread. Handles are not synchronized: share one across threads only for
//! read-only calls (`flops`, `params`, `forward`, `fuse`, `save`).

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use finegrain::checkpoint::Checkpoint;
use finegrain::config::RunConfig;
use finegrain::finet::{build_finet, count_flops};
use finegrain::fusion::fuse_model;
use finegrain::{Error, Mode, Network, Shape, Tensor};

/// Result of every fallible call. Error kinds share their numbering with the
/// command line's exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FgStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Config = 3,
    Shape = 4,
    Numeric = 5,
    State = 6,
    DegenerateStats = 7,
    Unfusable = 8,
    Format = 9,
    Version = 10,
    Missing = 11,
    Io = 12,
    BufferTooSmall = 13,
    Panic = 14,
}

/// Opaque network handle.
pub struct FgNetwork {
    net: Network<f32>,
    config: String,
    fused: bool,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> FgStatus {
    match e {
        Error::Config(_) => FgStatus::Config,
        Error::Shape(_) => FgStatus::Shape,
        Error::Numeric(_) => FgStatus::Numeric,
        Error::State(_) => FgStatus::State,
        Error::DegenerateStats(_) => FgStatus::DegenerateStats,
        Error::Unfusable(_) => FgStatus::Unfusable,
        Error::Format { .. } => FgStatus::Format,
        Error::Version { .. } => FgStatus::Version,
        Error::Missing(_) => FgStatus::Missing,
        Error::Io { .. } => FgStatus::Io,
    }
}

struct Fail(FgStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(FgStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, converting errors and panics into a status and the thread's
/// last-error message.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> FgStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            FgStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            FgStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Fail(FgStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn handle<'a>(p: *const FgNetwork) -> Result<&'a FgNetwork, Fail> {
    p.as_ref().ok_or_else(|| null("network"))
}

unsafe fn input_tensor(h: &FgNetwork, input: *const f32, batch: usize) -> Result<Tensor<f32>, Fail> {
    let (c, hh, w) = h.net.meta.input;
    let shape = Shape::new(batch, c, hh, w);
    Ok(Tensor::from_vec(shape, std::slice::from_raw_parts(input, shape.numel()).to_vec())?)
}

unsafe fn emit(out: *mut *mut FgNetwork, net: FgNetwork) {
    *out = Box::into_raw(Box::new(net));
}

/// Builds a freshly initialized network from `key=value` configuration text
/// (NULL or empty for the defaults). The handle is in inference mode.
///
/// # Safety
/// `config` must be NULL or a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fg_network_build(config: *const c_char, out: *mut *mut FgNetwork) -> FgStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let text = if config.is_null() { "" } else { str_arg(config, "config")? };
        let cfg = RunConfig::parse_text(text)?;
        cfg.validate()?;
        let mut net = build_finet::<f32>(&cfg.finet())?;
        net.set_mode(Mode::Infer);
        emit(out, FgNetwork { net, config: cfg.to_string(), fused: false });
        Ok(())
    })
}

/// Releases a handle. NULL is ignored.
///
/// # Safety
/// `net` must be NULL or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fg_network_free(net: *mut FgNetwork) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}

/// Multiply-accumulate count of one inference pass on the fused graph.
///
/// # Safety
/// `net` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fg_network_flops(net: *const FgNetwork, out: *mut u64) -> FgStatus {
    guard(|| {
        let h = handle(net)?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = count_flops(&h.net)?;
        Ok(())
    })
}

/// Number of learnable scalars.
///
/// # Safety
/// `net` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fg_network_params(net: *const FgNetwork, out: *mut u64) -> FgStatus {
    guard(|| {
        let h = handle(net)?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = h.net.num_params() as u64;
        Ok(())
    })
}

/// Expected input image dimensions and the number of output classes.
///
/// # Safety
/// `net` must be a live handle; the four output pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn fg_network_dims(
    net: *const FgNetwork,
    channels: *mut usize,
    height: *mut usize,
    width: *mut usize,
    classes: *mut usize,
) -> FgStatus {
    guard(|| {
        let h = handle(net)?;
        if channels.is_null() || height.is_null() || width.is_null() || classes.is_null() {
            return Err(null("output pointer"));
        }
        let (c, hh, w) = h.net.meta.input;
        *channels = c;
        *height = hh;
        *width = w;
        *classes = h.net.meta.classes;
        Ok(())
    })
}

/// Whether the handle holds a fused network (1) or not (0).
///
/// # Safety
/// `net` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fg_network_is_fused(net: *const FgNetwork, out: *mut u8) -> FgStatus {
    guard(|| {
        let h = handle(net)?;
        *out.as_mut().ok_or_else(|| null("out"))? = u8::from(h.fused);
        Ok(())
    })
}

/// Inference on `batch` NCHW images. `input` holds `batch·C·H·W` floats;
/// `output` receives `batch·classes` logits and its length is `output_len`.
///
/// # Safety
/// `input` must be readable for `batch·C·H·W` floats and `output` writable for
/// `output_len` floats.
#[no_mangle]
pub unsafe extern "C" fn fg_network_forward(
    net: *const FgNetwork,
    input: *const f32,
    batch: usize,
    output: *mut f32,
    output_len: usize,
) -> FgStatus {
    guard(|| {
        let h = handle(net)?;
        if input.is_null() || output.is_null() {
            return Err(null("buffer"));
        }
        let need = batch * h.net.meta.classes;
        if output_len < need {
            return Err(Fail(FgStatus::BufferTooSmall, format!("output holds {output_len} floats, {need} needed")));
        }
        let x = input_tensor(h, input, batch)?;
        let y = h.net.infer(&x)?;
        std::slice::from_raw_parts_mut(output, need).copy_from_slice(y.data());
        Ok(())
    })
}

/// Sets every running statistic from the batch statistics of `batch` NCHW
/// images (one training-mode pass; weights are unchanged).
///
/// # Safety
/// `net` must be a live handle not used concurrently, and `input` readable for
/// `batch·C·H·W` floats.
#[no_mangle]
pub unsafe extern "C" fn fg_network_calibrate(net: *mut FgNetwork, input: *const f32, batch: usize) -> FgStatus {
    guard(|| {
        let h = net.as_mut().ok_or_else(|| null("network"))?;
        if input.is_null() {
            return Err(null("input"));
        }
        let x = input_tensor(h, input, batch)?;
        h.net.calibrate_statistics(&x)?;
        h.net.set_mode(Mode::Infer);
        Ok(())
    })
}

/// Creates a new handle with every normalization folded into its convolution.
/// The input handle is unchanged.
///
/// # Safety
/// `net` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fg_network_fuse(net: *const FgNetwork, out: *mut *mut FgNetwork) -> FgStatus {
    guard(|| {
        let h = handle(net)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let fused = fuse_model(&h.net)?;
        emit(out, FgNetwork { net: fused, config: h.config.clone(), fused: true });
        Ok(())
    })
}

/// Loads a checkpoint file into a new handle in inference mode.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fg_checkpoint_load(path: *const c_char, out: *mut *mut FgNetwork) -> FgStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let ck = Checkpoint::load(Path::new(path))?;
        let mut net = ck.net;
        net.set_mode(Mode::Infer);
        emit(out, FgNetwork { net, config: ck.config, fused: ck.fused });
        Ok(())
    })
}

/// Writes the handle to a checkpoint file.
///
/// # Safety
/// `net` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn fg_checkpoint_save(net: *const FgNetwork, path: *const c_char) -> FgStatus {
    guard(|| {
        let h = handle(net)?;
        let path = str_arg(path, "path")?;
        Checkpoint::new(h.net.clone(), h.config.clone(), h.fused).save(Path::new(path))?;
        Ok(())
    })
}

/// Message for the most recent failure on this thread, or "" after a success.
/// The pointer stays valid until the next call into this library on the same
/// thread.
#[no_mangle]
pub extern "C" fn fg_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Static name of a status code.
#[no_mangle]
pub extern "C" fn fg_status_name(status: FgStatus) -> *const c_char {
    let s: &'static CStr = match status {
        FgStatus::Ok => c"ok",
        FgStatus::NullPointer => c"null_pointer",
        FgStatus::InvalidUtf8 => c"invalid_utf8",
        FgStatus::Config => c"config",
        FgStatus::Shape => c"shape",
        FgStatus::Numeric => c"numeric",
        FgStatus::State => c"state",
        FgStatus::DegenerateStats => c"degenerate",
        FgStatus::Unfusable => c"unfusable",
        FgStatus::Format => c"format",
        FgStatus::Version => c"version",
        FgStatus::Missing => c"missing",
        FgStatus::Io => c"io",
        FgStatus::BufferTooSmall => c"buffer_too_small",
        FgStatus::Panic => c"panic",
    };
    s.as_ptr()
}
