//! C ABI over the streaming engine.
//!
//! Models and engines are opaque heap handles. Every fallible call returns a
//! status code; on failure the message is kept per thread and can be read with
//! [`cm_last_error_message`]. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::sync::Arc;

use causalmotion::checkpoint::load_checkpoint;
use causalmotion::denoiser::{Denoiser, DenoiserModel};
use causalmotion::diffusion::DiffusionSchedule;
use causalmotion::motion::{ControlSignal, HeadPose};
use causalmotion::online::{EngineConfig, FrameSource, OnlineStream};
use causalmotion::Error;

pub const CM_OK: i32 = 0;
pub const CM_ERR_NULL: i32 = 1;
pub const CM_ERR_INVALID_ARGUMENT: i32 = 2;
pub const CM_ERR_IO: i32 = 3;
pub const CM_ERR_CORRUPT_MODEL: i32 = 4;
pub const CM_ERR_CHECKSUM: i32 = 5;
pub const CM_ERR_UNKNOWN_VERSION: i32 = 6;
pub const CM_ERR_SHAPE_MISMATCH: i32 = 7;
pub const CM_ERR_INVALID_CONFIG: i32 = 8;
pub const CM_ERR_ENGINE_STATE: i32 = 9;
pub const CM_ERR_INTERNAL: i32 = 10;
pub const CM_ERR_PANIC: i32 = 11;

/// A loaded checkpoint. Shared read-only by every engine created from it.
pub struct CmModel {
    model: Arc<DenoiserModel>,
    sched: DiffusionSchedule,
}

/// One stream's state.
pub struct CmEngine {
    stream: OnlineStream<Arc<DenoiserModel>>,
    dim: usize,
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct CmEngineConfig {
    pub history: u32,
    pub horizon: u32,
    pub max_level: u32,
    pub refine_passes: u32,
    pub stab_n: u32,
    /// Nonzero enables the K* anchoring gate.
    pub noise_robust: u8,
    pub k_star: u32,
    pub seed: u64,
}

/// One observation in world coordinates. Wrist positions are read only when
/// the matching visibility flag is nonzero.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct CmObservation {
    pub head_position: [f64; 3],
    pub head_yaw: f64,
    pub wrist_left: [f64; 3],
    pub wrist_right: [f64; 3],
    pub vis_left: u8,
    pub vis_right: u8,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status(e: &Error) -> i32 {
    match e {
        Error::Io { .. } => CM_ERR_IO,
        Error::CorruptModel(_) => CM_ERR_CORRUPT_MODEL,
        Error::Checksum(_) => CM_ERR_CHECKSUM,
        Error::UnknownVersion(_) => CM_ERR_UNKNOWN_VERSION,
        Error::ShapeMismatch(_) | Error::DimensionMismatch { .. } => CM_ERR_SHAPE_MISMATCH,
        Error::InvalidConfig(_) | Error::InvalidHorizon(_) => CM_ERR_INVALID_CONFIG,
        Error::CorruptEngineState(_) => CM_ERR_ENGINE_STATE,
        Error::InvalidPose(_) => CM_ERR_INVALID_ARGUMENT,
        _ => CM_ERR_INTERNAL,
    }
}

/// Runs `f`, recording the message of any error or panic.
fn guard(f: impl FnOnce() -> Result<(), (i32, String)>) -> i32 {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            CM_OK
        }
        Ok(Err((code, msg))) => {
            set_error(&msg);
            code
        }
        Err(_) => {
            set_error("panic inside causalmotion");
            CM_ERR_PANIC
        }
    }
}

fn fail(e: Error) -> (i32, String) {
    (status(&e), e.to_string())
}

fn null(what: &str) -> (i32, String) {
    (CM_ERR_NULL, format!("{what} is null"))
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn cm_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Writes the default engine configuration into `out`.
///
/// # Safety
/// `out` must be null or point to writable memory for one `CmEngineConfig`.
#[no_mangle]
pub unsafe extern "C" fn cm_engine_config_default(out: *mut CmEngineConfig) -> i32 {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let d = EngineConfig::default();
        // SAFETY: checked non-null; caller guarantees it is writable.
        unsafe {
            out.write(CmEngineConfig {
                history: d.history as u32,
                horizon: d.horizon as u32,
                max_level: d.max_level as u32,
                refine_passes: d.refine_passes as u32,
                stab_n: d.stab_n as u32,
                noise_robust: d.noise_robust as u8,
                k_star: d.k_star as u32,
                seed: d.seed,
            })
        };
        Ok(())
    })
}

/// Loads a checkpoint file. On success `*out` owns a model to be released
/// with [`cm_model_free`].
///
/// # Safety
/// `path` must be null or a NUL-terminated string; `out` must be null or
/// writable.
#[no_mangle]
pub unsafe extern "C" fn cm_model_load(path: *const c_char, out: *mut *mut CmModel) -> i32 {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        // SAFETY: checked non-null; caller guarantees NUL termination.
        let path = unsafe { CStr::from_ptr(path) }
            .to_str()
            .map_err(|_| (CM_ERR_INVALID_ARGUMENT, "path is not UTF-8".to_string()))?;
        let (model, sched, _) = load_checkpoint(Path::new(path)).map_err(fail)?;
        let handle = Box::new(CmModel {
            model: Arc::new(model),
            sched,
        });
        // SAFETY: checked non-null.
        unsafe { out.write(Box::into_raw(handle)) };
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from [`cm_model_load`] not yet freed.
/// Engines created from it stay valid.
#[no_mangle]
pub unsafe extern "C" fn cm_model_free(model: *mut CmModel) {
    if !model.is_null() {
        // SAFETY: caller passes a live handle produced by Box::into_raw.
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Number of doubles in one pose, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cm_model_pose_dim(model: *const CmModel) -> usize {
    // SAFETY: caller passes null or a live handle.
    unsafe { model.as_ref() }.map_or(0, |m| m.model.layout().dim())
}

/// Creates a stream engine. `config` may be null for the defaults. The first
/// push bootstraps the window.
///
/// # Safety
/// `model` must be a live handle, `config` null or readable, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cm_engine_new(model: *const CmModel, config: *const CmEngineConfig, out: *mut *mut CmEngine) -> i32 {
    guard(|| {
        // SAFETY: caller passes null or a live handle.
        let model = unsafe { model.as_ref() }.ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        // SAFETY: caller passes null or a readable config.
        let cfg = match unsafe { config.as_ref() } {
            None => EngineConfig::default(),
            Some(c) => EngineConfig {
                history: c.history as usize,
                horizon: c.horizon as usize,
                max_level: c.max_level as usize,
                refine_passes: c.refine_passes as usize,
                stab_n: c.stab_n as usize,
                noise_robust: c.noise_robust != 0,
                k_star: c.k_star as usize,
                seed: c.seed,
                ..EngineConfig::default()
            },
        };
        let stream = OnlineStream::new(Arc::clone(&model.model), model.sched.clone(), cfg).map_err(fail)?;
        let engine = Box::new(CmEngine {
            stream,
            dim: model.model.layout().dim(),
        });
        // SAFETY: checked non-null.
        unsafe { out.write(Box::into_raw(engine)) };
        Ok(())
    })
}

/// Consumes one observation and writes the emitted world-frame pose into
/// `out_pose`, which must hold `out_len == cm_model_pose_dim` doubles.
///
/// # Safety
/// `engine` must be a live handle, `obs` readable, and `out_pose` writable
/// for `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn cm_engine_push(engine: *mut CmEngine, obs: *const CmObservation, out_pose: *mut f64, out_len: usize) -> i32 {
    guard(|| {
        // SAFETY: caller passes null or a live, exclusively used handle.
        let engine = unsafe { engine.as_mut() }.ok_or_else(|| null("engine"))?;
        // SAFETY: caller passes null or a readable observation.
        let obs = unsafe { obs.as_ref() }.ok_or_else(|| null("obs"))?;
        if out_pose.is_null() {
            return Err(null("out_pose"));
        }
        if out_len != engine.dim {
            return Err((
                CM_ERR_INVALID_ARGUMENT,
                format!("out_len is {out_len}, pose has {} components", engine.dim),
            ));
        }
        let signal = ControlSignal {
            head: HeadPose::new(obs.head_position, obs.head_yaw),
            wrist_left: (obs.vis_left != 0).then_some(obs.wrist_left),
            wrist_right: (obs.vis_right != 0).then_some(obs.wrist_right),
        };
        let frame = engine.stream.push(&signal).map_err(fail)?;
        // SAFETY: checked non-null; caller guarantees `out_len` writable doubles.
        unsafe { ptr::copy_nonoverlapping(frame.pose.as_ptr(), out_pose, out_len) };
        Ok(())
    })
}

/// Denoiser evaluations performed so far, or 0 for a null handle.
///
/// # Safety
/// `engine` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cm_engine_evals(engine: *const CmEngine) -> u64 {
    // SAFETY: caller passes null or a live handle.
    unsafe { engine.as_ref() }.map_or(0, |e| e.stream.evals())
}

/// # Safety
/// `engine` must be null or a handle from [`cm_engine_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cm_engine_free(engine: *mut CmEngine) {
    if !engine.is_null() {
        // SAFETY: caller passes a live handle produced by Box::into_raw.
        drop(unsafe { Box::from_raw(engine) });
    }
}
