//! C ABI over `radar-core`.
//!
//! Every fallible function returns a [`RadarStatus`]; on failure the
//! thread-local message from [`radar_last_error_message`] says why. Models
//! are opaque [`RadarModel`] handles created by [`radar_model_load`] and
//! released with [`radar_model_free`]. Tensors cross the boundary as flat
//! row-major `double` buffers, images laid out `N×C×H×W`.
//!
//! Panics never unwind into the caller; they surface as
//! `RADAR_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use radar_core::attacks::{run_attack, AttackConfig, AttackKind};
use radar_core::diff::Tensor;
use radar_core::metrics::{roc_auc_scores, sr_at_n};
use radar_core::nets::{load_checkpoint, Mode, Model, Role};
use radar_core::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RadarStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Shape = 5,
    Numeric = 6,
    WrongRole = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RadarAttackKind {
    Pgd = 0,
    Opgd = 1,
    Spgd = 2,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RadarRole {
    Classifier = 0,
    Detector = 1,
}

/// Loaded classifier or detector, always in eval mode.
pub struct RadarModel {
    model: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

fn status_of(err: &Error) -> RadarStatus {
    match err {
        Error::Io { .. } => RadarStatus::Io,
        Error::BadMagic | Error::VersionMismatch { .. } | Error::Truncated(_) | Error::Checkpoint(_) => RadarStatus::Format,
        Error::Shape { .. } | Error::LabelOutOfRange { .. } => RadarStatus::Shape,
        Error::NonFinite { .. } | Error::Divergence { .. } => RadarStatus::Numeric,
        _ => RadarStatus::InvalidArgument,
    }
}

struct Failure(RadarStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn guard<F>(body: F) -> RadarStatus
where
    F: FnOnce() -> Result<(), Failure>,
{
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => {
            set_error("");
            RadarStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            RadarStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(RadarStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(RadarStatus::InvalidArgument, msg.into())
}

unsafe fn model_ref<'a>(m: *const RadarModel, what: &str) -> Result<&'a Model, Failure> {
    m.as_ref().map(|h| &h.model).ok_or_else(|| null(what))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

fn per_item(model: &Model) -> usize {
    model.arch().input_shape().iter().product()
}

unsafe fn input_batch(model: &Model, x: *const f64, n: usize) -> Result<Tensor, Failure> {
    if n == 0 {
        return Err(invalid("batch size must be at least 1"));
    }
    let [c, h, w] = model.arch().input_shape();
    let data = slice(x, n * per_item(model), "x")?;
    Ok(Tensor::new(vec![n, c, h, w], data.to_vec())?)
}

fn expect_role(model: &Model, role: Role, what: &str) -> Result<(), Failure> {
    if model.role() == role {
        Ok(())
    } else {
        Err(Failure(RadarStatus::WrongRole, format!("{what} must be a {role:?}")))
    }
}

/// Message describing the last failure on this thread, or an empty string.
/// The pointer stays valid until the next call into this library on the
/// same thread.
#[no_mangle]
pub extern "C" fn radar_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn radar_ffi_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads an `RDR1` checkpoint. On success `*out` owns a new handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn radar_model_load(path: *const c_char, out: *mut *mut RadarModel) -> RadarStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        if path.is_null() {
            return Err(null("path"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| invalid("path is not valid UTF-8"))?;
        let mut model = load_checkpoint(Path::new(path))?;
        model.set_mode(Mode::Eval);
        *out = Box::into_raw(Box::new(RadarModel { model }));
        Ok(())
    })
}

/// Releases a handle; null is ignored.
///
/// # Safety
/// `model` must come from [`radar_model_load`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn radar_model_free(model: *mut RadarModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Role, input shape and class count (0 for detectors) of a model.
///
/// # Safety
/// `model` must be a live handle; output pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn radar_model_info(
    model: *const RadarModel,
    role: *mut RadarRole,
    channels: *mut usize,
    height: *mut usize,
    width: *mut usize,
    classes: *mut usize,
) -> RadarStatus {
    guard(|| {
        let m = model_ref(model, "model")?;
        if role.is_null() || channels.is_null() || height.is_null() || width.is_null() || classes.is_null() {
            return Err(null("output pointer"));
        }
        let a = m.arch();
        *role = match m.role() {
            Role::Classifier => RadarRole::Classifier,
            Role::Detector => RadarRole::Detector,
        };
        *channels = a.channels;
        *height = a.height;
        *width = a.width;
        *classes = a.classes;
        Ok(())
    })
}

/// Classifier logits for `n` images. `out` receives `n × classes` values.
///
/// # Safety
/// `x` must hold `n·C·H·W` doubles and `out` `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn radar_model_predict(
    model: *const RadarModel,
    x: *const f64,
    n: usize,
    out: *mut f64,
    out_len: usize,
) -> RadarStatus {
    guard(|| {
        let m = model_ref(model, "model")?;
        expect_role(m, Role::Classifier, "model")?;
        let xs = input_batch(m, x, n)?;
        let logits = m.predict(&xs)?;
        if out_len != logits.numel() {
            return Err(invalid(format!("out_len is {out_len}, expected {}", logits.numel())));
        }
        slice_mut(out, out_len, "out")?.copy_from_slice(logits.data());
        Ok(())
    })
}

/// Detector P(adv) for `n` images. `out` receives `n` values.
///
/// # Safety
/// `x` must hold `n·C·H·W` doubles and `out` `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn radar_model_detect(model: *const RadarModel, x: *const f64, n: usize, out: *mut f64) -> RadarStatus {
    guard(|| {
        let m = model_ref(model, "model")?;
        expect_role(m, Role::Detector, "model")?;
        let xs = input_batch(m, x, n)?;
        let scores = m.detect(&xs)?;
        slice_mut(out, n, "out")?.copy_from_slice(&scores);
        Ok(())
    })
}

/// Attack parameters. `detector_threshold` is the score at or above which
/// the detector counts as flagging an input.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct RadarAttackParams {
    pub kind: RadarAttackKind,
    pub epsilon: f64,
    pub alpha: f64,
    pub iters: usize,
    pub detector_threshold: f64,
}

/// Default attack parameters (PGD, ε = 16/255, α = 0.03, 100 iterations,
/// threshold 0.5).
#[no_mangle]
pub extern "C" fn radar_attack_params_default() -> RadarAttackParams {
    let d = AttackConfig::default();
    RadarAttackParams {
        kind: RadarAttackKind::Pgd,
        epsilon: d.epsilon,
        alpha: d.alpha,
        iters: d.iters,
        detector_threshold: d.detector_threshold,
    }
}

/// Attacks `n` labelled images. `detector` may be null for PGD and is
/// required for OPGD/SPGD. `x_adv` receives `n·C·H·W` doubles; `fooled`
/// (optional) receives one 0/1 byte per image.
///
/// # Safety
/// Buffers must have the stated lengths; handles must be live.
#[no_mangle]
pub unsafe extern "C" fn radar_attack(
    classifier: *const RadarModel,
    detector: *const RadarModel,
    params: *const RadarAttackParams,
    x: *const f64,
    labels: *const u32,
    n: usize,
    x_adv: *mut f64,
    fooled: *mut u8,
) -> RadarStatus {
    guard(|| {
        let f = model_ref(classifier, "classifier")?;
        expect_role(f, Role::Classifier, "classifier")?;
        let g = if detector.is_null() {
            None
        } else {
            let g = model_ref(detector, "detector")?;
            expect_role(g, Role::Detector, "detector")?;
            Some(g)
        };
        let p = params.as_ref().ok_or_else(|| null("params"))?;
        let kind = match p.kind {
            RadarAttackKind::Pgd => AttackKind::Pgd,
            RadarAttackKind::Opgd => AttackKind::Opgd,
            RadarAttackKind::Spgd => AttackKind::Spgd,
        };
        if kind.is_adaptive() && g.is_none() {
            return Err(null("detector (required by adaptive attacks)"));
        }
        let cfg = AttackConfig {
            epsilon: p.epsilon,
            alpha: p.alpha,
            iters: p.iters,
            kind,
            record_loss_trajectory: false,
            detector_threshold: p.detector_threshold,
        };
        let xs = input_batch(f, x, n)?;
        let y: Vec<usize> = slice(labels, n, "labels")?.iter().map(|&l| l as usize).collect();
        let r = run_attack(f, g, &xs, &y, &cfg)?;
        slice_mut(x_adv, r.x_adv.numel(), "x_adv")?.copy_from_slice(r.x_adv.data());
        if !fooled.is_null() {
            for (o, &b) in slice_mut(fooled, n, "fooled")?.iter_mut().zip(&r.classifier_fooled) {
                *o = u8::from(b);
            }
        }
        Ok(())
    })
}

/// ROC-AUC of benign vs adversarial detector scores (ties count ½).
///
/// # Safety
/// `benign` and `adversarial` must hold the stated counts.
#[no_mangle]
pub unsafe extern "C" fn radar_roc_auc(
    benign: *const f64,
    n_benign: usize,
    adversarial: *const f64,
    n_adversarial: usize,
    out: *mut f64,
) -> RadarStatus {
    guard(|| {
        let b = slice(benign, n_benign, "benign")?;
        let a = slice(adversarial, n_adversarial, "adversarial")?;
        let v = roc_auc_scores(b, a)?;
        *out.as_mut().ok_or_else(|| null("out"))? = v;
        Ok(())
    })
}

/// Attack success rate at an `n_percent` benign false-positive rate.
/// `fooled[i]` is nonzero when attack `i` fooled the classifier.
///
/// # Safety
/// Buffers must hold the stated counts.
#[no_mangle]
pub unsafe extern "C" fn radar_sr_at_n(
    benign: *const f64,
    n_benign: usize,
    adversarial: *const f64,
    fooled: *const u8,
    n_adversarial: usize,
    n_percent: f64,
    out: *mut f64,
) -> RadarStatus {
    guard(|| {
        let b = slice(benign, n_benign, "benign")?;
        let a = slice(adversarial, n_adversarial, "adversarial")?;
        let f = slice(fooled, n_adversarial, "fooled")?;
        let pairs: Vec<(f64, bool)> = a.iter().zip(f).map(|(&s, &k)| (s, k != 0)).collect();
        let v = sr_at_n(b, &pairs, n_percent)?;
        *out.as_mut().ok_or_else(|| null("out"))? = v;
        Ok(())
    })
}
