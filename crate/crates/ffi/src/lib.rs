//! C ABI over the nightflow library.
//!
//! Objects cross the boundary as opaque handles created by `nf_*_new`,
//! `nf_*_load` or `nf_*_generate` and released by the matching `nf_*_free`.
//! Every fallible call returns an `NfStatus`; on failure the message is kept
//! per thread and read with `nf_last_error`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use nightflow::checkpoint::Checkpoint;
use nightflow::config::TrainConfig;
use nightflow::evaluate::{self, EvalReport};
use nightflow::synthdata::{self, SampleConfig, SceneSample};
use nightflow::trainer::{self, FlowModel};
use nightflow::{Error, FlowField, Mask};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NfStatus {
    Ok = 0,
    InvalidArgument = 1,
    DegenerateInput = 2,
    NonFinite = 3,
    VersionMismatch = 4,
    Io = 5,
    CorruptFile = 6,
    NullPointer = 7,
    Panic = 8,
}

/// Network selector for prediction and evaluation.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NfModelKind {
    Day = 0,
    DayOnNight = 1,
    Night = 2,
    Event = 3,
}

impl From<NfModelKind> for FlowModel {
    fn from(k: NfModelKind) -> Self {
        match k {
            NfModelKind::Day => FlowModel::Day,
            NfModelKind::DayOnNight => FlowModel::DayOnNight,
            NfModelKind::Night => FlowModel::Night,
            NfModelKind::Event => FlowModel::Event,
        }
    }
}

/// Training configuration.
pub struct NfConfig(TrainConfig);
/// In-memory dataset.
pub struct NfDataset(Vec<SceneSample>);
/// Trained parameters of one stage.
pub struct NfModel(Checkpoint);
/// Evaluation report.
pub struct NfReport(EvalReport);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> NfStatus {
    match e {
        Error::Argument(_) => NfStatus::InvalidArgument,
        Error::Degenerate(_) => NfStatus::DegenerateInput,
        Error::Numeric { .. } => NfStatus::NonFinite,
        Error::Version(_) => NfStatus::VersionMismatch,
        Error::Io { .. } => NfStatus::Io,
        Error::Corrupt { .. } => NfStatus::CorruptFile,
    }
}

enum Fail {
    Lib(Error),
    Null(&'static str),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

/// Runs `f`, records any failure and converts it to a status code.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> NfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            NfStatus::Ok
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            NfStatus::NullPointer
        }
        Err(_) => {
            set_error("internal panic".into());
            NfStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(what))
}

unsafe fn deref_mut<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or(Fail::Null(what))
}

unsafe fn string<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::Lib(Error::arg(format!("{what} is not UTF-8"))))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    let slot = deref_mut(out, "output handle")?;
    *slot = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn free<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Message of the last failed call on this thread, or NULL after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn nf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn nf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

// ---- configuration ------------------------------------------------------

/// Default configuration. Never returns NULL.
#[no_mangle]
pub extern "C" fn nf_config_new() -> *mut NfConfig {
    Box::into_raw(Box::new(NfConfig(TrainConfig::default())))
}

/// Applies one `key=value` override, e.g. `"lambda3=0.5"`.
///
/// # Safety
/// `cfg` must come from `nf_config_new`; `assignment` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn nf_config_set(cfg: *mut NfConfig, assignment: *const c_char) -> NfStatus {
    guard(|| {
        let c = deref_mut(cfg, "config")?;
        let a = string(assignment, "assignment")?;
        let mut next = c.0.clone();
        next.set(a)?;
        next.validate_hyper()?;
        c.0 = next;
        Ok(())
    })
}

/// # Safety
/// `cfg` must be NULL or a live handle from `nf_config_new`.
#[no_mangle]
pub unsafe extern "C" fn nf_config_free(cfg: *mut NfConfig) {
    free(cfg)
}

// ---- datasets -----------------------------------------------------------

/// Generates `count` square samples of side `size`.
///
/// # Safety
/// `out` must be a valid pointer to a handle slot.
#[no_mangle]
pub unsafe extern "C" fn nf_dataset_generate(
    seed: u64,
    count: usize,
    size: usize,
    max_displacement: f64,
    out: *mut *mut NfDataset,
) -> NfStatus {
    guard(|| {
        let cfg = SampleConfig {
            height: size,
            width: size,
            max_displacement,
            ..SampleConfig::default()
        };
        let data = synthdata::generate_dataset(seed, count, &cfg)?;
        put(out, NfDataset(data))
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn nf_dataset_load(path: *const c_char, out: *mut *mut NfDataset) -> NfStatus {
    guard(|| {
        let p = PathBuf::from(string(path, "path")?);
        put(out, NfDataset(synthdata::read_dataset(&p)?))
    })
}

/// # Safety
/// `ds` must be a live dataset handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn nf_dataset_save(ds: *const NfDataset, path: *const c_char) -> NfStatus {
    guard(|| {
        let d = deref(ds, "dataset")?;
        let p = PathBuf::from(string(path, "path")?);
        synthdata::write_dataset(&d.0, &p)?;
        Ok(())
    })
}

/// Number of samples, or 0 for NULL.
///
/// # Safety
/// `ds` must be NULL or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn nf_dataset_len(ds: *const NfDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.0.len())
}

/// # Safety
/// `ds` must be NULL or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn nf_dataset_free(ds: *mut NfDataset) {
    free(ds)
}

// ---- training -----------------------------------------------------------

/// Trains `stage` (1, 2 or 3). Stages 2 and 3 need the previous stage's
/// model in `prev`; stage 1 ignores it. `holdout` may be NULL.
///
/// # Safety
/// Handles must be live or NULL where allowed; `out` must be a valid slot.
#[no_mangle]
pub unsafe extern "C" fn nf_train_stage(
    stage: u8,
    train: *const NfDataset,
    holdout: *const NfDataset,
    prev: *const NfModel,
    cfg: *const NfConfig,
    out: *mut *mut NfModel,
) -> NfStatus {
    guard(|| {
        let t = deref(train, "training dataset")?;
        let c = deref(cfg, "config")?;
        let h = holdout.as_ref().map_or(&[][..], |d| &d.0[..]);
        let p = prev.as_ref().map(|m| &m.0);
        let o = trainer::run_stage(stage, &t.0, h, p, &c.0)?;
        put(out, NfModel(o.checkpoint))
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid slot.
#[no_mangle]
pub unsafe extern "C" fn nf_model_load(path: *const c_char, out: *mut *mut NfModel) -> NfStatus {
    guard(|| {
        let p = PathBuf::from(string(path, "path")?);
        put(out, NfModel(Checkpoint::load(&p)?))
    })
}

/// # Safety
/// `model` must be a live model handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn nf_model_save(model: *const NfModel, path: *const c_char) -> NfStatus {
    guard(|| {
        let m = deref(model, "model")?;
        let p = PathBuf::from(string(path, "path")?);
        m.0.save(&p)?;
        Ok(())
    })
}

/// Training stage (1, 2 or 3) that produced the model; 0 for NULL or any
/// other checkpoint kind.
///
/// # Safety
/// `model` must be NULL or a live model handle.
#[no_mangle]
pub unsafe extern "C" fn nf_model_stage(model: *const NfModel) -> u8 {
    use nightflow::checkpoint::Stage;
    model.as_ref().map_or(0, |m| match m.0.stage {
        Stage::Stage1 => 1,
        Stage::Stage2 => 2,
        Stage::Stage3 => 3,
        _ => 0,
    })
}

/// # Safety
/// `model` must be NULL or a live model handle.
#[no_mangle]
pub unsafe extern "C" fn nf_model_free(model: *mut NfModel) {
    free(model)
}

// ---- prediction and evaluation -----------------------------------------

/// Predicts the flow of sample `index` into caller buffers `u` and `v`,
/// each `height * width` doubles in row-major order.
///
/// # Safety
/// Handles must be live; `u` and `v` must each hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn nf_predict(
    model: *const NfModel,
    kind: NfModelKind,
    ds: *const NfDataset,
    index: usize,
    cfg: *const NfConfig,
    u: *mut f64,
    v: *mut f64,
    len: usize,
) -> NfStatus {
    guard(|| {
        let m = deref(model, "model")?;
        let d = deref(ds, "dataset")?;
        let c = deref(cfg, "config")?;
        if u.is_null() || v.is_null() {
            return Err(Fail::Null("flow buffer"));
        }
        let s = d.0.get(index).ok_or_else(|| Error::arg(format!("sample {index} out of range")))?;
        let f = trainer::predict(&m.0.params, kind.into(), s, &c.0)?;
        if f.u().len() != len {
            return Err(Error::arg(format!("buffers hold {len} values, flow has {}", f.u().len())).into());
        }
        std::slice::from_raw_parts_mut(u, len).copy_from_slice(f.u());
        std::slice::from_raw_parts_mut(v, len).copy_from_slice(f.v());
        Ok(())
    })
}

/// Evaluates a model on a dataset.
///
/// # Safety
/// Handles must be live; `out` must be a valid slot.
#[no_mangle]
pub unsafe extern "C" fn nf_evaluate(
    model: *const NfModel,
    kind: NfModelKind,
    ds: *const NfDataset,
    cfg: *const NfConfig,
    out: *mut *mut NfReport,
) -> NfStatus {
    guard(|| {
        let m = deref(model, "model")?;
        let d = deref(ds, "dataset")?;
        let c = deref(cfg, "config")?;
        put(out, NfReport(trainer::evaluate_model(&m.0.params, kind.into(), &d.0, &c.0)?))
    })
}

/// Mean EPE, mean Fl-all (percent) and boundary-band EPE (NaN when the
/// data has no motion edges). Any output pointer may be NULL.
///
/// # Safety
/// `report` must be a live handle; non-NULL outputs must be valid.
#[no_mangle]
pub unsafe extern "C" fn nf_report_metrics(
    report: *const NfReport,
    epe: *mut f64,
    fl_all: *mut f64,
    boundary_epe: *mut f64,
) -> NfStatus {
    guard(|| {
        let r = &deref(report, "report")?.0;
        if let Some(p) = epe.as_mut() {
            *p = r.mean_epe;
        }
        if let Some(p) = fl_all.as_mut() {
            *p = r.mean_fl_all;
        }
        if let Some(p) = boundary_epe.as_mut() {
            *p = r.boundary_epe.unwrap_or(f64::NAN);
        }
        Ok(())
    })
}

/// Report as JSON. Release the string with `nf_string_free`.
///
/// # Safety
/// `report` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nf_report_json(report: *const NfReport, out: *mut *mut c_char) -> NfStatus {
    guard(|| {
        let r = deref(report, "report")?;
        let slot = deref_mut(out, "output string")?;
        *slot = CString::new(r.0.to_json()).expect("JSON has no NUL").into_raw();
        Ok(())
    })
}

/// # Safety
/// `report` must be NULL or a live report handle.
#[no_mangle]
pub unsafe extern "C" fn nf_report_free(report: *mut NfReport) {
    free(report)
}

/// # Safety
/// `s` must be NULL or a string returned by this library.
#[no_mangle]
pub unsafe extern "C" fn nf_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// EPE and Fl-all of a flow against ground truth over all pixels. Buffers
/// hold `height * width` doubles each.
///
/// # Safety
/// All buffers must hold `height * width` doubles; outputs must be valid.
#[no_mangle]
pub unsafe extern "C" fn nf_flow_error(
    u: *const f64,
    v: *const f64,
    gt_u: *const f64,
    gt_v: *const f64,
    height: usize,
    width: usize,
    epe: *mut f64,
    fl_all: *mut f64,
) -> NfStatus {
    guard(|| {
        let n = height * width;
        let field = |a: *const f64, b: *const f64| -> Result<FlowField, Fail> {
            if a.is_null() || b.is_null() {
                return Err(Fail::Null("flow buffer"));
            }
            let (a, b) = (std::slice::from_raw_parts(a, n), std::slice::from_raw_parts(b, n));
            Ok(FlowField::new(height, width, a.to_vec(), b.to_vec())?)
        };
        let f = field(u, v)?;
        let g = field(gt_u, gt_v)?;
        let all = Mask::filled(height, width, true);
        let e = evaluate::epe(&f, &g, &all)?;
        let fl = evaluate::fl_all(&f, &g, &all)?;
        *deref_mut(epe, "epe output")? = e;
        *deref_mut(fl_all, "fl_all output")? = fl;
        Ok(())
    })
}
