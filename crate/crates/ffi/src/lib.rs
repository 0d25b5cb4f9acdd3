//! C ABI for the `consisaug` crate.
//!
//! Objects cross the boundary as opaque handles created by `*_new`/`*_load`
//! functions and released with the matching `*_free`. Every fallible call
//! returns a [`CsgStatus`]; on failure a message is kept per thread and can
//! be copied out with [`csg_last_error_message`]. Panics never unwind into
//! the caller; they are reported as [`CsgStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use consisaug::cli::{self, CliError, GenDataArgs};
use consisaug::data::{load_dataset, rgb8_to_tensor, LabeledSample};
use consisaug::eval::{self, EvalConfig, MetricsReport};
use consisaug::gradcheck::run_suite;
use consisaug::trainer::{self, TrainConfig, TrainError, TrainState};

/// Result of every fallible call. The numeric values of the first five
/// match the command-line exit codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CsgStatus {
    Ok = 0,
    InvalidArgument = 2,
    Io = 3,
    Numeric = 4,
    Verification = 5,
    NullPointer = 6,
    InvalidUtf8 = 7,
    Panic = 8,
}

/// A loaded dataset split.
pub struct CsgDataset {
    samples: Vec<LabeledSample>,
}

/// A training state: student, EMA teacher and optimizer moments.
pub struct CsgModel {
    state: TrainState,
}

/// Mirror of the evaluation report.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CsgMetrics {
    pub precision: f64,
    pub recall: f64,
    pub map50: f64,
    pub f1: f64,
    pub f2: f64,
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub loss_sup: f64,
    pub loss_con_loc: f64,
    pub loss_con_cls: f64,
}

impl From<MetricsReport> for CsgMetrics {
    fn from(r: MetricsReport) -> Self {
        Self {
            precision: r.precision,
            recall: r.recall,
            map50: r.map50,
            f1: r.f1,
            f2: r.f2,
            tp: r.tp as u64,
            fp: r.fp as u64,
            fn_: r.fn_ as u64,
            loss_sup: r.loss_sup,
            loss_con_loc: r.loss_con_loc,
            loss_con_cls: r.loss_con_cls,
        }
    }
}

/// One detection in pixel coordinates (center, width, height).
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CsgDetection {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub score: f64,
    pub class_id: u32,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

struct Failure(CsgStatus, String);

impl From<CliError> for Failure {
    fn from(e: CliError) -> Self {
        let status = match e.exit_code() {
            cli::EXIT_USAGE => CsgStatus::InvalidArgument,
            cli::EXIT_IO => CsgStatus::Io,
            cli::EXIT_VERIFY => CsgStatus::Verification,
            _ => CsgStatus::Numeric,
        };
        Failure(status, e.to_string())
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        CliError::from(e).into()
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(CsgStatus::InvalidArgument, msg.into())
}

/// Runs `f`, records any failure as the thread's last error and converts
/// panics into [`CsgStatus::Panic`].
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CsgStatus {
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<&str>()
            .map(|s| s.to_string())
            .or_else(|| p.downcast_ref::<String>().cloned())
            .unwrap_or_else(|| "unknown panic".into());
        Err(Failure(CsgStatus::Panic, format!("panic: {msg}")))
    });
    match outcome {
        Ok(()) => {
            LAST_ERROR.with(|e| e.borrow_mut().clear());
            CsgStatus::Ok
        }
        Err(Failure(status, msg)) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = msg);
            status
        }
    }
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(CsgStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(CsgStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn reference<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| Failure(CsgStatus::NullPointer, format!("{what} is null")))
}

fn out_ptr<T>(p: *mut T, what: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure(CsgStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

/// Copies the calling thread's last error message into `buf` as a
/// NUL-terminated string, truncating if needed. Returns the full message
/// length in bytes, excluding the terminator. Pass a null `buf` to query
/// the length.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn csg_last_error_message(buf: *mut c_char, len: usize) -> usize {
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

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn csg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// F1 and F2 from precision and recall. Either output may be null.
///
/// # Safety
/// Non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn csg_f_scores(precision: f64, recall: f64, f1: *mut f64, f2: *mut f64) -> CsgStatus {
    guard(|| {
        if !(0.0..=1.0).contains(&precision) || !(0.0..=1.0).contains(&recall) {
            return Err(invalid("precision and recall must lie in [0, 1]"));
        }
        let (a, b) = eval::f_scores(precision, recall);
        if !f1.is_null() {
            *f1 = a;
        }
        if !f2.is_null() {
            *f2 = b;
        }
        Ok(())
    })
}

/// Writes a synthetic dataset with `train`, `val` and `test` splits under
/// `out_dir`. `domain` is `"a"` or `"b"`.
///
/// # Safety
/// `out_dir` and `domain` must be NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn csg_generate_data(
    out_dir: *const c_char,
    domain: *const c_char,
    n_train: usize,
    n_val: usize,
    n_test: usize,
    image_size: usize,
    seed: u64,
) -> CsgStatus {
    guard(|| {
        let args = GenDataArgs {
            config: None,
            out: PathBuf::from(text(out_dir, "out_dir")?),
            domain: text(domain, "domain")?.to_string(),
            n_train,
            n_val,
            n_test,
            image_size,
            seed,
        };
        cli::run_gen_data(&args)?;
        Ok(())
    })
}

/// Loads one split directory (holding `images/` and `labels/`).
///
/// # Safety
/// `dir` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn csg_dataset_load(dir: *const c_char, out: *mut *mut CsgDataset) -> CsgStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let samples = load_dataset(std::path::Path::new(text(dir, "dir")?)).map_err(CliError::from)?;
        *out = Box::into_raw(Box::new(CsgDataset { samples }));
        Ok(())
    })
}

/// Number of samples, or 0 for a null handle.
///
/// # Safety
/// `ds` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn csg_dataset_len(ds: *const CsgDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.samples.len())
}

/// # Safety
/// `ds` must be null or a handle not freed before.
#[no_mangle]
pub unsafe extern "C" fn csg_dataset_free(ds: *mut CsgDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Trains with settings given as `key = value` lines and returns the final
/// state. Outputs are written to the configured `out_dir` exactly as the
/// `train` command does.
///
/// # Safety
/// `config_text` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn csg_train(config_text: *const c_char, out: *mut *mut CsgModel) -> CsgStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let cfg = TrainConfig::from_snapshot(text(config_text, "config_text")?)?;
        let outcome = trainer::train(&cfg)?;
        *out = Box::into_raw(Box::new(CsgModel { state: outcome.state }));
        Ok(())
    })
}

/// Loads a checkpoint written by training.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn csg_model_load(path: *const c_char, out: *mut *mut CsgModel) -> CsgStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let state = TrainState::load(std::path::Path::new(text(path, "path")?), None)?;
        *out = Box::into_raw(Box::new(CsgModel { state }));
        Ok(())
    })
}

/// Saves the full state; the file loads back bit-exactly.
///
/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn csg_model_save(model: *const CsgModel, path: *const c_char) -> CsgStatus {
    guard(|| {
        let m = reference(model, "model")?;
        m.state.save(std::path::Path::new(text(path, "path")?))?;
        Ok(())
    })
}

/// Completed training epochs, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn csg_model_epoch(model: *const CsgModel) -> u64 {
    model.as_ref().map_or(0, |m| m.state.epoch as u64)
}

/// Input side length expected by the model, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn csg_model_image_size(model: *const CsgModel) -> usize {
    model.as_ref().map_or(0, |m| m.state.st.student.arch.image_size)
}

/// # Safety
/// `model` must be null or a handle not freed before.
#[no_mangle]
pub unsafe extern "C" fn csg_model_free(model: *mut CsgModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Evaluates the student (or the teacher when `use_teacher` is nonzero).
///
/// # Safety
/// `model` and `ds` must be live handles and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn csg_evaluate(
    model: *const CsgModel,
    ds: *const CsgDataset,
    use_teacher: i32,
    conf_threshold: f64,
    nms_iou: f64,
    out: *mut CsgMetrics,
) -> CsgStatus {
    guard(|| {
        let m = reference(model, "model")?;
        let d = reference(ds, "dataset")?;
        out_ptr(out, "out")?;
        let cfg = eval_config(conf_threshold, nms_iou)?;
        let params = if use_teacher != 0 { &m.state.st.teacher } else { &m.state.st.student };
        let size = params.arch.image_size;
        if d.samples.is_empty() {
            return Err(invalid("dataset is empty"));
        }
        if d.samples.iter().any(|s| s.height() != size || s.width() != size) {
            return Err(invalid(format!("dataset images are not {size}x{size}")));
        }
        let report = eval::evaluate(params, &d.samples, &cfg).map_err(CliError::from)?;
        *out = report.into();
        Ok(())
    })
}

fn eval_config(conf_threshold: f64, nms_iou: f64) -> Result<EvalConfig, Failure> {
    if !(0.0..=1.0).contains(&conf_threshold) || !(nms_iou > 0.0 && nms_iou <= 1.0) {
        return Err(invalid("conf_threshold must lie in [0, 1] and nms_iou in (0, 1]"));
    }
    Ok(EvalConfig {
        conf_threshold,
        nms_iou,
    })
}

/// Detects objects in one interleaved RGB8 image of the model's input size.
/// Up to `capacity` detections, highest score first, are written to `dets`;
/// `count` receives the total number found, which may exceed `capacity`.
///
/// # Safety
/// `rgb` must point to `3 * height * width` bytes, `dets` to `capacity`
/// writable entries (or be null when `capacity` is 0), and `count` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn csg_predict(
    model: *const CsgModel,
    rgb: *const u8,
    height: usize,
    width: usize,
    conf_threshold: f64,
    nms_iou: f64,
    dets: *mut CsgDetection,
    capacity: usize,
    count: *mut usize,
) -> CsgStatus {
    guard(|| {
        let m = reference(model, "model")?;
        out_ptr(count, "count")?;
        if rgb.is_null() {
            return Err(Failure(CsgStatus::NullPointer, "rgb is null".into()));
        }
        if capacity > 0 && dets.is_null() {
            return Err(Failure(CsgStatus::NullPointer, "dets is null".into()));
        }
        let size = m.state.st.student.arch.image_size;
        if height != size || width != size {
            return Err(invalid(format!("image must be {size}x{size}")));
        }
        let cfg = eval_config(conf_threshold, nms_iou)?;
        let bytes = std::slice::from_raw_parts(rgb, 3 * height * width);
        let sample = LabeledSample {
            id: "ffi".into(),
            image: rgb8_to_tensor(bytes, height, width),
            boxes: Vec::new(),
        };
        let found = eval::predict(&m.state.st.student, std::slice::from_ref(&sample), &cfg)
            .map_err(CliError::from)?
            .pop()
            .unwrap_or_default();
        *count = found.len();
        for (i, d) in found.iter().take(capacity).enumerate() {
            *dets.add(i) = CsgDetection {
                cx: d.bbox.cx,
                cy: d.bbox.cy,
                w: d.bbox.w,
                h: d.bbox.h,
                score: d.score,
                class_id: d.class_id as u32,
            };
        }
        Ok(())
    })
}

/// Runs the gradient-check suite for seeds `seed .. seed + seeds`.
/// `failed` (if non-null) receives the number of failing checks; the status
/// is [`CsgStatus::Verification`] when any check fails.
///
/// # Safety
/// `failed` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn csg_grad_check(seed: u64, seeds: u64, failed: *mut u64) -> CsgStatus {
    guard(|| {
        if seeds == 0 {
            return Err(invalid("seeds must be at least 1"));
        }
        let mut bad = Vec::new();
        for s in seed..seed + seeds {
            bad.extend(run_suite(s).into_iter().filter(|r| !r.passed).map(|r| r.name));
        }
        if !failed.is_null() {
            *failed = bad.len() as u64;
        }
        if bad.is_empty() {
            Ok(())
        } else {
            bad.dedup();
            Err(Failure(CsgStatus::Verification, format!("gradient check failed for: {}", bad.join(", "))))
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::ffi::CString;

    fn last_error() -> String {
        unsafe {
            let n = csg_last_error_message(ptr::null_mut(), 0);
            let mut buf = vec![0 as c_char; n + 1];
            csg_last_error_message(buf.as_mut_ptr(), buf.len());
            CStr::from_ptr(buf.as_ptr()).to_string_lossy().into_owned()
        }
    }

    #[test]
    fn f_scores_match_known_values() {
        let (mut f1, mut f2) = (0.0, 0.0);
        assert_eq!(unsafe { csg_f_scores(0.575, 0.453, &mut f1, &mut f2) }, CsgStatus::Ok);
        assert!((f1 - 0.507).abs() < 1e-3 && (f2 - 0.473).abs() < 1e-3);
        assert_eq!(unsafe { csg_f_scores(1.5, 0.5, &mut f1, &mut f2) }, CsgStatus::InvalidArgument);
        assert!(last_error().contains("[0, 1]"));
    }

    #[test]
    fn null_arguments_are_reported() {
        let mut ds = ptr::null_mut();
        assert_eq!(unsafe { csg_dataset_load(ptr::null(), &mut ds) }, CsgStatus::NullPointer);
        assert!(last_error().contains("dir"));
        assert_eq!(unsafe { csg_dataset_len(ptr::null()) }, 0);
        unsafe { csg_dataset_free(ptr::null_mut()) };
    }

    #[test]
    fn missing_checkpoint_is_io() {
        let mut m = ptr::null_mut();
        let p = CString::new("/nonexistent/x.ckpt").unwrap();
        assert_eq!(unsafe { csg_model_load(p.as_ptr(), &mut m) }, CsgStatus::Io);
        assert!(m.is_null());
    }

    #[test]
    fn generate_train_evaluate_predict() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        let c = |s: &str| CString::new(s).unwrap();
        let data_c = c(data.to_str().unwrap());
        assert_eq!(unsafe { csg_generate_data(data_c.as_ptr(), c("a").as_ptr(), 4, 2, 2, 32, 5) }, CsgStatus::Ok);
        assert_eq!(
            unsafe { csg_generate_data(data_c.as_ptr(), c("q").as_ptr(), 4, 2, 2, 32, 5) },
            CsgStatus::InvalidArgument
        );

        let cfg = format!(
            "data_dir = {}\nout_dir = {}\nmode = consis\nepochs = 2\nwarmup_epochs = 1\nbatch_size = 2\nimage_size = 32\neval_every = 1\n",
            data.display(),
            dir.path().join("run").display()
        );
        let mut model = ptr::null_mut();
        assert_eq!(unsafe { csg_train(c(&cfg).as_ptr(), &mut model) }, CsgStatus::Ok, "{}", last_error());
        assert_eq!(unsafe { csg_model_epoch(model) }, 2);
        assert_eq!(unsafe { csg_model_image_size(model) }, 32);

        let saved = dir.path().join("copy.ckpt");
        assert_eq!(unsafe { csg_model_save(model, c(saved.to_str().unwrap()).as_ptr()) }, CsgStatus::Ok);
        let best = std::fs::read(dir.path().join("run").join("last.ckpt")).unwrap();
        assert_eq!(std::fs::read(&saved).unwrap(), best);

        let mut ds = ptr::null_mut();
        let test_dir = c(data.join("test").to_str().unwrap());
        assert_eq!(unsafe { csg_dataset_load(test_dir.as_ptr(), &mut ds) }, CsgStatus::Ok);
        assert_eq!(unsafe { csg_dataset_len(ds) }, 2);
        let mut metrics = CsgMetrics::default();
        assert_eq!(unsafe { csg_evaluate(model, ds, 0, 0.25, 0.45, &mut metrics) }, CsgStatus::Ok);
        for v in [metrics.precision, metrics.recall, metrics.map50, metrics.f1, metrics.f2] {
            assert!((0.0..=1.0).contains(&v));
        }

        let rgb = vec![128u8; 3 * 32 * 32];
        let mut dets = [CsgDetection::default(); 4];
        let mut count = 0usize;
        let st = unsafe { csg_predict(model, rgb.as_ptr(), 32, 32, 0.0, 0.45, dets.as_mut_ptr(), dets.len(), &mut count) };
        assert_eq!(st, CsgStatus::Ok);
        assert!(count > 0);
        assert!(dets[..count.min(4)].windows(2).all(|w| w[0].score >= w[1].score));
        let st = unsafe { csg_predict(model, rgb.as_ptr(), 16, 16, 0.0, 0.45, dets.as_mut_ptr(), 4, &mut count) };
        assert_eq!(st, CsgStatus::InvalidArgument);

        unsafe {
            csg_dataset_free(ds);
            csg_model_free(model);
        }
    }
}
