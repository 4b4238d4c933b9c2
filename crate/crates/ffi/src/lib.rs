//! C ABI over the mdmf pipeline.
//!
//! Every entry point returns an [`MdmfStatus`]. On failure a message is kept
//! in thread-local storage and can be read with [`mdmf_last_error`]. Objects
//! cross the boundary as opaque handles that the caller releases with the
//! matching `*_free` function. Panics never unwind into C; they surface as
//! `MDMF_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use mdmf::config::RunConfig;
use mdmf::episodes::{frame_indices, load_manifest, synth_generate, write_dataset, DatasetSplit, SynthConfig};
use mdmf::harness::Session;
use mdmf::matching::otam_with_grad;
use mdmf::pps::prompt_distribution;
use mdmf::tensor::Mat;
use mdmf::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MdmfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Parse = 4,
    Config = 5,
    SplitViolation = 6,
    Capacity = 7,
    Degenerate = 8,
    NonFinite = 9,
    Checkpoint = 10,
    Io = 11,
    Panic = 12,
}

/// Run configuration.
pub struct MdmfConfig(RunConfig);

/// Loaded or generated dataset.
pub struct MdmfDataset(DatasetSplit);

/// Model, optimizer and data bound together.
pub struct MdmfSession(Session);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> MdmfStatus {
    match e {
        Error::Shape(_) => MdmfStatus::Shape,
        Error::Parse { .. } | Error::Json(_) | Error::Csv(_) => MdmfStatus::Parse,
        Error::Config(_) => MdmfStatus::Config,
        Error::SplitViolation(_) => MdmfStatus::SplitViolation,
        Error::Capacity(_) => MdmfStatus::Capacity,
        Error::Input(_) | Error::Parameter(_) => MdmfStatus::InvalidArgument,
        Error::Degenerate(_) => MdmfStatus::Degenerate,
        Error::NonFinite { .. } => MdmfStatus::NonFinite,
        Error::Checkpoint(_) => MdmfStatus::Checkpoint,
        Error::Io { .. } => MdmfStatus::Io,
    }
}

/// Runs `f`, translating errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), (MdmfStatus, String)>) -> MdmfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MdmfStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            MdmfStatus::Panic
        }
    }
}

fn lift<T>(r: mdmf::Result<T>) -> Result<T, (MdmfStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (MdmfStatus, String) {
    (MdmfStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, (MdmfStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| (MdmfStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, (MdmfStatus, String)> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn handle_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, (MdmfStatus, String)> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), (MdmfStatus, String)> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Message of the last failed call on this thread, or NULL. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn mdmf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Default configuration.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for a handle.
#[no_mangle]
pub unsafe extern "C" fn mdmf_config_new(out: *mut *mut MdmfConfig) -> MdmfStatus {
    guard(|| put(out, MdmfConfig(RunConfig::default())))
}

/// Reads a `key = value` config file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mdmf_config_load(path: *const c_char, out: *mut *mut MdmfConfig) -> MdmfStatus {
    guard(|| {
        let p = str_arg(path, "path")?;
        let cfg = lift(RunConfig::load(&PathBuf::from(p)))?;
        put(out, MdmfConfig(cfg))
    })
}

/// Sets one dotted key.
///
/// # Safety
/// `cfg` must come from this library; `key` and `value` must be
/// NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn mdmf_config_set(cfg: *mut MdmfConfig, key: *const c_char, value: *const c_char) -> MdmfStatus {
    guard(|| {
        let cfg = handle_mut(cfg, "config")?;
        let (k, v) = (str_arg(key, "key")?, str_arg(value, "value")?);
        let mut next = cfg.0.clone();
        lift(next.set(k, v))?;
        lift(next.validate())?;
        cfg.0 = next;
        Ok(())
    })
}

/// # Safety
/// `cfg` must be NULL or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mdmf_config_free(cfg: *mut MdmfConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Generates the synthetic motif dataset with default shape settings.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mdmf_dataset_synth(
    classes: usize,
    per_class: usize,
    noise_sigma: f64,
    seed: u64,
    out: *mut *mut MdmfDataset,
) -> MdmfStatus {
    guard(|| {
        let cfg = SynthConfig { num_classes: classes, per_class, noise_sigma, seed, ..Default::default() };
        put(out, MdmfDataset(lift(synth_generate(&cfg))?))
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mdmf_dataset_load(path: *const c_char, out: *mut *mut MdmfDataset) -> MdmfStatus {
    guard(|| {
        let p = str_arg(path, "path")?;
        put(out, MdmfDataset(lift(load_manifest(&PathBuf::from(p)))?))
    })
}

/// Writes the dataset as a manifest plus binary feature files under `dir`.
///
/// # Safety
/// `ds` must be a live handle; `dir` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn mdmf_dataset_write(ds: *const MdmfDataset, dir: *const c_char) -> MdmfStatus {
    guard(|| {
        let ds = handle(ds, "dataset")?;
        lift(write_dataset(&ds.0, &PathBuf::from(str_arg(dir, "dir")?)).map(|_| ()))
    })
}

/// Number of samples across all parts, or 0 for a NULL handle.
///
/// # Safety
/// `ds` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mdmf_dataset_len(ds: *const MdmfDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.0.num_samples())
}

/// # Safety
/// `ds` must be NULL or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mdmf_dataset_free(ds: *mut MdmfDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// New session. With a NULL dataset the data named by the config is loaded.
///
/// # Safety
/// `cfg` must be a live handle; `ds` NULL or a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mdmf_session_new(
    cfg: *const MdmfConfig,
    ds: *const MdmfDataset,
    out: *mut *mut MdmfSession,
) -> MdmfStatus {
    guard(|| {
        let cfg = handle(cfg, "config")?.0.clone();
        let session = match ds.as_ref() {
            Some(d) => lift(Session::with_data(cfg, d.0.clone()))?,
            None => lift(Session::new(cfg))?,
        };
        put(out, MdmfSession(session))
    })
}

/// Restores a session from a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mdmf_session_load(path: *const c_char, out: *mut *mut MdmfSession) -> MdmfStatus {
    guard(|| {
        let p = str_arg(path, "path")?;
        put(out, MdmfSession(lift(Session::load(&PathBuf::from(p)))?))
    })
}

/// # Safety
/// `s` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn mdmf_session_save(s: *const MdmfSession, path: *const c_char) -> MdmfStatus {
    guard(|| {
        let s = handle(s, "session")?;
        lift(s.0.checkpoint().save(&PathBuf::from(str_arg(path, "path")?)))
    })
}

/// Trains `episodes` episodes. `last_loss` (nullable) receives the total
/// loss of the final episode.
///
/// # Safety
/// `s` must be a live handle; `last_loss` NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn mdmf_session_train(s: *mut MdmfSession, episodes: usize, last_loss: *mut f64) -> MdmfStatus {
    guard(|| {
        let s = handle_mut(s, "session")?;
        let mut last = f64::NAN;
        lift(s.0.train(episodes, |r| {
            last = r.total;
            Ok(())
        }))?;
        if !last_loss.is_null() {
            *last_loss = last;
        }
        Ok(())
    })
}

/// Mean accuracy and 95% interval half-width over `episodes` episodes of the
/// configured evaluation part.
///
/// # Safety
/// `s` must be a live handle; `accuracy` and `ci95` writable.
#[no_mangle]
pub unsafe extern "C" fn mdmf_session_evaluate(
    s: *const MdmfSession,
    episodes: usize,
    accuracy: *mut f64,
    ci95: *mut f64,
) -> MdmfStatus {
    guard(|| {
        let s = handle(s, "session")?;
        if accuracy.is_null() || ci95.is_null() {
            return Err(null("output pointer"));
        }
        let e = lift(s.0.evaluate(episodes))?;
        *accuracy = e.accuracy;
        *ci95 = e.ci95;
        Ok(())
    })
}

/// Writes pooled fused features as CSV; `rows` (nullable) receives the count.
///
/// # Safety
/// `s` must be a live handle; `path` a NUL-terminated string; `rows` NULL or
/// writable.
#[no_mangle]
pub unsafe extern "C" fn mdmf_session_export_embeddings(
    s: *const MdmfSession,
    episodes: usize,
    path: *const c_char,
    rows: *mut usize,
) -> MdmfStatus {
    guard(|| {
        let s = handle(s, "session")?;
        let n = lift(s.0.export_embeddings(episodes, &PathBuf::from(str_arg(path, "path")?)))?;
        if !rows.is_null() {
            *rows = n;
        }
        Ok(())
    })
}

/// # Safety
/// `s` must be NULL or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mdmf_session_free(s: *mut MdmfSession) {
    if !s.is_null() {
        drop(Box::from_raw(s));
    }
}

/// Alignment distance of a row-major `rows x cols` cost matrix. `grad`
/// (nullable) receives `rows * cols` partial derivatives.
///
/// # Safety
/// `cost` must point to `rows * cols` doubles, `grad` NULL or to as many
/// writable doubles, and `value` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mdmf_otam(
    cost: *const f64,
    rows: usize,
    cols: usize,
    gamma: f64,
    bidirectional: bool,
    value: *mut f64,
    grad: *mut f64,
) -> MdmfStatus {
    guard(|| {
        if cost.is_null() || value.is_null() {
            return Err(null("cost or value"));
        }
        let n = rows.checked_mul(cols).ok_or((MdmfStatus::Shape, "size overflow".to_string()))?;
        let c = lift(Mat::from_vec(rows, cols, std::slice::from_raw_parts(cost, n).to_vec()))?;
        let (v, g) = lift(otam_with_grad(&c, gamma, bidirectional))?;
        *value = v;
        if !grad.is_null() {
            std::slice::from_raw_parts_mut(grad, n).copy_from_slice(g.data());
        }
        Ok(())
    })
}

/// Temperature softmax of `n` similarities into `probs`.
///
/// # Safety
/// `sims` must point to `n` doubles and `probs` to `n` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn mdmf_prompt_distribution(
    sims: *const f64,
    n: usize,
    temperature: f64,
    probs: *mut f64,
) -> MdmfStatus {
    guard(|| {
        if sims.is_null() || probs.is_null() {
            return Err(null("sims or probs"));
        }
        let s = std::slice::from_raw_parts(sims, n);
        let names: Vec<String> = (0..n).map(|i| i.to_string()).collect();
        let d = lift(prompt_distribution(s, temperature, &names))?;
        std::slice::from_raw_parts_mut(probs, n).copy_from_slice(&d.probs);
        Ok(())
    })
}

/// Segment-sampled frame indices of a `len`-frame clip into `out` (`m`
/// entries).
///
/// # Safety
/// `out` must point to `m` writable `size_t` values.
#[no_mangle]
pub unsafe extern "C" fn mdmf_frame_indices(
    len: usize,
    m: usize,
    deterministic: bool,
    seed: u64,
    out: *mut usize,
) -> MdmfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if len == 0 || m == 0 {
            return Err((MdmfStatus::InvalidArgument, "len and m must be >= 1".into()));
        }
        let mut rng = mdmf::seed::rng(seed);
        let idx = frame_indices(len, m, deterministic, &mut rng);
        std::slice::from_raw_parts_mut(out, m).copy_from_slice(&idx);
        Ok(())
    })
}
