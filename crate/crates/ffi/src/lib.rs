//! C ABI over the chandiff engine.
//!
//! Every fallible function returns a [`ChdStatus`]; on failure the message is
//! available from [`chd_last_error`] until the next call on the same thread.
//! Objects are opaque handles created by the `*_load`/`*_from_toml` functions and
//! released with the matching `*_free`. Strings returned to the caller are
//! released with [`chd_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use chandiff::cli::{cmd_eval, cmd_pack, cmd_sample, cmd_train, RunConfig};
use chandiff::diffusion::{
    model_from_container, sample_guided, sample_unconditional, schedule_from_container, ChannelMask, Guidance,
    NoiseSchedule,
};
use chandiff::denoiser::DenoiserModel;
use chandiff::eval::{inception_score, MetricReport};
use chandiff::numerics::{Container, Rng, Tensor};
use chandiff::Error;

/// Result codes shared by every entry point.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Format = 4,
    Io = 5,
    Numeric = 6,
    Panic = 7,
}

/// Guided sampling schemes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChdGuidance {
    Random = 0,
    Predicted = 1,
    Constant = 2,
}

/// A resolved run configuration.
pub struct ChdConfig {
    inner: RunConfig,
}

/// A trained denoiser together with the noise schedule it was trained on.
pub struct ChdModel {
    model: DenoiserModel,
    schedule: NoiseSchedule,
}

/// An evaluation report.
pub struct ChdReport {
    inner: MetricReport,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> ChdStatus {
    match e {
        Error::InvalidArgument(_) | Error::Shape { .. } => ChdStatus::InvalidArgument,
        Error::Config(_) => ChdStatus::Config,
        Error::Format { .. } | Error::Truncated { .. } | Error::Data(_) => ChdStatus::Format,
        Error::Io { .. } => ChdStatus::Io,
        Error::NonFinite { .. }
        | Error::NonFiniteGradient { .. }
        | Error::NonFiniteLoss { .. }
        | Error::NonFiniteState { .. } => ChdStatus::Numeric,
    }
}

enum Failure {
    Engine(Error),
    Null(&'static str),
    Arg(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Engine(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> ChdStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ChdStatus::Ok,
        Ok(Err(Failure::Engine(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("null pointer passed for `{what}`"));
            ChdStatus::NullPointer
        }
        Ok(Err(Failure::Arg(msg))) => {
            set_error(msg);
            ChdStatus::InvalidArgument
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            ChdStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Failure::Arg(format!("`{what}` is not valid UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(what))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or(Failure::Null(what))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &'static str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_out<'a, T>(p: *mut T, len: usize, what: &'static str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

fn into_c_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).expect("interior nul removed").into_raw()
}

/// Message for the most recent failure on this thread, or NULL. The pointer is
/// valid until the next call into the library on the same thread.
#[no_mangle]
pub extern "C" fn chd_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn chd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Release a string returned by this library. NULL is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn chd_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Parse a TOML run configuration and apply `n_overrides` `key=value` overrides.
///
/// # Safety
/// `toml` must be a NUL-terminated string, `overrides` an array of
/// `n_overrides` such strings (or NULL when zero), and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn chd_config_from_toml(
    toml: *const c_char,
    overrides: *const *const c_char,
    n_overrides: usize,
    out: *mut *mut ChdConfig,
) -> ChdStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let text = str_arg(toml, "toml")?;
        let raw = slice_arg(overrides, n_overrides, "overrides")?;
        let sets = raw.iter().map(|&p| str_arg(p, "override").map(str::to_string)).collect::<Result<Vec<_>, _>>()?;
        let inner = RunConfig::from_toml(text, &sets)?;
        *out = Box::into_raw(Box::new(ChdConfig { inner }));
        Ok(())
    })
}

/// Load a run configuration file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn chd_config_load(path: *const c_char, out: *mut *mut ChdConfig) -> ChdStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let inner = RunConfig::load(&PathBuf::from(str_arg(path, "path")?), &[])?;
        *out = Box::into_raw(Box::new(ChdConfig { inner }));
        Ok(())
    })
}

/// The fully resolved configuration as TOML; free with [`chd_string_free`].
///
/// # Safety
/// `cfg` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn chd_config_resolved(cfg: *const ChdConfig, out: *mut *mut c_char) -> ChdStatus {
    guard(|| {
        let cfg = ref_arg(cfg, "cfg")?;
        *out_arg(out, "out")? = into_c_string(cfg.inner.resolved());
        Ok(())
    })
}

/// # Safety
/// `cfg` must be NULL or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn chd_config_free(cfg: *mut ChdConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Build and cache the packed dataset; writes the lowercase hex sha256 of the
/// cache into `digest_out` (65 bytes including the NUL) when non-NULL.
///
/// # Safety
/// `cfg` must be a live handle; `digest_out` NULL or at least 65 bytes.
#[no_mangle]
pub unsafe extern "C" fn chd_pack(cfg: *const ChdConfig, digest_out: *mut c_char) -> ChdStatus {
    guard(|| {
        let cfg = ref_arg(cfg, "cfg")?;
        let out = cmd_pack(&cfg.inner)?;
        if !digest_out.is_null() {
            let bytes = out.digest.as_bytes();
            let dst = std::slice::from_raw_parts_mut(digest_out.cast::<u8>(), bytes.len() + 1);
            dst[..bytes.len()].copy_from_slice(bytes);
            dst[bytes.len()] = 0;
        }
        Ok(())
    })
}

/// Train classifiers and the denoiser; the final loss goes to `final_loss`
/// when non-NULL.
///
/// # Safety
/// `cfg` must be a live handle; `final_loss` NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn chd_train(cfg: *const ChdConfig, final_loss: *mut f64) -> ChdStatus {
    guard(|| {
        let cfg = ref_arg(cfg, "cfg")?;
        let out = cmd_train(&cfg.inner, None)?;
        if let Some(l) = final_loss.as_mut() {
            *l = out.final_loss;
        }
        Ok(())
    })
}

/// Run every configured sampling run from the final checkpoint.
///
/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn chd_sample(cfg: *const ChdConfig) -> ChdStatus {
    guard(|| {
        cmd_sample(&ref_arg(cfg, "cfg")?.inner, None, None)?;
        Ok(())
    })
}

/// Score the sample dumps; release the report with [`chd_report_free`].
///
/// # Safety
/// `cfg` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn chd_eval(cfg: *const ChdConfig, out: *mut *mut ChdReport) -> ChdStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let inner = cmd_eval(&ref_arg(cfg, "cfg")?.inner)?;
        *out = Box::into_raw(Box::new(ChdReport { inner }));
        Ok(())
    })
}

/// Macro-level value of `metric` for `modality`.
///
/// # Safety
/// `report` must be a live handle, the names NUL-terminated and `value` writable.
#[no_mangle]
pub unsafe extern "C" fn chd_report_get(
    report: *const ChdReport,
    metric: *const c_char,
    modality: *const c_char,
    value: *mut f64,
) -> ChdStatus {
    guard(|| {
        let r = ref_arg(report, "report")?;
        let (m, md) = (str_arg(metric, "metric")?, str_arg(modality, "modality")?);
        let v = r.inner.get(m, md).ok_or_else(|| Failure::Arg(format!("no metric `{m}` for `{md}`")))?;
        *out_arg(value, "value")? = v;
        Ok(())
    })
}

/// The report as CSV text; free with [`chd_string_free`].
///
/// # Safety
/// `report` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn chd_report_csv(report: *const ChdReport, out: *mut *mut c_char) -> ChdStatus {
    guard(|| {
        let r = ref_arg(report, "report")?;
        *out_arg(out, "out")? = into_c_string(r.inner.to_csv());
        Ok(())
    })
}

/// # Safety
/// `report` must be NULL or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn chd_report_free(report: *mut ChdReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}

/// Load a denoiser and its schedule from a training checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn chd_model_load(path: *const c_char, out: *mut *mut ChdModel) -> ChdStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let c = Container::read(&PathBuf::from(str_arg(path, "path")?))?;
        let model = model_from_container(&c)?;
        let schedule = schedule_from_container(&c)?;
        *out = Box::into_raw(Box::new(ChdModel { model, schedule }));
        Ok(())
    })
}

/// # Safety
/// `model` must be NULL or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn chd_model_free(model: *mut ChdModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Input channel count and number of diffusion steps of a loaded model.
///
/// # Safety
/// `model` must be a live handle; the outputs NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn chd_model_info(model: *const ChdModel, channels: *mut usize, timesteps: *mut usize) -> ChdStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        if let Some(c) = channels.as_mut() {
            *c = m.model.config().in_channels;
        }
        if let Some(t) = timesteps.as_mut() {
            *t = m.schedule.timesteps();
        }
        Ok(())
    })
}

fn dims_len(dims: [usize; 4]) -> Result<usize, Failure> {
    dims.iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| Failure::Arg("tensor size overflows".into()))
}

/// Predicted noise for `x` (`[n, c, h, w]`, row-major) at per-sample steps `ts`
/// (length `n`); writes `n*c*h*w` values to `out`.
///
/// # Safety
/// `x` and `out` must hold `n*c*h*w` doubles and `ts` `n` entries.
#[no_mangle]
pub unsafe extern "C" fn chd_model_predict_noise(
    model: *const ChdModel,
    x: *const f64,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    ts: *const usize,
    out: *mut f64,
) -> ChdStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let len = dims_len([n, c, h, w])?;
        let xt = Tensor::new(vec![n, c, h, w], slice_arg(x, len, "x")?.to_vec())?;
        let eps = m.model.predict_noise(&xt, slice_arg(ts, n, "ts")?)?;
        slice_out(out, len, "out")?.copy_from_slice(eps.data());
        Ok(())
    })
}

/// Generate `n` samples of every channel from noise; writes `n*C*h*w` values.
///
/// # Safety
/// `out` must hold `n*C*h*w` doubles, where `C` is the model's channel count.
#[no_mangle]
pub unsafe extern "C" fn chd_model_sample_joint(
    model: *const ChdModel,
    n: usize,
    h: usize,
    w: usize,
    seed: u64,
    out: *mut f64,
) -> ChdStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let c = m.model.config().in_channels;
        let len = dims_len([n, c, h, w])?;
        let x = sample_unconditional(&m.model, &m.schedule, &[n, c, h, w], &mut Rng::new(seed, 0))?;
        slice_out(out, len, "out")?.copy_from_slice(x.data());
        Ok(())
    })
}

/// Generate the channels not listed in `guiding` conditioned on `condition`
/// (`[n, n_guiding, h, w]`); writes `n*(C - n_guiding)*h*w` values in
/// ascending channel order.
///
/// # Safety
/// `guiding` must hold `n_guiding` indices, `condition` `n*n_guiding*h*w`
/// doubles and `out` `n*(C - n_guiding)*h*w` doubles.
#[no_mangle]
pub unsafe extern "C" fn chd_model_sample_guided(
    model: *const ChdModel,
    scheme: ChdGuidance,
    guiding: *const usize,
    n_guiding: usize,
    condition: *const f64,
    n: usize,
    h: usize,
    w: usize,
    seed: u64,
    out: *mut f64,
) -> ChdStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let total = m.model.config().in_channels;
        let guide = slice_arg(guiding, n_guiding, "guiding")?.to_vec();
        let gen: Vec<usize> = (0..total).filter(|c| !guide.contains(c)).collect();
        let mask = ChannelMask::new(gen.clone(), guide, total)?;
        let cond = Tensor::new(
            vec![n, n_guiding, h, w],
            slice_arg(condition, dims_len([n, n_guiding, h, w])?, "condition")?.to_vec(),
        )?;
        let scheme = match scheme {
            ChdGuidance::Random => Guidance::Random,
            ChdGuidance::Predicted => Guidance::Predicted,
            ChdGuidance::Constant => Guidance::Constant,
        };
        let x = sample_guided(&m.model, &m.schedule, &mask, &cond, scheme, &mut Rng::new(seed, 0), None)?;
        slice_out(out, dims_len([n, gen.len(), h, w])?, "out")?.copy_from_slice(x.data());
        Ok(())
    })
}

/// Inception-style score of `n` probability rows over `k` classes.
///
/// # Safety
/// `probs` must hold `n*k` doubles; `mean` and `std` must be writable.
#[no_mangle]
pub unsafe extern "C" fn chd_inception_score(
    probs: *const f64,
    n: usize,
    k: usize,
    splits: usize,
    mean: *mut f64,
    std: *mut f64,
) -> ChdStatus {
    guard(|| {
        let len = n.checked_mul(k).ok_or_else(|| Failure::Arg("tensor size overflows".into()))?;
        let p = Tensor::new(vec![n, k], slice_arg(probs, len, "probs")?.to_vec())?;
        let (m, s) = inception_score(&p, splits)?;
        *out_arg(mean, "mean")? = m;
        *out_arg(std, "std")? = s;
        Ok(())
    })
}
