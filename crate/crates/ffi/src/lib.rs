//! C interface to `glab`: load trained models behind an opaque handle and
//! run guided synthesis on planar RGB buffers.
//!
//! Every function returns a [`GlabStatus`]; on failure the message is kept
//! per thread and can be read with [`glab_last_error`].

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use glab::guidance::{Controls, GuidanceConfig, GuidePainting, Method, Models};
use glab::nets::{AutoencoderSpec, DenoiserSpec};
use glab::scenegen::{self, IMAGE_SIZE, VOCABULARY};
use glab::tensor::Tensor;
use glab::Error;

/// Number of values in an image buffer: 3 planes of 64×64, row-major.
pub const GLAB_IMAGE_LEN: usize = 3 * 64 * 64;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GlabStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    MissingFile = 4,
    Checkpoint = 5,
    Config = 6,
    Io = 7,
    Numeric = 8,
    Internal = 9,
    Panic = 10,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GlabMethod {
    Gradop = 0,
    GradopPlus = 1,
    Sdedit = 2,
    Loopback = 3,
    Ilvr = 4,
    Text = 5,
}

impl From<GlabMethod> for Method {
    fn from(m: GlabMethod) -> Self {
        match m {
            GlabMethod::Gradop => Method::GradOp,
            GlabMethod::GradopPlus => Method::GradOpPlus,
            GlabMethod::Sdedit => Method::SdEdit,
            GlabMethod::Loopback => Method::Loopback,
            GlabMethod::Ilvr => Method::Ilvr,
            GlabMethod::Text => Method::TextOnly,
        }
    }
}

/// Guidance settings; `painting` is 0 for gaussian, 1 for quantize.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GlabConfig {
    pub gamma: f64,
    pub lr: f64,
    pub steps: u32,
    pub t0: f64,
    pub t_start: f64,
    pub t_end: f64,
    pub cfg_scale: f64,
    pub loopback_iters: u32,
    pub loopback_k: f64,
    pub ilvr_factor: u32,
    pub painting: u32,
    pub seed: u64,
}

impl From<&GuidanceConfig> for GlabConfig {
    fn from(g: &GuidanceConfig) -> Self {
        Self {
            gamma: g.gamma,
            lr: g.lr,
            steps: g.steps as u32,
            t0: g.t0,
            t_start: g.t_start,
            t_end: g.t_end,
            cfg_scale: g.cfg_scale,
            loopback_iters: g.loopback_iters as u32,
            loopback_k: g.loopback_k,
            ilvr_factor: g.ilvr_factor as u32,
            painting: match g.painting {
                GuidePainting::Gaussian => 0,
                GuidePainting::Quantize => 1,
            },
            seed: g.seed,
        }
    }
}

impl TryFrom<&GlabConfig> for GuidanceConfig {
    type Error = Error;

    fn try_from(c: &GlabConfig) -> Result<Self, Error> {
        let painting = match c.painting {
            0 => GuidePainting::Gaussian,
            1 => GuidePainting::Quantize,
            p => return Err(Error::Config(format!("painting must be 0 or 1, got {p}"))),
        };
        let g = GuidanceConfig {
            gamma: c.gamma,
            lr: c.lr,
            steps: c.steps as usize,
            t0: c.t0,
            t_start: c.t_start,
            t_end: c.t_end,
            cfg_scale: c.cfg_scale,
            loopback_iters: c.loopback_iters as usize,
            loopback_k: c.loopback_k,
            ilvr_factor: c.ilvr_factor as usize,
            painting,
            seed: c.seed,
        };
        g.validate()?;
        Ok(g)
    }
}

/// Opaque handle to a loaded autoencoder and denoiser.
pub struct GlabModels(Models);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> GlabStatus {
    match e {
        Error::Shape { .. } | Error::Layout(_) => GlabStatus::Shape,
        Error::MissingFile(_) => GlabStatus::MissingFile,
        Error::Checkpoint(_) => GlabStatus::Checkpoint,
        Error::Config(_) => GlabStatus::Config,
        Error::Io(_) | Error::Image(_) | Error::Json(_) => GlabStatus::Io,
        Error::NonFinite(_) | Error::Diverged { .. } | Error::OptimizationNaN { .. } => GlabStatus::Numeric,
        Error::InvalidArgument(_)
        | Error::UnknownToken { .. }
        | Error::TimestepOutOfRange { .. }
        | Error::NonMonotoneTimesteps { .. }
        | Error::PromptOverflow { .. }
        | Error::ZeroMaskNorm(_) => GlabStatus::InvalidArgument,
        _ => GlabStatus::Internal,
    }
}

/// Runs `f`, translating errors and panics into a status.
fn guarded(f: impl FnOnce() -> Result<(), (GlabStatus, String)>) -> GlabStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => GlabStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside glab".into());
            GlabStatus::Panic
        }
    }
}

fn lib_err(e: Error) -> (GlabStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (GlabStatus, String) {
    (GlabStatus::NullPointer, format!("{what} is null"))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<std::path::PathBuf, (GlabStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| (GlabStatus::InvalidArgument, format!("{what} is not UTF-8")))?;
    Ok(s.into())
}

unsafe fn image_arg(p: *const f64, what: &str) -> Result<Tensor, (GlabStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    let data = unsafe { std::slice::from_raw_parts(p, GLAB_IMAGE_LEN) }.to_vec();
    Tensor::new(&[3, IMAGE_SIZE, IMAGE_SIZE], data).map_err(lib_err)
}

/// Copies the calling thread's last error message into `buf` (always
/// nul-terminated when `len > 0`) and returns the full message length.
#[no_mangle]
pub unsafe extern "C" fn glab_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let bytes = e.as_ref().map_or(&[][..], |c| c.as_bytes());
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            unsafe {
                std::ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, n);
                *buf.add(n) = 0;
            }
        }
        bytes.len()
    })
}

/// Library version and git description, static storage.
#[no_mangle]
pub extern "C" fn glab_version() -> *const c_char {
    static VERSION: std::sync::OnceLock<CString> = std::sync::OnceLock::new();
    VERSION
        .get_or_init(|| CString::new(format!("{} ({})", env!("CARGO_PKG_VERSION"), glab::config::GIT_DESCRIBE)).expect("no nul"))
        .as_ptr()
}

#[no_mangle]
pub extern "C" fn glab_vocabulary_size() -> usize {
    VOCABULARY.len()
}

/// Name of vocabulary entry `index` (0-based), or null when out of range.
#[no_mangle]
pub extern "C" fn glab_token_name(index: usize) -> *const c_char {
    static NAMES: std::sync::OnceLock<Vec<CString>> = std::sync::OnceLock::new();
    let names = NAMES.get_or_init(|| VOCABULARY.iter().map(|s| CString::new(*s).expect("no nul")).collect());
    names.get(index).map_or(std::ptr::null(), |c| c.as_ptr())
}

/// Writes the default guidance settings to `out`.
#[no_mangle]
pub unsafe extern "C" fn glab_config_default(out: *mut GlabConfig) -> GlabStatus {
    guarded(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        unsafe { *out = GlabConfig::from(&GuidanceConfig::default()) };
        Ok(())
    })
}

/// Loads checkpoints written by `glab train` (default network sizes).
#[no_mangle]
pub unsafe extern "C" fn glab_models_load(
    autoencoder_path: *const c_char,
    denoiser_path: *const c_char,
    out: *mut *mut GlabModels,
) -> GlabStatus {
    guarded(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let ae = unsafe { path_arg(autoencoder_path, "autoencoder_path") }?;
        let dn = unsafe { path_arg(denoiser_path, "denoiser_path") }?;
        let models = Models::load(ae, dn, AutoencoderSpec::default(), DenoiserSpec::default()).map_err(lib_err)?;
        unsafe { *out = Box::into_raw(Box::new(GlabModels(models))) };
        Ok(())
    })
}

/// Releases a handle from [`glab_models_load`]; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn glab_models_free(models: *mut GlabModels) {
    if !models.is_null() {
        drop(unsafe { Box::from_raw(models) });
    }
}

/// Synthesizes one image.
///
/// `painting` and `out_image` hold [`GLAB_IMAGE_LEN`] values in [0, 1];
/// `tokens` is an array of `n_tokens` nul-terminated token names. `config`
/// may be null for the defaults. `out_losses` (optional) receives up to
/// `losses_cap` loss values and `out_loss_count` the number produced.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn glab_synthesize(
    models: *const GlabModels,
    method: GlabMethod,
    painting: *const f64,
    tokens: *const *const c_char,
    n_tokens: usize,
    config: *const GlabConfig,
    out_image: *mut f64,
    out_losses: *mut f64,
    losses_cap: usize,
    out_loss_count: *mut usize,
) -> GlabStatus {
    guarded(|| {
        let models = unsafe { models.as_ref() }.ok_or_else(|| null("models"))?;
        if out_image.is_null() {
            return Err(null("out_image"));
        }
        let y = unsafe { image_arg(painting, "painting") }?;
        if tokens.is_null() && n_tokens > 0 {
            return Err(null("tokens"));
        }
        let names = (0..n_tokens)
            .map(|i| unsafe {
                let p = *tokens.add(i);
                if p.is_null() {
                    return Err(null("token"));
                }
                CStr::from_ptr(p).to_str().map(str::to_owned).map_err(|_| (GlabStatus::InvalidArgument, "token is not UTF-8".into()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let ids = scenegen::parse_tokens(&names).map_err(lib_err)?;
        let cfg = match unsafe { config.as_ref() } {
            Some(c) => GuidanceConfig::try_from(c).map_err(lib_err)?,
            None => GuidanceConfig::default(),
        };
        let r = models.0.synthesize(method.into(), &y, &ids, &cfg, Controls::default()).map_err(lib_err)?;
        unsafe { std::ptr::copy_nonoverlapping(r.image.data().as_ptr(), out_image, GLAB_IMAGE_LEN) };
        if !out_losses.is_null() {
            let n = r.losses.len().min(losses_cap);
            unsafe { std::ptr::copy_nonoverlapping(r.losses.as_ptr(), out_losses, n) };
        }
        if !out_loss_count.is_null() {
            unsafe { *out_loss_count = r.losses.len() };
        }
        Ok(())
    })
}

/// Faithfulness of `image` to `painting` on the 0–255 scale.
#[no_mangle]
pub unsafe extern "C" fn glab_faithfulness(image: *const f64, painting: *const f64, out: *mut f64) -> GlabStatus {
    guarded(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let x = unsafe { image_arg(image, "image") }?;
        let y = unsafe { image_arg(painting, "painting") }?;
        let f = glab::eval::faithfulness(&x, &y).map_err(lib_err)?;
        unsafe { *out = f };
        Ok(())
    })
}
