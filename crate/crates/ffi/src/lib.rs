//! C ABI over the captioning model.
//!
//! Every fallible call returns a [`RetcapStatus`]; on failure the message is
//! kept per thread and read back with [`retcap_last_error`]. Models are
//! opaque [`RetcapModel`] handles. Strings returned by the library belong to
//! the caller and are released with [`retcap_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::ptr;

use retcap::metrics::MetricReport;
use retcap::pipeline::checkpoint::{checkpoint_id, Checkpoint};
use retcap::pipeline::text::normalize;
use retcap::tensor::{gten, Tensor};
use retcap::vision::{export_gate_map, GateMap};
use retcap::Error;

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RetcapStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Format = 4,
    Config = 5,
    /// Shape, index or length of an input is wrong.
    Shape = 6,
    Contract = 7,
    Numeric = 8,
    Panic = 9,
}

impl From<&Error> for RetcapStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Io { .. } => RetcapStatus::Io,
            Error::Parse { .. } | Error::Format(_) | Error::Json(_) => RetcapStatus::Format,
            Error::Config(_) => RetcapStatus::Config,
            Error::Shape { .. }
            | Error::InvalidShape { .. }
            | Error::Index { .. }
            | Error::Length { .. } => RetcapStatus::Shape,
            Error::NonFinite { .. } | Error::Diverged { .. } => RetcapStatus::Numeric,
            _ => RetcapStatus::Contract,
        }
    }
}

/// A loaded checkpoint.
pub struct RetcapModel {
    ckpt: Checkpoint,
    id: String,
}

/// Corpus scores of a set of captions.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RetcapScores {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub cider: f64,
    pub rouge_l: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("NUL bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(RetcapStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(RetcapStatus::from(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> RetcapStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            RetcapStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside retcap".into());
            RetcapStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(
            RetcapStatus::NullArgument,
            format!("{what} is null"),
        ));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(RetcapStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn model_arg<'a>(p: *const RetcapModel) -> Result<&'a RetcapModel, Failure> {
    p.as_ref()
        .ok_or_else(|| Failure(RetcapStatus::NullArgument, "model is null".into()))
}

fn null_out(what: &str) -> Failure {
    Failure(RetcapStatus::NullArgument, format!("{what} is null"))
}

fn into_c_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " "))
        .expect("NUL bytes removed")
        .into_raw()
}

fn load_visual(path: &Path) -> Result<Tensor<f32>, Failure> {
    Ok(gten::read(path)?.into_tensor())
}

impl RetcapModel {
    fn keywords(&self, text: &str) -> Vec<u32> {
        self.ckpt.vocab.encode(&normalize(text))
    }

    fn caption(
        &self,
        visual: &Tensor<f32>,
        keywords: &str,
        beam: usize,
    ) -> Result<String, Failure> {
        let ids =
            self.ckpt
                .model
                .generate(&self.ckpt.store, visual, &self.keywords(keywords), beam)?;
        Ok(self.ckpt.vocab.decode(&ids).join(" "))
    }
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next call into the library on the same thread.
#[no_mangle]
pub extern "C" fn retcap_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn retcap_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint into `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn retcap_model_load(
    path: *const c_char,
    out: *mut *mut RetcapModel,
) -> RetcapStatus {
    guard(|| {
        let path = PathBuf::from(str_arg(path, "path")?);
        if out.is_null() {
            return Err(null_out("out"));
        }
        let ckpt = Checkpoint::load(&path)?;
        let id = checkpoint_id(&path)?;
        *out = Box::into_raw(Box::new(RetcapModel { ckpt, id }));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`retcap_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn retcap_model_free(model: *mut RetcapModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Vocabulary size, or 0 for a null model.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn retcap_model_vocab_size(model: *const RetcapModel) -> usize {
    model.as_ref().map_or(0, |m| m.ckpt.vocab.len())
}

/// Number of `f32` values the model expects per visual input, or 0 for a
/// null model.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn retcap_model_input_len(model: *const RetcapModel) -> usize {
    model
        .as_ref()
        .map_or(0, |m| m.ckpt.config.visual_shape().iter().product())
}

/// Captions the GTEN tensor at `image_path`. `beam` 1 is greedy decoding.
/// On success `*out` holds a string to release with [`retcap_string_free`].
///
/// # Safety
/// `model` must be a live handle, the strings NUL-terminated and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn retcap_generate(
    model: *const RetcapModel,
    image_path: *const c_char,
    keywords: *const c_char,
    beam: usize,
    out: *mut *mut c_char,
) -> RetcapStatus {
    guard(|| {
        let m = model_arg(model)?;
        let visual = load_visual(Path::new(str_arg(image_path, "image_path")?))?;
        let kw = str_arg(keywords, "keywords")?;
        if out.is_null() {
            return Err(null_out("out"));
        }
        *out = into_c_string(m.caption(&visual, kw, beam)?);
        Ok(())
    })
}

/// Like [`retcap_generate`] but reads the input from memory: `len` values in
/// row-major `[H, W, C]` order, `len` equal to [`retcap_model_input_len`].
///
/// # Safety
/// `data` must point to `len` readable floats; see [`retcap_generate`].
#[no_mangle]
pub unsafe extern "C" fn retcap_generate_from_data(
    model: *const RetcapModel,
    data: *const f32,
    len: usize,
    keywords: *const c_char,
    beam: usize,
    out: *mut *mut c_char,
) -> RetcapStatus {
    guard(|| {
        let m = model_arg(model)?;
        if data.is_null() {
            return Err(null_out("data"));
        }
        let kw = str_arg(keywords, "keywords")?;
        if out.is_null() {
            return Err(null_out("out"));
        }
        let values = std::slice::from_raw_parts(data, len).to_vec();
        let visual = Tensor::new(m.ckpt.config.visual_shape(), values)?;
        *out = into_c_string(m.caption(&visual, kw, beam)?);
        Ok(())
    })
}

/// Writes the GCA gate of one input as an 8-bit PGM at `pgm_path`.
///
/// # Safety
/// `model` must be a live handle and the strings NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn retcap_export_gate(
    model: *const RetcapModel,
    image_path: *const c_char,
    keywords: *const c_char,
    pgm_path: *const c_char,
) -> RetcapStatus {
    guard(|| {
        let m = model_arg(model)?;
        let image = Path::new(str_arg(image_path, "image_path")?);
        let kw = str_arg(keywords, "keywords")?;
        let pgm = Path::new(str_arg(pgm_path, "pgm_path")?);
        let visual = load_visual(image)?;
        let gate = m.ckpt.model.gate(&m.ckpt.store, &visual, &m.keywords(kw))?;
        let sample = image
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        export_gate_map(&GateMap::from_tensor(&gate, &sample, &m.id)?, pgm)?;
        Ok(())
    })
}

/// Scores `n` hypothesis captions against one reference each. Captions are
/// tokenized by the same normalization used for training data.
///
/// # Safety
/// `hyps` and `refs` must each point to `n` NUL-terminated strings and
/// `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn retcap_score(
    hyps: *const *const c_char,
    refs: *const *const c_char,
    n: usize,
    out: *mut RetcapScores,
) -> RetcapStatus {
    guard(|| {
        if hyps.is_null() || refs.is_null() {
            return Err(null_out("caption array"));
        }
        if out.is_null() {
            return Err(null_out("out"));
        }
        let words = |arr: *const *const c_char, what: &str| -> Result<Vec<Vec<String>>, Failure> {
            (0..n)
                .map(|i| Ok(normalize(str_arg(*arr.add(i), what)?)))
                .collect()
        };
        let h = words(hyps, "hypothesis")?;
        let r = words(refs, "reference")?;
        let ids: Vec<String> = (0..n).map(|i| i.to_string()).collect();
        let rep = MetricReport::compute(&ids, &h, &r)?;
        *out = RetcapScores {
            bleu1: rep.bleu1,
            bleu2: rep.bleu2,
            bleu3: rep.bleu3,
            bleu4: rep.bleu4,
            cider: rep.cider,
            rouge_l: rep.rouge_l,
        };
        Ok(())
    })
}

/// Releases a string returned by the library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn retcap_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
