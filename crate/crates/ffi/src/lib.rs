//! C ABI over the skilleval models.
//!
//! Every function returns an [`SkStatus`]. On failure a message for the
//! calling thread is available from [`sk_last_error`]. Handles are opaque and
//! must be released with the matching `*_free` function. Matrices are passed
//! row-major as `rows * cols` doubles.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use ndarray::ArrayView2;
use skilleval::action_unit::{au_forward, AuNetwork};
use skilleval::encoding::FvEncoder;
use skilleval::evaluation::{baseline_cosine, roc_auc, ScoredPair};
use skilleval::siamese::{ContrastiveLoss, PositiveTermForm, SiameseNetwork};
use skilleval::Error;

/// Result code of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SkStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Dimension = 5,
    Numeric = 6,
    Config = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

struct Failure(SkStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Config { .. } => SkStatus::Config,
            Error::Format { .. } => SkStatus::Format,
            Error::Io { .. } => SkStatus::Io,
            Error::Dimension { .. } => SkStatus::Dimension,
            Error::RankDeficient { .. } | Error::Numeric(_) => SkStatus::Numeric,
            Error::Invalid(_) | Error::Fold { .. } => SkStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(SkStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SkStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SkStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_error(message);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            SkStatus::Panic
        }
    }
}

fn path_arg(path: *const c_char) -> Result<PathBuf, Failure> {
    if path.is_null() {
        return Err(null("path"));
    }
    // SAFETY: caller passes a NUL-terminated string.
    let s = unsafe { CStr::from_ptr(path) }
        .to_str()
        .map_err(|_| Failure(SkStatus::InvalidArgument, "path is not valid UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

fn matrix<'a>(data: *const f64, rows: usize, cols: usize, what: &str) -> Result<ArrayView2<'a, f64>, Failure> {
    if data.is_null() {
        return Err(null(what));
    }
    let len = rows
        .checked_mul(cols)
        .ok_or_else(|| Failure(SkStatus::InvalidArgument, format!("{what}: size overflows")))?;
    // SAFETY: caller guarantees `rows * cols` readable doubles.
    let slice = unsafe { std::slice::from_raw_parts(data, len) };
    ArrayView2::from_shape((rows, cols), slice)
        .map_err(|e| Failure(SkStatus::InvalidArgument, format!("{what}: {e}")))
}

fn write_out(values: &[f64], out: *mut f64, out_len: usize) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("output buffer"));
    }
    if out_len < values.len() {
        return Err(Failure(
            SkStatus::BufferTooSmall,
            format!("output buffer holds {out_len} values, {} needed", values.len()),
        ));
    }
    // SAFETY: caller guarantees `out_len` writable doubles.
    unsafe { std::ptr::copy_nonoverlapping(values.as_ptr(), out, values.len()) };
    Ok(())
}

fn put<T>(out: *mut T, value: T, what: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null(what));
    }
    // SAFETY: checked non-null; caller owns the slot.
    unsafe { out.write(value) };
    Ok(())
}

fn handle<'a, T>(h: *const T, what: &str) -> Result<&'a T, Failure> {
    // SAFETY: handles come from the matching `*_load` and are not yet freed.
    unsafe { h.as_ref() }.ok_or_else(|| null(what))
}

/// Message of the last failed call on this thread, or NULL. The pointer is
/// valid until the next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn sk_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sk_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// PCA + GMM Fisher Vector encoder.
pub struct SkEncoder {
    inner: FvEncoder,
}

/// Action-unit LSTM classifier.
pub struct SkAuNetwork {
    inner: AuNetwork,
}

/// Siamese LSTM over action-unit feature lists.
pub struct SkSiamese {
    inner: SiameseNetwork,
}

/// Loads an encoder checkpoint. On success `*out` owns a new handle.
#[no_mangle]
pub extern "C" fn sk_encoder_load(path: *const c_char, out: *mut *mut SkEncoder) -> SkStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let inner = FvEncoder::load(&path_arg(path)?)?;
        put(out, Box::into_raw(Box::new(SkEncoder { inner })), "out")
    })
}

#[no_mangle]
pub extern "C" fn sk_encoder_free(encoder: *mut SkEncoder) {
    if !encoder.is_null() {
        // SAFETY: pointer came from `sk_encoder_load`.
        drop(unsafe { Box::from_raw(encoder) });
    }
}

#[no_mangle]
pub extern "C" fn sk_encoder_dims(encoder: *const SkEncoder, d_raw: *mut usize, fv_dim: *mut usize) -> SkStatus {
    guard(|| {
        let e = handle(encoder, "encoder")?;
        put(d_raw, e.inner.d_raw(), "d_raw")?;
        put(fv_dim, e.inner.fv_dim(), "fv_dim")
    })
}

/// Encodes `n_frames` raw frames of width `d_raw` into `out`
/// (`n_frames * fv_dim` doubles).
#[no_mangle]
pub extern "C" fn sk_encoder_encode(
    encoder: *const SkEncoder,
    frames: *const f64,
    n_frames: usize,
    d_raw: usize,
    out: *mut f64,
    out_len: usize,
) -> SkStatus {
    guard(|| {
        let e = handle(encoder, "encoder")?;
        let x = matrix(frames, n_frames, d_raw, "frames")?;
        let fv = e.inner.encode_sequence(x)?;
        write_out(fv.as_slice().expect("standard layout"), out, out_len)
    })
}

#[no_mangle]
pub extern "C" fn sk_au_load(path: *const c_char, out: *mut *mut SkAuNetwork) -> SkStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let inner = AuNetwork::load(&path_arg(path)?)?;
        put(out, Box::into_raw(Box::new(SkAuNetwork { inner })), "out")
    })
}

#[no_mangle]
pub extern "C" fn sk_au_free(net: *mut SkAuNetwork) {
    if !net.is_null() {
        // SAFETY: pointer came from `sk_au_load`.
        drop(unsafe { Box::from_raw(net) });
    }
}

#[no_mangle]
pub extern "C" fn sk_au_dims(
    net: *const SkAuNetwork,
    input_dim: *mut usize,
    feature_dim: *mut usize,
    num_classes: *mut usize,
) -> SkStatus {
    guard(|| {
        let n = handle(net, "network")?;
        put(input_dim, n.inner.input_dim(), "input_dim")?;
        put(feature_dim, n.inner.feature_dim(), "feature_dim")?;
        put(num_classes, n.inner.num_classes(), "num_classes")
    })
}

/// Runs one encoded segment (`steps * input_dim`). Writes the action-unit
/// feature (`feature_dim` doubles) to `feature` when it is non-NULL and the
/// predicted class to `class_id` when it is non-NULL.
#[no_mangle]
pub extern "C" fn sk_au_forward(
    net: *const SkAuNetwork,
    encoded: *const f64,
    steps: usize,
    input_dim: usize,
    feature: *mut f64,
    feature_len: usize,
    class_id: *mut usize,
) -> SkStatus {
    guard(|| {
        let n = handle(net, "network")?;
        let x = matrix(encoded, steps, input_dim, "encoded")?;
        let out = au_forward(&n.inner, x)?;
        if !feature.is_null() {
            write_out(out.feature.as_slice().expect("contiguous"), feature, feature_len)?;
        }
        if !class_id.is_null() {
            put(class_id, out.probabilities.argmax(), "class_id")?;
        }
        Ok(())
    })
}

#[no_mangle]
pub extern "C" fn sk_siamese_load(path: *const c_char, out: *mut *mut SkSiamese) -> SkStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let inner = SiameseNetwork::load(&path_arg(path)?)?;
        put(out, Box::into_raw(Box::new(SkSiamese { inner })), "out")
    })
}

#[no_mangle]
pub extern "C" fn sk_siamese_free(net: *mut SkSiamese) {
    if !net.is_null() {
        // SAFETY: pointer came from `sk_siamese_load`.
        drop(unsafe { Box::from_raw(net) });
    }
}

#[no_mangle]
pub extern "C" fn sk_siamese_dims(net: *const SkSiamese, input_dim: *mut usize, embed_dim: *mut usize) -> SkStatus {
    guard(|| {
        let n = handle(net, "network")?;
        put(input_dim, n.inner.input_dim(), "input_dim")?;
        put(embed_dim, n.inner.backbone.output_dim(), "embed_dim")
    })
}

/// Activity vector of one feature list (`n_units * input_dim`).
#[no_mangle]
pub extern "C" fn sk_siamese_embed(
    net: *const SkSiamese,
    features: *const f64,
    n_units: usize,
    input_dim: usize,
    out: *mut f64,
    out_len: usize,
) -> SkStatus {
    guard(|| {
        let n = handle(net, "network")?;
        let x = matrix(features, n_units, input_dim, "features")?;
        let e = n.inner.embed(x)?;
        write_out(e.0.as_slice().expect("contiguous"), out, out_len)
    })
}

/// Euclidean distance between the activity vectors of two feature lists;
/// the lists may have different lengths.
#[no_mangle]
pub extern "C" fn sk_siamese_distance(
    net: *const SkSiamese,
    a: *const f64,
    n_a: usize,
    b: *const f64,
    n_b: usize,
    input_dim: usize,
    distance: *mut f64,
) -> SkStatus {
    guard(|| {
        let n = handle(net, "network")?;
        let ea = n.inner.embed(matrix(a, n_a, input_dim, "a")?)?;
        let eb = n.inner.embed(matrix(b, n_b, input_dim, "b")?)?;
        put(distance, ea.distance(&eb), "distance")
    })
}

/// Contrastive loss and its derivative in `distance`. `squared` selects the
/// squared same-activity term instead of the linear one.
#[no_mangle]
pub extern "C" fn sk_contrastive_loss(
    distance: f64,
    label: u8,
    margin: f64,
    squared: bool,
    loss: *mut f64,
    d_loss: *mut f64,
) -> SkStatus {
    guard(|| {
        if label > 1 {
            return Err(Failure(SkStatus::InvalidArgument, format!("label must be 0 or 1, got {label}")));
        }
        if !(distance >= 0.0 && distance.is_finite()) || !(margin > 0.0 && margin.is_finite()) {
            return Err(Failure(SkStatus::InvalidArgument, "distance must be >= 0 and margin > 0".into()));
        }
        let form = if squared { PositiveTermForm::Squared } else { PositiveTermForm::PaperLinear };
        let (l, g) = ContrastiveLoss { margin, form }.eval(distance, label);
        put(loss, l, "loss")?;
        put(d_loss, g, "d_loss")
    })
}

/// ROC AUC of `n` scores (higher means more likely positive) with 0/1 labels.
#[no_mangle]
pub extern "C" fn sk_roc_auc(labels: *const u8, scores: *const f64, n: usize, auc: *mut f64) -> SkStatus {
    guard(|| {
        if labels.is_null() {
            return Err(null("labels"));
        }
        if scores.is_null() {
            return Err(null("scores"));
        }
        // SAFETY: caller guarantees `n` readable entries in each array.
        let (l, s) = unsafe { (std::slice::from_raw_parts(labels, n), std::slice::from_raw_parts(scores, n)) };
        let scored: Vec<ScoredPair> = l
            .iter()
            .zip(s)
            .map(|(&label, &score)| ScoredPair {
                inst_id: String::new(),
                user_id: String::new(),
                label,
                score,
            })
            .collect();
        put(auc, roc_auc(&scored)?.auc, "auc")
    })
}

/// Mean-pooled, power-normalized cosine similarity of two feature lists.
#[no_mangle]
pub extern "C" fn sk_baseline_cosine(
    a: *const f64,
    n_a: usize,
    b: *const f64,
    n_b: usize,
    dim: usize,
    alpha: f64,
    similarity: *mut f64,
) -> SkStatus {
    guard(|| {
        let s = baseline_cosine(matrix(a, n_a, dim, "a")?, matrix(b, n_b, dim, "b")?, alpha)?;
        put(similarity, s, "similarity")
    })
}
