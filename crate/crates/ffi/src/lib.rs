//! C ABI over the posterior, flow and metric parts of `pfedpf`.
//!
//! Every fallible function returns a [`PfStatus`]; on failure a message is
//! available from [`pf_last_error`] on the same thread. Handles are opaque and
//! must be released with their `_free` function. Panics never cross the
//! boundary: they are reported as `PF_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use pfedpf::federation::aggregate_gaussians;
use pfedpf::flows::{FlowPosterior, FlowStack, RadialLayer};
use pfedpf::laplace::{
    mc_predict, probit, read_posterior, write_posterior, GaussianPosterior, MAX_POSTERIOR_DIM,
};
use pfedpf::metrics::{aupr, auroc, ece, fpr_at_95_tpr, Orientation, PredictionBatch, ScoreSet};
use pfedpf::numerics::{Matrix, RngStream};
use pfedpf::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    NotPositiveDefinite = 4,
    Io = 5,
    Format = 6,
    Panic = 7,
}

/// Gaussian posterior over flattened classifier parameters.
pub struct PfPosterior(GaussianPosterior);

/// Stack of radial flow layers.
pub struct PfFlow(FlowStack);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> PfStatus {
    match e {
        Error::DimensionMismatch { .. } | Error::PosteriorTooLarge { .. } => {
            PfStatus::DimensionMismatch
        }
        Error::NotPositiveDefinite { .. } | Error::DegenerateHessian => {
            PfStatus::NotPositiveDefinite
        }
        Error::Io(_) => PfStatus::Io,
        Error::BadMagic { .. } | Error::TruncatedFile(_) | Error::ChecksumMismatch { .. } => {
            PfStatus::Format
        }
        _ => PfStatus::InvalidArgument,
    }
}

struct Fail(PfStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

impl From<std::io::Error> for Fail {
    fn from(e: std::io::Error) -> Self {
        Fail(PfStatus::Io, e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(PfStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(PfStatus::InvalidArgument, msg.into())
}

/// Runs `f`, translating errors and panics into a status.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> PfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PfStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            PfStatus::Panic
        }
    }
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a>(p: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn path<'a>(p: *const c_char) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid("path is not UTF-8"))
}

unsafe fn out_ptr<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("output handle"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

fn expect_len(len: usize, expected: usize) -> Result<(), Fail> {
    if len == expected {
        Ok(())
    } else {
        Err(Fail(
            PfStatus::DimensionMismatch,
            format!("buffer length {len}, expected {expected}"),
        ))
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread. Valid until the next
/// failing call on the same thread; empty if nothing failed yet.
#[no_mangle]
pub extern "C" fn pf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Builds a posterior from a mean of length `dim` and a row-major
/// `dim × dim` covariance.
///
/// # Safety
/// `mean` and `covariance` must point to `dim` and `dim * dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn pf_posterior_new(
    mean: *const f64,
    covariance: *const f64,
    dim: usize,
    out: *mut *mut PfPosterior,
) -> PfStatus {
    guard(|| {
        if dim == 0 || dim > MAX_POSTERIOR_DIM {
            return Err(invalid(format!("dimension {dim} out of range")));
        }
        let mean = slice(mean, dim, "mean")?.to_vec();
        let cov = Matrix::from_vec(
            dim,
            dim,
            slice(covariance, dim * dim, "covariance")?.to_vec(),
        )?;
        out_ptr(
            out,
            PfPosterior(GaussianPosterior::from_covariance(mean, cov)?),
        )
    })
}

/// Reads a posterior checkpoint. When the file carries a flow and `flow_out`
/// is non-null, a flow handle is stored there; otherwise `*flow_out` is set
/// to null.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pf_posterior_load(
    path_c: *const c_char,
    out: *mut *mut PfPosterior,
    flow_out: *mut *mut PfFlow,
) -> PfStatus {
    guard(|| {
        let p = path(path_c)?;
        let ckpt = read_posterior(&mut BufReader::new(File::open(p)?))?;
        if !flow_out.is_null() {
            *flow_out = match ckpt.flow {
                Some(f) => Box::into_raw(Box::new(PfFlow(f))),
                None => ptr::null_mut(),
            };
        }
        out_ptr(out, PfPosterior(ckpt.posterior))
    })
}

/// Writes a posterior checkpoint, with `flow` appended when non-null.
///
/// # Safety
/// `posterior` must be a live handle; `flow` null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pf_posterior_save(
    posterior: *const PfPosterior,
    flow: *const PfFlow,
    prior_precision: f64,
    path_c: *const c_char,
) -> PfStatus {
    guard(|| {
        let post = &handle(posterior, "posterior")?.0;
        let flow = flow.as_ref().map(|f| &f.0);
        let mut w = BufWriter::new(File::create(path(path_c)?)?);
        write_posterior(&mut w, post, prior_precision, flow)?;
        w.flush()?;
        Ok(())
    })
}

/// Dimension of the posterior, or 0 for a null handle.
///
/// # Safety
/// `posterior` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pf_posterior_dim(posterior: *const PfPosterior) -> usize {
    posterior.as_ref().map_or(0, |p| p.0.dim())
}

/// Copies the mean into `out` (`len` must equal the dimension).
///
/// # Safety
/// `out` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn pf_posterior_mean(
    posterior: *const PfPosterior,
    out: *mut f64,
    len: usize,
) -> PfStatus {
    guard(|| {
        let post = &handle(posterior, "posterior")?.0;
        expect_len(len, post.dim())?;
        slice_mut(out, len, "out")?.copy_from_slice(post.mean());
        Ok(())
    })
}

/// Copies the row-major covariance into `out` (`len` must be dim²).
///
/// # Safety
/// `out` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn pf_posterior_covariance(
    posterior: *const PfPosterior,
    out: *mut f64,
    len: usize,
) -> PfStatus {
    guard(|| {
        let post = &handle(posterior, "posterior")?.0;
        expect_len(len, post.dim() * post.dim())?;
        slice_mut(out, len, "out")?.copy_from_slice(post.covariance().data());
        Ok(())
    })
}

/// # Safety
/// `posterior` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pf_posterior_free(posterior: *mut PfPosterior) {
    if !posterior.is_null() {
        drop(Box::from_raw(posterior));
    }
}

/// Moment-matched Gaussian of the mixture `Σ wᵢ N(μᵢ, Σᵢ)`; weights must be
/// non-negative and sum to 1.
///
/// # Safety
/// `posteriors` and `weights` must point to `count` entries.
#[no_mangle]
pub unsafe extern "C" fn pf_aggregate(
    posteriors: *const *const PfPosterior,
    weights: *const f64,
    count: usize,
    out: *mut *mut PfPosterior,
) -> PfStatus {
    guard(|| {
        if count == 0 {
            return Err(invalid("nothing to aggregate"));
        }
        if posteriors.is_null() {
            return Err(null("posteriors"));
        }
        let handles = std::slice::from_raw_parts(posteriors, count);
        let refs = handles
            .iter()
            .map(|&p| handle(p, "posterior").map(|h| &h.0))
            .collect::<Result<Vec<_>, _>>()?;
        let agg = aggregate_gaussians(&refs, slice(weights, count, "weights")?)?;
        out_ptr(out, PfPosterior(agg))
    })
}

/// Monte Carlo predictive for one feature vector of length `feature_dim`,
/// written to `probs` (length = class count). `flow` may be null. Draws come
/// from a stream fixed by `seed`.
///
/// # Safety
/// Buffers must hold the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn pf_predict(
    posterior: *const PfPosterior,
    flow: *const PfFlow,
    features: *const f64,
    feature_dim: usize,
    samples: usize,
    seed: u64,
    probs: *mut f64,
    class_count: usize,
) -> PfStatus {
    guard(|| {
        let base = &handle(posterior, "posterior")?.0;
        expect_len(base.dim(), (feature_dim + 1) * class_count)?;
        let z = slice(features, feature_dim, "features")?;
        let mut rng = RngStream::new(seed, 0);
        let p = match flow.as_ref() {
            Some(f) => mc_predict(&FlowPosterior { base, flow: &f.0 }, z, samples, &mut rng)?,
            None => mc_predict(base, z, samples, &mut rng)?,
        };
        slice_mut(probs, class_count, "probs")?.copy_from_slice(&p);
        Ok(())
    })
}

/// Binary probit predictive `σ(f / √(1 + πs/8))`.
#[no_mangle]
pub extern "C" fn pf_probit(f: f64, s: f64) -> f64 {
    probit(f, s)
}

/// Builds a flow of `layers` radial layers in dimension `dim` from raw
/// parameters: `centres` is `layers × dim` row-major.
///
/// # Safety
/// Buffers must hold the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn pf_flow_new(
    centres: *const f64,
    alpha_raw: *const f64,
    beta_raw: *const f64,
    layers: usize,
    dim: usize,
    out: *mut *mut PfFlow,
) -> PfStatus {
    guard(|| {
        if dim == 0 && layers > 0 {
            return Err(invalid("flow dimension must be >= 1"));
        }
        let c = slice(centres, layers * dim, "centres")?;
        let a = slice(alpha_raw, layers, "alpha_raw")?;
        let b = slice(beta_raw, layers, "beta_raw")?;
        let layers = (0..layers)
            .map(|l| RadialLayer {
                x0: c[l * dim..(l + 1) * dim].to_vec(),
                alpha_raw: a[l],
                beta_raw: b[l],
            })
            .collect();
        out_ptr(out, PfFlow(FlowStack::new(layers)?))
    })
}

/// Number of layers, or 0 for a null handle.
///
/// # Safety
/// `flow` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pf_flow_len(flow: *const PfFlow) -> usize {
    flow.as_ref().map_or(0, |f| f.0.len())
}

/// `y = T(x)` and `log|det ∂T/∂x|`.
///
/// # Safety
/// `x` and `y` must hold `dim` doubles; `log_det` may be null.
#[no_mangle]
pub unsafe extern "C" fn pf_flow_forward(
    flow: *const PfFlow,
    x: *const f64,
    dim: usize,
    y: *mut f64,
    log_det: *mut f64,
) -> PfStatus {
    guard(|| {
        let f = &handle(flow, "flow")?.0;
        let (out, ld) = f.forward(slice(x, dim, "x")?)?;
        slice_mut(y, dim, "y")?.copy_from_slice(&out);
        if !log_det.is_null() {
            *log_det = ld;
        }
        Ok(())
    })
}

/// `x = T⁻¹(y)`.
///
/// # Safety
/// `y` and `x` must hold `dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn pf_flow_inverse(
    flow: *const PfFlow,
    y: *const f64,
    dim: usize,
    x: *mut f64,
) -> PfStatus {
    guard(|| {
        let f = &handle(flow, "flow")?.0;
        let out = f.inverse(slice(y, dim, "y")?)?;
        slice_mut(x, dim, "x")?.copy_from_slice(&out);
        Ok(())
    })
}

/// Log density at `phi` of the base posterior pushed through the flow.
///
/// # Safety
/// `phi` must hold `dim` doubles and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn pf_flow_log_density(
    flow: *const PfFlow,
    base: *const PfPosterior,
    phi: *const f64,
    dim: usize,
    out: *mut f64,
) -> PfStatus {
    guard(|| {
        let f = &handle(flow, "flow")?.0;
        let b = &handle(base, "base")?.0;
        expect_len(dim, b.dim())?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = f.pushforward_log_density(b, slice(phi, dim, "phi")?)?;
        Ok(())
    })
}

/// # Safety
/// `flow` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pf_flow_free(flow: *mut PfFlow) {
    if !flow.is_null() {
        drop(Box::from_raw(flow));
    }
}

unsafe fn detection(
    id: *const f64,
    n_id: usize,
    ood: *const f64,
    n_ood: usize,
    out: *mut f64,
    metric: fn(&ScoreSet) -> f64,
) -> PfStatus {
    guard(|| {
        let set = ScoreSet::new(
            slice(id, n_id, "id")?.to_vec(),
            slice(ood, n_ood, "ood")?.to_vec(),
            Orientation::HigherIsOod,
        )?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = metric(&set);
        Ok(())
    })
}

/// AUROC with OOD as the positive class; higher scores mean more OOD.
///
/// # Safety
/// `id` and `ood` must hold `n_id` and `n_ood` doubles.
#[no_mangle]
pub unsafe extern "C" fn pf_auroc(
    id: *const f64,
    n_id: usize,
    ood: *const f64,
    n_ood: usize,
    out: *mut f64,
) -> PfStatus {
    detection(id, n_id, ood, n_ood, out, auroc)
}

/// AUPR with OOD as the positive class; higher scores mean more OOD.
///
/// # Safety
/// As [`pf_auroc`].
#[no_mangle]
pub unsafe extern "C" fn pf_aupr(
    id: *const f64,
    n_id: usize,
    ood: *const f64,
    n_ood: usize,
    out: *mut f64,
) -> PfStatus {
    detection(id, n_id, ood, n_ood, out, aupr)
}

/// False-positive rate at 95% true-positive rate; higher scores mean more OOD.
///
/// # Safety
/// As [`pf_auroc`].
#[no_mangle]
pub unsafe extern "C" fn pf_fpr95(
    id: *const f64,
    n_id: usize,
    ood: *const f64,
    n_ood: usize,
    out: *mut f64,
) -> PfStatus {
    detection(id, n_id, ood, n_ood, out, fpr_at_95_tpr)
}

/// Expected calibration error over `bins` equal-width bins for `n` rows of
/// `class_count` probabilities (row-major) and their labels.
///
/// # Safety
/// `probs` must hold `n * class_count` doubles and `labels` `n` entries.
#[no_mangle]
pub unsafe extern "C" fn pf_ece(
    probs: *const f64,
    labels: *const usize,
    n: usize,
    class_count: usize,
    bins: usize,
    out: *mut f64,
) -> PfStatus {
    guard(|| {
        if bins == 0 {
            return Err(invalid("bins must be >= 1"));
        }
        let p = Matrix::from_vec(
            n,
            class_count,
            slice(probs, n * class_count, "probs")?.to_vec(),
        )?;
        let labels = if n == 0 {
            Vec::new()
        } else if labels.is_null() {
            return Err(null("labels"));
        } else {
            std::slice::from_raw_parts(labels, n).to_vec()
        };
        let batch = PredictionBatch::new(p, labels, None)?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ece(&batch, bins);
        Ok(())
    })
}
