//! C interface to `spikegno`.
//!
//! Handles are opaque pointers owned by the caller and released with the
//! matching `*_free` function. Every fallible call returns a
//! [`SpikegnoStatus`]; the message of the most recent failure on the calling
//! thread is available from [`spikegno_last_error_message`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use spikegno::datagen::{read_dataset, Dataset, ReadMode};
use spikegno::linalg::Mat;
use spikegno::operator::{read_checkpoint, CheckpointKind, OperatorContext, VsGnoModel};
use spikegno::training::relative_l2;
use spikegno::Error;

/// Result codes shared by every function.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpikegnoStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Incompatible = 5,
    Numeric = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

/// A dataset read from disk in physical units.
pub struct SpikegnoDataset {
    inner: Dataset,
}

/// A trained model bound to the mesh of a dataset.
pub struct SpikegnoPredictor {
    model: VsGnoModel,
    ctx: OperatorContext,
    dataset: Dataset,
}

thread_local! {
    static LAST_ERROR: RefCell<Vec<u8>> = const { RefCell::new(Vec::new()) };
}

fn set_last_error(msg: &str) {
    LAST_ERROR.with(|e| {
        let mut e = e.borrow_mut();
        e.clear();
        e.extend(msg.bytes().filter(|&b| b != 0));
    });
}

fn status_of(e: &Error) -> SpikegnoStatus {
    match e {
        Error::Io(_) => SpikegnoStatus::Io,
        Error::Format { .. } | Error::ChecksumMismatch { .. } => SpikegnoStatus::Format,
        Error::Config(_) | Error::EmptyDataset | Error::InvalidK { .. } => SpikegnoStatus::InvalidArgument,
        Error::Incompatible(_)
        | Error::ShapeMismatch(_)
        | Error::GateMisaligned { .. }
        | Error::WrongMode(_)
        | Error::MissingComponent(_) => SpikegnoStatus::Incompatible,
        _ => SpikegnoStatus::Numeric,
    }
}

fn fail(status: SpikegnoStatus, msg: &str) -> SpikegnoStatus {
    set_last_error(msg);
    status
}

/// Runs `f`, records any error and turns panics into `Panic`.
fn guard(f: impl FnOnce() -> Result<(), SpikegnoStatus>) -> SpikegnoStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error("");
            SpikegnoStatus::Ok
        }
        Ok(Err(s)) => s,
        Err(_) => fail(SpikegnoStatus::Panic, "internal panic"),
    }
}

fn lift<T>(r: spikegno::Result<T>) -> Result<T, SpikegnoStatus> {
    r.map_err(|e| fail(status_of(&e), &e.to_string()))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, SpikegnoStatus> {
    if p.is_null() {
        return Err(fail(SpikegnoStatus::NullPointer, "path is null"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(SpikegnoStatus::InvalidArgument, "path is not valid UTF-8"))?;
    Ok(PathBuf::from(s))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], SpikegnoStatus> {
    if p.is_null() {
        return Err(fail(SpikegnoStatus::NullPointer, &format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_slice<'a>(p: *mut f64, len: usize, need: usize, what: &str) -> Result<&'a mut [f64], SpikegnoStatus> {
    if p.is_null() {
        return Err(fail(SpikegnoStatus::NullPointer, &format!("{what} is null")));
    }
    if len < need {
        return Err(fail(
            SpikegnoStatus::BufferTooSmall,
            &format!("{what} holds {len} values, {need} required"),
        ));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn spikegno_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to fit) and returns the full message length in bytes.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn spikegno_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = e.len().min(len - 1);
            ptr::copy_nonoverlapping(e.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        e.len()
    })
}

/// Opens a dataset directory written by `spikegno generate`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn spikegno_dataset_open(path: *const c_char, out: *mut *mut SpikegnoDataset) -> SpikegnoStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(SpikegnoStatus::NullPointer, "out is null"));
        }
        *out = ptr::null_mut();
        let dir = path_arg(path)?;
        let inner = lift(read_dataset(&dir, ReadMode::Raw))?;
        *out = Box::into_raw(Box::new(SpikegnoDataset { inner }));
        Ok(())
    })
}

/// # Safety
/// `ds` must be null or a handle from [`spikegno_dataset_open`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn spikegno_dataset_free(ds: *mut SpikegnoDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Node count, channel count, input length and sample count.
///
/// # Safety
/// `ds` must be a live handle; each output pointer may be null.
#[no_mangle]
pub unsafe extern "C" fn spikegno_dataset_dims(
    ds: *const SpikegnoDataset,
    n: *mut usize,
    k: *mut usize,
    q: *mut usize,
    count: *mut usize,
) -> SpikegnoStatus {
    guard(|| {
        let ds = ds
            .as_ref()
            .ok_or_else(|| fail(SpikegnoStatus::NullPointer, "dataset is null"))?;
        let m = &ds.inner.meta;
        for (p, v) in [(n, m.n), (k, m.k), (q, m.q), (count, m.count)] {
            if !p.is_null() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Copies sample `index` into `input` (length q) and `output` (n x k,
/// row-major), both in physical units. Either buffer may be null.
///
/// # Safety
/// Non-null buffers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn spikegno_dataset_sample(
    ds: *const SpikegnoDataset,
    index: usize,
    input: *mut f64,
    input_len: usize,
    output: *mut f64,
    output_len: usize,
) -> SpikegnoStatus {
    guard(|| {
        let ds = ds
            .as_ref()
            .ok_or_else(|| fail(SpikegnoStatus::NullPointer, "dataset is null"))?;
        let s = ds.inner.samples().get(index).ok_or_else(|| {
            fail(
                SpikegnoStatus::InvalidArgument,
                &format!("sample {index} out of range for {} samples", ds.inner.meta.count),
            )
        })?;
        if !input.is_null() {
            out_slice(input, input_len, s.input.len(), "input")?[..s.input.len()].copy_from_slice(&s.input);
        }
        if !output.is_null() {
            let src = s.output.as_slice();
            out_slice(output, output_len, src.len(), "output")?[..src.len()].copy_from_slice(src);
        }
        Ok(())
    })
}

/// Loads a model checkpoint and binds it to the mesh of `ds`. The dataset is
/// copied, so `ds` may be freed afterwards.
///
/// # Safety
/// `checkpoint` must be a NUL-terminated string, `ds` a live handle and `out`
/// a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn spikegno_predictor_new(
    checkpoint: *const c_char,
    ds: *const SpikegnoDataset,
    out: *mut *mut SpikegnoPredictor,
) -> SpikegnoStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(SpikegnoStatus::NullPointer, "out is null"));
        }
        *out = ptr::null_mut();
        let ds = ds
            .as_ref()
            .ok_or_else(|| fail(SpikegnoStatus::NullPointer, "dataset is null"))?;
        let ck = lift(read_checkpoint(&path_arg(checkpoint)?))?;
        if ck.kind != CheckpointKind::Model {
            return Err(fail(SpikegnoStatus::Incompatible, "checkpoint holds no model parameters"));
        }
        let meta = &ds.inner.meta;
        if ck.config.input_dim != meta.q || ck.config.output_channels != meta.k || ck.config.coord_dim != 2 {
            return Err(fail(
                SpikegnoStatus::Incompatible,
                &format!(
                    "checkpoint expects q = {}, k = {}; dataset has q = {}, k = {}",
                    ck.config.input_dim, ck.config.output_channels, meta.q, meta.k
                ),
            ));
        }
        let graph = lift(ds.inner.mesh.graph())?;
        if ck.config.modes > graph.n() {
            return Err(fail(
                SpikegnoStatus::Incompatible,
                &format!("checkpoint uses {} modes on a {}-node graph", ck.config.modes, graph.n()),
            ));
        }
        let ctx = lift(OperatorContext::new(graph, ck.config.modes))?;
        let model = lift(ck.into_model())?;
        lift(model.check_context(&ctx))?;
        *out = Box::into_raw(Box::new(SpikegnoPredictor {
            model,
            ctx,
            dataset: ds.inner.clone(),
        }));
        Ok(())
    })
}

/// # Safety
/// `p` must be null or a handle from [`spikegno_predictor_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn spikegno_predictor_free(p: *mut SpikegnoPredictor) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Predicts the dense field for one physical input of length q and writes it
/// to `output` as n x k row-major physical values.
///
/// # Safety
/// `input` must be valid for `input_len` values and `output` for
/// `output_len` values.
#[no_mangle]
pub unsafe extern "C" fn spikegno_predict(
    p: *const SpikegnoPredictor,
    input: *const f64,
    input_len: usize,
    output: *mut f64,
    output_len: usize,
) -> SpikegnoStatus {
    guard(|| {
        let p = p
            .as_ref()
            .ok_or_else(|| fail(SpikegnoStatus::NullPointer, "predictor is null"))?;
        let x = slice_arg(input, input_len, "input")?;
        let norm = p.dataset.normalization();
        let pred = lift(norm.normalize_input(x).and_then(|u| p.model.predict(&p.ctx, &u)))?;
        let phys = lift(norm.denormalize_output(&pred.output))?;
        let src = phys.as_slice();
        out_slice(output, output_len, src.len(), "output")?[..src.len()].copy_from_slice(src);
        Ok(())
    })
}

/// Per-channel relative L2 error of `pred` against `truth` (both n x k
/// row-major) and its channel mean.
///
/// # Safety
/// `pred` and `truth` must be valid for `n * k` values, `per_channel` for `k`
/// values (or null) and `mean` a valid pointer (or null).
#[no_mangle]
pub unsafe extern "C" fn spikegno_relative_l2(
    pred: *const f64,
    truth: *const f64,
    n: usize,
    k: usize,
    per_channel: *mut f64,
    mean: *mut f64,
) -> SpikegnoStatus {
    guard(|| {
        let len = n
            .checked_mul(k)
            .ok_or_else(|| fail(SpikegnoStatus::InvalidArgument, "n * k overflows"))?;
        let p = lift(Mat::from_vec(n, k, slice_arg(pred, len, "pred")?.to_vec()))?;
        let t = lift(Mat::from_vec(n, k, slice_arg(truth, len, "truth")?.to_vec()))?;
        let (per, m) = lift(relative_l2(&p, &t))?;
        if !per_channel.is_null() {
            std::slice::from_raw_parts_mut(per_channel, k).copy_from_slice(&per);
        }
        if !mean.is_null() {
            *mean = m;
        }
        Ok(())
    })
}
