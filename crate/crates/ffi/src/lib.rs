//! C ABI over the `stgnn` library.
//!
//! Objects cross the boundary as opaque handles created by a `*_new` /
//! `*_load` function and released by the matching `*_free`. Every fallible
//! function returns an [`StgnnStatus`]; on failure a description of the
//! last error on the calling thread is available from
//! [`stgnn_last_error_message`].
//!
//! Signals are dense `double` arrays of `nodes × horizon × features`
//! values, node-major: entry `(n, t, f)` lives at `(n·horizon + t)·features + f`.
//!
//! No function unwinds across the boundary; a Rust panic is caught and
//! reported as [`StgnnStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use stgnn::graph::{res_sample, Graph, GsoKind, ResConfig, ShiftOperator};
use stgnn::spacetime::{SpaceTimeSignal, TimeShiftMode, TimeShiftOperator};
use stgnn::stgf::{apply_generalized_stgf, apply_stgf, estimate_c_l, FilterTaps, LambdaRange};
use stgnn::stgnn::{model_forward, Model};
use stgnn::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StgnnStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    Numeric = 4,
    Io = 5,
    Panic = 6,
}

/// Kind of graph shift operator.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StgnnGsoKind {
    Adjacency = 0,
    Laplacian = 1,
}

/// Boundary handling of the time shift.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StgnnTimeShift {
    Circulant = 0,
    ZeroPad = 1,
}

/// Opaque graph shift operator.
pub struct StgnnGso(ShiftOperator);

/// Opaque filter taps.
pub struct StgnnFilter(FilterTaps);

/// Opaque trained network.
pub struct StgnnModel(Model);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> StgnnStatus {
    match err {
        Error::DimensionMismatch { .. } | Error::OrderMismatch { .. } => {
            StgnnStatus::DimensionMismatch
        }
        Error::EigenConvergence { .. }
        | Error::Divergence { .. }
        | Error::NonFinitePrediction { .. } => StgnnStatus::Numeric,
        Error::Io(_) | Error::Format(_) | Error::Parse { .. } => StgnnStatus::Io,
        _ => StgnnStatus::InvalidArgument,
    }
}

/// Runs `f`, translating errors and panics into a status.
fn guard(f: impl FnOnce() -> Result<(), (StgnnStatus, String)>) -> StgnnStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => StgnnStatus::Ok,
        Ok(Err((status, message))) => {
            set_error(message);
            status
        }
        Err(_) => {
            set_error("panic inside stgnn".into());
            StgnnStatus::Panic
        }
    }
}

trait OrStatus<T> {
    fn or_status(self) -> Result<T, (StgnnStatus, String)>;
}

impl<T> OrStatus<T> for stgnn::Result<T> {
    fn or_status(self) -> Result<T, (StgnnStatus, String)> {
        self.map_err(|e| (status_of(&e), e.to_string()))
    }
}

fn null(what: &str) -> (StgnnStatus, String) {
    (StgnnStatus::NullPointer, format!("{what} is null"))
}

unsafe fn slice<'a, T>(
    p: *const T,
    len: usize,
    what: &str,
) -> Result<&'a [T], (StgnnStatus, String)> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(
    p: *mut T,
    len: usize,
    what: &str,
) -> Result<&'a mut [T], (StgnnStatus, String)> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, (StgnnStatus, String)> {
    p.as_ref().ok_or_else(|| null(what))
}

fn checked_len(
    nodes: usize,
    horizon: usize,
    features: usize,
) -> Result<usize, (StgnnStatus, String)> {
    nodes
        .checked_mul(horizon)
        .and_then(|v| v.checked_mul(features))
        .ok_or((StgnnStatus::InvalidArgument, "signal size overflows".into()))
}

fn signal(
    data: &[f64],
    nodes: usize,
    horizon: usize,
    features: usize,
) -> Result<SpaceTimeSignal, (StgnnStatus, String)> {
    SpaceTimeSignal::from_vec(nodes, horizon, features, data.to_vec()).or_status()
}

fn tso(horizon: usize, mode: StgnnTimeShift) -> Result<TimeShiftOperator, (StgnnStatus, String)> {
    let mode = match mode {
        StgnnTimeShift::Circulant => TimeShiftMode::Circulant,
        StgnnTimeShift::ZeroPad => TimeShiftMode::ZeroPadDelay,
    };
    TimeShiftOperator::new(horizon, mode).or_status()
}

fn write_out(y: &SpaceTimeSignal, out: &mut [f64]) -> Result<(), (StgnnStatus, String)> {
    if out.len() != y.data().len() {
        return Err((
            StgnnStatus::DimensionMismatch,
            format!(
                "output buffer holds {} values, result has {}",
                out.len(),
                y.data().len()
            ),
        ));
    }
    out.copy_from_slice(y.data());
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn stgnn_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (always
/// NUL-terminated when `len > 0`, truncated if needed). Returns the full
/// message length in bytes excluding the terminator, 0 if there is none.
///
/// # Safety
/// `buf` must be valid for `len` bytes or null with `len == 0`.
#[no_mangle]
pub unsafe extern "C" fn stgnn_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else {
            if !buf.is_null() && len > 0 {
                *buf = 0;
            }
            return 0;
        };
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Builds an operator on `node_count` nodes from `edge_count` undirected
/// edges given as index pairs `edges[2i], edges[2i+1]` with weights
/// `weights[i]` (all 1 when `weights` is null).
///
/// # Safety
/// `edges` must hold `2·edge_count` values, `weights` `edge_count` values
/// or be null, and `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn stgnn_gso_from_edges(
    node_count: usize,
    edges: *const usize,
    weights: *const f64,
    edge_count: usize,
    kind: StgnnGsoKind,
    out: *mut *mut StgnnGso,
) -> StgnnStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let pairs = slice(edges, 2 * edge_count, "edges")?;
        let w = if weights.is_null() {
            None
        } else {
            Some(slice(weights, edge_count, "weights")?)
        };
        let mut graph = Graph::new(node_count).or_status()?;
        for i in 0..edge_count {
            let weight = w.map_or(1.0, |w| w[i]);
            graph
                .add_edge(pairs[2 * i], pairs[2 * i + 1], weight)
                .or_status()?;
        }
        let kind = match kind {
            StgnnGsoKind::Adjacency => GsoKind::Adjacency,
            StgnnGsoKind::Laplacian => GsoKind::Laplacian,
        };
        *out = Box::into_raw(Box::new(StgnnGso(ShiftOperator::from_graph(&graph, kind))));
        Ok(())
    })
}

/// Random edge sampling: keeps every edge of `gso` with probability `p`.
///
/// # Safety
/// `gso` must come from this library and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn stgnn_gso_sample(
    gso: *const StgnnGso,
    probability: f64,
    seed: u64,
    out: *mut *mut StgnnGso,
) -> StgnnStatus {
    guard(|| {
        let s = &handle(gso, "gso")?.0;
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = ResConfig::new(probability, seed).or_status()?;
        let sampled = ShiftOperator::from_graph(&res_sample(s.source(), &cfg), s.kind());
        *out = Box::into_raw(Box::new(StgnnGso(sampled)));
        Ok(())
    })
}

/// Node count of `gso`, 0 for null.
///
/// # Safety
/// `gso` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn stgnn_gso_node_count(gso: *const StgnnGso) -> usize {
    gso.as_ref().map_or(0, |g| g.0.node_count())
}

/// Copies the dense `N × N` operator into `out` (row-major, `len == N²`).
///
/// # Safety
/// `gso` must come from this library; `out` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn stgnn_gso_matrix(
    gso: *const StgnnGso,
    out: *mut f64,
    len: usize,
) -> StgnnStatus {
    guard(|| {
        let m = handle(gso, "gso")?.0.matrix();
        let n = m.nrows();
        let dst = slice_mut(out, len, "out")?;
        if len != n * n {
            return Err((
                StgnnStatus::DimensionMismatch,
                format!("need {} values, got {len}", n * n),
            ));
        }
        for i in 0..n {
            for j in 0..n {
                dst[i * n + j] = m[(i, j)];
            }
        }
        Ok(())
    })
}

/// Releases an operator. Null is ignored.
///
/// # Safety
/// `gso` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn stgnn_gso_free(gso: *mut StgnnGso) {
    if !gso.is_null() {
        drop(Box::from_raw(gso));
    }
}

/// Filter with taps `h_0, …, h_K` (`len = K + 1`).
///
/// # Safety
/// `taps` must hold `len` values and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn stgnn_filter_new(
    taps: *const f64,
    len: usize,
    out: *mut *mut StgnnFilter,
) -> StgnnStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let h = FilterTaps::new(slice(taps, len, "taps")?.to_vec()).or_status()?;
        *out = Box::into_raw(Box::new(StgnnFilter(h)));
        Ok(())
    })
}

/// Filter order `K`, 0 for null.
///
/// # Safety
/// `filter` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn stgnn_filter_order(filter: *const StgnnFilter) -> usize {
    filter.as_ref().map_or(0, |f| f.0.order())
}

/// Releases a filter. Null is ignored.
///
/// # Safety
/// `filter` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn stgnn_filter_free(filter: *mut StgnnFilter) {
    if !filter.is_null() {
        drop(Box::from_raw(filter));
    }
}

/// `Y = Σ_k h_k S^k X C^k` for a signal of `nodes × horizon × features`.
/// `y` must have the same length as `x`.
///
/// # Safety
/// Handles must come from this library; `x` and `y` must hold
/// `nodes·horizon·features` values.
#[no_mangle]
pub unsafe extern "C" fn stgnn_filter_apply(
    filter: *const StgnnFilter,
    gso: *const StgnnGso,
    time_shift: StgnnTimeShift,
    x: *const f64,
    nodes: usize,
    horizon: usize,
    features: usize,
    y: *mut f64,
) -> StgnnStatus {
    guard(|| {
        let h = &handle(filter, "filter")?.0;
        let s = &handle(gso, "gso")?.0;
        let len = checked_len(nodes, horizon, features)?;
        let input = signal(slice(x, len, "x")?, nodes, horizon, features)?;
        let out = apply_stgf(&input, s, &tso(horizon, time_shift)?, h).or_status()?;
        write_out(&out, slice_mut(y, len, "y")?)
    })
}

/// `Ỹ = Σ_k h_k S_k⋯S_1 X C^k` over the sequence `sequence[0..K]`
/// (`S_1` first).
///
/// # Safety
/// As [`stgnn_filter_apply`]; `sequence` must hold `sequence_len` handles.
#[no_mangle]
pub unsafe extern "C" fn stgnn_filter_apply_sequence(
    filter: *const StgnnFilter,
    sequence: *const *const StgnnGso,
    sequence_len: usize,
    time_shift: StgnnTimeShift,
    x: *const f64,
    nodes: usize,
    horizon: usize,
    features: usize,
    y: *mut f64,
) -> StgnnStatus {
    guard(|| {
        let h = &handle(filter, "filter")?.0;
        let seq = slice(sequence, sequence_len, "sequence")?
            .iter()
            .map(|&g| handle(g, "sequence entry").map(|g| &g.0))
            .collect::<Result<Vec<_>, _>>()?;
        let len = checked_len(nodes, horizon, features)?;
        let input = signal(slice(x, len, "x")?, nodes, horizon, features)?;
        let out =
            apply_generalized_stgf(&input, &seq, &tso(horizon, time_shift)?, h).or_status()?;
        write_out(&out, slice_mut(y, len, "y")?)
    })
}

/// Integral-Lipschitz constant of `filter` over `[lambda_min, lambda_max]`.
///
/// # Safety
/// `filter` must come from this library; `c_l` must be valid.
#[no_mangle]
pub unsafe extern "C" fn stgnn_filter_c_l(
    filter: *const StgnnFilter,
    lambda_min: f64,
    lambda_max: f64,
    omega_samples: usize,
    c_l: *mut f64,
) -> StgnnStatus {
    guard(|| {
        let h = &handle(filter, "filter")?.0;
        if c_l.is_null() {
            return Err(null("c_l"));
        }
        let range = LambdaRange::new(lambda_min, lambda_max).or_status()?;
        *c_l = estimate_c_l(h, range, omega_samples).or_status()?.c_l;
        Ok(())
    })
}

/// Loads a model directory written by `stgnn train`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn stgnn_model_load(
    path: *const c_char,
    out: *mut *mut StgnnModel,
) -> StgnnStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = CStr::from_ptr(path).to_str().map_err(|_| {
            (
                StgnnStatus::InvalidArgument,
                "path is not UTF-8".to_string(),
            )
        })?;
        let model = Model::load(path).or_status()?;
        *out = Box::into_raw(Box::new(StgnnModel(model)));
        Ok(())
    })
}

/// Input and output feature counts of `model`.
///
/// # Safety
/// `model` must come from this library; the out-pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn stgnn_model_shape(
    model: *const StgnnModel,
    input_features: *mut usize,
    output_features: *mut usize,
) -> StgnnStatus {
    guard(|| {
        let m = &handle(model, "model")?.0;
        if input_features.is_null() || output_features.is_null() {
            return Err(null("output pointer"));
        }
        *input_features = m.config().input_features;
        *output_features = m.config().readout_features;
        Ok(())
    })
}

/// Network output on a fixed operator. `y` holds
/// `nodes·horizon·output_features` values.
///
/// # Safety
/// Handles must come from this library; buffers must have the stated
/// lengths.
#[no_mangle]
pub unsafe extern "C" fn stgnn_model_forward(
    model: *const StgnnModel,
    gso: *const StgnnGso,
    time_shift: StgnnTimeShift,
    x: *const f64,
    nodes: usize,
    horizon: usize,
    y: *mut f64,
    y_len: usize,
) -> StgnnStatus {
    guard(|| {
        let m = &handle(model, "model")?.0;
        let s = &handle(gso, "gso")?.0;
        let fin = m.config().input_features;
        let input = signal(
            slice(x, checked_len(nodes, horizon, fin)?, "x")?,
            nodes,
            horizon,
            fin,
        )?;
        let out = model_forward(&input, s, &tso(horizon, time_shift)?, m).or_status()?;
        write_out(&out, slice_mut(y, y_len, "y")?)
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn stgnn_model_free(model: *mut StgnnModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
