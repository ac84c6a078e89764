//! C interface to stationflow.
//!
//! Checkpoints and flow series are exposed as opaque handles. Every fallible
//! call returns an [`SfStatus`]; on failure the message is available from
//! [`sf_last_error`] on the same thread until the next failing call.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::fs::File;
use std::io::BufReader;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use ndarray::Array2;
use stationflow::graphs::{self, GraphKind, StationGraph};
use stationflow::ingest::{Channel, Coord, FlowSeries};
use stationflow::network::Checkpoint;
use stationflow::uncertainty;
use stationflow::{Error, ErrorCategory};

/// Result codes. Nonzero codes 2 to 6 match the command-line exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SfStatus {
    Ok = 0,
    /// Null pointer, bad length or out-of-range index.
    InvalidArgument = 1,
    Schema = 2,
    Data = 3,
    Divergence = 4,
    Config = 5,
    Io = 6,
    /// A Rust panic was caught at the boundary.
    Internal = 7,
}

/// A loaded model checkpoint.
pub struct SfCheckpoint(Checkpoint);

/// A loaded hourly flow series.
pub struct SfFlows(FlowSeries);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).expect("nul bytes removed"));
}

fn status_of(err: &Error) -> SfStatus {
    match err.category() {
        ErrorCategory::Schema => SfStatus::Schema,
        ErrorCategory::Data => SfStatus::Data,
        ErrorCategory::Divergence => SfStatus::Divergence,
        ErrorCategory::Config => SfStatus::Config,
        ErrorCategory::Io => SfStatus::Io,
    }
}

enum Fail {
    Arg(String),
    Lib(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

fn arg<T>(msg: &str) -> Result<T, Fail> {
    Err(Fail::Arg(msg.to_string()))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> SfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SfStatus::Ok,
        Ok(Err(Fail::Arg(m))) => {
            set_error(m);
            SfStatus::InvalidArgument
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal error");
            SfStatus::Internal
        }
    }
}

unsafe fn path_arg(path: *const c_char) -> Result<PathBuf, Fail> {
    if path.is_null() {
        return arg("path is null");
    }
    match CStr::from_ptr(path).to_str() {
        Ok(s) => Ok(PathBuf::from(s)),
        Err(_) => arg("path is not valid UTF-8"),
    }
}

unsafe fn slice_arg<'a>(data: *const f64, len: usize, what: &str) -> Result<&'a [f64], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if data.is_null() {
        return Err(Fail::Arg(format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(data, len))
}

unsafe fn out_arg<'a>(data: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], Fail> {
    if data.is_null() {
        return Err(Fail::Arg(format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts_mut(data, len))
}

fn open(path: &PathBuf) -> Result<BufReader<File>, Fail> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Fail::Lib(Error::io(path, e)))
}

/// Message of the last failed call on this thread. Never null; empty when
/// no call has failed. Valid until the next failing call on this thread.
#[no_mangle]
pub extern "C" fn sf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Great-circle distance in meters between two coordinates in degrees.
#[no_mangle]
pub extern "C" fn sf_haversine(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    graphs::haversine_distance(Coord::new(lat1, lon1), Coord::new(lat2, lon2))
}

/// Pearson correlation of two series of length `n`; 0 for a constant series.
///
/// # Safety
/// `x` and `y` must point to `n` readable values and `out` to one writable
/// value.
#[no_mangle]
pub unsafe extern "C" fn sf_pearson(x: *const f64, y: *const f64, n: usize, out: *mut f64) -> SfStatus {
    guard(|| {
        let x = slice_arg(x, n, "x")?;
        let y = slice_arg(y, n, "y")?;
        let out = out_arg(out, 1, "out")?;
        out[0] = graphs::pearson(x, y)?;
        Ok(())
    })
}

/// Writes `D⁻¹A + I` of the row-major `n × n` matrix `adjacency` into `out`.
///
/// # Safety
/// `adjacency` must point to `n·n` readable values and `out` to `n·n`
/// writable values; they may not overlap.
#[no_mangle]
pub unsafe extern "C" fn sf_normalize_adjacency(adjacency: *const f64, n: usize, out: *mut f64) -> SfStatus {
    guard(|| {
        let len = n.checked_mul(n).ok_or_else(|| Fail::Arg("n is too large".into()))?;
        let a = slice_arg(adjacency, len, "adjacency")?;
        let out = out_arg(out, len, "out")?;
        let m = Array2::from_shape_vec((n, n), a.to_vec()).map_err(|e| Fail::Arg(e.to_string()))?;
        let g = graphs::normalize_adjacency(&StationGraph::new(GraphKind::Distance, m)?)?;
        out.copy_from_slice(g.adjacency.as_slice().expect("standard layout"));
        Ok(())
    })
}

/// Interval `point ± z·√(σ₁² + σ₂²)` with the lower bound floored at zero.
///
/// # Safety
/// `lo` and `hi` must each point to one writable value.
#[no_mangle]
pub unsafe extern "C" fn sf_confidence_interval(
    point: f64,
    sigma_model: f64,
    sigma_noise: f64,
    alpha: f64,
    lo: *mut f64,
    hi: *mut f64,
) -> SfStatus {
    guard(|| {
        let lo = out_arg(lo, 1, "lo")?;
        let hi = out_arg(hi, 1, "hi")?;
        let iv = uncertainty::confidence_interval(point, sigma_model, sigma_noise, alpha)?;
        lo[0] = iv.lo;
        hi[0] = iv.hi;
        Ok(())
    })
}

/// Loads a checkpoint file. On success `*out` owns a handle to release with
/// [`sf_checkpoint_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn sf_checkpoint_load(path: *const c_char, out: *mut *mut SfCheckpoint) -> SfStatus {
    guard(|| {
        if out.is_null() {
            return arg("out is null");
        }
        *out = ptr::null_mut();
        let path = path_arg(path)?;
        let ckpt = Checkpoint::read(open(&path)?)?;
        *out = Box::into_raw(Box::new(SfCheckpoint(ckpt)));
        Ok(())
    })
}

/// Releases a checkpoint handle. Null is ignored.
///
/// # Safety
/// `handle` must come from [`sf_checkpoint_load`] and not be used again.
#[no_mangle]
pub unsafe extern "C" fn sf_checkpoint_free(handle: *mut SfCheckpoint) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Shape of the model: stations, history hours, flow channels and context
/// features. Any output pointer may be null.
///
/// # Safety
/// `handle` must be a live checkpoint handle.
#[no_mangle]
pub unsafe extern "C" fn sf_checkpoint_shape(
    handle: *const SfCheckpoint,
    stations: *mut usize,
    history: *mut usize,
    channels: *mut usize,
    context_width: *mut usize,
) -> SfStatus {
    guard(|| {
        let Some(h) = handle.as_ref() else {
            return arg("checkpoint handle is null");
        };
        let hp = &h.0.hyper;
        for (p, v) in [
            (stations, hp.stations),
            (history, hp.history),
            (channels, hp.channels),
            (context_width, hp.context_width),
        ] {
            if !p.is_null() {
                *p = v;
            }
        }
        Ok(())
    })
}

unsafe fn window(
    ckpt: &Checkpoint,
    history: *const f64,
    context: *const f64,
) -> Result<stationflow::network::WindowBatch, Fail> {
    let h = &ckpt.hyper;
    let snap = h.stations * h.channels;
    let raw = slice_arg(history, h.history * snap, "history")?;
    let ctx = slice_arg(context, h.context_width, "context")?;
    let snaps = raw
        .chunks(snap)
        .map(|c| Array2::from_shape_vec((h.stations, h.channels), c.to_vec()).expect("chunk size"))
        .collect::<Vec<_>>();
    Ok(ckpt.window_from_raw(&snaps, ctx)?)
}

/// Deterministic forecast for the hour after a window.
///
/// `history` holds `history × stations × channels` raw counts, oldest hour
/// first, row-major; `context` holds the raw context features of the target
/// hour. `out` receives `stations × channels` forecasts clamped at zero.
///
/// # Safety
/// Buffers must have the sizes above; `handle` must be live.
#[no_mangle]
pub unsafe extern "C" fn sf_checkpoint_predict(
    handle: *const SfCheckpoint,
    history: *const f64,
    context: *const f64,
    out: *mut f64,
) -> SfStatus {
    guard(|| {
        let Some(h) = handle.as_ref() else {
            return arg("checkpoint handle is null");
        };
        let batch = window(&h.0, history, context)?;
        let y = h.0.predict(&batch)?;
        out_arg(out, y.len(), "out")?.copy_from_slice(y.as_slice().expect("standard layout"));
        Ok(())
    })
}

/// Forecast with intervals from `iterations` Monte Carlo dropout passes and
/// the checkpoint's noise level. Inputs as for [`sf_checkpoint_predict`];
/// `point`, `lo` and `hi` each receive `stations × channels` values.
///
/// # Safety
/// Buffers must have the sizes above; `handle` must be live.
#[no_mangle]
pub unsafe extern "C" fn sf_checkpoint_predict_interval(
    handle: *const SfCheckpoint,
    history: *const f64,
    context: *const f64,
    iterations: usize,
    seed: u64,
    alpha: f64,
    point: *mut f64,
    lo: *mut f64,
    hi: *mut f64,
) -> SfStatus {
    guard(|| {
        let Some(h) = handle.as_ref() else {
            return arg("checkpoint handle is null");
        };
        let ckpt = &h.0;
        let batch = window(ckpt, history, context)?;
        let mc = uncertainty::mc_dropout_predict(ckpt, &batch, iterations, seed)?;
        let center = mc.mean.mapv(|v| v.max(0.0));
        let set = uncertainty::interval_set(
            &center,
            &mc.sigma,
            &ckpt.noise_sigma,
            alpha,
            uncertainty::Components::COMBINED,
        )?;
        let n = center.len();
        out_arg(point, n, "point")?.copy_from_slice(center.as_slice().expect("standard layout"));
        out_arg(lo, n, "lo")?.copy_from_slice(set.lo.as_slice().expect("standard layout"));
        out_arg(hi, n, "hi")?.copy_from_slice(set.hi.as_slice().expect("standard layout"));
        Ok(())
    })
}

/// Loads a flow blob written by the ingest stage. On success `*out` owns a
/// handle to release with [`sf_flows_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn sf_flows_load(path: *const c_char, out: *mut *mut SfFlows) -> SfStatus {
    guard(|| {
        if out.is_null() {
            return arg("out is null");
        }
        *out = ptr::null_mut();
        let path = path_arg(path)?;
        let (flows, _) = FlowSeries::read_blob(open(&path)?)?;
        *out = Box::into_raw(Box::new(SfFlows(flows)));
        Ok(())
    })
}

/// Releases a flow handle. Null is ignored.
///
/// # Safety
/// `handle` must come from [`sf_flows_load`] and not be used again.
#[no_mangle]
pub unsafe extern "C" fn sf_flows_free(handle: *mut SfFlows) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Station and hour counts of a flow series. Either output may be null.
///
/// # Safety
/// `handle` must be a live flow handle.
#[no_mangle]
pub unsafe extern "C" fn sf_flows_shape(handle: *const SfFlows, stations: *mut usize, hours: *mut usize) -> SfStatus {
    guard(|| {
        let Some(f) = handle.as_ref() else {
            return arg("flow handle is null");
        };
        if !stations.is_null() {
            *stations = f.0.stations();
        }
        if !hours.is_null() {
            *hours = f.0.hours();
        }
        Ok(())
    })
}

/// Count for `hour`, `station` and `channel` (0 inflow, 1 outflow).
///
/// # Safety
/// `handle` must be a live flow handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sf_flows_get(
    handle: *const SfFlows,
    hour: usize,
    station: usize,
    channel: u32,
    out: *mut u32,
) -> SfStatus {
    guard(|| {
        let Some(f) = handle.as_ref() else {
            return arg("flow handle is null");
        };
        if out.is_null() {
            return arg("out is null");
        }
        let ch = match channel {
            0 => Channel::Inflow,
            1 => Channel::Outflow,
            _ => return arg("channel must be 0 or 1"),
        };
        if hour >= f.0.hours() || station >= f.0.stations() {
            return arg("hour or station out of range");
        }
        *out = f.0.get(hour, station, ch);
        Ok(())
    })
}

/// Start of the first hour as seconds since the Unix epoch, reading the
/// local wall-clock time as UTC.
///
/// # Safety
/// `handle` must be a live flow handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sf_flows_start(handle: *const SfFlows, out: *mut i64) -> SfStatus {
    guard(|| {
        let Some(f) = handle.as_ref() else {
            return arg("flow handle is null");
        };
        if out.is_null() {
            return arg("out is null");
        }
        *out = f.0.start_hour().and_utc().timestamp();
        Ok(())
    })
}
