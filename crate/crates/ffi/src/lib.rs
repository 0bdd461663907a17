//! C interface to the grounding core.
//!
//! Conventions:
//! * Every fallible call returns a [`GrdStatus`]; on failure the message is
//!   available from [`grd_last_error`] on the same thread.
//! * Structured data crosses the boundary as UTF-8 JSON text, in the same
//!   schemas the command-line tool reads and writes.
//! * Strings returned through `char **out` are owned by the caller and must be
//!   released with [`grd_string_free`]. Handles are released with their
//!   `*_free` function. Passing NULL to a `*_free` function is a no-op.
//! * Panics never cross the boundary; they surface as `GRD_PANIC`.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use grounding::event_model::{ActorId, EventTuple};
use grounding::memory::{Episode, MemoryError};
use grounding::metrics::{self, MatchConfig};
use grounding::reasoner::{run_pipeline, PipelineConfig};
use grounding::simulator;
use grounding::stream_io::{
    parse_events, parse_frame_stream, parse_ground_truth, parse_registry, write_predictions,
    StreamError,
};
use grounding::trigger::{DebounceConfig, TriggerState};
use grounding::vlm_client::{OracleScript, ScriptedBackend};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GrdStatus {
    Ok = 0,
    /// A required pointer argument was NULL.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// Input text did not parse.
    Parse = 3,
    /// Input parsed but violates a rule (bad id, duplicate, bad parameter).
    InvalidInput = 4,
    /// File system failure.
    Io = 5,
    /// The reasoning backend failed.
    Backend = 6,
    /// Internal panic, caught at the boundary.
    Panic = 7,
}

/// Counts and scores of one matching.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GrdMatchSummary {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub precision: f64,
    pub recall: f64,
    pub gs: f64,
}

/// Opaque instance memory.
pub struct GrdMemory {
    episode: Episode,
}

/// Opaque action-change trigger.
pub struct GrdTrigger {
    state: TriggerState,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(GrdStatus, String);

type FfiResult<T> = Result<T, Failure>;

fn fail(status: GrdStatus, msg: impl ToString) -> Failure {
    Failure(status, msg.to_string())
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> FfiResult<()>) -> GrdStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => GrdStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            GrdStatus::Panic
        }
    }
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> FfiResult<&'a str> {
    if p.is_null() {
        return Err(fail(GrdStatus::NullArgument, format!("{what} is NULL")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(GrdStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn out_string(out: *mut *mut c_char, value: String) -> FfiResult<()> {
    let c = CString::new(value)
        .map_err(|_| fail(GrdStatus::InvalidInput, "output contains a NUL byte"))?;
    *out = c.into_raw();
    Ok(())
}

fn check_out<T>(out: *mut T) -> FfiResult<()> {
    if out.is_null() {
        Err(fail(GrdStatus::NullArgument, "output pointer is NULL"))
    } else {
        Ok(())
    }
}

unsafe fn handle<'a, T>(p: *mut T) -> FfiResult<&'a mut T> {
    p.as_mut()
        .ok_or_else(|| fail(GrdStatus::NullArgument, "handle is NULL"))
}

fn stream_failure(e: StreamError) -> Failure {
    match e {
        StreamError::Io(io) => fail(GrdStatus::Io, io),
        other => fail(GrdStatus::Parse, other),
    }
}

fn memory_failure(e: MemoryError) -> Failure {
    match e {
        MemoryError::Io(io) => fail(GrdStatus::Io, io),
        MemoryError::SnapshotError(_) => fail(GrdStatus::Parse, e),
        other => fail(GrdStatus::InvalidInput, other),
    }
}

fn predictions_text(tuples: &[EventTuple]) -> FfiResult<String> {
    let mut buf = Vec::new();
    write_predictions(tuples, &mut buf).map_err(|e| fail(GrdStatus::Io, e))?;
    String::from_utf8(buf).map_err(|e| fail(GrdStatus::Panic, e))
}

/// Message of the last failed call on this thread, or NULL. The pointer stays
/// valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn grd_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn grd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by this library.
#[no_mangle]
pub unsafe extern "C" fn grd_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

// ---------------------------------------------------------------------------
// Memory
// ---------------------------------------------------------------------------

#[no_mangle]
pub extern "C" fn grd_memory_new() -> *mut GrdMemory {
    Box::into_raw(Box::new(GrdMemory {
        episode: Episode::new(),
    }))
}

#[no_mangle]
pub unsafe extern "C" fn grd_memory_free(mem: *mut GrdMemory) {
    if !mem.is_null() {
        drop(Box::from_raw(mem));
    }
}

/// Stores an actor under an upstream id such as `person_1` or `robot_1`.
#[no_mangle]
pub unsafe extern "C" fn grd_memory_insert_actor(
    mem: *mut GrdMemory,
    actor_id: *const c_char,
    crop: *const c_char,
    first_seen: f64,
) -> GrdStatus {
    guard(|| {
        let mem = handle(mem)?;
        let id: ActorId = text(actor_id, "actor_id")?
            .parse()
            .map_err(|e| fail(GrdStatus::InvalidInput, e))?;
        let crop = text(crop, "crop")?;
        mem.episode
            .insert_actor(id, crop, first_seen)
            .map_err(memory_failure)
    })
}

/// Registers an object under the next free id; writes its index (`k` in `object_k`).
#[no_mangle]
pub unsafe extern "C" fn grd_memory_register_object(
    mem: *mut GrdMemory,
    crop: *const c_char,
    first_seen: f64,
    out_index: *mut u32,
) -> GrdStatus {
    guard(|| {
        let mem = handle(mem)?;
        check_out(out_index)?;
        let crop = text(crop, "crop")?;
        let id = mem
            .episode
            .register_object(crop, first_seen)
            .map_err(memory_failure)?;
        *out_index = id.index();
        Ok(())
    })
}

/// Appends one event tuple given as a JSON object.
#[no_mangle]
pub unsafe extern "C" fn grd_memory_append_event(
    mem: *mut GrdMemory,
    tuple_json: *const c_char,
) -> GrdStatus {
    guard(|| {
        let mem = handle(mem)?;
        let tuple: EventTuple = serde_json::from_str(text(tuple_json, "tuple_json")?)
            .map_err(|e| fail(GrdStatus::Parse, e))?;
        mem.episode.append_event(tuple).map_err(memory_failure)
    })
}

#[no_mangle]
pub unsafe extern "C" fn grd_memory_event_count(
    mem: *const GrdMemory,
    out_count: *mut usize,
) -> GrdStatus {
    guard(|| {
        let mem = mem
            .as_ref()
            .ok_or_else(|| fail(GrdStatus::NullArgument, "handle is NULL"))?;
        check_out(out_count)?;
        *out_count = mem.episode.events().len();
        Ok(())
    })
}

/// Stored events as JSON lines in episodic order.
#[no_mangle]
pub unsafe extern "C" fn grd_memory_events(
    mem: *const GrdMemory,
    out_jsonl: *mut *mut c_char,
) -> GrdStatus {
    guard(|| {
        let mem = mem
            .as_ref()
            .ok_or_else(|| fail(GrdStatus::NullArgument, "handle is NULL"))?;
        check_out(out_jsonl)?;
        out_string(out_jsonl, predictions_text(mem.episode.events())?)
    })
}

/// Whole memory as a snapshot JSON document.
#[no_mangle]
pub unsafe extern "C" fn grd_memory_snapshot(
    mem: *const GrdMemory,
    out_json: *mut *mut c_char,
) -> GrdStatus {
    guard(|| {
        let mem = mem
            .as_ref()
            .ok_or_else(|| fail(GrdStatus::NullArgument, "handle is NULL"))?;
        check_out(out_json)?;
        let mut buf = Vec::new();
        mem.episode
            .write_snapshot(&mut buf)
            .map_err(memory_failure)?;
        out_string(
            out_json,
            String::from_utf8(buf).map_err(|e| fail(GrdStatus::Panic, e))?,
        )
    })
}

/// Builds a memory handle from a snapshot document.
#[no_mangle]
pub unsafe extern "C" fn grd_memory_load(
    snapshot_json: *const c_char,
    out_mem: *mut *mut GrdMemory,
) -> GrdStatus {
    guard(|| {
        check_out(out_mem)?;
        let text = text(snapshot_json, "snapshot_json")?;
        let episode = Episode::read_snapshot(text.as_bytes()).map_err(memory_failure)?;
        *out_mem = Box::into_raw(Box::new(GrdMemory { episode }));
        Ok(())
    })
}

// ---------------------------------------------------------------------------
// Trigger
// ---------------------------------------------------------------------------

/// New trigger requiring `min_hold_frames` (at least 1) consecutive frames.
#[no_mangle]
pub unsafe extern "C" fn grd_trigger_new(
    min_hold_frames: u32,
    out_trigger: *mut *mut GrdTrigger,
) -> GrdStatus {
    guard(|| {
        check_out(out_trigger)?;
        let cfg =
            DebounceConfig::new(min_hold_frames).map_err(|e| fail(GrdStatus::InvalidInput, e))?;
        *out_trigger = Box::into_raw(Box::new(GrdTrigger {
            state: TriggerState::new(cfg),
        }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn grd_trigger_free(trigger: *mut GrdTrigger) {
    if !trigger.is_null() {
        drop(Box::from_raw(trigger));
    }
}

#[no_mangle]
pub unsafe extern "C" fn grd_trigger_reset(trigger: *mut GrdTrigger) -> GrdStatus {
    guard(|| {
        handle(trigger)?.state.reset();
        Ok(())
    })
}

/// Feeds one frame line; writes a JSON array of the triggers it fires
/// (`[{"actor","action","time","frame_index"}]`, often empty).
#[no_mangle]
pub unsafe extern "C" fn grd_trigger_observe(
    trigger: *mut GrdTrigger,
    frame_json: *const c_char,
    out_triggers_json: *mut *mut c_char,
) -> GrdStatus {
    guard(|| {
        let trigger = handle(trigger)?;
        check_out(out_triggers_json)?;
        let frames = parse_frame_stream(text(frame_json, "frame_json")?.as_bytes())
            .map_err(stream_failure)?;
        let [frame] = frames.as_slice() else {
            return Err(fail(
                GrdStatus::Parse,
                format!("expected one frame, got {}", frames.len()),
            ));
        };
        let fired = trigger
            .state
            .observe(frame)
            .map_err(|e| fail(GrdStatus::InvalidInput, e))?;
        out_string(
            out_triggers_json,
            serde_json::to_string(&fired).map_err(|e| fail(GrdStatus::Panic, e))?,
        )
    })
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Matches predicted against ground-truth tuples (both JSON lines; a
/// ground-truth header line is accepted) at tolerance `delta` seconds.
#[no_mangle]
pub unsafe extern "C" fn grd_match_events(
    gt_jsonl: *const c_char,
    pred_jsonl: *const c_char,
    delta: f64,
    out_summary: *mut GrdMatchSummary,
) -> GrdStatus {
    guard(|| {
        check_out(out_summary)?;
        let gts = parse_events(text(gt_jsonl, "gt_jsonl")?.as_bytes()).map_err(stream_failure)?;
        let preds =
            parse_events(text(pred_jsonl, "pred_jsonl")?.as_bytes()).map_err(stream_failure)?;
        let cfg = MatchConfig::new(delta).map_err(|e| fail(GrdStatus::InvalidInput, e))?;
        let s = metrics::match_events(&gts, &preds, &cfg).summary;
        *out_summary = GrdMatchSummary {
            true_positives: s.counts.tp,
            false_positives: s.counts.fp,
            false_negatives: s.counts.fn_,
            precision: s.precision,
            recall: s.recall,
            gs: s.gs,
        };
        Ok(())
    })
}

/// Full report (overall and per-role) for one ground-truth file with its
/// metadata header and one prediction file, as JSON.
#[no_mangle]
pub unsafe extern "C" fn grd_score_report(
    gt_file: *const c_char,
    pred_jsonl: *const c_char,
    delta: f64,
    out_json: *mut *mut c_char,
) -> GrdStatus {
    guard(|| {
        check_out(out_json)?;
        let gt =
            parse_ground_truth(text(gt_file, "gt_file")?.as_bytes()).map_err(stream_failure)?;
        let preds =
            parse_events(text(pred_jsonl, "pred_jsonl")?.as_bytes()).map_err(stream_failure)?;
        let cfg = MatchConfig::new(delta).map_err(|e| fail(GrdStatus::InvalidInput, e))?;
        let report = metrics::score_suite(&[(gt, preds)], &cfg);
        out_string(
            out_json,
            serde_json::to_string(&report).map_err(|e| fail(GrdStatus::Panic, e))?,
        )
    })
}

// ---------------------------------------------------------------------------
// Simulation and pipeline
// ---------------------------------------------------------------------------

/// Writes the four files of a builtin script into `out_dir`, named after the builtin.
#[no_mangle]
pub unsafe extern "C" fn grd_simulate_builtin(
    name: *const c_char,
    seed: u64,
    out_dir: *const c_char,
) -> GrdStatus {
    guard(|| {
        let name = text(name, "name")?;
        let dir = text(out_dir, "out_dir")?;
        let script = simulator::builtin(name)
            .ok_or_else(|| fail(GrdStatus::InvalidInput, format!("unknown builtin '{name}'")))?
            .with_seed(seed);
        let out = simulator::generate(&script).map_err(|e| fail(GrdStatus::InvalidInput, e))?;
        out.write_to(Path::new(dir), name)
            .map_err(|e| fail(GrdStatus::Io, e))?;
        Ok(())
    })
}

/// Runs a frame stream through trigger and reasoner with the scripted backend;
/// writes the predictions as JSON lines.
#[no_mangle]
pub unsafe extern "C" fn grd_run_scripted(
    frames_jsonl: *const c_char,
    registry_json: *const c_char,
    oracle_json: *const c_char,
    min_hold_frames: u32,
    out_predictions_jsonl: *mut *mut c_char,
) -> GrdStatus {
    guard(|| {
        check_out(out_predictions_jsonl)?;
        let frames = parse_frame_stream(text(frames_jsonl, "frames_jsonl")?.as_bytes())
            .map_err(stream_failure)?;
        let registry = parse_registry(text(registry_json, "registry_json")?.as_bytes())
            .map_err(stream_failure)?;
        let oracle: OracleScript = serde_json::from_str(text(oracle_json, "oracle_json")?)
            .map_err(|e| fail(GrdStatus::Parse, e))?;
        let cfg = PipelineConfig {
            debounce: DebounceConfig::new(min_hold_frames)
                .map_err(|e| fail(GrdStatus::InvalidInput, e))?,
            ..Default::default()
        };
        let backend = ScriptedBackend::new(oracle);
        let out = run_pipeline(frames.into_iter().map(Ok), &registry, &backend, &cfg)
            .map_err(|e| fail(GrdStatus::Backend, e))?;
        out_string(out_predictions_jsonl, predictions_text(&out.predictions)?)
    })
}
