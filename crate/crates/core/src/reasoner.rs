//! Trigger handling: build the request, query the backend, turn the answer
//! into an [`EventTuple`] and store it.
//!
//! [`run_pipeline`] drives a whole frame stream through the trigger and the
//! reasoner with a bounded number of backend calls in flight.

use std::collections::VecDeque;
use std::sync::mpsc;
use std::thread;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::event_model::{
    ActionLabel, ActorId, EntityRef, EventTuple, ObjectId, RelationKind, SpatialRelation,
    TupleError,
};
use crate::memory::{Episode, Memory, MemoryError};
use crate::stream_io::{FrameRecord, ObjectRegistry, StreamError};
use crate::trigger::{DebounceConfig, TriggerError, TriggerEvent, TriggerState};
use crate::vlm_client::{ClientError, ReasonerBackend, ReasonerRequest, ReasonerResponse};

/// Number of recent frames handed to the backend.
pub const FRAME_BUFFER_CAPACITY: usize = 4;

pub const INSTRUCTION: &str =
    "You observe a tabletop scene shared by people and possibly a robot. \
The first images show the known objects, each labelled with its id, followed by the known people \
and, if present, the robot hand. The last images show the most recent captured frames before the \
action trigger, newest last. The detected action of the acting actor is given. Identify which \
object the actor manipulates, the action, at most one spatial relation (on, in, or to) with its \
target id, and whether the robot interacts with the acting person. Answer with a single JSON \
object: {\"object\": <object id>, \"action\": <verb>, [\"on\"|\"in\"|\"to\": <id>,] \
\"robot_interaction\": <true|false>}.";

#[derive(Debug, Error)]
pub enum ReasonerError {
    #[error("actor {0} is not registered")]
    UnknownActor(ActorId),
    #[error("frame buffer holds no usable crop")]
    EmptyBuffer,
    #[error("cannot parse response: {0}")]
    ParseFailure(String),
    #[error("response names unknown instance '{0}'")]
    UnknownReference(String),
    #[error("response action '{0}' is outside the vocabulary")]
    VocabularyError(String),
    #[error("response does not form a valid tuple: {0}")]
    InvalidTuple(#[from] TupleError),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
}

impl ReasonerError {
    pub fn kind(&self) -> &'static str {
        match self {
            ReasonerError::UnknownActor(_) => "UnknownActor",
            ReasonerError::EmptyBuffer => "EmptyBuffer",
            ReasonerError::ParseFailure(_) => "ParseFailure",
            ReasonerError::UnknownReference(_) => "UnknownReference",
            ReasonerError::VocabularyError(_) => "VocabularyError",
            ReasonerError::InvalidTuple(_) => "InvalidTuple",
            ReasonerError::Client(e) => e.kind(),
            ReasonerError::Memory(_) => "Memory",
        }
    }
}

/// Ring of the most recent frames, oldest first.
#[derive(Debug, Clone, Default)]
pub struct FrameBuffer {
    frames: VecDeque<FrameRecord>,
}

impl FrameBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, frame: FrameRecord) {
        if self.frames.len() == FRAME_BUFFER_CAPACITY {
            self.frames.pop_front();
        }
        self.frames.push_back(frame);
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn clear(&mut self) {
        self.frames.clear();
    }

    pub fn iter(&self) -> impl Iterator<Item = &FrameRecord> {
        self.frames.iter()
    }
}

/// Which crop of each buffered frame goes to the backend.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneInput {
    /// The full scene crop, falling back to the actor crop when absent.
    #[default]
    Full,
    /// The acting actor's crop, falling back to the scene crop.
    Cropped,
}

pub fn assemble_context(
    trigger: &TriggerEvent,
    ep: &Episode,
    buf: &FrameBuffer,
    scene: SceneInput,
) -> Result<ReasonerRequest, ReasonerError> {
    build_request(trigger, Some(trigger.action), ep, buf, scene)
}

fn build_request(
    trigger: &TriggerEvent,
    detected_action: Option<ActionLabel>,
    ep: &Episode,
    buf: &FrameBuffer,
    scene: SceneInput,
) -> Result<ReasonerRequest, ReasonerError> {
    if ep.actor(trigger.actor).is_none() {
        return Err(ReasonerError::UnknownActor(trigger.actor));
    }
    let recent_frames: Vec<String> = buf
        .iter()
        .filter_map(|f| {
            let person = f.person_crops.get(&trigger.actor);
            let chosen = match scene {
                SceneInput::Full => f.scene_crop.as_ref().or(person),
                SceneInput::Cropped => person.or(f.scene_crop.as_ref()),
            };
            chosen.cloned()
        })
        .collect();
    if recent_frames.is_empty() {
        return Err(ReasonerError::EmptyBuffer);
    }
    Ok(ReasonerRequest {
        instruction: INSTRUCTION.to_string(),
        object_refs: ep.objects().map(|r| (r.id, r.crop.clone())).collect(),
        person_refs: ep.actors().map(|r| (r.id, r.crop.clone())).collect(),
        robot_hand_ref: ep
            .actors()
            .find(|r| r.id.is_robot())
            .map(|r| r.crop.clone()),
        recent_frames,
        detected_action: detected_action.filter(|a| !a.is_idle()),
        acting_actor: trigger.actor,
        trigger_time: trigger.time,
    })
}

/// Slice of `raw` from the first `{` to its matching `}`.
fn extract_object(raw: &str) -> Option<&str> {
    let start = raw.find('{')?;
    let mut depth = 0usize;
    let mut quote: Option<char> = None;
    let mut escaped = false;
    for (i, c) in raw[start..].char_indices() {
        if let Some(q) = quote {
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == q {
                quote = None;
            }
            continue;
        }
        match c {
            '"' | '\'' => quote = Some(c),
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&raw[start..start + i + 1]);
                }
            }
            _ => {}
        }
    }
    None
}

/// Rewrites Python-literal style (single quotes, True/False/None) as JSON.
fn pythonish_to_json(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars().peekable();
    while let Some(c) = chars.next() {
        match c {
            '"' | '\'' => {
                out.push('"');
                let mut escaped = false;
                for d in chars.by_ref() {
                    if escaped {
                        if d != '\'' {
                            out.push('\\');
                        }
                        out.push(d);
                        escaped = false;
                    } else if d == '\\' {
                        escaped = true;
                    } else if d == c {
                        break;
                    } else if d == '"' {
                        out.push_str("\\\"");
                    } else {
                        out.push(d);
                    }
                }
                out.push('"');
            }
            c if c.is_ascii_alphabetic() => {
                let mut word = String::from(c);
                while let Some(&d) = chars.peek() {
                    if !d.is_ascii_alphanumeric() && d != '_' {
                        break;
                    }
                    word.push(d);
                    chars.next();
                }
                out.push_str(match word.as_str() {
                    "True" => "true",
                    "False" => "false",
                    "None" => "null",
                    other => other,
                });
            }
            other => out.push(other),
        }
    }
    out
}

fn parse_answer_object(raw: &str) -> Result<serde_json::Map<String, Value>, ReasonerError> {
    let body = extract_object(raw)
        .ok_or_else(|| ReasonerError::ParseFailure("no JSON object found".into()))?;
    let value: Value = serde_json::from_str(body)
        .or_else(|_| serde_json::from_str(&pythonish_to_json(body)))
        .map_err(|e| ReasonerError::ParseFailure(e.to_string()))?;
    match value {
        Value::Object(map) => Ok(map),
        _ => Err(ReasonerError::ParseFailure(
            "answer is not an object".into(),
        )),
    }
}

fn required_str<'a>(
    map: &'a serde_json::Map<String, Value>,
    key: &str,
) -> Result<&'a str, ReasonerError> {
    match map.get(key) {
        Some(Value::String(s)) => Ok(s.trim()),
        Some(_) => Err(ReasonerError::ParseFailure(format!(
            "'{key}' must be a string"
        ))),
        None => Err(ReasonerError::ParseFailure(format!("missing '{key}'"))),
    }
}

/// Turns a raw answer into a tuple for `trigger`'s actor at `trigger`'s time.
///
/// Every id must already be registered in `ep`. A missing `robot_interaction`
/// reads as `false`. The answer's action wins over the detected one.
pub fn interpret_response(
    resp: &ReasonerResponse,
    trigger: &TriggerEvent,
    ep: &Episode,
) -> Result<EventTuple, ReasonerError> {
    let map = parse_answer_object(&resp.raw)?;
    let object_text = required_str(&map, "object")?;
    let action_text = required_str(&map, "action")?;

    let action: ActionLabel = action_text
        .parse()
        .map_err(|_| ReasonerError::VocabularyError(action_text.to_string()))?;
    if action.is_idle() {
        return Err(ReasonerError::VocabularyError(action_text.to_string()));
    }
    let object: ObjectId = object_text
        .parse()
        .ok()
        .filter(|o| ep.object(*o).is_some())
        .ok_or_else(|| ReasonerError::UnknownReference(object_text.to_string()))?;

    let mut relation = None;
    for kind in RelationKind::ALL {
        let value = match map.get(kind.as_str()) {
            None | Some(Value::Null) => continue,
            Some(Value::String(s)) => s.trim(),
            Some(_) => {
                return Err(ReasonerError::ParseFailure(format!(
                    "'{kind}' must be a string"
                )))
            }
        };
        if relation.is_some() {
            return Err(ReasonerError::ParseFailure(
                "more than one relation key".into(),
            ));
        }
        let target: EntityRef = value
            .parse()
            .ok()
            .filter(|t| ep.contains(*t))
            .ok_or_else(|| ReasonerError::UnknownReference(value.to_string()))?;
        relation = Some(SpatialRelation::new(kind, target).map_err(TupleError::from)?);
    }

    let robot_interaction = match map.get("robot_interaction") {
        None | Some(Value::Null) => false,
        Some(Value::Bool(b)) => *b,
        Some(Value::String(s)) if s.eq_ignore_ascii_case("true") => true,
        Some(Value::String(s)) if s.eq_ignore_ascii_case("false") => false,
        Some(_) => {
            return Err(ReasonerError::ParseFailure(
                "'robot_interaction' must be a boolean".into(),
            ))
        }
    };

    if action != trigger.action {
        log::info!(
            "{} at t={}: detector said {}, backend says {}",
            trigger.actor,
            trigger.time,
            trigger.action,
            action
        );
    }
    Ok(EventTuple::new(
        trigger.actor,
        action,
        object,
        relation,
        robot_interaction,
        trigger.time,
    )?)
}

/// One failed trigger, as written to the diagnostics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub trigger: TriggerEvent,
    pub error_kind: String,
    pub message: String,
    pub raw_excerpt: Option<String>,
}

const EXCERPT_CHARS: usize = 200;

impl Diagnostic {
    fn new(trigger: &TriggerEvent, err: &ReasonerError, raw: Option<&str>) -> Self {
        Self {
            trigger: trigger.clone(),
            error_kind: err.kind().to_string(),
            message: err.to_string(),
            raw_excerpt: raw.map(|r| r.chars().take(EXCERPT_CHARS).collect()),
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("diagnostic serialization is infallible")
    }
}

/// A trigger that produced no tuple.
#[derive(Debug)]
pub struct TriggerFailure {
    pub trigger: TriggerEvent,
    pub error: ReasonerError,
    pub raw: Option<String>,
}

impl TriggerFailure {
    pub fn diagnostic(&self) -> Diagnostic {
        Diagnostic::new(&self.trigger, &self.error, self.raw.as_deref())
    }
}

fn query_and_store(
    trigger: &TriggerEvent,
    req: &ReasonerRequest,
    mem: &Memory,
    client: &dyn ReasonerBackend,
) -> Result<EventTuple, TriggerFailure> {
    let fail = |error: ReasonerError, raw: Option<String>| TriggerFailure {
        trigger: trigger.clone(),
        error,
        raw,
    };
    let resp = client.query(req).map_err(|e| fail(e.into(), None))?;
    let tuple = interpret_response(&resp, trigger, &mem.read())
        .map_err(|e| fail(e, Some(resp.raw.clone())))?;
    mem.append_event(tuple.clone())
        .map_err(|e| fail(e.into(), Some(resp.raw)))?;
    Ok(tuple)
}

/// Assemble, query, interpret and append for one trigger.
pub fn on_trigger(
    trigger: &TriggerEvent,
    mem: &Memory,
    buf: &FrameBuffer,
    client: &dyn ReasonerBackend,
    scene: SceneInput,
) -> Result<EventTuple, TriggerFailure> {
    let req =
        assemble_context(trigger, &mem.read(), buf, scene).map_err(|error| TriggerFailure {
            trigger: trigger.clone(),
            error,
            raw: None,
        })?;
    query_and_store(trigger, &req, mem, client)
}

// ---------------------------------------------------------------------------
// Stream pipeline
// ---------------------------------------------------------------------------

/// How backend calls are scheduled.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GatingMode {
    /// One call per confirmed action change.
    #[default]
    Triggered,
    /// Baseline: one call per actor per frame, no detected action attached.
    EveryFrame,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub debounce: DebounceConfig,
    /// Maximum backend calls in flight at once.
    pub in_flight: usize,
    pub scene_input: SceneInput,
    pub gating: GatingMode,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            debounce: DebounceConfig::default(),
            in_flight: 2,
            scene_input: SceneInput::Full,
            gating: GatingMode::Triggered,
        }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Stream(#[from] StreamError),
    #[error(transparent)]
    Trigger(#[from] TriggerError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error("in-flight limit must be at least 1")]
    InvalidInFlight,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub frames: u64,
    pub triggers: u64,
    pub calls: u64,
    pub tuples: u64,
    pub failures: u64,
    pub mean_call_ms: f64,
    pub max_call_ms: f64,
    pub wall_time_s: f64,
}

#[derive(Debug)]
pub struct RunOutput {
    /// Emitted tuples in tuple order.
    pub predictions: Vec<EventTuple>,
    /// Failed triggers in trigger order.
    pub diagnostics: Vec<Diagnostic>,
    pub stats: RunStats,
    pub episode: Episode,
}

struct Job {
    seq: usize,
    trigger: TriggerEvent,
    request: ReasonerRequest,
}

struct Done {
    seq: usize,
    outcome: Result<EventTuple, TriggerFailure>,
    call_ms: f64,
}

/// Streams `frames` through trigger and reasoner.
///
/// Actors are registered on first sight from their frame crops; objects come
/// from `registry`. Requests are assembled in stream order; up to
/// `cfg.in_flight` backend calls run at once.
pub fn run_pipeline<I>(
    frames: I,
    registry: &ObjectRegistry,
    client: &dyn ReasonerBackend,
    cfg: &PipelineConfig,
) -> Result<RunOutput, PipelineError>
where
    I: IntoIterator<Item = Result<FrameRecord, StreamError>>,
{
    if cfg.in_flight == 0 {
        return Err(PipelineError::InvalidInFlight);
    }
    registry.validate()?;
    let started = Instant::now();
    let mem = Memory::new();
    {
        let mut ep = mem.write();
        for entry in &registry.objects {
            ep.insert_object(entry.id, entry.crop.clone(), entry.first_seen)?;
        }
    }

    let mut stats = RunStats::default();
    let mut failures: Vec<(usize, Diagnostic)> = Vec::new();
    let mut latencies: Vec<f64> = Vec::new();

    let (job_tx, job_rx) = mpsc::sync_channel::<Job>(cfg.in_flight);
    let job_rx = std::sync::Mutex::new(job_rx);
    let stream_result = thread::scope(|scope| -> Result<(), PipelineError> {
        let (done_tx, done_rx) = mpsc::channel::<Done>();
        for _ in 0..cfg.in_flight {
            let job_rx = &job_rx;
            let done_tx = done_tx.clone();
            let mem = &mem;
            scope.spawn(move || loop {
                let next = job_rx.lock().expect("job queue poisoned").recv();
                let Ok(job) = next else { break };
                let t0 = Instant::now();
                let outcome = query_and_store(&job.trigger, &job.request, mem, client);
                let call_ms = t0.elapsed().as_secs_f64() * 1e3;
                if done_tx
                    .send(Done {
                        seq: job.seq,
                        outcome,
                        call_ms,
                    })
                    .is_err()
                {
                    break;
                }
            });
        }
        drop(done_tx);

        let produce = || -> Result<(), PipelineError> {
            let mut trigger = TriggerState::new(cfg.debounce);
            let mut buf = FrameBuffer::new();
            let mut seq = 0usize;
            for frame in frames {
                let frame = frame?;
                stats.frames += 1;
                {
                    let mut ep = mem.write();
                    for (actor, crop) in &frame.person_crops {
                        if ep.actor(*actor).is_none() {
                            ep.insert_actor(*actor, crop.clone(), frame.time)?;
                        }
                    }
                }
                let fired = trigger.observe(&frame)?;
                let pending: Vec<(TriggerEvent, Option<ActionLabel>)> = match cfg.gating {
                    GatingMode::Triggered => {
                        stats.triggers += fired.len() as u64;
                        fired
                            .into_iter()
                            .map(|t| (t.clone(), Some(t.action)))
                            .collect()
                    }
                    GatingMode::EveryFrame => frame
                        .actions
                        .iter()
                        .map(|(&actor, &action)| {
                            let t = TriggerEvent {
                                actor,
                                action,
                                time: frame.time,
                                frame_index: frame.frame_index,
                            };
                            (t, None)
                        })
                        .collect(),
                };
                buf.push(frame);
                for (t, detected) in pending {
                    let built = build_request(&t, detected, &mem.read(), &buf, cfg.scene_input);
                    match built {
                        Ok(request) => {
                            stats.calls += 1;
                            // Workers only stop once this sender is dropped.
                            let _ = job_tx.send(Job {
                                seq,
                                trigger: t,
                                request,
                            });
                        }
                        Err(error) => failures.push((seq, Diagnostic::new(&t, &error, None))),
                    }
                    seq += 1;
                }
            }
            Ok(())
        };
        let result = produce();
        drop(job_tx);
        for done in done_rx {
            latencies.push(done.call_ms);
            match done.outcome {
                Ok(_) => stats.tuples += 1,
                Err(f) => failures.push((done.seq, f.diagnostic())),
            }
        }
        result
    });
    stream_result?;

    failures.sort_by_key(|(seq, _)| *seq);
    stats.failures = failures.len() as u64;
    if !latencies.is_empty() {
        stats.mean_call_ms = latencies.iter().sum::<f64>() / latencies.len() as f64;
        stats.max_call_ms = latencies.iter().copied().fold(0.0, f64::max);
    }
    stats.wall_time_s = started.elapsed().as_secs_f64();
    let episode = mem.into_episode();
    Ok(RunOutput {
        predictions: episode.events().to_vec(),
        diagnostics: failures.into_iter().map(|(_, d)| d).collect(),
        stats,
        episode,
    })
}
