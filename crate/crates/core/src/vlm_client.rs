//! Reasoning backends.
//!
//! Every backend answers a [`ReasonerRequest`] with raw text that should hold
//! one JSON object `{"object", "action", [on|in|to], "robot_interaction"}`.
//! Parsing and validation of that text happen in the reasoner, not here.
//!
//! * [`ScriptedBackend`] answers from a known event list (closed-loop tests).
//! * [`FaultInjector`] wraps any backend and corrupts fields at set rates.
//! * [`RemoteBackend`] POSTs the request to an HTTP endpoint.

use std::path::PathBuf;
use std::thread;
use std::time::Duration;

use base64::Engine as _;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::event_model::{
    ActionLabel, ActorId, EventTuple, ObjectId, RelationKind, SpatialRelation,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ClientError {
    #[error("no scripted answer for {actor} near t={time}")]
    NoScriptedAnswer { actor: ActorId, time: f64 },
    #[error("request timed out after {attempts} attempt(s)")]
    Timeout { attempts: u32 },
    #[error("remote backend failed after {attempts} attempt(s): {message}")]
    RemoteError { attempts: u32, message: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("invalid backend configuration: {0}")]
    Config(String),
    #[error("cannot read image '{path}': {message}")]
    Image { path: String, message: String },
}

impl ClientError {
    pub fn kind(&self) -> &'static str {
        match self {
            ClientError::NoScriptedAnswer { .. } => "NoScriptedAnswer",
            ClientError::Timeout { .. } => "Timeout",
            ClientError::RemoteError { .. } => "RemoteError",
            ClientError::InvalidRequest(_) => "InvalidRequest",
            ClientError::Config(_) => "Config",
            ClientError::Image { .. } => "Image",
        }
    }
}

/// Everything the reasoner hands to a backend for one trigger.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasonerRequest {
    pub instruction: String,
    /// Every registered object with its reference crop, in id order.
    pub object_refs: Vec<(ObjectId, String)>,
    pub person_refs: Vec<(ActorId, String)>,
    pub robot_hand_ref: Option<String>,
    /// Between one and four frame crops, newest last.
    pub recent_frames: Vec<String>,
    /// Label from the action detector. `None` only in frame-by-frame mode,
    /// where calls are not driven by the detector.
    pub detected_action: Option<ActionLabel>,
    pub acting_actor: ActorId,
    /// Start time of the triggering action, seconds.
    pub trigger_time: f64,
}

impl ReasonerRequest {
    pub fn validate(&self) -> Result<(), ClientError> {
        if self.recent_frames.is_empty() || self.recent_frames.len() > 4 {
            return Err(ClientError::InvalidRequest(format!(
                "recent_frames must hold 1..=4 crops, got {}",
                self.recent_frames.len()
            )));
        }
        if self.detected_action == Some(ActionLabel::Idle) {
            return Err(ClientError::InvalidRequest(
                "detected_action cannot be idle".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasonerResponse {
    pub raw: String,
}

pub trait ReasonerBackend: Send + Sync {
    fn query(&self, req: &ReasonerRequest) -> Result<ReasonerResponse, ClientError>;
}

impl<B: ReasonerBackend + ?Sized> ReasonerBackend for Box<B> {
    fn query(&self, req: &ReasonerRequest) -> Result<ReasonerResponse, ClientError> {
        (**self).query(req)
    }
}

impl<B: ReasonerBackend + ?Sized> ReasonerBackend for &B {
    fn query(&self, req: &ReasonerRequest) -> Result<ReasonerResponse, ClientError> {
        (**self).query(req)
    }
}

/// The answer object a backend is expected to emit, in its emitted key order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Answer {
    pub object: String,
    pub action: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub on: Option<String>,
    #[serde(rename = "in", default, skip_serializing_if = "Option::is_none")]
    pub inside: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub to: Option<String>,
    pub robot_interaction: bool,
}

impl Answer {
    pub fn from_tuple(t: &EventTuple) -> Self {
        let mut a = Answer {
            object: t.object().to_string(),
            action: t.action().to_string(),
            on: None,
            inside: None,
            to: None,
            robot_interaction: t.robot_interaction(),
        };
        a.set_relation(t.relation());
        a
    }

    pub fn set_relation(&mut self, rel: Option<SpatialRelation>) {
        self.on = None;
        self.inside = None;
        self.to = None;
        if let Some(r) = rel {
            let target = Some(r.target().to_string());
            match r.rho() {
                RelationKind::On => self.on = target,
                RelationKind::In => self.inside = target,
                RelationKind::To => self.to = target,
            }
        }
    }

    pub fn relation_text(&self) -> Option<(RelationKind, &str)> {
        [
            (RelationKind::On, &self.on),
            (RelationKind::In, &self.inside),
            (RelationKind::To, &self.to),
        ]
        .into_iter()
        .find_map(|(k, v)| v.as_deref().map(|s| (k, s)))
    }

    pub fn render(&self) -> String {
        serde_json::to_string(self).expect("answer serialization is infallible")
    }
}

// ---------------------------------------------------------------------------
// Scripted oracle
// ---------------------------------------------------------------------------

/// Known events a scripted backend answers from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleScript {
    /// Largest trigger-to-event time gap that still yields an answer.
    pub window_s: f64,
    pub answers: Vec<EventTuple>,
}

impl OracleScript {
    /// Window of twice the matching tolerance.
    pub fn new(answers: Vec<EventTuple>, delta: f64) -> Self {
        Self {
            window_s: 2.0 * delta,
            answers,
        }
    }
}

pub struct ScriptedBackend {
    script: OracleScript,
}

impl ScriptedBackend {
    pub fn new(script: OracleScript) -> Self {
        Self { script }
    }

    /// Scripted event of `actor` closest to `time`; ties go to the earlier one.
    pub fn lookup(&self, actor: ActorId, time: f64) -> Option<&EventTuple> {
        self.script
            .answers
            .iter()
            .filter(|e| e.actor() == actor)
            .map(|e| ((e.time() - time).abs(), e))
            .filter(|(d, _)| *d <= self.script.window_s)
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.time().total_cmp(&b.1.time())))
            .map(|(_, e)| e)
    }
}

impl ReasonerBackend for ScriptedBackend {
    fn query(&self, req: &ReasonerRequest) -> Result<ReasonerResponse, ClientError> {
        req.validate()?;
        let e = self.lookup(req.acting_actor, req.trigger_time).ok_or(
            ClientError::NoScriptedAnswer {
                actor: req.acting_actor,
                time: req.trigger_time,
            },
        )?;
        Ok(ReasonerResponse {
            raw: Answer::from_tuple(e).render(),
        })
    }
}

// ---------------------------------------------------------------------------
// Fault injection
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FaultConfig {
    pub p_object: f64,
    pub p_action: f64,
    pub p_relation: f64,
    pub p_flag: f64,
    pub p_malformed: f64,
    pub seed: u64,
}

impl FaultConfig {
    pub fn validate(&self) -> Result<(), ClientError> {
        for (name, p) in [
            ("p_object", self.p_object),
            ("p_action", self.p_action),
            ("p_relation", self.p_relation),
            ("p_flag", self.p_flag),
            ("p_malformed", self.p_malformed),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(ClientError::Config(format!(
                    "{name} must lie in [0, 1], got {p}"
                )));
            }
        }
        Ok(())
    }

    fn is_identity(&self) -> bool {
        [
            self.p_object,
            self.p_action,
            self.p_relation,
            self.p_flag,
            self.p_malformed,
        ]
        .iter()
        .all(|&p| p == 0.0)
    }
}

/// Corrupts the wrapped backend's answers field by field.
///
/// The random stream for a request is derived from the seed and the request's
/// content (actor, detected action, trigger time, frame crops), so results do
/// not depend on the order in which concurrent requests arrive.
pub struct FaultInjector<B> {
    inner: B,
    cfg: FaultConfig,
}

impl<B: ReasonerBackend> FaultInjector<B> {
    pub fn new(inner: B, cfg: FaultConfig) -> Result<Self, ClientError> {
        cfg.validate()?;
        Ok(Self { inner, cfg })
    }

    fn rng_for(&self, req: &ReasonerRequest, raw: &str) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.cfg.seed.to_le_bytes());
        h.update(req.acting_actor.to_string().as_bytes());
        h.update([0]);
        h.update(req.detected_action.map_or("", |a| a.as_str()).as_bytes());
        h.update([0]);
        h.update(req.trigger_time.to_bits().to_le_bytes());
        for f in &req.recent_frames {
            h.update(f.as_bytes());
            h.update([0]);
        }
        h.update(raw.as_bytes());
        let digest = h.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest[..32]);
        ChaCha8Rng::from_seed(seed)
    }
}

fn pick_other<T: Clone + PartialEq>(rng: &mut ChaCha8Rng, pool: &[T], current: &T) -> Option<T> {
    let others: Vec<&T> = pool.iter().filter(|x| *x != current).collect();
    if others.is_empty() {
        None
    } else {
        Some(others[rng.random_range(0..others.len())].clone())
    }
}

impl<B: ReasonerBackend> ReasonerBackend for FaultInjector<B> {
    fn query(&self, req: &ReasonerRequest) -> Result<ReasonerResponse, ClientError> {
        let resp = self.inner.query(req)?;
        if self.cfg.is_identity() {
            return Ok(resp);
        }
        let mut rng = self.rng_for(req, &resp.raw);
        // Fixed draw order keeps each field's stream independent of the others' rates.
        let draws: [f64; 5] = std::array::from_fn(|_| rng.random::<f64>());
        let [u_malformed, u_object, u_action, u_relation, u_flag] = draws;

        if u_malformed < self.cfg.p_malformed {
            let cut = resp
                .raw
                .char_indices()
                .nth(resp.raw.chars().count() / 2)
                .map_or(0, |(i, _)| i);
            return Ok(ReasonerResponse {
                raw: format!("{}<<truncated", &resp.raw[..cut]),
            });
        }
        let Ok(mut answer) = serde_json::from_str::<Answer>(&resp.raw) else {
            return Ok(resp);
        };
        let mut touched = false;

        if u_object < self.cfg.p_object {
            let pool: Vec<String> = req
                .object_refs
                .iter()
                .map(|(id, _)| id.to_string())
                .collect();
            if let Some(o) = pick_other(&mut rng, &pool, &answer.object) {
                answer.object = o;
                touched = true;
            }
        }
        if u_action < self.cfg.p_action {
            let pool: Vec<String> = ActionLabel::ACTIVE.iter().map(|a| a.to_string()).collect();
            let current = answer
                .action
                .parse::<ActionLabel>()
                .map_or(answer.action.clone(), |a| a.to_string());
            if let Some(a) = pick_other(&mut rng, &pool, &current) {
                answer.action = a;
                touched = true;
            }
        }
        if u_relation < self.cfg.p_relation {
            let mut pool: Vec<Option<(RelationKind, String)>> = vec![None];
            for (id, _) in &req.object_refs {
                let id = id.to_string();
                if id != answer.object {
                    pool.push(Some((RelationKind::On, id.clone())));
                    pool.push(Some((RelationKind::In, id.clone())));
                    pool.push(Some((RelationKind::To, id)));
                }
            }
            for (id, _) in &req.person_refs {
                if *id != req.acting_actor {
                    pool.push(Some((RelationKind::To, id.to_string())));
                }
            }
            let current = answer.relation_text().map(|(k, s)| (k, s.to_string()));
            if let Some(next) = pick_other(&mut rng, &pool, &current) {
                answer.on = None;
                answer.inside = None;
                answer.to = None;
                if let Some((k, target)) = next {
                    match k {
                        RelationKind::On => answer.on = Some(target),
                        RelationKind::In => answer.inside = Some(target),
                        RelationKind::To => answer.to = Some(target),
                    }
                }
                touched = true;
            }
        }
        if u_flag < self.cfg.p_flag {
            answer.robot_interaction = !answer.robot_interaction;
            touched = true;
        }
        if !touched {
            return Ok(resp);
        }
        Ok(ReasonerResponse {
            raw: answer.render(),
        })
    }
}

// ---------------------------------------------------------------------------
// Remote HTTP backend
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct RemoteConfig {
    pub endpoint: String,
    pub token: Option<String>,
    /// Per-attempt limit.
    pub timeout: Duration,
    pub retries: u32,
    /// Wait before retry `k` is `backoff * 2^k`.
    pub backoff: Duration,
    /// Directory crop references resolve against. When unset, crops are sent
    /// by reference only and `data` is null.
    pub image_root: Option<PathBuf>,
}

impl RemoteConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            token: None,
            timeout: Duration::from_secs(30),
            retries: 2,
            backoff: Duration::from_millis(500),
            image_root: None,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct RemoteImage {
    pub role: &'static str,
    pub id: String,
    pub data: Option<String>,
}

/// POST body sent to the remote endpoint.
#[derive(Debug, Serialize)]
pub struct RemoteBody<'a> {
    pub instruction: &'a str,
    pub images: Vec<RemoteImage>,
    pub detected_action: Option<&'static str>,
    pub actor: String,
}

pub struct RemoteBackend {
    cfg: RemoteConfig,
    agent: ureq::Agent,
}

impl RemoteBackend {
    pub fn new(cfg: RemoteConfig) -> Result<Self, ClientError> {
        if cfg.endpoint.trim().is_empty() {
            return Err(ClientError::Config(
                "remote backend needs an endpoint URL".into(),
            ));
        }
        if !(cfg.endpoint.starts_with("http://") || cfg.endpoint.starts_with("https://")) {
            return Err(ClientError::Config(format!(
                "unsupported endpoint '{}'",
                cfg.endpoint
            )));
        }
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(cfg.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self { cfg, agent })
    }

    fn image(
        &self,
        role: &'static str,
        id: String,
        crop: &str,
    ) -> Result<RemoteImage, ClientError> {
        let data = match &self.cfg.image_root {
            None => None,
            Some(root) => {
                let path = root.join(crop);
                let bytes = std::fs::read(&path).map_err(|e| ClientError::Image {
                    path: path.display().to_string(),
                    message: e.to_string(),
                })?;
                Some(base64::engine::general_purpose::STANDARD.encode(bytes))
            }
        };
        Ok(RemoteImage { role, id, data })
    }

    pub fn body_for(&self, req: &ReasonerRequest) -> Result<String, ClientError> {
        let mut images = Vec::new();
        for (id, crop) in &req.object_refs {
            images.push(self.image("object", id.to_string(), crop)?);
        }
        for (id, crop) in &req.person_refs {
            images.push(self.image("person", id.to_string(), crop)?);
        }
        if let Some(hand) = &req.robot_hand_ref {
            images.push(self.image("robot_hand", "robot_hand".into(), hand)?);
        }
        for crop in &req.recent_frames {
            images.push(self.image("frame", crop.clone(), crop)?);
        }
        let body = RemoteBody {
            instruction: &req.instruction,
            images,
            detected_action: req.detected_action.map(ActionLabel::as_str),
            actor: req.acting_actor.to_string(),
        };
        serde_json::to_string(&body).map_err(|e| ClientError::InvalidRequest(e.to_string()))
    }

    fn attempt(&self, body: &str) -> Result<String, Attempt> {
        let mut call = self
            .agent
            .post(&self.cfg.endpoint)
            .header("Content-Type", "application/json");
        if let Some(token) = &self.cfg.token {
            call = call.header("Authorization", &format!("Bearer {token}"));
        }
        match call.send(body) {
            Ok(mut resp) => {
                let status = resp.status().as_u16();
                let text = resp.body_mut().read_to_string();
                match (status, text) {
                    (200..=299, Ok(text)) => Ok(text),
                    (200..=299, Err(e)) => Err(classify(e)),
                    (500..=599, _) | (429, _) => {
                        Err(Attempt::Retry(format!("http status {status}")))
                    }
                    (_, _) => Err(Attempt::Fatal(format!("http status {status}"))),
                }
            }
            Err(e) => Err(classify(e)),
        }
    }
}

enum Attempt {
    Timeout,
    Retry(String),
    Fatal(String),
}

fn classify(e: ureq::Error) -> Attempt {
    match e {
        ureq::Error::Timeout(_) => Attempt::Timeout,
        ureq::Error::Io(io) if io.kind() == std::io::ErrorKind::TimedOut => Attempt::Timeout,
        other => Attempt::Retry(other.to_string()),
    }
}

impl ReasonerBackend for RemoteBackend {
    fn query(&self, req: &ReasonerRequest) -> Result<ReasonerResponse, ClientError> {
        req.validate()?;
        let body = self.body_for(req)?;
        let mut last = Attempt::Retry(String::new());
        for attempt in 0..=self.cfg.retries {
            if attempt > 0 {
                thread::sleep(self.cfg.backoff * 2u32.pow(attempt - 1));
            }
            match self.attempt(&body) {
                Ok(raw) => return Ok(ReasonerResponse { raw }),
                Err(Attempt::Fatal(message)) => {
                    return Err(ClientError::RemoteError {
                        attempts: attempt + 1,
                        message,
                    })
                }
                Err(e) => {
                    log::debug!("remote attempt {} failed", attempt + 1);
                    last = e;
                }
            }
        }
        let attempts = self.cfg.retries + 1;
        Err(match last {
            Attempt::Timeout => ClientError::Timeout { attempts },
            Attempt::Retry(message) | Attempt::Fatal(message) => {
                ClientError::RemoteError { attempts, message }
            }
        })
    }
}
