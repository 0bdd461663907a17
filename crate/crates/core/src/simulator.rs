//! Episode generation from timed event scripts.
//!
//! A [`ScenarioScript`] lists ground-truth events. [`generate`] paints them
//! onto a per-actor label stream (each actor `idle` except for `event_duration`
//! seconds from each of its event starts), applies seeded noise to the stream
//! only, and returns the ground truth, the frames, the object registry and the
//! oracle answers for the scripted backend.

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::event_model::{ActionLabel, ActorId, EntityRef, EventTuple, ObjectId, SpatialRelation};
use crate::metrics::DEFAULT_DELTA;
use crate::stream_io::{
    write_frame_stream, write_ground_truth, write_registry, Constellation, FrameRecord,
    GroundTruthFile, GroundTruthMeta, ObjectRegistry, RegistryEntry, Scenario,
};
use crate::vlm_client::OracleScript;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid script: {0}")]
    InvalidScript(String),
}

fn invalid(msg: impl Into<String>) -> SimError {
    SimError::InvalidScript(msg.into())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    /// Per frame and actor: replace the label with a uniformly random other verb.
    pub label_flip_prob: f64,
    /// Gaussian shift of each event's start in the stream (ground truth keeps
    /// the scripted time).
    pub timing_jitter_std_s: f64,
    /// Per frame: omit the frame from the stream.
    pub drop_prob: f64,
}

impl NoiseConfig {
    pub fn is_zero(&self) -> bool {
        self.label_flip_prob == 0.0 && self.timing_jitter_std_s == 0.0 && self.drop_prob == 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptObject {
    pub id: ObjectId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_hint: Option<String>,
}

fn default_period() -> f64 {
    0.1
}

fn default_duration() -> f64 {
    1.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioScript {
    pub name: String,
    pub scenario: Scenario,
    pub constellation: Constellation,
    pub objects: Vec<ScriptObject>,
    pub events: Vec<EventTuple>,
    #[serde(default = "default_period")]
    pub frame_period: f64,
    /// How long each event's verb shows in the stream.
    #[serde(default = "default_duration")]
    pub event_duration: f64,
    /// Stream length; defaults to two seconds past the last event.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration: Option<f64>,
    #[serde(default)]
    pub noise: NoiseConfig,
    #[serde(default)]
    pub seed: u64,
}

impl ScenarioScript {
    pub fn new(
        name: impl Into<String>,
        scenario: Scenario,
        constellation: Constellation,
        objects: Vec<ScriptObject>,
        events: Vec<EventTuple>,
    ) -> Self {
        Self {
            name: name.into(),
            scenario,
            constellation,
            objects,
            events,
            frame_period: default_period(),
            event_duration: default_duration(),
            duration: None,
            noise: NoiseConfig::default(),
            seed: 0,
        }
    }

    pub fn with_noise(mut self, noise: NoiseConfig) -> Self {
        self.noise = noise;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_duration(mut self, duration: f64) -> Self {
        self.duration = Some(duration);
        self
    }

    pub fn from_json(text: &str) -> Result<Self, SimError> {
        let script: Self = serde_json::from_str(text).map_err(|e| invalid(e.to_string()))?;
        script.validate()?;
        Ok(script)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("script serialization is infallible")
    }

    fn stream_end(&self) -> f64 {
        self.duration.unwrap_or_else(|| {
            self.events
                .iter()
                .map(|e| e.time() + self.event_duration + 2.0)
                .fold(2.0, f64::max)
        })
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(invalid(format!(
                    "{name} must be finite and positive, got {v}"
                )))
            }
        };
        positive("frame_period", self.frame_period)?;
        positive("event_duration", self.event_duration)?;
        if let Some(d) = self.duration {
            positive("duration", d)?;
        }
        for (name, p) in [
            ("label_flip_prob", self.noise.label_flip_prob),
            ("drop_prob", self.noise.drop_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(invalid(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        let sigma = self.noise.timing_jitter_std_s;
        if !(sigma.is_finite() && sigma >= 0.0) {
            return Err(invalid(format!(
                "timing_jitter_std_s must be finite and >= 0, got {sigma}"
            )));
        }

        let mut declared: Vec<ObjectId> = self.objects.iter().map(|o| o.id).collect();
        declared.sort();
        if declared.windows(2).any(|w| w[0] == w[1]) {
            return Err(invalid("duplicate object id"));
        }
        let actors = self.constellation.actors();
        for e in &self.events {
            for r in e.references() {
                let ok = match r {
                    EntityRef::Actor(a) => actors.contains(&a),
                    EntityRef::Object(o) => declared.binary_search(&o).is_ok(),
                };
                if !ok {
                    return Err(invalid(format!(
                        "{r} is not part of a {} {} episode",
                        self.scenario, self.constellation
                    )));
                }
            }
            if e.robot_interaction() && !self.constellation.has_robot() {
                return Err(invalid(format!(
                    "robot interaction at t={} without a robot",
                    e.time()
                )));
            }
            if let Some(d) = self.duration {
                if e.time() >= d {
                    return Err(invalid(format!(
                        "event at t={} lies past the stream end {d}",
                        e.time()
                    )));
                }
            }
        }
        for a in &actors {
            let mut times: Vec<f64> = self
                .events
                .iter()
                .filter(|e| e.actor() == *a)
                .map(|e| e.time())
                .collect();
            times.sort_by(f64::total_cmp);
            if let Some(w) = times.windows(2).find(|w| w[1] < w[0] + self.event_duration) {
                return Err(invalid(format!(
                    "events of {a} at t={} and t={} overlap",
                    w[0], w[1]
                )));
            }
        }
        Ok(())
    }
}

/// Everything one script produces.
#[derive(Debug, Clone, PartialEq)]
pub struct SimOutput {
    pub ground_truth: GroundTruthFile,
    pub frames: Vec<FrameRecord>,
    pub registry: ObjectRegistry,
    pub oracle: OracleScript,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimPaths {
    pub events: PathBuf,
    pub frames: PathBuf,
    pub objects: PathBuf,
    pub oracle: PathBuf,
}

impl SimPaths {
    pub fn for_stem(dir: &Path, stem: &str) -> Self {
        Self {
            events: dir.join(format!("{stem}.events.jsonl")),
            frames: dir.join(format!("{stem}.frames.jsonl")),
            objects: dir.join(format!("{stem}.objects.json")),
            oracle: dir.join(format!("{stem}.oracle.json")),
        }
    }
}

impl SimOutput {
    /// Writes `<stem>.events.jsonl`, `.frames.jsonl`, `.objects.json` and
    /// `.oracle.json` into `dir`.
    pub fn write_to(&self, dir: &Path, stem: &str) -> io::Result<SimPaths> {
        fs::create_dir_all(dir)?;
        let paths = SimPaths::for_stem(dir, stem);
        let create = |p: &Path| fs::File::create(p).map(BufWriter::new);

        let mut w = create(&paths.events)?;
        write_ground_truth(&self.ground_truth, &mut w)?;
        w.flush()?;
        let mut w = create(&paths.frames)?;
        write_frame_stream(&self.frames, &mut w)?;
        w.flush()?;
        let mut w = create(&paths.objects)?;
        write_registry(&self.registry, &mut w)?;
        w.flush()?;
        let mut w = create(&paths.oracle)?;
        serde_json::to_writer_pretty(&mut w, &self.oracle)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(paths)
    }
}

const EPS: f64 = 1e-9;

pub fn generate(script: &ScenarioScript) -> Result<SimOutput, SimError> {
    script.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(script.seed);
    let gt = GroundTruthFile::new(
        GroundTruthMeta {
            scenario: script.scenario,
            constellation: script.constellation,
            recording: Some(script.name.clone()),
        },
        script.events.clone(),
    );

    // Stream-side start times, one per ground-truth event in tuple order.
    let sigma = script.noise.timing_jitter_std_s;
    let jitter = Normal::new(0.0, sigma).map_err(|e| invalid(e.to_string()))?;
    let starts: Vec<(ActorId, ActionLabel, f64)> = gt
        .tuples
        .iter()
        .map(|e| {
            let shift = if sigma > 0.0 {
                jitter.sample(&mut rng)
            } else {
                0.0
            };
            (e.actor(), e.action(), (e.time() + shift).max(0.0))
        })
        .collect();

    let end = script.stream_end();
    let n_frames = ((end / script.frame_period) - EPS).ceil().max(1.0) as u64;
    let actors = script.constellation.actors();
    let mut frames = Vec::with_capacity(n_frames as usize);
    for i in 0..n_frames {
        let t = i as f64 * script.frame_period;
        if script.noise.drop_prob > 0.0 && rng.random::<f64>() < script.noise.drop_prob {
            continue;
        }
        let mut frame = FrameRecord::new(i, t).with_scene(format!("scene_f{i:05}.png"));
        for &a in &actors {
            let mut label = starts
                .iter()
                .rev()
                .find(|(actor, _, s)| {
                    *actor == a && t + EPS >= *s && t + EPS < *s + script.event_duration
                })
                .map(|(_, verb, _)| *verb)
                .unwrap_or(ActionLabel::Idle);
            if script.noise.label_flip_prob > 0.0
                && rng.random::<f64>() < script.noise.label_flip_prob
            {
                let others: Vec<ActionLabel> = ActionLabel::ALL
                    .into_iter()
                    .filter(|l| *l != label)
                    .collect();
                label = others[rng.random_range(0..others.len())];
            }
            frame = frame.with_actor(a, label, format!("{a}_f{i:05}.png"));
        }
        frames.push(frame);
    }

    let registry = ObjectRegistry {
        objects: script
            .objects
            .iter()
            .map(|o| RegistryEntry {
                id: o.id,
                crop: format!("{}.png", o.id),
                first_seen: 0.0,
                label_hint: o.label_hint.clone(),
            })
            .collect(),
    };
    let oracle = OracleScript::new(gt.tuples.clone(), DEFAULT_DELTA);
    Ok(SimOutput {
        ground_truth: gt,
        frames,
        registry,
        oracle,
    })
}

// ---------------------------------------------------------------------------
// Builtin scripts
// ---------------------------------------------------------------------------

/// Builds events tersely; all inputs are known-valid.
struct Ev {
    events: Vec<EventTuple>,
}

impl Ev {
    fn new() -> Self {
        Self { events: Vec::new() }
    }

    fn add(
        &mut self,
        actor: ActorId,
        action: ActionLabel,
        object: u32,
        relation: Option<SpatialRelation>,
        flag: bool,
        t: f64,
    ) -> &mut Self {
        let tuple = EventTuple::new(actor, action, ObjectId::new(object), relation, flag, t)
            .expect("builtin events are valid");
        self.events.push(tuple);
        self
    }
}

fn objects(hints: &[&str]) -> Vec<ScriptObject> {
    hints
        .iter()
        .enumerate()
        .map(|(i, h)| ScriptObject {
            id: ObjectId::new(i as u32 + 1),
            label_hint: Some((*h).to_string()),
        })
        .collect()
}

fn on(o: u32) -> Option<SpatialRelation> {
    Some(SpatialRelation::on(ObjectId::new(o)))
}

fn inside(o: u32) -> Option<SpatialRelation> {
    Some(SpatialRelation::inside(ObjectId::new(o)))
}

fn to(a: ActorId) -> Option<SpatialRelation> {
    Some(SpatialRelation::to(a))
}

const SORTING_OBJECTS: [&str; 6] = ["banana", "apple", "apple", "orange", "bowl", "plate"];

/// Fruits go to the bowl, the banana to the plate. Every second fruit is
/// handed to a partner (robot if present, else the other person), who puts it away.
fn sorting(c: Constellation, rep: u32) -> ScenarioScript {
    let persons: Vec<ActorId> = (1..=c.persons()).map(ActorId::person).collect();
    let partner_of = |person: ActorId| {
        if c.has_robot() {
            Some(ActorId::robot(1))
        } else {
            persons.iter().copied().find(|p| *p != person)
        }
    };
    let fruits: &[u32] = if rep == 0 { &[2, 1, 4] } else { &[4, 3, 1, 2] };
    let mut ev = Ev::new();
    for (j, &fruit) in fruits.iter().enumerate() {
        let t = 2.0 + 8.0 * j as f64;
        let person = persons[j % persons.len()];
        let dest = if fruit == 1 { on(6) } else { inside(5) };
        match partner_of(person).filter(|_| j % 2 == 1) {
            Some(p) => {
                ev.add(person, ActionLabel::Handover, fruit, to(p), p.is_robot(), t);
                ev.add(p, ActionLabel::PlaceDown, fruit, dest, false, t + 3.0);
            }
            None => {
                ev.add(person, ActionLabel::Grasp, fruit, None, false, t);
                ev.add(person, ActionLabel::PlaceDown, fruit, dest, false, t + 3.0);
            }
        }
    }
    let name = builtin_name(Scenario::Sorting, c, rep);
    ScenarioScript::new(
        name,
        Scenario::Sorting,
        c,
        objects(&SORTING_OBJECTS),
        ev.events,
    )
}

/// Bottle, cup, tray, glass.
fn pouring(c: Constellation, rep: u32) -> ScenarioScript {
    let p1 = ActorId::person(1);
    let other = if c.has_robot() {
        ActorId::robot(1)
    } else {
        ActorId::person(2)
    };
    let robot = other.is_robot();
    let mut ev = Ev::new();
    if rep == 0 {
        ev.add(p1, ActionLabel::Grasp, 1, None, false, 2.0)
            .add(other, ActionLabel::Hold, 2, None, false, 4.0)
            .add(p1, ActionLabel::Pour, 1, inside(2), robot, 6.0)
            .add(p1, ActionLabel::PlaceDown, 1, on(3), false, 10.0)
            .add(other, ActionLabel::PlaceDown, 2, on(3), false, 12.0);
    } else {
        ev.add(p1, ActionLabel::Grasp, 1, None, false, 2.0)
            .add(p1, ActionLabel::Pour, 1, inside(2), false, 5.0)
            .add(p1, ActionLabel::Handover, 1, to(other), robot, 9.0)
            .add(other, ActionLabel::Pour, 1, inside(4), false, 13.0)
            .add(other, ActionLabel::PlaceDown, 1, on(3), false, 17.0)
            .add(p1, ActionLabel::Grasp, 2, None, false, 20.0);
    }
    let name = builtin_name(Scenario::Pouring, c, rep);
    ScenarioScript::new(
        name,
        Scenario::Pouring,
        c,
        objects(&["bottle", "cup", "tray", "glass"]),
        ev.events,
    )
}

/// Cup, banana, box.
fn handover(c: Constellation, rep: u32) -> ScenarioScript {
    let p1 = ActorId::person(1);
    let other = if c.has_robot() {
        ActorId::robot(1)
    } else {
        ActorId::person(2)
    };
    let robot = other.is_robot();
    let mut ev = Ev::new();
    if rep == 0 {
        ev.add(p1, ActionLabel::Grasp, 1, None, false, 2.0)
            .add(p1, ActionLabel::Handover, 1, to(other), robot, 5.0)
            .add(other, ActionLabel::PlaceDown, 1, inside(3), false, 9.0)
            .add(p1, ActionLabel::Grasp, 2, None, false, 12.0)
            .add(p1, ActionLabel::Handover, 2, to(other), robot, 15.0)
            .add(other, ActionLabel::Hold, 2, None, false, 19.0);
    } else {
        ev.add(other, ActionLabel::Grasp, 2, None, false, 2.0)
            .add(other, ActionLabel::Handover, 2, to(p1), false, 5.0)
            .add(p1, ActionLabel::PlaceDown, 2, on(3), false, 9.0)
            .add(p1, ActionLabel::Grasp, 1, None, false, 12.0)
            .add(p1, ActionLabel::Handover, 1, to(other), robot, 15.0)
            .add(other, ActionLabel::PlaceDown, 1, inside(3), false, 19.0);
    }
    let name = builtin_name(Scenario::Handover, c, rep);
    ScenarioScript::new(
        name,
        Scenario::Handover,
        c,
        objects(&["cup", "banana", "box"]),
        ev.events,
    )
}

fn builtin_name(s: Scenario, c: Constellation, rep: u32) -> String {
    if rep == 0 {
        format!("{}_{}", s.as_str(), c.file_tag())
    } else {
        format!("{}_{}_rep{}", s.as_str(), c.file_tag(), rep + 1)
    }
}

/// Apple handed to the robot, put in the bowl by the robot; second person
/// puts the orange in the bowl.
pub fn worked_example() -> ScenarioScript {
    let (p1, p2, r1) = (ActorId::person(1), ActorId::person(2), ActorId::robot(1));
    let mut ev = Ev::new();
    ev.add(p1, ActionLabel::Handover, 1, to(r1), true, 4.0)
        .add(r1, ActionLabel::PlaceDown, 1, inside(2), false, 8.0)
        .add(p2, ActionLabel::PlaceDown, 3, inside(2), false, 12.0);
    ScenarioScript::new(
        "sorting_example_s3",
        Scenario::Sorting,
        Constellation::TwoPersonsRobot,
        objects(&["apple", "bowl", "orange"]),
        ev.events,
    )
}

/// The 16-recording matrix: sorting in every constellation, pouring and
/// handover in 2P and 1P+R, two recordings each.
pub fn builtin_suite() -> Vec<ScenarioScript> {
    let mut out = Vec::with_capacity(16);
    for c in Constellation::ALL {
        for rep in 0..2 {
            out.push(sorting(c, rep));
        }
    }
    for c in [Constellation::TwoPersons, Constellation::OnePersonRobot] {
        for rep in 0..2 {
            out.push(pouring(c, rep));
        }
    }
    for c in [Constellation::TwoPersons, Constellation::OnePersonRobot] {
        for rep in 0..2 {
            out.push(handover(c, rep));
        }
    }
    out
}

/// Every builtin: the suite plus the worked example.
pub fn builtins() -> Vec<ScenarioScript> {
    let mut all = builtin_suite();
    all.push(worked_example());
    all
}

pub fn builtin_names() -> Vec<String> {
    builtins().into_iter().map(|s| s.name).collect()
}

pub fn builtin(name: &str) -> Option<ScenarioScript> {
    builtins().into_iter().find(|s| s.name == name)
}
