//! Wire formats.
//!
//! | file              | layout                                   |
//! |-------------------|------------------------------------------|
//! | `*.frames.jsonl`  | one [`FrameRecord`] per line             |
//! | `*.objects.json`  | one [`ObjectRegistry`] document          |
//! | `*.events.jsonl`  | optional metadata header, one tuple/line |
//!
//! Parsers reject any schema deviation with the 1-based line number; they
//! never repair input. Unknown extra fields are ignored on read and never
//! written. Crop references are opaque strings and are never opened here.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{self, BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::event_model::{
    tuple_order, ActionLabel, ActorId, EntityRef, EventTuple, IdError, ObjectId, RelationKind,
    SpatialRelation, TupleError,
};

#[derive(Debug, Error)]
pub enum StreamError {
    #[error("line {line}: malformed record: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("line {line}: time does not strictly increase")]
    NonMonotoneTime { line: usize },
    #[error("line {line}: frame index does not strictly increase")]
    NonMonotoneFrame { line: usize },
    #[error("line {line}: unknown verb '{verb}'")]
    UnknownVerb { line: usize, verb: String },
    #[error("line {line}: unknown scenario '{value}'")]
    UnknownScenario { line: usize, value: String },
    #[error("line {line}: unknown constellation '{value}'")]
    UnknownConstellation { line: usize, value: String },
    #[error("line {line}: ground truth requires a metadata header as its first record")]
    MissingMetadata { line: usize },
    #[error("line {line}: invalid event: {source}")]
    InvalidTuple {
        line: usize,
        #[source]
        source: TupleError,
    },
    #[error("invalid object registry: {0}")]
    InvalidRegistry(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl StreamError {
    /// Line the error refers to, when it refers to one.
    pub fn line(&self) -> Option<usize> {
        match self {
            StreamError::MalformedLine { line, .. }
            | StreamError::NonMonotoneTime { line }
            | StreamError::NonMonotoneFrame { line }
            | StreamError::UnknownVerb { line, .. }
            | StreamError::UnknownScenario { line, .. }
            | StreamError::UnknownConstellation { line, .. }
            | StreamError::MissingMetadata { line }
            | StreamError::InvalidTuple { line, .. } => Some(*line),
            StreamError::InvalidRegistry(_) | StreamError::Io(_) => None,
        }
    }
}

fn malformed(line: usize, reason: impl fmt::Display) -> StreamError {
    StreamError::MalformedLine {
        line,
        reason: reason.to_string(),
    }
}

fn id_error(line: usize, err: IdError) -> StreamError {
    match err {
        IdError::UnknownVerb(verb) => StreamError::UnknownVerb { line, verb },
        other => malformed(line, other),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    Sorting,
    Pouring,
    Handover,
}

impl Scenario {
    pub const ALL: [Scenario; 3] = [Scenario::Sorting, Scenario::Pouring, Scenario::Handover];

    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::Sorting => "sorting",
            Scenario::Pouring => "pouring",
            Scenario::Handover => "handover",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scenario {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Scenario::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| s.to_string())
    }
}

/// Participant configuration of a recording.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Constellation {
    #[serde(rename = "1P")]
    OnePerson,
    #[serde(rename = "2P")]
    TwoPersons,
    #[serde(rename = "1P+R")]
    OnePersonRobot,
    #[serde(rename = "2P+R")]
    TwoPersonsRobot,
}

impl Constellation {
    pub const ALL: [Constellation; 4] = [
        Constellation::OnePerson,
        Constellation::TwoPersons,
        Constellation::OnePersonRobot,
        Constellation::TwoPersonsRobot,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Constellation::OnePerson => "1P",
            Constellation::TwoPersons => "2P",
            Constellation::OnePersonRobot => "1P+R",
            Constellation::TwoPersonsRobot => "2P+R",
        }
    }

    /// Form safe for file names: `1P_R` instead of `1P+R`.
    pub fn file_tag(self) -> &'static str {
        match self {
            Constellation::OnePerson => "1P",
            Constellation::TwoPersons => "2P",
            Constellation::OnePersonRobot => "1P_R",
            Constellation::TwoPersonsRobot => "2P_R",
        }
    }

    pub fn persons(self) -> u32 {
        match self {
            Constellation::OnePerson | Constellation::OnePersonRobot => 1,
            Constellation::TwoPersons | Constellation::TwoPersonsRobot => 2,
        }
    }

    pub fn has_robot(self) -> bool {
        matches!(
            self,
            Constellation::OnePersonRobot | Constellation::TwoPersonsRobot
        )
    }

    /// Actors present in this constellation, in id order.
    pub fn actors(self) -> Vec<ActorId> {
        let mut out: Vec<ActorId> = (1..=self.persons()).map(ActorId::person).collect();
        if self.has_robot() {
            out.push(ActorId::robot(1));
        }
        out
    }
}

impl fmt::Display for Constellation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Constellation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Constellation::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| s.to_string())
    }
}

// ---------------------------------------------------------------------------
// Frames
// ---------------------------------------------------------------------------

/// One time-slice of the detector stream: a label and a crop per actor.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub frame_index: u64,
    pub time: f64,
    pub actions: BTreeMap<ActorId, ActionLabel>,
    pub person_crops: BTreeMap<ActorId, String>,
    pub scene_crop: Option<String>,
}

impl FrameRecord {
    pub fn new(frame_index: u64, time: f64) -> Self {
        Self {
            frame_index,
            time,
            actions: BTreeMap::new(),
            person_crops: BTreeMap::new(),
            scene_crop: None,
        }
    }

    pub fn with_actor(
        mut self,
        actor: ActorId,
        label: ActionLabel,
        crop: impl Into<String>,
    ) -> Self {
        self.actions.insert(actor, label);
        self.person_crops.insert(actor, crop.into());
        self
    }

    pub fn with_scene(mut self, crop: impl Into<String>) -> Self {
        self.scene_crop = Some(crop.into());
        self
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("frame serialization is infallible")
    }
}

#[derive(Deserialize)]
struct RawFrameIn {
    frame: u64,
    time: f64,
    actions: BTreeMap<String, String>,
    person_crops: BTreeMap<String, String>,
    #[serde(default)]
    scene_crop: Option<String>,
}

// Maps are emitted in actor-id order, so `person_2` precedes `person_10`.
impl Serialize for FrameRecord {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        use serde::ser::{SerializeMap, SerializeStruct};
        struct Ordered<'a, V>(&'a BTreeMap<ActorId, V>, fn(&V) -> &str);
        impl<V> Serialize for Ordered<'_, V> {
            fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                let mut m = s.serialize_map(Some(self.0.len()))?;
                for (k, v) in self.0 {
                    m.serialize_entry(&k.to_string(), (self.1)(v))?;
                }
                m.end()
            }
        }
        let n = if self.scene_crop.is_some() { 5 } else { 4 };
        let mut st = s.serialize_struct("FrameRecord", n)?;
        st.serialize_field("frame", &self.frame_index)?;
        st.serialize_field("time", &self.time)?;
        st.serialize_field("actions", &Ordered(&self.actions, |a| a.as_str()))?;
        st.serialize_field("person_crops", &Ordered(&self.person_crops, |c| c.as_str()))?;
        if let Some(scene) = &self.scene_crop {
            st.serialize_field("scene_crop", scene)?;
        }
        st.end()
    }
}

fn parse_frame_line(line_no: usize, text: &str) -> Result<FrameRecord, StreamError> {
    let raw: RawFrameIn = serde_json::from_str(text).map_err(|e| malformed(line_no, e))?;
    if !raw.time.is_finite() || raw.time < 0.0 {
        return Err(malformed(line_no, "time must be finite and non-negative"));
    }
    let mut actions = BTreeMap::new();
    for (k, v) in &raw.actions {
        let actor: ActorId = k.parse().map_err(|e| id_error(line_no, e))?;
        let label: ActionLabel = v.parse().map_err(|e| id_error(line_no, e))?;
        actions.insert(actor, label);
    }
    let mut person_crops = BTreeMap::new();
    for (k, v) in raw.person_crops {
        let actor: ActorId = k.parse().map_err(|e| id_error(line_no, e))?;
        person_crops.insert(actor, v);
    }
    if !actions.keys().eq(person_crops.keys()) {
        return Err(malformed(
            line_no,
            "actions and person_crops must have the same actors",
        ));
    }
    Ok(FrameRecord {
        frame_index: raw.frame,
        time: raw.time,
        actions,
        person_crops,
        scene_crop: raw.scene_crop,
    })
}

/// Incremental frame-stream parser over one reader.
pub struct FrameReader<R> {
    input: R,
    line_no: usize,
    last: Option<(u64, f64)>,
    buf: String,
    failed: bool,
}

impl<R: BufRead> FrameReader<R> {
    pub fn new(input: R) -> Self {
        Self {
            input,
            line_no: 0,
            last: None,
            buf: String::new(),
            failed: false,
        }
    }

    fn next_record(&mut self) -> Result<Option<FrameRecord>, StreamError> {
        loop {
            self.buf.clear();
            if self.input.read_line(&mut self.buf)? == 0 {
                return Ok(None);
            }
            self.line_no += 1;
            let text = self.buf.trim();
            if text.is_empty() {
                continue;
            }
            let rec = parse_frame_line(self.line_no, text)?;
            if let Some((frame, time)) = self.last {
                if rec.time <= time {
                    return Err(StreamError::NonMonotoneTime { line: self.line_no });
                }
                if rec.frame_index <= frame {
                    return Err(StreamError::NonMonotoneFrame { line: self.line_no });
                }
            }
            self.last = Some((rec.frame_index, rec.time));
            return Ok(Some(rec));
        }
    }
}

impl<R: BufRead> Iterator for FrameReader<R> {
    type Item = Result<FrameRecord, StreamError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        let out = self.next_record().transpose();
        if matches!(out, Some(Err(_))) {
            self.failed = true;
        }
        out
    }
}

pub fn parse_frame_stream<R: BufRead>(input: R) -> Result<Vec<FrameRecord>, StreamError> {
    FrameReader::new(input).collect()
}

pub fn write_frame_stream<W: Write>(frames: &[FrameRecord], mut sink: W) -> io::Result<usize> {
    let mut n = 0;
    for f in frames {
        let mut line = f.to_json_line();
        line.push('\n');
        sink.write_all(line.as_bytes())?;
        n += line.len();
    }
    sink.flush()?;
    Ok(n)
}

// ---------------------------------------------------------------------------
// Object registry
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub id: ObjectId,
    pub crop: String,
    pub first_seen: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_hint: Option<String>,
}

/// Object instances segmented once at start-up.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ObjectRegistry {
    pub objects: Vec<RegistryEntry>,
}

impl ObjectRegistry {
    pub fn validate(&self) -> Result<(), StreamError> {
        let mut seen = BTreeSet::new();
        for e in &self.objects {
            if !seen.insert(e.id) {
                return Err(StreamError::InvalidRegistry(format!(
                    "duplicate id {}",
                    e.id
                )));
            }
            if !e.first_seen.is_finite() || e.first_seen < 0.0 {
                return Err(StreamError::InvalidRegistry(format!(
                    "{}: first_seen must be finite and non-negative",
                    e.id
                )));
            }
        }
        Ok(())
    }

    pub fn get(&self, id: ObjectId) -> Option<&RegistryEntry> {
        self.objects.iter().find(|e| e.id == id)
    }
}

pub fn parse_registry<R: io::Read>(input: R) -> Result<ObjectRegistry, StreamError> {
    let reg: ObjectRegistry =
        serde_json::from_reader(input).map_err(|e| StreamError::InvalidRegistry(e.to_string()))?;
    reg.validate()?;
    Ok(reg)
}

pub fn write_registry<W: Write>(reg: &ObjectRegistry, mut sink: W) -> io::Result<usize> {
    let mut text = serde_json::to_string_pretty(reg).map_err(io::Error::other)?;
    text.push('\n');
    sink.write_all(text.as_bytes())?;
    sink.flush()?;
    Ok(text.len())
}

// ---------------------------------------------------------------------------
// Events (ground truth and predictions)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruthMeta {
    pub scenario: Scenario,
    pub constellation: Constellation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recording: Option<String>,
}

/// Annotated recording: metadata plus tuples in episodic order.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthFile {
    pub meta: GroundTruthMeta,
    pub tuples: Vec<EventTuple>,
}

impl GroundTruthFile {
    pub fn new(meta: GroundTruthMeta, mut tuples: Vec<EventTuple>) -> Self {
        tuples.sort_by(tuple_order);
        Self { meta, tuples }
    }
}

#[derive(Deserialize)]
struct RawRelationIn {
    rho: String,
    target: String,
}

#[derive(Deserialize)]
struct RawEventIn {
    actor: String,
    action: String,
    object: String,
    #[serde(default)]
    relation: Option<RawRelationIn>,
    robot_interaction: bool,
    time: f64,
}

#[derive(Deserialize)]
struct RawMetaIn {
    scenario: String,
    constellation: String,
    #[serde(default)]
    recording: Option<String>,
}

fn parse_event_value(line: usize, value: serde_json::Value) -> Result<EventTuple, StreamError> {
    let raw: RawEventIn = serde_json::from_value(value).map_err(|e| malformed(line, e))?;
    let actor: ActorId = raw.actor.parse().map_err(|e| id_error(line, e))?;
    let action: ActionLabel = raw.action.parse().map_err(|e| id_error(line, e))?;
    let object: ObjectId = raw.object.parse().map_err(|e| id_error(line, e))?;
    let relation = match raw.relation {
        None => None,
        Some(r) => {
            let rho: RelationKind = r.rho.parse().map_err(|e| id_error(line, e))?;
            let target: EntityRef = r.target.parse().map_err(|e| id_error(line, e))?;
            Some(
                SpatialRelation::new(rho, target).map_err(|e| StreamError::InvalidTuple {
                    line,
                    source: e.into(),
                })?,
            )
        }
    };
    EventTuple::new(
        actor,
        action,
        object,
        relation,
        raw.robot_interaction,
        raw.time,
    )
    .map_err(|source| StreamError::InvalidTuple { line, source })
}

fn parse_meta_value(line: usize, value: serde_json::Value) -> Result<GroundTruthMeta, StreamError> {
    let raw: RawMetaIn = serde_json::from_value(value).map_err(|e| malformed(line, e))?;
    let scenario = raw
        .scenario
        .parse()
        .map_err(|value| StreamError::UnknownScenario { line, value })?;
    let constellation = raw
        .constellation
        .parse()
        .map_err(|value| StreamError::UnknownConstellation { line, value })?;
    Ok(GroundTruthMeta {
        scenario,
        constellation,
        recording: raw.recording,
    })
}

fn read_event_lines<R: BufRead>(
    input: R,
) -> Result<(Option<GroundTruthMeta>, Vec<EventTuple>, usize), StreamError> {
    let mut meta = None;
    let mut tuples = Vec::new();
    let mut first_line = None;
    for (i, line) in input.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        let text = line.trim();
        if text.is_empty() {
            continue;
        }
        let is_first = first_line.is_none();
        first_line.get_or_insert(line_no);
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| malformed(line_no, e))?;
        if !value.is_object() {
            return Err(malformed(line_no, "record must be a JSON object"));
        }
        if value.get("scenario").is_some() {
            if !is_first {
                return Err(malformed(
                    line_no,
                    "metadata header must be the first record",
                ));
            }
            meta = Some(parse_meta_value(line_no, value)?);
        } else {
            tuples.push(parse_event_value(line_no, value)?);
        }
    }
    Ok((meta, tuples, first_line.unwrap_or(1)))
}

/// Reads a ground-truth file. The first record must be the metadata header
/// `{"scenario": ..., "constellation": ...}`; tuples come back sorted.
pub fn parse_ground_truth<R: BufRead>(input: R) -> Result<GroundTruthFile, StreamError> {
    let (meta, tuples, first_line) = read_event_lines(input)?;
    let meta = meta.ok_or(StreamError::MissingMetadata { line: first_line })?;
    Ok(GroundTruthFile::new(meta, tuples))
}

/// Reads an event file in file order. A metadata header is accepted and
/// ignored, so ground-truth files can be read as plain event lists.
pub fn parse_events<R: BufRead>(input: R) -> Result<Vec<EventTuple>, StreamError> {
    read_event_lines(input).map(|(_, tuples, _)| tuples)
}

fn write_tuples<W: Write>(tuples: &[EventTuple], sink: &mut W) -> io::Result<usize> {
    let mut sorted: Vec<&EventTuple> = tuples.iter().collect();
    sorted.sort_by(|a, b| tuple_order(a, b));
    let mut n = 0;
    for t in sorted {
        let mut line = serde_json::to_string(t).map_err(io::Error::other)?;
        line.push('\n');
        sink.write_all(line.as_bytes())?;
        n += line.len();
    }
    Ok(n)
}

/// Writes tuples one per line in episodic order; returns the byte count.
pub fn write_predictions<W: Write>(tuples: &[EventTuple], mut sink: W) -> io::Result<usize> {
    let n = write_tuples(tuples, &mut sink)?;
    sink.flush()?;
    Ok(n)
}

pub fn write_ground_truth<W: Write>(gt: &GroundTruthFile, mut sink: W) -> io::Result<usize> {
    let mut header = serde_json::to_string(&gt.meta).map_err(io::Error::other)?;
    header.push('\n');
    sink.write_all(header.as_bytes())?;
    let n = header.len() + write_tuples(&gt.tuples, &mut sink)?;
    sink.flush()?;
    Ok(n)
}
