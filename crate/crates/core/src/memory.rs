//! Instance and episode memory.
//!
//! [`Episode`] is the plain value: registered actors and objects, id counters,
//! and the event tuples in episodic order. [`Memory`] wraps it for shared use
//! (one writer at a time, any number of readers). Persistence goes through the
//! [`EpisodeStore`] trait; [`FileStore`] writes one JSON snapshot document.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::{RwLock, RwLockReadGuard, RwLockWriteGuard};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::event_model::{tuple_order, ActorId, ActorKind, EntityRef, EventTuple, ObjectId};

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("unknown instance {0}")]
    UnknownInstance(EntityRef),
    #[error("event already stored: {0}")]
    DuplicateEvent(EventTuple),
    #[error("instance {0} is already registered")]
    DuplicateInstance(EntityRef),
    #[error("invalid query window [{0}, {1}]")]
    InvalidWindow(f64, f64),
    #[error("first_seen must be finite and non-negative, got {0}")]
    InvalidFirstSeen(f64),
    #[error("corrupt snapshot: {0}")]
    SnapshotError(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// A registered physical instance: id, crop reference, first sighting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord<Id> {
    pub id: Id,
    pub crop: String,
    pub first_seen: f64,
    /// Reserved for inline pixel payloads; carried through snapshots untouched.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blob: Option<serde_json::Value>,
}

impl<Id> InstanceRecord<Id> {
    fn new(id: Id, crop: String, first_seen: f64) -> Self {
        Self {
            id,
            crop,
            first_seen,
            blob: None,
        }
    }
}

/// Highest index handed out so far, per id kind.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub person: u32,
    pub robot: u32,
    pub object: u32,
}

impl Counters {
    fn actor_mut(&mut self, kind: ActorKind) -> &mut u32 {
        match kind {
            ActorKind::Person => &mut self.person,
            ActorKind::Robot => &mut self.robot,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Episode {
    actors: BTreeMap<ActorId, InstanceRecord<ActorId>>,
    objects: BTreeMap<ObjectId, InstanceRecord<ObjectId>>,
    events: Vec<EventTuple>,
    counters: Counters,
}

fn check_first_seen(t: f64) -> Result<(), MemoryError> {
    if t.is_finite() && t >= 0.0 {
        Ok(())
    } else {
        Err(MemoryError::InvalidFirstSeen(t))
    }
}

impl Episode {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new actor under the next free index of its kind.
    pub fn register_actor(
        &mut self,
        kind: ActorKind,
        crop: impl Into<String>,
        first_seen: f64,
    ) -> Result<ActorId, MemoryError> {
        check_first_seen(first_seen)?;
        let counter = self.counters.actor_mut(kind);
        *counter += 1;
        let id = ActorId::new(kind, *counter);
        self.actors
            .insert(id, InstanceRecord::new(id, crop.into(), first_seen));
        Ok(id)
    }

    pub fn register_object(
        &mut self,
        crop: impl Into<String>,
        first_seen: f64,
    ) -> Result<ObjectId, MemoryError> {
        check_first_seen(first_seen)?;
        self.counters.object += 1;
        let id = ObjectId::new(self.counters.object);
        self.objects
            .insert(id, InstanceRecord::new(id, crop.into(), first_seen));
        Ok(id)
    }

    /// Stores an actor under an id assigned upstream (the person tracker).
    /// The counter moves past it so later fresh ids never collide.
    pub fn insert_actor(
        &mut self,
        id: ActorId,
        crop: impl Into<String>,
        first_seen: f64,
    ) -> Result<(), MemoryError> {
        check_first_seen(first_seen)?;
        if self.actors.contains_key(&id) {
            return Err(MemoryError::DuplicateInstance(id.into()));
        }
        let counter = self.counters.actor_mut(id.kind());
        *counter = (*counter).max(id.index());
        self.actors
            .insert(id, InstanceRecord::new(id, crop.into(), first_seen));
        Ok(())
    }

    pub fn insert_object(
        &mut self,
        id: ObjectId,
        crop: impl Into<String>,
        first_seen: f64,
    ) -> Result<(), MemoryError> {
        check_first_seen(first_seen)?;
        if self.objects.contains_key(&id) {
            return Err(MemoryError::DuplicateInstance(id.into()));
        }
        self.counters.object = self.counters.object.max(id.index());
        self.objects
            .insert(id, InstanceRecord::new(id, crop.into(), first_seen));
        Ok(())
    }

    pub fn contains(&self, entity: EntityRef) -> bool {
        match entity {
            EntityRef::Actor(a) => self.actors.contains_key(&a),
            EntityRef::Object(o) => self.objects.contains_key(&o),
        }
    }

    pub fn actor(&self, id: ActorId) -> Option<&InstanceRecord<ActorId>> {
        self.actors.get(&id)
    }

    pub fn object(&self, id: ObjectId) -> Option<&InstanceRecord<ObjectId>> {
        self.objects.get(&id)
    }

    pub fn actors(&self) -> impl Iterator<Item = &InstanceRecord<ActorId>> {
        self.actors.values()
    }

    pub fn objects(&self) -> impl Iterator<Item = &InstanceRecord<ObjectId>> {
        self.objects.values()
    }

    pub fn events(&self) -> &[EventTuple] {
        &self.events
    }

    pub fn counters(&self) -> Counters {
        self.counters
    }

    pub fn append_event(&mut self, t: EventTuple) -> Result<(), MemoryError> {
        if let Some(missing) = t.references().find(|e| !self.contains(*e)) {
            return Err(MemoryError::UnknownInstance(missing));
        }
        match self.events.binary_search_by(|probe| tuple_order(probe, &t)) {
            Ok(_) => Err(MemoryError::DuplicateEvent(t)),
            Err(pos) => {
                self.events.insert(pos, t);
                Ok(())
            }
        }
    }

    /// Stored tuples with `t0 <= time <= t1`, optionally for one actor.
    pub fn query_events(
        &self,
        t0: f64,
        t1: f64,
        actor: Option<ActorId>,
    ) -> Result<Vec<EventTuple>, MemoryError> {
        if t0.is_nan() || t1.is_nan() || t0 > t1 {
            return Err(MemoryError::InvalidWindow(t0, t1));
        }
        let start = self.events.partition_point(|e| e.time() < t0);
        Ok(self.events[start..]
            .iter()
            .take_while(|e| e.time() <= t1)
            .filter(|e| actor.is_none_or(|a| e.actor() == a))
            .cloned()
            .collect())
    }

    /// Checks every invariant a loaded snapshot must satisfy.
    pub fn check_integrity(&self) -> Result<(), String> {
        for (id, rec) in &self.actors {
            if rec.id != *id {
                return Err(format!("actor record keyed {id} holds {}", rec.id));
            }
            if !(rec.first_seen.is_finite() && rec.first_seen >= 0.0) {
                return Err(format!("{id}: invalid first_seen"));
            }
            let counter = match id.kind() {
                ActorKind::Person => self.counters.person,
                ActorKind::Robot => self.counters.robot,
            };
            if id.index() > counter {
                return Err(format!("{id} exceeds its id counter {counter}"));
            }
        }
        for (id, rec) in &self.objects {
            if rec.id != *id {
                return Err(format!("object record keyed {id} holds {}", rec.id));
            }
            if !(rec.first_seen.is_finite() && rec.first_seen >= 0.0) {
                return Err(format!("{id}: invalid first_seen"));
            }
            if id.index() > self.counters.object {
                return Err(format!(
                    "{id} exceeds its id counter {}",
                    self.counters.object
                ));
            }
        }
        for pair in self.events.windows(2) {
            if tuple_order(&pair[0], &pair[1]) != std::cmp::Ordering::Less {
                return Err(format!("events not strictly ordered at {}", pair[1]));
            }
        }
        for e in &self.events {
            if let Some(missing) = e.references().find(|r| !self.contains(*r)) {
                return Err(format!("event {e} references unregistered {missing}"));
            }
        }
        Ok(())
    }

    pub fn write_snapshot<W: Write>(&self, mut sink: W) -> Result<(), MemoryError> {
        let doc = SnapshotRef {
            actors: self.actors.values().collect(),
            objects: self.objects.values().collect(),
            events: &self.events,
            counters: self.counters,
        };
        serde_json::to_writer(&mut sink, &doc).map_err(io::Error::other)?;
        sink.write_all(b"\n")?;
        sink.flush()?;
        Ok(())
    }

    pub fn read_snapshot<R: Read>(source: R) -> Result<Self, MemoryError> {
        let doc: SnapshotOwned = serde_json::from_reader(source)
            .map_err(|e| MemoryError::SnapshotError(e.to_string()))?;
        let mut ep = Episode {
            counters: doc.counters,
            ..Default::default()
        };
        for a in doc.actors {
            if ep.actors.insert(a.id, a.clone()).is_some() {
                return Err(MemoryError::SnapshotError(format!(
                    "duplicate actor {}",
                    a.id
                )));
            }
        }
        for o in doc.objects {
            if ep.objects.insert(o.id, o.clone()).is_some() {
                return Err(MemoryError::SnapshotError(format!(
                    "duplicate object {}",
                    o.id
                )));
            }
        }
        ep.events = doc.events;
        ep.check_integrity().map_err(MemoryError::SnapshotError)?;
        Ok(ep)
    }
}

#[derive(Serialize)]
struct SnapshotRef<'a> {
    actors: Vec<&'a InstanceRecord<ActorId>>,
    objects: Vec<&'a InstanceRecord<ObjectId>>,
    events: &'a [EventTuple],
    counters: Counters,
}

#[derive(Deserialize)]
struct SnapshotOwned {
    actors: Vec<InstanceRecord<ActorId>>,
    objects: Vec<InstanceRecord<ObjectId>>,
    events: Vec<EventTuple>,
    counters: Counters,
}

/// Episode shared between the pipeline and its readers.
#[derive(Debug, Default)]
pub struct Memory {
    inner: RwLock<Episode>,
}

impl Memory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_episode(ep: Episode) -> Self {
        Self {
            inner: RwLock::new(ep),
        }
    }

    /// Consistent read view; writers wait while it is held.
    pub fn read(&self) -> RwLockReadGuard<'_, Episode> {
        self.inner.read().unwrap_or_else(|p| p.into_inner())
    }

    pub fn write(&self) -> RwLockWriteGuard<'_, Episode> {
        self.inner.write().unwrap_or_else(|p| p.into_inner())
    }

    pub fn register_actor(
        &self,
        kind: ActorKind,
        crop: impl Into<String>,
        first_seen: f64,
    ) -> Result<ActorId, MemoryError> {
        self.write().register_actor(kind, crop, first_seen)
    }

    pub fn register_object(
        &self,
        crop: impl Into<String>,
        first_seen: f64,
    ) -> Result<ObjectId, MemoryError> {
        self.write().register_object(crop, first_seen)
    }

    pub fn append_event(&self, t: EventTuple) -> Result<(), MemoryError> {
        self.write().append_event(t)
    }

    pub fn query_events(
        &self,
        t0: f64,
        t1: f64,
        actor: Option<ActorId>,
    ) -> Result<Vec<EventTuple>, MemoryError> {
        self.read().query_events(t0, t1, actor)
    }

    pub fn events(&self) -> Vec<EventTuple> {
        self.read().events().to_vec()
    }

    pub fn snapshot<W: Write>(&self, sink: W) -> Result<(), MemoryError> {
        self.read().write_snapshot(sink)
    }

    pub fn load<R: Read>(source: R) -> Result<Self, MemoryError> {
        Episode::read_snapshot(source).map(Self::from_episode)
    }

    pub fn into_episode(self) -> Episode {
        self.inner.into_inner().unwrap_or_else(|p| p.into_inner())
    }
}

/// Pluggable persistence backend for episodes.
pub trait EpisodeStore {
    fn save(&self, episode: &Episode) -> Result<(), MemoryError>;
    fn load(&self) -> Result<Episode, MemoryError>;
}

/// Default store: one JSON snapshot file, replaced atomically on save.
#[derive(Debug, Clone)]
pub struct FileStore {
    path: PathBuf,
}

impl FileStore {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl EpisodeStore for FileStore {
    fn save(&self, episode: &Episode) -> Result<(), MemoryError> {
        let tmp = self.path.with_extension("tmp");
        {
            let file = fs::File::create(&tmp)?;
            episode.write_snapshot(io::BufWriter::new(file))?;
        }
        fs::rename(&tmp, &self.path)?;
        Ok(())
    }

    fn load(&self) -> Result<Episode, MemoryError> {
        let file = fs::File::open(&self.path)?;
        Episode::read_snapshot(io::BufReader::new(file))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event_model::{ActionLabel, SpatialRelation};
    use proptest::prelude::*;

    /// Episode holding the three-event fruit-sorting example.
    fn worked_episode() -> (Episode, Vec<EventTuple>) {
        let mut ep = Episode::new();
        let p1 = ep.register_actor(ActorKind::Person, "p1.png", 0.0).unwrap();
        let p2 = ep.register_actor(ActorKind::Person, "p2.png", 0.0).unwrap();
        let r1 = ep.register_actor(ActorKind::Robot, "r1.png", 0.0).unwrap();
        let apple = ep.register_object("apple.png", 0.0).unwrap();
        let bowl = ep.register_object("bowl.png", 0.0).unwrap();
        let orange = ep.register_object("orange.png", 0.0).unwrap();
        let ts = vec![
            EventTuple::new(
                p1,
                ActionLabel::Handover,
                apple,
                Some(SpatialRelation::to(r1)),
                true,
                4.0,
            )
            .unwrap(),
            EventTuple::new(
                r1,
                ActionLabel::PlaceDown,
                apple,
                Some(SpatialRelation::inside(bowl)),
                false,
                8.0,
            )
            .unwrap(),
            EventTuple::new(
                p2,
                ActionLabel::PlaceDown,
                orange,
                Some(SpatialRelation::inside(bowl)),
                false,
                12.0,
            )
            .unwrap(),
        ];
        for t in &ts {
            ep.append_event(t.clone()).unwrap();
        }
        (ep, ts)
    }

    #[test]
    fn fresh_ids_are_monotone() {
        let mut ep = Episode::new();
        assert_eq!(
            ep.register_actor(ActorKind::Person, "a", 0.0).unwrap(),
            ActorId::person(1)
        );
        assert_eq!(
            ep.register_actor(ActorKind::Person, "b", 0.5).unwrap(),
            ActorId::person(2)
        );
        assert_eq!(
            ep.register_actor(ActorKind::Robot, "r", 0.0).unwrap(),
            ActorId::robot(1)
        );
        assert_eq!(ep.register_object("o", 0.0).unwrap(), ObjectId::new(1));
        assert_eq!(ep.register_object("o", 0.0).unwrap(), ObjectId::new(2));
        assert_eq!(ep.actor(ActorId::person(2)).unwrap().first_seen, 0.5);
    }

    #[test]
    fn ids_continue_after_persistence() {
        let mut ep = Episode::new();
        let before: Vec<ActorId> = (0..3)
            .map(|_| ep.register_actor(ActorKind::Person, "c", 0.0).unwrap())
            .collect();
        let obj_before: Vec<ObjectId> = (0..2)
            .map(|_| ep.register_object("o", 0.0).unwrap())
            .collect();
        let mut buf = Vec::new();
        ep.write_snapshot(&mut buf).unwrap();
        let mut loaded = Episode::read_snapshot(buf.as_slice()).unwrap();
        let next = loaded.register_actor(ActorKind::Person, "c", 1.0).unwrap();
        let next_obj = loaded.register_object("o", 1.0).unwrap();
        assert!(!before.contains(&next));
        assert_eq!(next, ActorId::person(4));
        assert!(!obj_before.contains(&next_obj));
        assert_eq!(next_obj, ObjectId::new(3));
    }

    #[test]
    fn insert_moves_counter_past_upstream_ids() {
        let mut ep = Episode::new();
        ep.insert_actor(ActorId::person(5), "c", 0.0).unwrap();
        assert!(matches!(
            ep.insert_actor(ActorId::person(5), "c", 0.0),
            Err(MemoryError::DuplicateInstance(_))
        ));
        assert_eq!(
            ep.register_actor(ActorKind::Person, "c", 0.0).unwrap(),
            ActorId::person(6)
        );
    }

    #[test]
    fn append_keeps_events_sorted() {
        let (ep, ts) = worked_episode();
        assert_eq!(ep.events(), ts.as_slice());

        let (mut ep2, _) = worked_episode();
        ep2.events.clear();
        ep2.append_event(ts[1].clone()).unwrap();
        ep2.append_event(ts[0].clone()).unwrap();
        assert_eq!(ep2.events(), &ts[..2]);
    }

    #[test]
    fn append_rejects_unknown_and_duplicate() {
        let (mut ep, ts) = worked_episode();
        let stray = EventTuple::new(
            ActorId::person(1),
            ActionLabel::Grasp,
            ObjectId::new(9),
            None,
            false,
            1.0,
        )
        .unwrap();
        assert!(matches!(
            ep.append_event(stray),
            Err(MemoryError::UnknownInstance(EntityRef::Object(o))) if o == ObjectId::new(9)
        ));
        let to_ghost = EventTuple::new(
            ActorId::person(1),
            ActionLabel::Handover,
            ObjectId::new(1),
            Some(SpatialRelation::to(ActorId::person(7))),
            false,
            1.0,
        )
        .unwrap();
        assert!(matches!(
            ep.append_event(to_ghost),
            Err(MemoryError::UnknownInstance(_))
        ));
        assert!(matches!(
            ep.append_event(ts[0].clone()),
            Err(MemoryError::DuplicateEvent(_))
        ));
        // Same fields at another time is a new occurrence.
        ep.append_event(ts[0].with_time(20.0).unwrap()).unwrap();
        assert_eq!(ep.events().len(), 4);
    }

    #[test]
    fn query_examples() {
        let (ep, ts) = worked_episode();
        assert_eq!(ep.query_events(0.0, f64::INFINITY, None).unwrap(), ts);
        assert_eq!(ep.query_events(4.0, 8.0, None).unwrap(), ts[..2].to_vec());
        assert_eq!(
            ep.query_events(0.0, 100.0, Some(ActorId::person(2)))
                .unwrap(),
            vec![ts[2].clone()]
        );
        assert!(Episode::new()
            .query_events(0.0, 0.0, None)
            .unwrap()
            .is_empty());
        assert!(matches!(
            ep.query_events(2.0, 1.0, None),
            Err(MemoryError::InvalidWindow(..))
        ));
    }

    #[test]
    fn snapshot_round_trips() {
        let empty = Episode::new();
        let mut buf = Vec::new();
        empty.write_snapshot(&mut buf).unwrap();
        assert_eq!(Episode::read_snapshot(buf.as_slice()).unwrap(), empty);

        let (ep, _) = worked_episode();
        let mut buf = Vec::new();
        ep.write_snapshot(&mut buf).unwrap();
        assert_eq!(Episode::read_snapshot(buf.as_slice()).unwrap(), ep);

        let truncated = &buf[..buf.len() / 2];
        assert!(matches!(
            Episode::read_snapshot(truncated),
            Err(MemoryError::SnapshotError(_))
        ));
    }

    #[test]
    fn snapshot_rejects_broken_invariants() {
        let (ep, _) = worked_episode();
        let mut buf = Vec::new();
        ep.write_snapshot(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lowered = text.replace(r#""person":2"#, r#""person":1"#);
        assert!(matches!(
            Episode::read_snapshot(lowered.as_bytes()),
            Err(MemoryError::SnapshotError(_))
        ));
        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["objects"].as_array_mut().unwrap().pop();
        assert!(matches!(
            Episode::read_snapshot(v.to_string().as_bytes()),
            Err(MemoryError::SnapshotError(_))
        ));
    }

    #[test]
    fn file_store_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let store = FileStore::new(dir.path().join("memory.json"));
        let (ep, _) = worked_episode();
        store.save(&ep).unwrap();
        assert_eq!(store.load().unwrap(), ep);
    }

    #[test]
    fn concurrent_readers_see_sorted_episode() {
        let (ep, _) = worked_episode();
        let mem = Memory::from_episode(ep);
        std::thread::scope(|s| {
            s.spawn(|| {
                for k in 0..200 {
                    let t = EventTuple::new(
                        ActorId::person(1),
                        ActionLabel::Grasp,
                        ObjectId::new(2),
                        None,
                        false,
                        100.0 - f64::from(k) * 0.25,
                    )
                    .unwrap();
                    mem.append_event(t).unwrap();
                }
            });
            for _ in 0..4 {
                s.spawn(|| {
                    for _ in 0..200 {
                        let view = mem.read();
                        assert!(view.check_integrity().is_ok());
                    }
                });
            }
        });
        assert_eq!(mem.events().len(), 203);
    }

    #[derive(Debug, Clone)]
    enum Op {
        Person,
        Robot,
        Object,
        Event {
            actor: u32,
            obj: u32,
            target: Option<u32>,
            verb: usize,
            tq: u16,
        },
    }

    fn arb_op() -> impl Strategy<Value = Op> {
        prop_oneof![
            Just(Op::Person),
            Just(Op::Robot),
            Just(Op::Object),
            (
                1u32..5,
                1u32..6,
                prop::option::of(1u32..6),
                0usize..12,
                0u16..40
            )
                .prop_map(|(actor, obj, target, verb, tq)| Op::Event {
                    actor,
                    obj,
                    target,
                    verb,
                    tq
                }),
        ]
    }

    proptest! {
        #[test]
        fn random_operation_sequences(ops in prop::collection::vec(arb_op(), 0..60)) {
            let mut ep = Episode::new();
            let mut accepted: Vec<EventTuple> = Vec::new();
            for op in ops {
                match op {
                    Op::Person => { ep.register_actor(ActorKind::Person, "p", 0.0).unwrap(); }
                    Op::Robot => { ep.register_actor(ActorKind::Robot, "r", 0.0).unwrap(); }
                    Op::Object => { ep.register_object("o", 0.0).unwrap(); }
                    Op::Event { actor, obj, target, verb, tq } => {
                        let rel = target.map(|k| SpatialRelation::on(ObjectId::new(k)));
                        if let Ok(t) = EventTuple::new(ActorId::person(actor), ActionLabel::ACTIVE[verb], ObjectId::new(obj), rel, false, f64::from(tq) / 4.0) {
                            let dup = accepted.contains(&t);
                            match ep.append_event(t.clone()) {
                                Ok(()) => { prop_assert!(!dup); accepted.push(t); }
                                Err(MemoryError::DuplicateEvent(_)) => prop_assert!(dup),
                                Err(MemoryError::UnknownInstance(_)) => {}
                                Err(e) => return Err(TestCaseError::fail(e.to_string())),
                            }
                        }
                    }
                }
                prop_assert!(ep.check_integrity().is_ok());
            }
            let all = ep.query_events(0.0, f64::INFINITY, None).unwrap();
            accepted.sort_by(tuple_order);
            prop_assert_eq!(&all, &accepted);
            let mut buf = Vec::new();
            ep.write_snapshot(&mut buf).unwrap();
            let loaded = Episode::read_snapshot(buf.as_slice()).unwrap();
            prop_assert_eq!(&loaded, &ep);
        }
    }
}
