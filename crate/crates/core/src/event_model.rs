//! Event-tuple algebra.
//!
//! An [`EventTuple`] records who did what to which object, where, when, and
//! whether the robot took part. Every other module speaks in these types, and
//! the canonical string forms defined here (`person_1`, `robot_2`, `object_3`,
//! `place_down`, ...) are the normative serialization for every wire format.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IdError {
    #[error("malformed identifier '{0}'")]
    Malformed(String),
    #[error("identifier index must be positive in '{0}'")]
    ZeroIndex(String),
    #[error("unknown action verb '{0}'")]
    UnknownVerb(String),
    #[error("unknown spatial relation '{0}'")]
    UnknownRelation(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActorKind {
    Person,
    Robot,
}

impl ActorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ActorKind::Person => "person",
            ActorKind::Robot => "robot",
        }
    }
}

fn parse_indexed(s: &str, prefix: &str) -> Result<Option<u32>, IdError> {
    let Some(rest) = s.strip_prefix(prefix).and_then(|r| r.strip_prefix('_')) else {
        return Ok(None);
    };
    // Canonical form only: no sign, no leading zeros.
    if rest.is_empty() || !rest.bytes().all(|b| b.is_ascii_digit()) || rest.starts_with('0') {
        if rest == "0" {
            return Err(IdError::ZeroIndex(s.to_string()));
        }
        return Err(IdError::Malformed(s.to_string()));
    }
    rest.parse::<u32>()
        .map(Some)
        .map_err(|_| IdError::Malformed(s.to_string()))
}

/// A uniquely identified actor: a tracked person or a robot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ActorId {
    kind: ActorKind,
    index: u32,
}

impl ActorId {
    /// Panics when `index` is zero; use [`ActorId::try_new`] for untrusted input.
    pub fn new(kind: ActorKind, index: u32) -> Self {
        Self::try_new(kind, index).expect("actor index must be positive")
    }

    pub fn try_new(kind: ActorKind, index: u32) -> Result<Self, IdError> {
        if index == 0 {
            return Err(IdError::ZeroIndex(format!("{}_0", kind.as_str())));
        }
        Ok(Self { kind, index })
    }

    pub fn person(index: u32) -> Self {
        Self::new(ActorKind::Person, index)
    }

    pub fn robot(index: u32) -> Self {
        Self::new(ActorKind::Robot, index)
    }

    pub fn kind(&self) -> ActorKind {
        self.kind
    }

    pub fn index(&self) -> u32 {
        self.index
    }

    pub fn is_robot(&self) -> bool {
        self.kind == ActorKind::Robot
    }
}

impl fmt::Display for ActorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}_{}", self.kind.as_str(), self.index)
    }
}

impl FromStr for ActorId {
    type Err = IdError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        for kind in [ActorKind::Person, ActorKind::Robot] {
            if let Some(index) = parse_indexed(s, kind.as_str())? {
                return Ok(Self { kind, index });
            }
        }
        Err(IdError::Malformed(s.to_string()))
    }
}

/// A uniquely identified physical object, registered once at start-up.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ObjectId(u32);

impl ObjectId {
    pub fn new(index: u32) -> Self {
        Self::try_new(index).expect("object index must be positive")
    }

    pub fn try_new(index: u32) -> Result<Self, IdError> {
        if index == 0 {
            return Err(IdError::ZeroIndex("object_0".into()));
        }
        Ok(Self(index))
    }

    pub fn index(&self) -> u32 {
        self.0
    }
}

impl fmt::Display for ObjectId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "object_{}", self.0)
    }
}

impl FromStr for ObjectId {
    type Err = IdError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match parse_indexed(s, "object")? {
            Some(index) => Ok(Self(index)),
            None => Err(IdError::Malformed(s.to_string())),
        }
    }
}

/// Closed verb vocabulary of the action detector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ActionLabel {
    Idle,
    Grasp,
    Handover,
    Cut,
    PlaceDown,
    Drop,
    Twist,
    Hold,
    Pour,
    Squash,
    Shake,
    Push,
    Stir,
}

impl ActionLabel {
    pub const ALL: [ActionLabel; 13] = [
        ActionLabel::Idle,
        ActionLabel::Grasp,
        ActionLabel::Handover,
        ActionLabel::Cut,
        ActionLabel::PlaceDown,
        ActionLabel::Drop,
        ActionLabel::Twist,
        ActionLabel::Hold,
        ActionLabel::Pour,
        ActionLabel::Squash,
        ActionLabel::Shake,
        ActionLabel::Push,
        ActionLabel::Stir,
    ];

    /// Verbs that may appear inside an event tuple (everything but `idle`).
    pub const ACTIVE: [ActionLabel; 12] = [
        ActionLabel::Grasp,
        ActionLabel::Handover,
        ActionLabel::Cut,
        ActionLabel::PlaceDown,
        ActionLabel::Drop,
        ActionLabel::Twist,
        ActionLabel::Hold,
        ActionLabel::Pour,
        ActionLabel::Squash,
        ActionLabel::Shake,
        ActionLabel::Push,
        ActionLabel::Stir,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ActionLabel::Idle => "idle",
            ActionLabel::Grasp => "grasp",
            ActionLabel::Handover => "handover",
            ActionLabel::Cut => "cut",
            ActionLabel::PlaceDown => "place_down",
            ActionLabel::Drop => "drop",
            ActionLabel::Twist => "twist",
            ActionLabel::Hold => "hold",
            ActionLabel::Pour => "pour",
            ActionLabel::Squash => "squash",
            ActionLabel::Shake => "shake",
            ActionLabel::Push => "push",
            ActionLabel::Stir => "stir",
        }
    }

    pub fn is_idle(self) -> bool {
        self == ActionLabel::Idle
    }
}

impl fmt::Display for ActionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ActionLabel {
    type Err = IdError;

    /// Accepts the canonical verb and the spelling `hand_over`, which reasoning
    /// backends commonly produce. Rendering always yields the canonical verb.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "hand_over" {
            return Ok(ActionLabel::Handover);
        }
        ActionLabel::ALL
            .iter()
            .copied()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| IdError::UnknownVerb(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RelationKind {
    On,
    In,
    To,
}

impl RelationKind {
    pub const ALL: [RelationKind; 3] = [RelationKind::On, RelationKind::In, RelationKind::To];

    pub fn as_str(self) -> &'static str {
        match self {
            RelationKind::On => "on",
            RelationKind::In => "in",
            RelationKind::To => "to",
        }
    }
}

impl fmt::Display for RelationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RelationKind {
    type Err = IdError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "on" => Ok(RelationKind::On),
            "in" => Ok(RelationKind::In),
            "to" => Ok(RelationKind::To),
            other => Err(IdError::UnknownRelation(other.to_string())),
        }
    }
}

/// Any instance held in memory: an actor or an object.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EntityRef {
    Actor(ActorId),
    Object(ObjectId),
}

impl fmt::Display for EntityRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EntityRef::Actor(a) => a.fmt(f),
            EntityRef::Object(o) => o.fmt(f),
        }
    }
}

impl FromStr for EntityRef {
    type Err = IdError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.starts_with("object_") {
            s.parse().map(EntityRef::Object)
        } else {
            s.parse().map(EntityRef::Actor)
        }
    }
}

impl From<ActorId> for EntityRef {
    fn from(a: ActorId) -> Self {
        EntityRef::Actor(a)
    }
}

impl From<ObjectId> for EntityRef {
    fn from(o: ObjectId) -> Self {
        EntityRef::Object(o)
    }
}

macro_rules! string_serde {
    ($($ty:ty),*) => {$(
        impl Serialize for $ty {
            fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.collect_str(self)
            }
        }

        impl<'de> Deserialize<'de> for $ty {
            fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let s = <std::borrow::Cow<'de, str>>::deserialize(d)?;
                s.parse().map_err(serde::de::Error::custom)
            }
        }
    )*};
}

string_serde!(ActorId, ObjectId, ActionLabel, RelationKind, EntityRef);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum RelationError {
    #[error("relation '{0}' requires an object target")]
    RequiresObject(RelationKind),
}

/// `(rho, target)`: `to` may point at an actor or object, `on`/`in` only at objects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "RawRelation", into = "RawRelation")]
pub struct SpatialRelation {
    rho: RelationKind,
    target: EntityRef,
}

#[derive(Serialize, Deserialize)]
struct RawRelation {
    rho: RelationKind,
    target: EntityRef,
}

impl TryFrom<RawRelation> for SpatialRelation {
    type Error = RelationError;

    fn try_from(raw: RawRelation) -> Result<Self, Self::Error> {
        SpatialRelation::new(raw.rho, raw.target)
    }
}

impl From<SpatialRelation> for RawRelation {
    fn from(r: SpatialRelation) -> Self {
        RawRelation {
            rho: r.rho,
            target: r.target,
        }
    }
}

impl SpatialRelation {
    pub fn new(rho: RelationKind, target: impl Into<EntityRef>) -> Result<Self, RelationError> {
        let target = target.into();
        if rho != RelationKind::To && matches!(target, EntityRef::Actor(_)) {
            return Err(RelationError::RequiresObject(rho));
        }
        Ok(Self { rho, target })
    }

    pub fn on(target: ObjectId) -> Self {
        Self {
            rho: RelationKind::On,
            target: target.into(),
        }
    }

    pub fn inside(target: ObjectId) -> Self {
        Self {
            rho: RelationKind::In,
            target: target.into(),
        }
    }

    pub fn to(target: impl Into<EntityRef>) -> Self {
        Self {
            rho: RelationKind::To,
            target: target.into(),
        }
    }

    pub fn rho(&self) -> RelationKind {
        self.rho
    }

    pub fn target(&self) -> EntityRef {
        self.target
    }
}

impl fmt::Display for SpatialRelation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.rho, self.target)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TupleError {
    #[error("`idle` cannot appear in an event tuple")]
    IdleAction,
    #[error("object {0} cannot relate to itself")]
    SelfRelation(ObjectId),
    #[error("event time must be non-negative, got {0}")]
    NegativeTime(f64),
    #[error("event time must be finite")]
    NonFiniteTime,
    #[error(transparent)]
    Relation(#[from] RelationError),
}

/// One grounded event: `(actor, action, object, relation, robot_interaction, time)`.
///
/// Construct through [`EventTuple::new`]; fields are read-only afterwards so
/// the invariants (non-idle action, no self-relation, finite `time >= 0`)
/// hold for every value in the system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTuple", into = "RawTuple")]
pub struct EventTuple {
    actor: ActorId,
    action: ActionLabel,
    object: ObjectId,
    relation: Option<SpatialRelation>,
    robot_interaction: bool,
    time: f64,
}

/// Wire layout of an event tuple; field order here is the emitted order.
#[derive(Serialize, Deserialize)]
pub(crate) struct RawTuple {
    actor: ActorId,
    action: ActionLabel,
    object: ObjectId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    relation: Option<SpatialRelation>,
    robot_interaction: bool,
    time: f64,
}

impl TryFrom<RawTuple> for EventTuple {
    type Error = TupleError;

    fn try_from(r: RawTuple) -> Result<Self, Self::Error> {
        EventTuple::new(
            r.actor,
            r.action,
            r.object,
            r.relation,
            r.robot_interaction,
            r.time,
        )
    }
}

impl From<EventTuple> for RawTuple {
    fn from(t: EventTuple) -> Self {
        RawTuple {
            actor: t.actor,
            action: t.action,
            object: t.object,
            relation: t.relation,
            robot_interaction: t.robot_interaction,
            time: t.time,
        }
    }
}

impl EventTuple {
    pub fn new(
        actor: ActorId,
        action: ActionLabel,
        object: ObjectId,
        relation: Option<SpatialRelation>,
        robot_interaction: bool,
        time: f64,
    ) -> Result<Self, TupleError> {
        if action.is_idle() {
            return Err(TupleError::IdleAction);
        }
        if let Some(r) = relation {
            if r.target == EntityRef::Object(object) {
                return Err(TupleError::SelfRelation(object));
            }
        }
        if !time.is_finite() {
            return Err(TupleError::NonFiniteTime);
        }
        if time < 0.0 {
            return Err(TupleError::NegativeTime(time));
        }
        Ok(Self {
            actor,
            action,
            object,
            relation,
            robot_interaction,
            // -0.0 and 0.0 must be the same instant for ordering and dedup.
            time: time + 0.0,
        })
    }

    pub fn actor(&self) -> ActorId {
        self.actor
    }

    pub fn action(&self) -> ActionLabel {
        self.action
    }

    pub fn object(&self) -> ObjectId {
        self.object
    }

    pub fn relation(&self) -> Option<SpatialRelation> {
        self.relation
    }

    pub fn robot_interaction(&self) -> bool {
        self.robot_interaction
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    /// Same event shifted to another instant.
    pub fn with_time(&self, time: f64) -> Result<Self, TupleError> {
        Self::new(
            self.actor,
            self.action,
            self.object,
            self.relation,
            self.robot_interaction,
            time,
        )
    }

    /// Every entity this tuple references: actor, object, relation target.
    pub fn references(&self) -> impl Iterator<Item = EntityRef> + '_ {
        [
            Some(EntityRef::Actor(self.actor)),
            Some(EntityRef::Object(self.object)),
            self.relation.map(|r| r.target),
        ]
        .into_iter()
        .flatten()
    }
}

impl fmt::Display for EventTuple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, ", self.actor, self.action, self.object)?;
        match self.relation {
            Some(r) => write!(f, "{r}")?,
            None => f.write_str("-")?,
        }
        write!(f, ", i={}, t={})", self.robot_interaction, self.time)
    }
}

/// Episodic order: time, then the actor's canonical string, then the action
/// string. Remaining fields break any leftover tie so that two tuples compare
/// `Equal` exactly when they are identical.
pub fn tuple_order(lhs: &EventTuple, rhs: &EventTuple) -> Ordering {
    lhs.time
        .total_cmp(&rhs.time)
        .then_with(|| lhs.actor.to_string().cmp(&rhs.actor.to_string()))
        .then_with(|| lhs.action.as_str().cmp(rhs.action.as_str()))
        .then_with(|| lhs.object.cmp(&rhs.object))
        .then_with(|| lhs.relation.cmp(&rhs.relation))
        .then_with(|| lhs.robot_interaction.cmp(&rhs.robot_interaction))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(actor: ActorId, action: ActionLabel, time: f64) -> EventTuple {
        EventTuple::new(actor, action, ObjectId::new(1), None, false, time).unwrap()
    }

    #[test]
    fn worked_example_handover_to_robot() {
        let t1 = EventTuple::new(
            ActorId::person(1),
            "hand_over".parse().unwrap(),
            ObjectId::new(1),
            Some(SpatialRelation::to(ActorId::robot(1))),
            false,
            4.0,
        )
        .unwrap();
        assert_eq!(t1.action(), ActionLabel::Handover);
        assert_eq!(
            t1.relation().unwrap().target(),
            EntityRef::Actor(ActorId::robot(1))
        );
    }

    #[test]
    fn minimal_tuple_without_relation() {
        let t = EventTuple::new(
            ActorId::person(1),
            ActionLabel::Grasp,
            ObjectId::new(2),
            None,
            false,
            0.0,
        )
        .unwrap();
        assert!(t.relation().is_none());
        assert_eq!(t.time(), 0.0);
    }

    #[test]
    fn rejects_invalid_tuples() {
        let p = ActorId::person(1);
        let o = ObjectId::new(1);
        assert_eq!(
            EventTuple::new(p, ActionLabel::Idle, o, None, false, 1.0),
            Err(TupleError::IdleAction)
        );
        assert_eq!(
            EventTuple::new(
                p,
                ActionLabel::PlaceDown,
                o,
                Some(SpatialRelation::on(o)),
                false,
                1.0
            ),
            Err(TupleError::SelfRelation(o))
        );
        assert_eq!(
            EventTuple::new(p, ActionLabel::Grasp, o, None, false, -0.5),
            Err(TupleError::NegativeTime(-0.5))
        );
        assert_eq!(
            EventTuple::new(p, ActionLabel::Grasp, o, None, false, f64::NAN),
            Err(TupleError::NonFiniteTime)
        );
    }

    #[test]
    fn relation_typing() {
        assert!(SpatialRelation::new(RelationKind::To, ActorId::person(2)).is_ok());
        assert!(SpatialRelation::new(RelationKind::To, ObjectId::new(2)).is_ok());
        assert_eq!(
            SpatialRelation::new(RelationKind::On, ActorId::person(2)),
            Err(RelationError::RequiresObject(RelationKind::On))
        );
        assert!(SpatialRelation::new(RelationKind::In, ActorId::robot(1)).is_err());
    }

    #[test]
    fn order_examples() {
        let a = t(ActorId::person(1), ActionLabel::Grasp, 1.0);
        let b = t(ActorId::person(1), ActionLabel::Grasp, 2.0);
        assert_eq!(tuple_order(&a, &b), Ordering::Less);
        let c = t(ActorId::person(2), ActionLabel::Grasp, 1.0);
        assert_eq!(tuple_order(&a, &c), Ordering::Less);
        assert_eq!(tuple_order(&a, &a.clone()), Ordering::Equal);
        // Canonical-string tiebreak is lexicographic, not numeric.
        let p10 = t(ActorId::person(10), ActionLabel::Grasp, 1.0);
        assert_eq!(tuple_order(&p10, &c), Ordering::Less);
    }

    #[test]
    fn parse_rejects_non_canonical_ids() {
        for bad in [
            "person_0",
            "person_01",
            "person_",
            "Person_1",
            "human_1",
            "object_-1",
            "robot1",
            "object_1x",
        ] {
            assert!(bad.parse::<EntityRef>().is_err(), "{bad}");
        }
        assert!("juggle".parse::<ActionLabel>().is_err());
    }

    #[test]
    fn tuple_serde_shape() {
        let t = EventTuple::new(
            ActorId::person(2),
            ActionLabel::PlaceDown,
            ObjectId::new(3),
            Some(SpatialRelation::inside(ObjectId::new(2))),
            false,
            7.5,
        )
        .unwrap();
        let s = serde_json::to_string(&t).unwrap();
        assert_eq!(
            s,
            r#"{"actor":"person_2","action":"place_down","object":"object_3","relation":{"rho":"in","target":"object_2"},"robot_interaction":false,"time":7.5}"#
        );
        let back: EventTuple = serde_json::from_str(&s).unwrap();
        assert_eq!(back, t);
        let bad = s.replace("place_down", "idle");
        assert!(serde_json::from_str::<EventTuple>(&bad).is_err());
    }

    pub(crate) fn arb_actor() -> impl Strategy<Value = ActorId> {
        (prop::bool::ANY, 1u32..200).prop_map(|(robot, i)| {
            if robot {
                ActorId::robot(i)
            } else {
                ActorId::person(i)
            }
        })
    }

    fn arb_any_action() -> impl Strategy<Value = ActionLabel> {
        prop::sample::select(ActionLabel::ALL.to_vec())
    }

    proptest! {
        #[test]
        fn ids_round_trip(actor in arb_actor(), obj in 1u32..100_000, action in arb_any_action()) {
            prop_assert_eq!(actor.to_string().parse::<ActorId>().unwrap(), actor);
            let o = ObjectId::new(obj);
            prop_assert_eq!(o.to_string().parse::<ObjectId>().unwrap(), o);
            prop_assert_eq!(action.as_str().parse::<ActionLabel>().unwrap(), action);
        }

        #[test]
        fn constructed_tuples_hold_invariants(
            actor in arb_actor(),
            action in arb_any_action(),
            obj in 1u32..5,
            rel in prop::option::of((0usize..3, prop::bool::ANY, 1u32..5)),
            flag in prop::bool::ANY,
            time in -10.0f64..10.0,
        ) {
            let object = ObjectId::new(obj);
            let relation = rel.and_then(|(k, to_actor, idx)| {
                let target: EntityRef = if to_actor { ActorId::person(idx).into() } else { ObjectId::new(idx).into() };
                SpatialRelation::new(RelationKind::ALL[k], target).ok()
            });
            if let Ok(t) = EventTuple::new(actor, action, object, relation, flag, time) {
                prop_assert!(!t.action().is_idle());
                prop_assert!(t.time() >= 0.0);
                if let Some(r) = t.relation() {
                    prop_assert_ne!(r.target(), EntityRef::Object(t.object()));
                }
            }
        }

        #[test]
        fn tuple_order_is_total(
            xs in prop::collection::vec((arb_actor(), 1usize..13, 1u32..3, 0u8..4), 3)
        ) {
            let ts: Vec<EventTuple> = xs
                .into_iter()
                .map(|(a, v, o, tq)| {
                    EventTuple::new(a, ActionLabel::ALL[v], ObjectId::new(o), None, false, f64::from(tq)).unwrap()
                })
                .collect();
            for a in &ts {
                for b in &ts {
                    let ab = tuple_order(a, b);
                    prop_assert_eq!(ab, tuple_order(b, a).reverse());
                    prop_assert_eq!(ab == Ordering::Equal, a == b);
                    for c in &ts {
                        if ab != Ordering::Greater && tuple_order(b, c) != Ordering::Greater {
                            prop_assert_ne!(tuple_order(a, c), Ordering::Greater);
                        }
                    }
                }
            }
        }
    }
}
