//! The event value type and the small algebra over it: atomic-update
//! splitting and joining, and accumulation of change events into
//! per-observer state.
//!
//! An event is the only unit of state in the platform. `change` counts how
//! many times the datum was added (negative for removals); `ts` is a unique
//! ID that doubles as a sort key; `writers` and `readers` are intersets
//! anchoring integrity and confidentiality. An event carrying a `removed`
//! tuple is an *atomic update*: one event that removes a prior datum and adds
//! a new one at the same instant.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::interset::{universe, Interset};
use crate::value::{canonical_json, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Kind {
    Fact,
    Rule,
    Reg,
    Init,
}

impl Kind {
    pub fn as_str(self) -> &'static str {
        match self {
            Kind::Fact => "fact",
            Kind::Rule => "rule",
            Kind::Reg => "reg",
            Kind::Init => "init",
        }
    }

    pub fn parse(s: &str) -> Option<Kind> {
        Some(match s {
            "fact" => Kind::Fact,
            "rule" => Kind::Rule,
            "reg" => Kind::Reg,
            "init" => Kind::Init,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub kind: Kind,
    pub name: String,
    pub key: Value,
    pub data: Vec<Value>,
    pub ts: i64,
    pub change: i64,
    pub writers: Interset,
    pub readers: Interset,
    pub removed: Option<Vec<Value>>,
    /// Registration-only: ask the server to replay stored facts matching the
    /// registration before streaming live ones.
    pub get_existing: bool,
    /// Init-only: the authenticated identity announced to the client.
    pub identity: Option<String>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WireError {
    #[error("frame is not a JSON object")]
    NotAnObject,
    #[error("missing or invalid field {0}")]
    BadField(&'static str),
    #[error("unknown event kind {0:?}")]
    UnknownKind(String),
    #[error("invalid JSON: {0}")]
    Json(String),
}

impl Event {
    /// A fact event with the usual defaults: ts 1, change 1, universal
    /// readers and writers.
    pub fn fact(name: impl Into<String>, key: impl Into<Value>, data: Vec<Value>) -> Event {
        Event {
            kind: Kind::Fact,
            name: name.into(),
            key: key.into(),
            data,
            ts: 1,
            change: 1,
            writers: universe(),
            readers: universe(),
            removed: None,
            get_existing: false,
            identity: None,
        }
    }

    pub fn rule(name: impl Into<String>, key: impl Into<Value>, data: Vec<Value>) -> Event {
        Event {
            kind: Kind::Rule,
            ..Event::fact(name, key, data)
        }
    }

    pub fn reg(name: impl Into<String>, key: impl Into<Value>) -> Event {
        Event {
            kind: Kind::Reg,
            name: name.into(),
            key: key.into(),
            data: Vec::new(),
            ts: 0,
            change: 0,
            writers: universe(),
            readers: universe(),
            removed: None,
            get_existing: false,
            identity: None,
        }
    }

    pub fn init(identity: Option<String>) -> Event {
        Event {
            kind: Kind::Init,
            name: "axiom/client-info".to_owned(),
            key: Value::Null,
            data: Vec::new(),
            ts: 0,
            change: 0,
            writers: universe(),
            readers: universe(),
            removed: None,
            get_existing: false,
            identity,
        }
    }

    pub fn with_ts(mut self, ts: i64) -> Event {
        self.ts = ts;
        self
    }

    pub fn with_change(mut self, change: i64) -> Event {
        self.change = change;
        self
    }

    pub fn with_writers(mut self, writers: Interset) -> Event {
        self.writers = writers;
        self
    }

    pub fn with_readers(mut self, readers: Interset) -> Event {
        self.readers = readers;
        self
    }

    pub fn with_removed(mut self, removed: Vec<Value>) -> Event {
        self.removed = Some(removed);
        self
    }

    pub fn with_get_existing(mut self, flag: bool) -> Event {
        self.get_existing = flag;
        self
    }

    /// Namespace part of the event name (everything before the `/`).
    pub fn namespace(&self) -> &str {
        namespace_of(&self.name)
    }

    pub fn to_json(&self) -> serde_json::Value {
        let mut obj = serde_json::Map::new();
        obj.insert("kind".into(), self.kind.as_str().into());
        obj.insert("name".into(), self.name.clone().into());
        match self.kind {
            Kind::Init => {
                if let Some(identity) = &self.identity {
                    obj.insert("identity".into(), identity.clone().into());
                }
            }
            Kind::Reg => {
                obj.insert("key".into(), self.key.to_json());
                if self.get_existing {
                    obj.insert("get-existing".into(), true.into());
                }
            }
            Kind::Fact | Kind::Rule => {
                obj.insert("key".into(), self.key.to_json());
                obj.insert(
                    "data".into(),
                    serde_json::Value::Array(self.data.iter().map(Value::to_json).collect()),
                );
                obj.insert("ts".into(), self.ts.into());
                obj.insert("change".into(), self.change.into());
                obj.insert("writers".into(), self.writers.to_json());
                obj.insert("readers".into(), self.readers.to_json());
                if let Some(removed) = &self.removed {
                    obj.insert(
                        "removed".into(),
                        serde_json::Value::Array(removed.iter().map(Value::to_json).collect()),
                    );
                }
            }
        }
        serde_json::Value::Object(obj)
    }

    pub fn from_json(json: &serde_json::Value) -> Result<Event, WireError> {
        let obj = json.as_object().ok_or(WireError::NotAnObject)?;
        let kind_str = obj
            .get("kind")
            .and_then(|v| v.as_str())
            .ok_or(WireError::BadField("kind"))?;
        let kind =
            Kind::parse(kind_str).ok_or_else(|| WireError::UnknownKind(kind_str.to_owned()))?;
        let name = obj
            .get("name")
            .and_then(|v| v.as_str())
            .ok_or(WireError::BadField("name"))?
            .to_owned();
        let key = match obj.get("key") {
            Some(k) => Value::from_json(k).map_err(|_| WireError::BadField("key"))?,
            None => Value::Null,
        };
        let data = match obj.get("data") {
            Some(serde_json::Value::Array(items)) => items
                .iter()
                .map(Value::from_json)
                .collect::<Result<_, _>>()
                .map_err(|_| WireError::BadField("data"))?,
            Some(_) => return Err(WireError::BadField("data")),
            None => Vec::new(),
        };
        let removed = match obj.get("removed") {
            Some(serde_json::Value::Array(items)) => Some(
                items
                    .iter()
                    .map(Value::from_json)
                    .collect::<Result<_, _>>()
                    .map_err(|_| WireError::BadField("removed"))?,
            ),
            Some(_) => return Err(WireError::BadField("removed")),
            None => None,
        };
        let interset_field = |field: &'static str| -> Result<Interset, WireError> {
            match obj.get(field) {
                Some(v) => Interset::from_json(v).ok_or(WireError::BadField(field)),
                None => Ok(universe()),
            }
        };
        Ok(Event {
            kind,
            name,
            key,
            data,
            ts: obj.get("ts").and_then(|v| v.as_i64()).unwrap_or(0),
            change: obj.get("change").and_then(|v| v.as_i64()).unwrap_or(1),
            writers: interset_field("writers")?,
            readers: interset_field("readers")?,
            removed,
            get_existing: obj
                .get("get-existing")
                .and_then(|v| v.as_bool())
                .unwrap_or(false),
            identity: obj
                .get("identity")
                .and_then(|v| v.as_str())
                .map(str::to_owned),
        })
    }

    pub fn to_wire(&self) -> String {
        canonical_json(&self.to_json())
    }

    pub fn from_wire(line: &str) -> Result<Event, WireError> {
        let json: serde_json::Value =
            serde_json::from_str(line).map_err(|e| WireError::Json(e.to_string()))?;
        Event::from_json(&json)
    }

    /// Canonical form of the whole event; two events with this string equal
    /// are duplicates of one another.
    pub fn dedup_key(&self) -> String {
        self.to_wire()
    }

    /// Canonical form minus `change` and `ts`: the accumulator key.
    pub fn identity_key(&self) -> String {
        let mut json = self.to_json();
        if let Some(obj) = json.as_object_mut() {
            obj.remove("change");
            obj.remove("ts");
        }
        canonical_json(&json)
    }

    /// Canonical form minus `data` and `change`: events sharing this string
    /// are candidates for atomic-update pairing.
    fn match_key(&self) -> String {
        let mut json = self.to_json();
        if let Some(obj) = json.as_object_mut() {
            obj.remove("data");
            obj.remove("change");
        }
        canonical_json(&json)
    }
}

pub fn namespace_of(name: &str) -> &str {
    match name.split_once('/') {
        Some((ns, _)) => ns,
        None => "",
    }
}

/// Split an atomic update into its one or two underlying change events: the
/// event itself (without `removed`), and, when a `removed` tuple is present,
/// a second event carrying the removed tuple with the change negated.
pub fn split_atomic_update(e: &Event) -> Vec<Event> {
    match &e.removed {
        None => vec![e.clone()],
        Some(removed) => {
            let mut added = e.clone();
            added.removed = None;
            let mut dropped = added.clone();
            dropped.data = removed.clone();
            dropped.change = -e.change;
            vec![added, dropped]
        }
    }
}

/// Can these two events be unified into a single atomic update? They must
/// share every field except `data` and `change`, and their changes must be
/// negations of one another.
pub fn matching(a: &Event, b: &Event) -> bool {
    a.change == -b.change && a.match_key() == b.match_key()
}

/// Find the first event in `coll` that `matching` pairs with `e`. Returns the
/// match (if any) and the collection with the match removed.
pub fn find_atomic_update(e: &Event, coll: &[Event]) -> (Option<Event>, Vec<Event>) {
    for (i, candidate) in coll.iter().enumerate() {
        if matching(e, candidate) {
            let mut rest = coll.to_vec();
            let found = rest.remove(i);
            return (Some(found), rest);
        }
    }
    (None, coll.to_vec())
}

/// Unify matching addition/removal pairs back into single atomic-update
/// events, greedily and left to right. Unmatched events pass through.
pub fn join_atomic_updates(coll: &[Event]) -> Vec<Event> {
    let mut out = Vec::with_capacity(coll.len());
    let mut rest = coll.to_vec();
    while !rest.is_empty() {
        let head = rest.remove(0);
        let (found, remaining) = find_atomic_update(&head, &rest);
        rest = remaining;
        match found {
            None => out.push(head),
            Some(other) => {
                let (added, dropped) = if head.change >= other.change {
                    (head, other)
                } else {
                    (other, head)
                };
                let mut joined = added.clone();
                joined.removed = Some(dropped.data.clone());
                out.push(joined);
            }
        }
    }
    out
}

/// Accumulated state for one event identity: total change and latest ts.
#[derive(Debug, Clone, PartialEq)]
pub struct AccumulatorEntry {
    pub base: Event,
    pub total_change: i64,
    pub latest_ts: i64,
}

/// Folds events into per-identity totals. Keys are events stripped of
/// `change` and `ts`; atomic updates accumulate as their two underlying
/// events.
#[derive(Debug, Default, Clone)]
pub struct Accumulator {
    entries: BTreeMap<String, AccumulatorEntry>,
}

impl Accumulator {
    pub fn new() -> Accumulator {
        Accumulator::default()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn accumulate(&mut self, e: &Event) {
        for part in split_atomic_update(e) {
            let key = part.identity_key();
            let entry = self.entries.entry(key).or_insert_with(|| {
                let mut base = part.clone();
                base.change = 0;
                base.ts = 0;
                AccumulatorEntry {
                    base,
                    total_change: 0,
                    latest_ts: 0,
                }
            });
            entry.total_change += part.change;
            entry.latest_ts = entry.latest_ts.max(part.ts);
        }
    }

    pub fn entries(&self) -> impl Iterator<Item = &AccumulatorEntry> {
        self.entries.values()
    }

    /// One event per entry with a positive total; zero and negative totals
    /// are dropped.
    pub fn accumulated_events(&self) -> Vec<Event> {
        self.entries
            .values()
            .filter(|entry| entry.total_change > 0)
            .map(|entry| {
                let mut e = entry.base.clone();
                e.change = entry.total_change;
                e.ts = entry.latest_ts;
                e
            })
            .collect()
    }
}

/// Accumulate an iterator of events in one call.
pub fn accumulate_all<'a>(events: impl IntoIterator<Item = &'a Event>) -> Accumulator {
    let mut acc = Accumulator::new();
    for e in events {
        acc.accumulate(e);
    }
    acc
}
