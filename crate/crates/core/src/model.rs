//! Data items, lineage and control signals: the values that flow between
//! processing elements.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::learning::Classifier;

/// Maximum number of input ids a lineage set tracks before collapsing to
/// [`Lineage::Many`].
pub const LINEAGE_CAP: usize = 64;

macro_rules! string_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn new(s: impl Into<String>) -> Self {
                Self(s.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_owned())
            }
        }

        impl From<String> for $name {
            fn from(s: String) -> Self {
                Self(s)
            }
        }
    };
}

string_id!(
    /// Identifier of a processing element within a topology.
    PeId
);
string_id!(
    /// Identifier of a communication channel.
    ChannelId
);
string_id!(
    /// Identifier of a port, unique within its processing element.
    PortId
);
string_id!(
    /// Crowd worker identifier (a session token for HTTP workers).
    WorkerId
);

/// Run-unique data item identifier.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ItemId(pub u64);

impl fmt::Display for ItemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Point in (virtual or wall-clock) run time, nanoseconds since run start.
#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct Timestamp(pub u64);

impl Timestamp {
    pub const ZERO: Timestamp = Timestamp(0);

    pub fn from_millis(ms: f64) -> Self {
        Timestamp((ms * 1e6).round().max(0.0) as u64)
    }

    pub fn as_millis(self) -> f64 {
        self.0 as f64 / 1e6
    }

    pub fn as_secs(self) -> f64 {
        self.0 as f64 / 1e9
    }

    pub fn plus(self, d: SimDuration) -> Self {
        Timestamp(self.0.saturating_add(d.0))
    }

    pub fn since(self, earlier: Timestamp) -> SimDuration {
        SimDuration(self.0.saturating_sub(earlier.0))
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.3}ms", self.as_millis())
    }
}

/// Span of run time in nanoseconds.
#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct SimDuration(pub u64);

impl SimDuration {
    pub const ZERO: SimDuration = SimDuration(0);

    pub fn from_millis(ms: f64) -> Self {
        SimDuration((ms * 1e6).round().max(0.0) as u64)
    }

    pub fn from_micros(us: u64) -> Self {
        SimDuration(us * 1_000)
    }

    pub fn as_millis(self) -> f64 {
        self.0 as f64 / 1e6
    }
}

/// Set of source item ids an item derives from.
///
/// Bounded: once more than [`LINEAGE_CAP`] ids would be tracked the set
/// collapses to `Many`, which no longer answers membership queries.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Lineage {
    Ids(BTreeSet<ItemId>),
    Many,
}

impl Default for Lineage {
    fn default() -> Self {
        Lineage::empty()
    }
}

impl Lineage {
    pub fn single(id: ItemId) -> Self {
        Lineage::Ids(BTreeSet::from([id]))
    }

    pub fn empty() -> Self {
        Lineage::Ids(BTreeSet::new())
    }

    pub fn union<'a>(parts: impl IntoIterator<Item = &'a Lineage>) -> Self {
        let mut out = BTreeSet::new();
        for part in parts {
            match part {
                Lineage::Many => return Lineage::Many,
                Lineage::Ids(ids) => {
                    out.extend(ids.iter().copied());
                    if out.len() > LINEAGE_CAP {
                        return Lineage::Many;
                    }
                }
            }
        }
        Lineage::Ids(out)
    }

    pub fn contains(&self, id: ItemId) -> bool {
        match self {
            Lineage::Ids(ids) => ids.contains(&id),
            Lineage::Many => false,
        }
    }

    pub fn is_many(&self) -> bool {
        matches!(self, Lineage::Many)
    }

    pub fn len(&self) -> usize {
        match self {
            Lineage::Ids(ids) => ids.len(),
            Lineage::Many => LINEAGE_CAP + 1,
        }
    }

    pub fn is_empty(&self) -> bool {
        matches!(self, Lineage::Ids(ids) if ids.is_empty())
    }

    /// Tracked ids; empty for `Many`.
    pub fn ids(&self) -> impl Iterator<Item = ItemId> + '_ {
        let set = match self {
            Lineage::Ids(ids) => Some(ids),
            Lineage::Many => None,
        };
        set.into_iter().flat_map(|s| s.iter().copied())
    }
}

/// Opaque item payload.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Payload {
    Text(String),
    Value(serde_json::Value),
}

impl Payload {
    pub fn as_text(&self) -> Option<&str> {
        match self {
            Payload::Text(t) => Some(t),
            Payload::Value(_) => None,
        }
    }
}

/// One stream element.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataItem {
    pub item_id: ItemId,
    pub payload: Payload,
    /// Time the originating stimulus entered the system.
    pub ingest_ts: Timestamp,
    pub lineage: Lineage,
    pub attributes: BTreeMap<String, String>,
}

impl DataItem {
    /// An item as emitted by an information source: its lineage is itself.
    pub fn from_source(item_id: ItemId, payload: Payload, ingest_ts: Timestamp) -> Self {
        DataItem {
            item_id,
            payload,
            ingest_ts,
            lineage: Lineage::single(item_id),
            attributes: BTreeMap::new(),
        }
    }

    pub fn attr(&self, key: &str) -> Option<&str> {
        self.attributes.get(key).map(String::as_str)
    }

    pub fn with_attr(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.attributes.insert(key.into(), value.into());
        self
    }

    pub fn text(&self) -> Option<&str> {
        self.payload.as_text()
    }
}

/// Attribute key used by distributed channels to partition items.
pub const ROUTING_KEY: &str = "routing_key";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalKind {
    ParameterUpdate,
    ModelUpdate,
    TaskDirective,
}

#[derive(Clone, Debug)]
pub enum ControlBody {
    Params(BTreeMap<String, String>),
    Model(Arc<dyn Classifier>),
    Directive(serde_json::Value),
}

/// A behavior-modifying message sent over a control flow.
#[derive(Clone, Debug)]
pub struct ControlSignal {
    pub signal_id: u64,
    pub target_pe: PeId,
    pub kind: SignalKind,
    pub body: ControlBody,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lineage_union_collapses_past_cap() {
        let parts: Vec<Lineage> = (0..=LINEAGE_CAP as u64)
            .map(|i| Lineage::single(ItemId(i)))
            .collect();
        assert!(Lineage::union(parts.iter()).is_many());
        let fewer = Lineage::union(parts[..LINEAGE_CAP].iter());
        assert_eq!(fewer.len(), LINEAGE_CAP);
        assert!(fewer.contains(ItemId(3)));
    }

    #[test]
    fn many_contains_nothing() {
        assert!(!Lineage::Many.contains(ItemId(0)));
        assert_eq!(Lineage::Many.ids().count(), 0);
    }

    #[test]
    fn timestamp_millis_roundtrip() {
        let t = Timestamp::from_millis(3.703_703);
        assert_eq!(t.0, 3_703_703);
        assert!((t.as_millis() - 3.703_703).abs() < 1e-9);
    }
}
