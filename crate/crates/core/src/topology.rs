//! Processing-element descriptors, the topology graph and its validation.
//!
//! Topologies are described declaratively ([`TopologyConfig`], TOML on disk,
//! format version [`CONFIG_VERSION`]) and turned into a validated
//! [`Topology`] by [`build_topology`].
//!
//! ```toml
//! version = 1
//! name = "minimal"
//!
//! [[pes]]
//! id = "s"
//! kind = "ape"            # ape | cspe
//! role = "source"         # optional; checked against the ports
//! behavior = "replay_source"
//! outputs = ["out"]
//!
//! [[pes]]
//! id = "c"
//! kind = "ape"
//! behavior = "sink"
//! inputs = ["in"]
//! config = ["settings"]   # configuration ports
//! port_kinds = { in = "text" }
//!
//! [[channels]]
//! id = "s_to_c"
//! modality = "point_to_point"   # point_to_point | distributed | broadcast
//! capacity = 16
//! shed_policy = "drop_newest"   # drop_newest | drop_oldest | block
//! flow_class = "data"           # data | control
//!
//! [[data_flows]]
//! from = "s.out"
//! to = "c.in"
//! channel = "s_to_c"
//!
//! # [[control_flows]]
//! # from = "learner"
//! # to = "classifier.model"
//! # channel = "model_updates"
//! ```

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channels::{ChannelSpec, FlowClass, Modality, ShedPolicy, DEFAULT_CAPACITY};
use crate::model::{ChannelId, PeId, PortId};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeKind {
    Ape,
    Cspe,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Source,
    Processor,
    Consumer,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Source => "source",
            Role::Processor => "processor",
            Role::Consumer => "consumer",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PortDirection {
    Input,
    Configuration,
    Output,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PortSpec {
    pub port_id: PortId,
    pub direction: PortDirection,
    pub value_kind: String,
}

impl PortSpec {
    pub fn new(id: &str, direction: PortDirection) -> Self {
        PortSpec {
            port_id: id.into(),
            direction,
            value_kind: "item".to_owned(),
        }
    }
}

/// Name and parameters of the per-item operation a PE runs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BehaviorRef {
    pub name: String,
    pub params: serde_json::Map<String, serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProcessingElementSpec {
    pub pe_id: PeId,
    pub kind: PeKind,
    pub ports: Vec<PortSpec>,
    pub behavior: BehaviorRef,
    /// Role stated in the description, if any; must agree with the ports.
    pub declared_role: Option<Role>,
}

impl ProcessingElementSpec {
    pub fn ports(&self, direction: PortDirection) -> impl Iterator<Item = &PortSpec> {
        self.ports.iter().filter(move |p| p.direction == direction)
    }

    pub fn port(&self, id: &PortId) -> Option<&PortSpec> {
        self.ports.iter().find(|p| &p.port_id == id)
    }

    pub fn output_port(&self) -> Option<&PortSpec> {
        self.ports(PortDirection::Output).next()
    }

    pub fn is_cspe(&self) -> bool {
        self.kind == PeKind::Cspe
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("pe `{pe}` has malformed ports: {reason}")]
pub struct MalformedPorts {
    pub pe: PeId,
    pub reason: String,
}

/// Role implied by port presence: no inputs ⇒ source, no output ⇒ consumer.
pub fn classify_pe(pe: &ProcessingElementSpec) -> Result<Role, MalformedPorts> {
    let malformed = |reason: String| MalformedPorts {
        pe: pe.pe_id.clone(),
        reason,
    };
    let mut seen = BTreeSet::new();
    for p in &pe.ports {
        if !seen.insert(&p.port_id) {
            return Err(malformed(format!("duplicate port id `{}`", p.port_id)));
        }
    }
    let outputs = pe.ports(PortDirection::Output).count();
    let inputs = pe.ports(PortDirection::Input).count();
    match (inputs, outputs) {
        (_, n) if n > 1 => Err(malformed(format!("{n} output ports, at most one allowed"))),
        (0, 0) => Err(malformed("neither input nor output ports".to_owned())),
        (0, 1) => Ok(Role::Source),
        (_, 0) => Ok(Role::Consumer),
        _ => Ok(Role::Processor),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataFlow {
    pub from: PeId,
    pub from_port: PortId,
    pub to: PeId,
    pub to_port: PortId,
    pub channel: ChannelId,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControlFlow {
    pub from: PeId,
    pub to: PeId,
    pub to_port: PortId,
    pub channel: ChannelId,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TopologyWarning {
    /// Data-flow cycle through the listed PEs. Legal, but unusual.
    DataFlowCycle(Vec<PeId>),
}

impl fmt::Display for TopologyWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TopologyWarning::DataFlowCycle(pes) => {
                let names: Vec<_> = pes.iter().map(PeId::as_str).collect();
                write!(f, "data-flow cycle through {}", names.join(" -> "))
            }
        }
    }
}

/// A validated application graph.
#[derive(Clone, Debug)]
pub struct Topology {
    pub name: String,
    pub pes: BTreeMap<PeId, ProcessingElementSpec>,
    pub channels: BTreeMap<ChannelId, ChannelSpec>,
    pub data_flows: Vec<DataFlow>,
    pub control_flows: Vec<ControlFlow>,
    pub warnings: Vec<TopologyWarning>,
    roles: BTreeMap<PeId, Role>,
}

impl Topology {
    pub fn role(&self, pe: &PeId) -> Option<Role> {
        self.roles.get(pe).copied()
    }

    pub fn pe(&self, pe: &PeId) -> Option<&ProcessingElementSpec> {
        self.pes.get(pe)
    }

    pub fn sources(&self) -> impl Iterator<Item = &PeId> {
        self.roles
            .iter()
            .filter(|(_, r)| **r == Role::Source)
            .map(|(p, _)| p)
    }

    pub fn consumers(&self) -> impl Iterator<Item = &PeId> {
        self.roles
            .iter()
            .filter(|(_, r)| **r == Role::Consumer)
            .map(|(p, _)| p)
    }

    pub fn is_cspe(&self, pe: &PeId) -> bool {
        self.pes.get(pe).is_some_and(ProcessingElementSpec::is_cspe)
    }

    /// Data-flow successors, deduplicated, in flow order.
    pub fn data_successors(&self, pe: &PeId) -> Vec<&PeId> {
        let mut out: Vec<&PeId> = Vec::new();
        for f in self.data_flows.iter().filter(|f| &f.from == pe) {
            if !out.contains(&&f.to) {
                out.push(&f.to);
            }
        }
        out
    }

    pub fn data_predecessors(&self, pe: &PeId) -> Vec<&PeId> {
        let mut out: Vec<&PeId> = Vec::new();
        for f in self.data_flows.iter().filter(|f| &f.to == pe) {
            if !out.contains(&&f.from) {
                out.push(&f.from);
            }
        }
        out
    }

    /// Subscribers of a data channel in flow order.
    pub fn subscribers(&self, channel: &ChannelId) -> Vec<PeId> {
        let mut out = Vec::new();
        for f in self.data_flows.iter().filter(|f| &f.channel == channel) {
            if !out.contains(&f.to) {
                out.push(f.to.clone());
            }
        }
        out
    }

    /// The data channel a PE publishes on, if any.
    pub fn output_channel(&self, pe: &PeId) -> Option<&ChannelId> {
        self.data_flows
            .iter()
            .find(|f| &f.from == pe)
            .map(|f| &f.channel)
    }

    /// Data channels feeding a PE with the receiving port, in flow order.
    pub fn input_channels(&self, pe: &PeId) -> Vec<(ChannelId, PortId)> {
        self.data_flows
            .iter()
            .filter(|f| &f.to == pe)
            .map(|f| (f.channel.clone(), f.to_port.clone()))
            .collect()
    }

    pub fn cycles(&self) -> bool {
        !self.warnings.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    UnresolvedReference { what: String, id: String },
    DisconnectedGraph { components: Vec<Vec<PeId>> },
    NoSourceOrConsumer { sources: usize, consumers: usize },
    ControlFlowNotPointToPoint { channel: ChannelId },
    MalformedPorts(MalformedPorts),
    RoleMismatch { pe: PeId, declared: Role, derived: Role },
    PortMismatch { pe: PeId, port: PortId, expected: PortDirection },
    WrongFlowClass { channel: ChannelId, expected: FlowClass },
    InvalidChannel { channel: ChannelId, reason: String },
    ChannelConflict { channel: ChannelId, reason: String },
    MultipleOutputChannels { pe: PeId },
    DuplicateId { what: String, id: String },
    UnsupportedVersion(u32),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::UnresolvedReference { what, id } => write!(f, "unresolved {what} `{id}`"),
            Violation::DisconnectedGraph { components } => {
                write!(f, "graph is not connected ({} components)", components.len())
            }
            Violation::NoSourceOrConsumer { sources, consumers } => write!(
                f,
                "need at least one source and one consumer, found {sources} and {consumers}"
            ),
            Violation::ControlFlowNotPointToPoint { channel } => {
                write!(f, "control flow on `{channel}` must use a point_to_point channel")
            }
            Violation::MalformedPorts(m) => write!(f, "{m}"),
            Violation::RoleMismatch { pe, declared, derived } => write!(
                f,
                "pe `{pe}` declared as {declared} but its ports make it a {derived}"
            ),
            Violation::PortMismatch { pe, port, expected } => {
                write!(f, "port `{pe}.{port}` is not an {expected:?} port")
            }
            Violation::WrongFlowClass { channel, expected } => {
                write!(f, "channel `{channel}` must have flow_class {expected:?}")
            }
            Violation::InvalidChannel { channel, reason } => {
                write!(f, "channel `{channel}`: {reason}")
            }
            Violation::ChannelConflict { channel, reason } => {
                write!(f, "channel `{channel}`: {reason}")
            }
            Violation::MultipleOutputChannels { pe } => write!(
                f,
                "pe `{pe}` publishes on more than one channel; fan out with a broadcast or distributed channel"
            ),
            Violation::DuplicateId { what, id } => write!(f, "duplicate {what} `{id}`"),
            Violation::UnsupportedVersion(v) => {
                write!(f, "unsupported config version {v}, expected {CONFIG_VERSION}")
            }
        }
    }
}

#[derive(Debug, Error)]
pub enum TopologyError {
    #[error("invalid topology:\n{}", fmt_violations(.0))]
    Invalid(Vec<Violation>),
    #[error("cannot read topology config: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse topology config: {0}")]
    Parse(#[from] toml::de::Error),
}

fn fmt_violations(v: &[Violation]) -> String {
    v.iter()
        .map(|x| format!("  - {x}"))
        .collect::<Vec<_>>()
        .join("\n")
}

impl TopologyError {
    pub fn violations(&self) -> &[Violation] {
        match self {
            TopologyError::Invalid(v) => v,
            _ => &[],
        }
    }
}

// ---------------------------------------------------------------------------
// Declarative description

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PeConfig {
    pub id: PeId,
    pub kind: PeKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<Role>,
    pub behavior: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub inputs: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub outputs: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub config: Vec<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub port_kinds: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "serde_json::Map::is_empty")]
    pub params: serde_json::Map<String, serde_json::Value>,
}

impl PeConfig {
    pub fn new(id: &str, kind: PeKind, behavior: &str) -> Self {
        PeConfig {
            id: id.into(),
            kind,
            role: None,
            behavior: behavior.to_owned(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            config: Vec::new(),
            port_kinds: BTreeMap::new(),
            params: serde_json::Map::new(),
        }
    }

    pub fn inputs(mut self, ports: &[&str]) -> Self {
        self.inputs = ports.iter().map(|s| (*s).to_owned()).collect();
        self
    }

    pub fn output(mut self, port: &str) -> Self {
        self.outputs = vec![port.to_owned()];
        self
    }

    pub fn config_ports(mut self, ports: &[&str]) -> Self {
        self.config = ports.iter().map(|s| (*s).to_owned()).collect();
        self
    }

    pub fn role(mut self, role: Role) -> Self {
        self.role = Some(role);
        self
    }

    pub fn param(mut self, key: &str, value: impl Into<serde_json::Value>) -> Self {
        self.params.insert(key.to_owned(), value.into());
        self
    }

    fn to_spec(&self) -> ProcessingElementSpec {
        let kind_of = |p: &str| {
            self.port_kinds
                .get(p)
                .cloned()
                .unwrap_or_else(|| "item".to_owned())
        };
        let mut ports = Vec::new();
        for (list, dir) in [
            (&self.inputs, PortDirection::Input),
            (&self.config, PortDirection::Configuration),
            (&self.outputs, PortDirection::Output),
        ] {
            for p in list {
                ports.push(PortSpec {
                    port_id: p.as_str().into(),
                    direction: dir,
                    value_kind: kind_of(p),
                });
            }
        }
        ProcessingElementSpec {
            pe_id: self.id.clone(),
            kind: self.kind,
            ports,
            behavior: BehaviorRef {
                name: self.behavior.clone(),
                params: self.params.clone(),
            },
            declared_role: self.role,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelConfig {
    pub id: ChannelId,
    pub modality: Modality,
    #[serde(default)]
    pub capacity: Option<usize>,
    #[serde(default)]
    pub shed_policy: Option<ShedPolicy>,
    #[serde(default = "default_flow_class")]
    pub flow_class: FlowClass,
}

fn default_flow_class() -> FlowClass {
    FlowClass::Data
}

impl ChannelConfig {
    pub fn data(id: &str, modality: Modality, capacity: usize) -> Self {
        ChannelConfig {
            id: id.into(),
            modality,
            capacity: Some(capacity),
            shed_policy: None,
            flow_class: FlowClass::Data,
        }
    }

    pub fn control(id: &str) -> Self {
        ChannelConfig {
            id: id.into(),
            modality: Modality::PointToPoint,
            capacity: Some(1),
            shed_policy: None,
            flow_class: FlowClass::Control,
        }
    }

    pub fn policy(mut self, policy: ShedPolicy) -> Self {
        self.shed_policy = Some(policy);
        self
    }

    /// Applies defaults: drop_newest/1024 for data, block/1 for control.
    pub fn to_spec(&self) -> ChannelSpec {
        let (cap, policy) = match self.flow_class {
            FlowClass::Data => (DEFAULT_CAPACITY, ShedPolicy::DropNewest),
            FlowClass::Control => (1, ShedPolicy::Block),
        };
        ChannelSpec {
            channel_id: self.id.clone(),
            modality: self.modality,
            capacity: self.capacity.unwrap_or(cap),
            shed_policy: self.shed_policy.unwrap_or(policy),
            flow_class: self.flow_class,
        }
    }
}

/// `pe.port` endpoint reference.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    pub from: String,
    pub to: String,
    pub channel: ChannelId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyConfig {
    pub version: u32,
    pub name: String,
    #[serde(default)]
    pub pes: Vec<PeConfig>,
    #[serde(default)]
    pub channels: Vec<ChannelConfig>,
    #[serde(default)]
    pub data_flows: Vec<FlowConfig>,
    #[serde(default)]
    pub control_flows: Vec<FlowConfig>,
}

impl TopologyConfig {
    pub fn new(name: &str) -> Self {
        TopologyConfig {
            version: CONFIG_VERSION,
            name: name.to_owned(),
            pes: Vec::new(),
            channels: Vec::new(),
            data_flows: Vec::new(),
            control_flows: Vec::new(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, TopologyError> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TopologyError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("topology config serializes")
    }

    pub fn pe(mut self, pe: PeConfig) -> Self {
        self.pes.push(pe);
        self
    }

    pub fn channel(mut self, ch: ChannelConfig) -> Self {
        self.channels.push(ch);
        self
    }

    pub fn data_flow(mut self, from: &str, to: &str, channel: &str) -> Self {
        self.data_flows.push(FlowConfig {
            from: from.to_owned(),
            to: to.to_owned(),
            channel: channel.into(),
        });
        self
    }

    pub fn control_flow(mut self, from: &str, to: &str, channel: &str) -> Self {
        self.control_flows.push(FlowConfig {
            from: from.to_owned(),
            to: to.to_owned(),
            channel: channel.into(),
        });
        self
    }

    pub fn pe_mut(&mut self, id: &str) -> Option<&mut PeConfig> {
        self.pes.iter_mut().find(|p| p.id.as_str() == id)
    }

    pub fn channel_mut(&mut self, id: &str) -> Option<&mut ChannelConfig> {
        self.channels.iter_mut().find(|c| c.id.as_str() == id)
    }
}

fn split_endpoint(s: &str) -> (PeId, Option<PortId>) {
    match s.split_once('.') {
        Some((pe, port)) => (pe.into(), Some(port.into())),
        None => (s.into(), None),
    }
}

/// Validates a description against every topology invariant. All violations
/// are reported, not just the first.
pub fn build_topology(cfg: &TopologyConfig) -> Result<Topology, TopologyError> {
    let mut v = Vec::new();
    if cfg.version != CONFIG_VERSION {
        return Err(TopologyError::Invalid(vec![Violation::UnsupportedVersion(
            cfg.version,
        )]));
    }

    let mut pes = BTreeMap::new();
    let mut roles = BTreeMap::new();
    for pc in &cfg.pes {
        let spec = pc.to_spec();
        match classify_pe(&spec) {
            Ok(role) => {
                if let Some(declared) = spec.declared_role {
                    if declared != role {
                        v.push(Violation::RoleMismatch {
                            pe: spec.pe_id.clone(),
                            declared,
                            derived: role,
                        });
                    }
                }
                roles.insert(spec.pe_id.clone(), role);
            }
            Err(m) => v.push(Violation::MalformedPorts(m)),
        }
        if pes.insert(spec.pe_id.clone(), spec).is_some() {
            v.push(Violation::DuplicateId {
                what: "pe".to_owned(),
                id: pc.id.0.clone(),
            });
        }
    }

    let mut channels = BTreeMap::new();
    for cc in &cfg.channels {
        let spec = cc.to_spec();
        for reason in spec.problems() {
            v.push(Violation::InvalidChannel {
                channel: spec.channel_id.clone(),
                reason,
            });
        }
        if channels.insert(spec.channel_id.clone(), spec).is_some() {
            v.push(Violation::DuplicateId {
                what: "channel".to_owned(),
                id: cc.id.0.clone(),
            });
        }
    }

    let unresolved = |what: &str, id: &str| Violation::UnresolvedReference {
        what: what.to_owned(),
        id: id.to_owned(),
    };

    let mut data_flows = Vec::new();
    for fc in &cfg.data_flows {
        let (from, from_port) = split_endpoint(&fc.from);
        let (to, to_port) = split_endpoint(&fc.to);
        let mut ok = true;
        for (pe, port, dir) in [
            (&from, &from_port, PortDirection::Output),
            (&to, &to_port, PortDirection::Input),
        ] {
            let Some(spec) = pes.get(pe) else {
                v.push(unresolved("pe", pe.as_str()));
                ok = false;
                continue;
            };
            let port = match port {
                Some(p) => p.clone(),
                None => match spec.ports(dir).next() {
                    Some(p) => p.port_id.clone(),
                    None => {
                        v.push(unresolved("port", &format!("{pe}.<{dir:?}>")));
                        ok = false;
                        continue;
                    }
                },
            };
            match spec.port(&port) {
                None => {
                    v.push(unresolved("port", &format!("{pe}.{port}")));
                    ok = false;
                }
                Some(p) if p.direction != dir => {
                    v.push(Violation::PortMismatch {
                        pe: pe.clone(),
                        port,
                        expected: dir,
                    });
                    ok = false;
                }
                Some(_) => {}
            }
        }
        match channels.get(&fc.channel) {
            None => {
                v.push(unresolved("channel", fc.channel.as_str()));
                ok = false;
            }
            Some(ch) if ch.flow_class != FlowClass::Data => {
                v.push(Violation::WrongFlowClass {
                    channel: fc.channel.clone(),
                    expected: FlowClass::Data,
                });
                ok = false;
            }
            Some(_) => {}
        }
        if ok {
            let out_port = from_port.unwrap_or_else(|| {
                pes[&from].output_port().expect("checked above").port_id.clone()
            });
            let in_port = to_port.unwrap_or_else(|| {
                pes[&to]
                    .ports(PortDirection::Input)
                    .next()
                    .expect("checked above")
                    .port_id
                    .clone()
            });
            data_flows.push(DataFlow {
                from,
                from_port: out_port,
                to,
                to_port: in_port,
                channel: fc.channel.clone(),
            });
        }
    }

    let mut control_flows = Vec::new();
    for fc in &cfg.control_flows {
        let (from, _) = split_endpoint(&fc.from);
        let (to, to_port) = split_endpoint(&fc.to);
        let mut ok = true;
        if !pes.contains_key(&from) {
            v.push(unresolved("pe", from.as_str()));
            ok = false;
        }
        let mut port_id = None;
        match pes.get(&to) {
            None => {
                v.push(unresolved("pe", to.as_str()));
                ok = false;
            }
            Some(spec) => {
                let port = to_port.or_else(|| {
                    spec.ports(PortDirection::Configuration)
                        .next()
                        .map(|p| p.port_id.clone())
                });
                match port.as_ref().and_then(|p| spec.port(p)) {
                    None => {
                        v.push(unresolved("configuration port", &fc.to));
                        ok = false;
                    }
                    Some(p) if p.direction != PortDirection::Configuration => {
                        v.push(Violation::PortMismatch {
                            pe: to.clone(),
                            port: p.port_id.clone(),
                            expected: PortDirection::Configuration,
                        });
                        ok = false;
                    }
                    Some(p) => port_id = Some(p.port_id.clone()),
                }
            }
        }
        match channels.get(&fc.channel) {
            None => {
                v.push(unresolved("channel", fc.channel.as_str()));
                ok = false;
            }
            Some(ch) => {
                if ch.flow_class != FlowClass::Control {
                    v.push(Violation::WrongFlowClass {
                        channel: fc.channel.clone(),
                        expected: FlowClass::Control,
                    });
                    ok = false;
                }
                if ch.modality != Modality::PointToPoint {
                    v.push(Violation::ControlFlowNotPointToPoint {
                        channel: fc.channel.clone(),
                    });
                    ok = false;
                }
            }
        }
        if ok {
            control_flows.push(ControlFlow {
                from,
                to,
                to_port: port_id.expect("set when ok"),
                channel: fc.channel.clone(),
            });
        }
    }

    // Channel usage: one publisher each; p2p has one subscriber.
    for (id, ch) in &channels {
        match ch.flow_class {
            FlowClass::Data => {
                let flows: Vec<_> = data_flows.iter().filter(|f| &f.channel == id).collect();
                let publishers: BTreeSet<_> = flows.iter().map(|f| &f.from).collect();
                let subscribers: BTreeSet<_> = flows.iter().map(|f| &f.to).collect();
                if publishers.len() > 1 {
                    v.push(Violation::ChannelConflict {
                        channel: id.clone(),
                        reason: format!("{} publishers, expected one", publishers.len()),
                    });
                }
                if subscribers.is_empty() {
                    v.push(Violation::ChannelConflict {
                        channel: id.clone(),
                        reason: "no subscribers".to_owned(),
                    });
                }
                if ch.modality == Modality::PointToPoint && subscribers.len() > 1 {
                    v.push(Violation::ChannelConflict {
                        channel: id.clone(),
                        reason: format!(
                            "point_to_point channel with {} subscribers",
                            subscribers.len()
                        ),
                    });
                }
            }
            FlowClass::Control => {
                let n = control_flows.iter().filter(|f| &f.channel == id).count();
                if n > 1 {
                    v.push(Violation::ChannelConflict {
                        channel: id.clone(),
                        reason: format!("{n} control flows share a point_to_point channel"),
                    });
                }
            }
        }
    }
    for pe in pes.keys() {
        let out: BTreeSet<_> = data_flows
            .iter()
            .filter(|f| &f.from == pe)
            .map(|f| &f.channel)
            .collect();
        if out.len() > 1 {
            v.push(Violation::MultipleOutputChannels { pe: pe.clone() });
        }
    }

    let sources = roles.values().filter(|r| **r == Role::Source).count();
    let consumers = roles.values().filter(|r| **r == Role::Consumer).count();
    if sources == 0 || consumers == 0 {
        v.push(Violation::NoSourceOrConsumer { sources, consumers });
    }

    let components = weak_components(
        pes.keys(),
        data_flows
            .iter()
            .map(|f| (&f.from, &f.to))
            .chain(control_flows.iter().map(|f| (&f.from, &f.to))),
    );
    if components.len() > 1 {
        v.push(Violation::DisconnectedGraph { components });
    }

    if !v.is_empty() {
        return Err(TopologyError::Invalid(v));
    }

    let warnings = find_cycle(&pes, &data_flows)
        .map(TopologyWarning::DataFlowCycle)
        .into_iter()
        .collect::<Vec<_>>();
    for w in &warnings {
        log::warn!("topology `{}`: {w}", cfg.name);
    }

    Ok(Topology {
        name: cfg.name.clone(),
        pes,
        channels,
        data_flows,
        control_flows,
        warnings,
        roles,
    })
}

fn weak_components<'a>(
    nodes: impl Iterator<Item = &'a PeId>,
    edges: impl Iterator<Item = (&'a PeId, &'a PeId)>,
) -> Vec<Vec<PeId>> {
    let nodes: Vec<&PeId> = nodes.collect();
    let mut adj: BTreeMap<&PeId, Vec<&PeId>> = nodes.iter().map(|n| (*n, Vec::new())).collect();
    for (a, b) in edges {
        adj.entry(a).or_default().push(b);
        adj.entry(b).or_default().push(a);
    }
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for start in nodes {
        if !seen.insert(start) {
            continue;
        }
        let mut comp = vec![start.clone()];
        let mut queue = VecDeque::from([start]);
        while let Some(n) = queue.pop_front() {
            for m in adj.get(n).into_iter().flatten() {
                if seen.insert(*m) {
                    comp.push((*m).clone());
                    queue.push_back(*m);
                }
            }
        }
        out.push(comp);
    }
    out
}

/// Some data-flow cycle, if one exists (iterative DFS, colors).
fn find_cycle(
    pes: &BTreeMap<PeId, ProcessingElementSpec>,
    flows: &[DataFlow],
) -> Option<Vec<PeId>> {
    let mut succ: BTreeMap<&PeId, Vec<&PeId>> = BTreeMap::new();
    for f in flows {
        succ.entry(&f.from).or_default().push(&f.to);
    }
    #[derive(Clone, Copy, PartialEq)]
    enum Color {
        White,
        Grey,
        Black,
    }
    let mut color: BTreeMap<&PeId, Color> = pes.keys().map(|k| (k, Color::White)).collect();
    for root in pes.keys() {
        if color[root] != Color::White {
            continue;
        }
        let mut stack: Vec<(&PeId, usize)> = vec![(root, 0)];
        color.insert(root, Color::Grey);
        while let Some((node, i)) = stack.last().copied() {
            let next = succ.get(node).and_then(|s| s.get(i)).copied();
            match next {
                Some(n) => {
                    stack.last_mut().expect("non-empty").1 += 1;
                    match color[n] {
                        Color::White => {
                            color.insert(n, Color::Grey);
                            stack.push((n, 0));
                        }
                        Color::Grey => {
                            let pos = stack.iter().position(|(p, _)| *p == n).expect("on stack");
                            let mut cyc: Vec<PeId> =
                                stack[pos..].iter().map(|(p, _)| (*p).clone()).collect();
                            cyc.push(n.clone());
                            return Some(cyc);
                        }
                        Color::Black => {}
                    }
                }
                None => {
                    color.insert(node, Color::Black);
                    stack.pop();
                }
            }
        }
    }
    None
}
