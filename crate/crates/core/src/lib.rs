//! Stream processing with crowd-sourced processing elements.

pub mod channels;
pub mod crowd;
pub mod harness;
pub mod learning;
pub mod metrics;
pub mod model;
pub mod patterns;
pub mod runtime;
pub mod topology;

pub use channels::{ChannelBuffer, ChannelSpec, ControlChannel, Modality, QueueStats, ShedPolicy, ShedRecord};
pub use model::{
    ChannelId, ControlBody, ControlSignal, DataItem, ItemId, Lineage, Payload, PeId, PortId,
    SignalKind, SimDuration, Timestamp, WorkerId,
};
pub use topology::{build_topology, PeKind, Role, Topology, TopologyConfig, TopologyError};
