//! Communication channels: modalities, bounded buffering and load shedding.
//!
//! [`ChannelBuffer`] is the plain single-owner queue used by the virtual-time
//! scheduler. [`SharedChannel`] wraps it for the wall-clock runtime, where the
//! block policy actually suspends the publishing thread.

use std::collections::VecDeque;
use std::io;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    ChannelId, ControlSignal, DataItem, ItemId, Lineage, PeId, SignalKind, Timestamp, ROUTING_KEY,
};

/// Default buffer size for data channels when a config omits it.
pub const DEFAULT_CAPACITY: usize = 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    PointToPoint,
    Distributed,
    Broadcast,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShedPolicy {
    DropNewest,
    DropOldest,
    Block,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowClass {
    Data,
    Control,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelSpec {
    #[serde(rename = "id")]
    pub channel_id: ChannelId,
    pub modality: Modality,
    /// Max buffered items per subscriber; 0 means unbuffered hand-off.
    pub capacity: usize,
    pub shed_policy: ShedPolicy,
    pub flow_class: FlowClass,
}

impl ChannelSpec {
    pub fn data(id: impl Into<ChannelId>, modality: Modality, capacity: usize) -> Self {
        ChannelSpec {
            channel_id: id.into(),
            modality,
            capacity,
            shed_policy: ShedPolicy::DropNewest,
            flow_class: FlowClass::Data,
        }
    }

    pub fn control(id: impl Into<ChannelId>) -> Self {
        ChannelSpec {
            channel_id: id.into(),
            modality: Modality::PointToPoint,
            capacity: 1,
            shed_policy: ShedPolicy::Block,
            flow_class: FlowClass::Control,
        }
    }

    pub fn with_policy(mut self, policy: ShedPolicy) -> Self {
        self.shed_policy = policy;
        self
    }

    /// Structural problems with the spec itself, independent of any topology.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.flow_class == FlowClass::Control {
            if self.modality != Modality::PointToPoint {
                out.push("control channels must be point_to_point".to_owned());
            }
            if self.capacity > 1 {
                out.push(format!(
                    "control channels buffer at most 1 signal, got capacity {}",
                    self.capacity
                ));
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShedReason {
    Capacity,
    Prioritization,
}

impl ShedReason {
    pub fn as_str(self) -> &'static str {
        match self {
            ShedReason::Capacity => "capacity",
            ShedReason::Prioritization => "prioritization",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShedRecord {
    pub channel_id: ChannelId,
    pub item_id: ItemId,
    pub shed_ts: Timestamp,
    pub reason: ShedReason,
    /// Source items the shed item derived from; not part of the CSV export.
    #[serde(skip)]
    pub lineage: Lineage,
}

#[derive(Clone, Debug, PartialEq)]
pub enum PublishOutcome {
    /// Handed straight to a ready subscriber.
    Delivered,
    Queued,
    /// An item was shed; under drop_oldest the record names the evicted item.
    Shed(ShedRecord),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Delivery {
    pub subscriber: PeId,
    pub outcome: PublishOutcome,
}

/// Result of a publish attempt.
#[derive(Debug)]
pub enum Publish {
    Done(Vec<Delivery>),
    /// Block policy and some routed subscriber is full; the item is handed back.
    Blocked(DataItem),
}

impl Publish {
    pub fn deliveries(&self) -> &[Delivery] {
        match self {
            Publish::Done(d) => d,
            Publish::Blocked(_) => &[],
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ChannelError {
    #[error("unknown channel `{0}`")]
    UnknownChannel(ChannelId),
    #[error("publish on channel `{0}` after shutdown")]
    PublishAfterShutdown(ChannelId),
    #[error("channel `{0}` has no subscribers")]
    NoSubscribers(ChannelId),
    #[error("channel `{0}` carries {1:?} flows")]
    WrongFlowClass(ChannelId, FlowClass),
    #[error("control signal for unknown target `{0}`")]
    UnknownTarget(PeId),
    #[error("`{0}` is not a subscriber of channel `{1}`")]
    NotSubscribed(PeId, ChannelId),
}

/// FNV-1a over the key bytes, offset basis mixed with a fixed release seed.
/// Must stay stable: distributed routing determinism depends on it.
pub fn stable_hash(bytes: &[u8]) -> u64 {
    const SEED: u64 = 0x6373_7066_6c6f_7701;
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ SEED;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Per-subscriber counters. `published == delivered + shed + queued` holds
/// after every operation.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct QueueStats {
    pub published: u64,
    pub delivered: u64,
    pub shed: u64,
    pub queued: u64,
    pub peak_queued: u64,
}

impl QueueStats {
    pub fn conserved(&self) -> bool {
        self.published == self.delivered + self.shed + self.queued
    }
}

#[derive(Debug)]
struct SubscriberQueue {
    pe: PeId,
    items: VecDeque<(Timestamp, DataItem)>,
    waiting: bool,
    stats: QueueStats,
}

/// Single-owner data channel with one queue per subscriber.
#[derive(Debug)]
pub struct ChannelBuffer {
    spec: ChannelSpec,
    subscribers: Vec<SubscriberQueue>,
    next_rr: usize,
    closed: bool,
    items_published: u64,
}

impl ChannelBuffer {
    pub fn new(spec: ChannelSpec, subscribers: Vec<PeId>) -> Result<Self, ChannelError> {
        if spec.flow_class != FlowClass::Data {
            return Err(ChannelError::WrongFlowClass(spec.channel_id, spec.flow_class));
        }
        if subscribers.is_empty() {
            return Err(ChannelError::NoSubscribers(spec.channel_id));
        }
        Ok(ChannelBuffer {
            spec,
            subscribers: subscribers
                .into_iter()
                .map(|pe| SubscriberQueue {
                    pe,
                    items: VecDeque::new(),
                    waiting: false,
                    stats: QueueStats::default(),
                })
                .collect(),
            next_rr: 0,
            closed: false,
            items_published: 0,
        })
    }

    pub fn spec(&self) -> &ChannelSpec {
        &self.spec
    }

    pub fn id(&self) -> &ChannelId {
        &self.spec.channel_id
    }

    pub fn subscribers(&self) -> impl Iterator<Item = &PeId> {
        self.subscribers.iter().map(|s| &s.pe)
    }

    pub fn subscriber_index(&self, pe: &PeId) -> Option<usize> {
        self.subscribers.iter().position(|s| &s.pe == pe)
    }

    /// Subscriber indices the item goes to. Advances round-robin state for
    /// key-less items on distributed channels.
    pub fn route(&mut self, item: &DataItem) -> Vec<usize> {
        let n = self.subscribers.len();
        match self.spec.modality {
            Modality::PointToPoint => vec![0],
            Modality::Broadcast => (0..n).collect(),
            Modality::Distributed => match item.attr(ROUTING_KEY) {
                Some(key) => vec![(stable_hash(key.as_bytes()) % n as u64) as usize],
                None => {
                    let i = self.next_rr % n;
                    self.next_rr = (self.next_rr + 1) % n;
                    vec![i]
                }
            },
        }
    }

    /// Subscriber ids for an item; see [`ChannelBuffer::route`].
    pub fn route_ids(&mut self, item: &DataItem) -> Vec<PeId> {
        self.route(item)
            .into_iter()
            .map(|i| self.subscribers[i].pe.clone())
            .collect()
    }

    fn has_room(&self, idx: usize) -> bool {
        let q = &self.subscribers[idx];
        if self.spec.capacity == 0 {
            q.waiting && q.items.is_empty()
        } else {
            q.items.len() < self.spec.capacity
        }
    }

    pub fn publish(&mut self, item: DataItem, now: Timestamp) -> Result<Publish, ChannelError> {
        if self.closed {
            return Err(ChannelError::PublishAfterShutdown(self.spec.channel_id.clone()));
        }
        let targets = self.route(&item);
        if self.spec.shed_policy == ShedPolicy::Block && targets.iter().any(|&i| !self.has_room(i))
        {
            // Routing state must not advance for an attempt that did not happen.
            if self.spec.modality == Modality::Distributed && item.attr(ROUTING_KEY).is_none() {
                let n = self.subscribers.len();
                self.next_rr = (self.next_rr + n - 1) % n;
            }
            return Ok(Publish::Blocked(item));
        }
        self.items_published += 1;
        let mut out = Vec::with_capacity(targets.len());
        let last = targets.len().saturating_sub(1);
        let mut item = Some(item);
        for (k, idx) in targets.iter().copied().enumerate() {
            let copy = if k == last {
                item.take().expect("item consumed once")
            } else {
                item.as_ref().expect("item present").clone()
            };
            let outcome = self.offer(idx, copy, now);
            out.push(Delivery {
                subscriber: self.subscribers[idx].pe.clone(),
                outcome,
            });
        }
        Ok(Publish::Done(out))
    }

    fn offer(&mut self, idx: usize, item: DataItem, now: Timestamp) -> PublishOutcome {
        let capacity = self.spec.capacity;
        let policy = self.spec.shed_policy;
        let channel_id = self.spec.channel_id.clone();
        let q = &mut self.subscribers[idx];
        q.stats.published += 1;
        let shed = |it: &DataItem| ShedRecord {
            channel_id: channel_id.clone(),
            item_id: it.item_id,
            shed_ts: now,
            reason: ShedReason::Capacity,
            lineage: it.lineage.clone(),
        };
        let handoff = q.waiting && q.items.is_empty();
        let outcome = if handoff {
            q.items.push_back((now, item));
            q.waiting = false;
            PublishOutcome::Delivered
        } else if capacity > 0 && q.items.len() < capacity {
            q.items.push_back((now, item));
            PublishOutcome::Queued
        } else {
            match policy {
                // Block was already screened in publish().
                ShedPolicy::DropNewest | ShedPolicy::Block => {
                    q.stats.shed += 1;
                    PublishOutcome::Shed(shed(&item))
                }
                ShedPolicy::DropOldest => match q.items.pop_front() {
                    Some((_, old)) => {
                        q.stats.shed += 1;
                        q.items.push_back((now, item));
                        PublishOutcome::Shed(shed(&old))
                    }
                    None => {
                        q.stats.shed += 1;
                        PublishOutcome::Shed(shed(&item))
                    }
                },
            }
        };
        q.stats.queued = q.items.len() as u64;
        q.stats.peak_queued = q.stats.peak_queued.max(q.stats.queued);
        outcome
    }

    /// Next item for a subscriber, with the time it entered the queue.
    pub fn take(&mut self, idx: usize) -> Option<(Timestamp, DataItem)> {
        let q = &mut self.subscribers[idx];
        let out = q.items.pop_front();
        if out.is_some() {
            q.stats.delivered += 1;
            q.stats.queued = q.items.len() as u64;
            q.waiting = false;
        }
        out
    }

    pub fn peek_arrival(&self, idx: usize) -> Option<Timestamp> {
        self.subscribers[idx].items.front().map(|(t, _)| *t)
    }

    /// Marks a subscriber ready to accept an unbuffered hand-off.
    pub fn set_waiting(&mut self, idx: usize, waiting: bool) {
        self.subscribers[idx].waiting = waiting;
    }

    pub fn queue_len(&self, idx: usize) -> usize {
        self.subscribers[idx].items.len()
    }

    pub fn queued_items(&self) -> impl Iterator<Item = &DataItem> {
        self.subscribers
            .iter()
            .flat_map(|s| s.items.iter().map(|(_, it)| it))
    }

    pub fn stats(&self, idx: usize) -> &QueueStats {
        &self.subscribers[idx].stats
    }

    pub fn all_stats(&self) -> impl Iterator<Item = (&PeId, &QueueStats)> {
        self.subscribers.iter().map(|s| (&s.pe, &s.stats))
    }

    /// Items accepted by publish (each counted once regardless of fan-out).
    pub fn items_published(&self) -> u64 {
        self.items_published
    }

    pub fn close(&mut self) {
        self.closed = true;
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }
}

/// Point-to-point, low-buffering channel for control signals.
///
/// At most one pending signal per kind: a newer signal replaces an older
/// undelivered one of the same kind.
#[derive(Debug)]
pub struct ControlChannel {
    spec: ChannelSpec,
    target: PeId,
    pending: VecDeque<ControlSignal>,
    sent: u64,
    replaced: u64,
    delivered: u64,
}

impl ControlChannel {
    pub fn new(spec: ChannelSpec, target: PeId) -> Result<Self, ChannelError> {
        if spec.flow_class != FlowClass::Control {
            return Err(ChannelError::WrongFlowClass(spec.channel_id, spec.flow_class));
        }
        Ok(ControlChannel {
            spec,
            target,
            pending: VecDeque::new(),
            sent: 0,
            replaced: 0,
            delivered: 0,
        })
    }

    pub fn id(&self) -> &ChannelId {
        &self.spec.channel_id
    }

    pub fn target(&self) -> &PeId {
        &self.target
    }

    pub fn send(&mut self, signal: ControlSignal) -> Result<(), ChannelError> {
        if signal.target_pe != self.target {
            return Err(ChannelError::UnknownTarget(signal.target_pe));
        }
        self.sent += 1;
        if let Some(slot) = self.pending.iter_mut().find(|s| s.kind == signal.kind) {
            *slot = signal;
            self.replaced += 1;
        } else {
            self.pending.push_back(signal);
        }
        Ok(())
    }

    /// Removes and returns all pending signals in send order.
    pub fn drain(&mut self) -> Vec<ControlSignal> {
        let out: Vec<_> = self.pending.drain(..).collect();
        self.delivered += out.len() as u64;
        out
    }

    pub fn pending_kinds(&self) -> Vec<SignalKind> {
        self.pending.iter().map(|s| s.kind).collect()
    }

    pub fn counts(&self) -> (u64, u64, u64) {
        (self.sent, self.replaced, self.delivered)
    }
}

/// Data channel wrapper for the threaded runtime.
#[derive(Clone, Debug)]
pub struct SharedChannel {
    inner: Arc<(Mutex<ChannelBuffer>, Condvar)>,
}

impl SharedChannel {
    pub fn new(buffer: ChannelBuffer) -> Self {
        SharedChannel {
            inner: Arc::new((Mutex::new(buffer), Condvar::new())),
        }
    }

    /// Publishes, suspending the caller while a block-policy channel is full.
    /// Gives up and reports `Blocked` after `max_wait`.
    pub fn publish(
        &self,
        mut item: DataItem,
        now: impl Fn() -> Timestamp,
        max_wait: Duration,
    ) -> Result<Publish, ChannelError> {
        let (lock, cvar) = &*self.inner;
        let deadline = std::time::Instant::now() + max_wait;
        let mut guard = lock.lock().expect("channel lock poisoned");
        loop {
            match guard.publish(item, now())? {
                Publish::Blocked(back) => {
                    let left = deadline.saturating_duration_since(std::time::Instant::now());
                    if left.is_zero() || guard.is_closed() {
                        return Ok(Publish::Blocked(back));
                    }
                    item = back;
                    guard = cvar
                        .wait_timeout(guard, left.min(Duration::from_millis(20)))
                        .expect("channel lock poisoned")
                        .0;
                }
                done => {
                    cvar.notify_all();
                    return Ok(done);
                }
            }
        }
    }

    pub fn try_take(&self, idx: usize) -> Option<(Timestamp, DataItem)> {
        let (lock, cvar) = &*self.inner;
        let mut guard = lock.lock().expect("channel lock poisoned");
        let out = guard.take(idx);
        if out.is_some() {
            cvar.notify_all();
        }
        out
    }

    /// Waits up to `timeout` for an item for subscriber `idx`.
    pub fn take_timeout(&self, idx: usize, timeout: Duration) -> Option<(Timestamp, DataItem)> {
        let (lock, cvar) = &*self.inner;
        let mut guard = lock.lock().expect("channel lock poisoned");
        if guard.queue_len(idx) == 0 {
            guard.set_waiting(idx, true);
            guard = cvar
                .wait_timeout_while(guard, timeout, |b| b.queue_len(idx) == 0 && !b.is_closed())
                .expect("channel lock poisoned")
                .0;
        }
        let out = guard.take(idx);
        if out.is_none() {
            guard.set_waiting(idx, false);
        }
        cvar.notify_all();
        out
    }

    pub fn with<R>(&self, f: impl FnOnce(&mut ChannelBuffer) -> R) -> R {
        let (lock, cvar) = &*self.inner;
        let mut guard = lock.lock().expect("channel lock poisoned");
        let r = f(&mut guard);
        cvar.notify_all();
        r
    }
}

/// Writes shed records as `channel_id,item_id,shed_ts,reason` CSV.
pub fn write_shed_csv<W: io::Write>(out: W, records: &[ShedRecord]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["channel_id", "item_id", "shed_ts", "reason"])?;
    for r in records {
        w.write_record([
            r.channel_id.as_str(),
            &r.item_id.to_string(),
            &format!("{:.6}", r.shed_ts.as_millis()),
            r.reason.as_str(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ControlBody, Payload};
    use std::collections::BTreeMap;

    fn item(id: u64) -> DataItem {
        DataItem::from_source(ItemId(id), Payload::Text(format!("t{id}")), Timestamp(id))
    }

    fn buffer(modality: Modality, capacity: usize, policy: ShedPolicy, subs: &[&str]) -> ChannelBuffer {
        let spec = ChannelSpec::data("c", modality, capacity).with_policy(policy);
        ChannelBuffer::new(spec, subs.iter().map(|s| PeId::from(*s)).collect()).unwrap()
    }

    fn queued_ids(b: &ChannelBuffer) -> Vec<u64> {
        b.queued_items().map(|i| i.item_id.0).collect()
    }

    #[test]
    fn publish_into_empty_buffer_queues() {
        let mut b = buffer(Modality::PointToPoint, 2, ShedPolicy::DropNewest, &["a"]);
        let p = b.publish(item(1), Timestamp(0)).unwrap();
        assert_eq!(p.deliveries()[0].outcome, PublishOutcome::Queued);
        assert_eq!(queued_ids(&b), vec![1]);
    }

    #[test]
    fn drop_newest_sheds_incoming() {
        let mut b = buffer(Modality::PointToPoint, 1, ShedPolicy::DropNewest, &["a"]);
        b.publish(item(1), Timestamp(0)).unwrap();
        let p = b.publish(item(2), Timestamp(5)).unwrap();
        match &p.deliveries()[0].outcome {
            PublishOutcome::Shed(r) => assert_eq!(r.item_id, ItemId(2)),
            o => panic!("unexpected {o:?}"),
        }
        assert_eq!(queued_ids(&b), vec![1]);
    }

    #[test]
    fn drop_oldest_evicts_head() {
        let mut b = buffer(Modality::PointToPoint, 1, ShedPolicy::DropOldest, &["a"]);
        b.publish(item(1), Timestamp(0)).unwrap();
        let p = b.publish(item(2), Timestamp(5)).unwrap();
        match &p.deliveries()[0].outcome {
            PublishOutcome::Shed(r) => {
                assert_eq!(r.item_id, ItemId(1));
                assert_eq!(r.reason, ShedReason::Capacity);
            }
            o => panic!("unexpected {o:?}"),
        }
        assert_eq!(queued_ids(&b), vec![2]);
    }

    #[test]
    fn block_hands_item_back() {
        let mut b = buffer(Modality::PointToPoint, 1, ShedPolicy::Block, &["a"]);
        b.publish(item(1), Timestamp(0)).unwrap();
        match b.publish(item(2), Timestamp(1)).unwrap() {
            Publish::Blocked(it) => assert_eq!(it.item_id, ItemId(2)),
            p => panic!("expected block, got {p:?}"),
        }
        assert!(b.stats(0).conserved());
        b.take(0).unwrap();
        assert!(matches!(b.publish(item(2), Timestamp(2)).unwrap(), Publish::Done(_)));
    }

    #[test]
    fn unbuffered_delivers_only_to_waiting_subscriber() {
        let mut b = buffer(Modality::PointToPoint, 0, ShedPolicy::DropNewest, &["a"]);
        let p = b.publish(item(1), Timestamp(0)).unwrap();
        assert!(matches!(p.deliveries()[0].outcome, PublishOutcome::Shed(_)));
        b.set_waiting(0, true);
        let p = b.publish(item(2), Timestamp(1)).unwrap();
        assert_eq!(p.deliveries()[0].outcome, PublishOutcome::Delivered);
        assert_eq!(b.take(0).unwrap().1.item_id, ItemId(2));
    }

    #[test]
    fn broadcast_copies_to_every_subscriber() {
        let mut b = buffer(Modality::Broadcast, 4, ShedPolicy::DropNewest, &["a", "b", "c"]);
        let p = b.publish(item(7), Timestamp(0)).unwrap();
        let subs: Vec<_> = p.deliveries().iter().map(|d| d.subscriber.0.clone()).collect();
        assert_eq!(subs, ["a", "b", "c"]);
        for i in 0..3 {
            let (_, got) = b.take(i).unwrap();
            assert_eq!(got.payload, Payload::Text("t7".into()));
        }
        assert_eq!(b.items_published(), 1);
    }

    #[test]
    fn distributed_same_key_same_subscriber() {
        let mut b = buffer(Modality::Distributed, 8, ShedPolicy::DropNewest, &["a", "b", "c"]);
        let keyed = item(1).with_attr(ROUTING_KEY, "joplin");
        let first = b.route(&keyed);
        for _ in 0..10 {
            assert_eq!(b.route(&keyed), first);
        }
    }

    #[test]
    fn distributed_without_key_round_robins() {
        let mut b = buffer(Modality::Distributed, 8, ShedPolicy::DropNewest, &["a", "b", "c"]);
        let got: Vec<usize> = (0..6).map(|i| b.route(&item(i))[0]).collect();
        assert_eq!(got, vec![0, 1, 2, 0, 1, 2]);
    }

    #[test]
    fn point_to_point_routes_to_single_subscriber() {
        let mut b = buffer(Modality::PointToPoint, 1, ShedPolicy::DropNewest, &["a"]);
        assert_eq!(b.route_ids(&item(0)), vec![PeId::from("a")]);
    }

    #[test]
    fn publish_after_close_fails() {
        let mut b = buffer(Modality::PointToPoint, 1, ShedPolicy::DropNewest, &["a"]);
        b.close();
        assert_eq!(
            b.publish(item(0), Timestamp(0)).unwrap_err(),
            ChannelError::PublishAfterShutdown("c".into())
        );
    }

    #[test]
    fn no_subscribers_rejected() {
        let spec = ChannelSpec::data("c", Modality::Broadcast, 1);
        assert_eq!(
            ChannelBuffer::new(spec, vec![]).unwrap_err(),
            ChannelError::NoSubscribers("c".into())
        );
    }

    fn signal(id: u64, target: &str, kind: SignalKind) -> ControlSignal {
        ControlSignal {
            signal_id: id,
            target_pe: target.into(),
            kind,
            body: ControlBody::Params(BTreeMap::new()),
        }
    }

    #[test]
    fn newer_control_signal_replaces_pending() {
        let mut c = ControlChannel::new(ChannelSpec::control("ctl"), "clf".into()).unwrap();
        c.send(signal(1, "clf", SignalKind::ParameterUpdate)).unwrap();
        c.send(signal(2, "clf", SignalKind::ParameterUpdate)).unwrap();
        let got = c.drain();
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].signal_id, 2);
    }

    #[test]
    fn control_signal_to_unknown_pe_rejected() {
        let mut c = ControlChannel::new(ChannelSpec::control("ctl"), "clf".into()).unwrap();
        assert_eq!(
            c.send(signal(1, "nobody", SignalKind::ModelUpdate)).unwrap_err(),
            ChannelError::UnknownTarget("nobody".into())
        );
    }

    #[test]
    fn data_spec_cannot_back_control_channel() {
        let spec = ChannelSpec::data("d", Modality::PointToPoint, 1);
        assert!(matches!(
            ControlChannel::new(spec, "x".into()),
            Err(ChannelError::WrongFlowClass(_, FlowClass::Data))
        ));
    }

    #[test]
    fn shed_csv_header_and_rows() {
        let mut out = Vec::new();
        write_shed_csv(
            &mut out,
            &[ShedRecord {
                channel_id: "raw".into(),
                item_id: ItemId(4),
                shed_ts: Timestamp::from_millis(12.5),
                reason: ShedReason::Capacity,
                lineage: Lineage::single(ItemId(4)),
            }],
        )
        .unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "channel_id,item_id,shed_ts,reason\nraw,4,12.500000,capacity\n"
        );
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn policy() -> impl Strategy<Value = ShedPolicy> {
            prop_oneof![
                Just(ShedPolicy::DropNewest),
                Just(ShedPolicy::DropOldest),
                Just(ShedPolicy::Block)
            ]
        }

        proptest! {
            // ops: true = publish, false = take
            #[test]
            fn conservation_and_fifo(
                capacity in 0usize..4,
                policy in policy(),
                subs in 1usize..4,
                broadcast in any::<bool>(),
                ops in proptest::collection::vec(any::<bool>(), 1..80),
            ) {
                let names: Vec<String> = (0..subs).map(|i| format!("s{i}")).collect();
                let refs: Vec<&str> = names.iter().map(String::as_str).collect();
                let modality = if broadcast { Modality::Broadcast } else { Modality::Distributed };
                let mut b = buffer(modality, capacity, policy, &refs);
                let mut next = 0u64;
                let mut taken: Vec<Vec<u64>> = vec![Vec::new(); subs];
                for (step, publish) in ops.into_iter().enumerate() {
                    if publish {
                        let _ = b.publish(item(next), Timestamp(step as u64)).unwrap();
                        next += 1;
                    } else {
                        let idx = step % subs;
                        b.set_waiting(idx, true);
                        if let Some((_, it)) = b.take(idx) {
                            taken[idx].push(it.item_id.0);
                        }
                    }
                    for i in 0..subs {
                        prop_assert!(b.stats(i).conserved(), "{:?}", b.stats(i));
                    }
                }
                for t in &taken {
                    prop_assert!(t.windows(2).all(|w| w[0] < w[1]), "fifo violated: {t:?}");
                }
            }
        }
    }
}
