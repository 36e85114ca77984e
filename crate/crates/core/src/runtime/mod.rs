//! Execution of processing elements.
//!
//! A PE's per-item logic implements [`Behavior`]. The same behaviors run under
//! the deterministic single-threaded [`VirtualRuntime`] and the threaded
//! [`WallClockRuntime`]; [`step_pe`] drives one PE directly, which is how the
//! unit tests exercise behaviors.

mod threaded;
mod virtual_time;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use thiserror::Error;

use crate::channels::ShedRecord;
use crate::crowd::LabelRecord;
use crate::learning::QualityCheckpoint;
use crate::metrics::{EventKind, EventLog};
use crate::model::{
    ControlSignal, DataItem, ItemId, Lineage, Payload, PeId, PortId, SimDuration, Timestamp,
};
use crate::topology::{ProcessingElementSpec, Role};

pub use threaded::{StopHandle, WallClockOptions, WallClockRuntime};
pub use virtual_time::{RunOptions, RunSummary, VirtualRuntime};

#[derive(Debug, Error, Clone, PartialEq)]
#[error("behavior failure in `{pe}`: {message}")]
pub struct BehaviorError {
    pub pe: PeId,
    pub message: String,
}

impl BehaviorError {
    pub fn new(pe: &PeId, message: impl Into<String>) -> Self {
        BehaviorError {
            pe: pe.clone(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StepError {
    #[error("source `{0}` has no input ports")]
    SourceGivenData(PeId),
    #[error("consumer `{0}` attempted to emit data items")]
    ConsumerEmitted(PeId),
    #[error("no behavior registered under `{name}` (pe `{pe}`)")]
    UnknownBehavior { pe: PeId, name: String },
    #[error(transparent)]
    Behavior(#[from] BehaviorError),
    #[error("runtime setup: {0}")]
    Setup(String),
}

/// Run-wide item id allocator; ids are dense and start at 1.
#[derive(Clone, Debug, Default)]
pub struct IdGen(Arc<AtomicU64>);

impl IdGen {
    pub fn next(&self) -> ItemId {
        ItemId(self.0.fetch_add(1, Ordering::Relaxed) + 1)
    }

    pub fn issued(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }
}

/// Everything a step produced besides state changes.
#[derive(Debug, Default)]
pub struct StepOutput {
    pub items: Vec<DataItem>,
    pub controls: Vec<ControlSignal>,
    pub timers: Vec<(Timestamp, u64)>,
    /// Items created by edge adaptation (sources).
    pub ingested: Vec<DataItem>,
    /// Lineages the behavior dropped on purpose.
    pub filtered: Vec<Lineage>,
    /// Shedding done inside the behavior (e.g. expired crowd tasks).
    pub shed: Vec<ShedRecord>,
    pub errored: Vec<(Lineage, String)>,
    pub labels: Vec<(LabelRecord, Lineage)>,
    pub checkpoints: Vec<QualityCheckpoint>,
    /// Lineages of items a consumer finished with.
    pub consumed: Vec<Lineage>,
}

impl StepOutput {
    fn merge(&mut self, mut other: StepOutput) {
        self.items.append(&mut other.items);
        self.controls.append(&mut other.controls);
        self.timers.append(&mut other.timers);
        self.ingested.append(&mut other.ingested);
        self.filtered.append(&mut other.filtered);
        self.shed.append(&mut other.shed);
        self.errored.append(&mut other.errored);
        self.labels.append(&mut other.labels);
        self.checkpoints.append(&mut other.checkpoints);
        self.consumed.append(&mut other.consumed);
    }
}

/// Moves the bookkeeping parts of `out` (everything except items, controls
/// and timers) into the event log.
pub(crate) fn log_output(log: &mut EventLog, loc: &str, now: Timestamp, out: &mut StepOutput) {
    for it in out.ingested.drain(..) {
        log.record(EventKind::Ingested, it.item_id, loc, now, it.lineage);
    }
    for l in out.filtered.drain(..) {
        log.record_lineage(EventKind::Filtered, loc, now, l);
    }
    for (l, _) in out.errored.drain(..) {
        log.record_lineage(EventKind::Errored, loc, now, l);
    }
    for rec in out.shed.drain(..) {
        log.record_shed(rec);
    }
    for (label, lineage) in out.labels.drain(..) {
        log.record_label(label, loc, lineage);
    }
    log.checkpoints.append(&mut out.checkpoints);
    for l in out.consumed.drain(..) {
        log.record_lineage(EventKind::Emitted, loc, now, l);
    }
}

/// Handle a behavior uses to emit results during one callback.
pub struct StepContext<'a> {
    now: Timestamp,
    pe: &'a PeId,
    role: Role,
    ids: &'a IdGen,
    out: StepOutput,
    signal_seq: &'a mut u64,
}

impl<'a> StepContext<'a> {
    pub fn now(&self) -> Timestamp {
        self.now
    }

    pub fn pe(&self) -> &PeId {
        self.pe
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn error(&self, message: impl Into<String>) -> BehaviorError {
        BehaviorError::new(self.pe, message)
    }

    /// Edge adaptation: a fresh item whose lineage is itself.
    pub fn ingest(&mut self, payload: Payload) -> DataItem {
        let item = DataItem::from_source(self.ids.next(), payload, self.now);
        self.out.ingested.push(item.clone());
        item
    }

    /// A new item derived from `inputs`; lineage is the union of theirs.
    pub fn derive(&mut self, inputs: &[&DataItem], payload: Payload) -> DataItem {
        let ingest_ts = inputs
            .iter()
            .map(|i| i.ingest_ts)
            .min()
            .unwrap_or(self.now);
        let mut attributes = BTreeMap::new();
        for i in inputs {
            attributes.extend(i.attributes.iter().map(|(k, v)| (k.clone(), v.clone())));
        }
        DataItem {
            item_id: self.ids.next(),
            payload,
            ingest_ts,
            lineage: Lineage::union(inputs.iter().map(|i| &i.lineage)),
            attributes,
        }
    }

    pub fn emit(&mut self, item: DataItem) {
        self.out.items.push(item);
    }

    pub fn send_control(&mut self, mut signal: ControlSignal) {
        *self.signal_seq += 1;
        signal.signal_id = *self.signal_seq;
        self.out.controls.push(signal);
    }

    pub fn schedule(&mut self, at: Timestamp, token: u64) {
        self.out.timers.push((at.max(self.now), token));
    }

    pub fn filter(&mut self, item: &DataItem) {
        self.out.filtered.push(item.lineage.clone());
    }

    pub fn filter_lineage(&mut self, lineage: Lineage) {
        self.out.filtered.push(lineage);
    }

    pub fn shed(&mut self, record: ShedRecord) {
        self.out.shed.push(record);
    }

    pub fn record_label(&mut self, label: LabelRecord, lineage: Lineage) {
        self.out.labels.push((label, lineage));
    }

    pub fn checkpoint(&mut self, cp: QualityCheckpoint) {
        self.out.checkpoints.push(cp);
    }

    fn finish(self) -> StepOutput {
        self.out
    }
}

/// Per-item processing logic of a PE.
///
/// Behaviors must be `Send` (they may move between threads) but are never
/// shared: each PE's callbacks run strictly one at a time.
pub trait Behavior: Send {
    fn start(&mut self, _ctx: &mut StepContext<'_>) -> Result<(), BehaviorError> {
        Ok(())
    }

    fn on_item(
        &mut self,
        ctx: &mut StepContext<'_>,
        port: &PortId,
        item: DataItem,
    ) -> Result<(), BehaviorError>;

    fn on_control(
        &mut self,
        _ctx: &mut StepContext<'_>,
        _signal: ControlSignal,
    ) -> Result<(), BehaviorError> {
        Ok(())
    }

    fn on_timer(&mut self, _ctx: &mut StepContext<'_>, _token: u64) -> Result<(), BehaviorError> {
        Ok(())
    }

    /// Simulated processing cost of one item (virtual-time mode).
    fn service_time(&self, _item: &DataItem) -> SimDuration {
        SimDuration::ZERO
    }

    /// Number of items' worth of state currently held.
    fn state_size(&self) -> usize {
        0
    }

    /// Lineages of items held in internal state, reported at shutdown.
    fn in_flight(&self) -> Vec<Lineage> {
        Vec::new()
    }

    /// Sources report when their input is exhausted (wall-clock shutdown).
    fn exhausted(&self) -> bool {
        true
    }
}

pub type BehaviorFactory =
    Box<dyn Fn(&ProcessingElementSpec) -> Result<Box<dyn Behavior>, BehaviorError> + Send + Sync>;

/// Behavior constructors keyed by the name used in topology configs.
#[derive(Default)]
pub struct BehaviorRegistry {
    factories: BTreeMap<String, BehaviorFactory>,
}

impl BehaviorRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register<F>(&mut self, name: &str, factory: F)
    where
        F: Fn(&ProcessingElementSpec) -> Result<Box<dyn Behavior>, BehaviorError>
            + Send
            + Sync
            + 'static,
    {
        self.factories.insert(name.to_owned(), Box::new(factory));
    }

    pub fn build(&self, spec: &ProcessingElementSpec) -> Result<Box<dyn Behavior>, StepError> {
        let f = self
            .factories
            .get(&spec.behavior.name)
            .ok_or_else(|| StepError::UnknownBehavior {
                pe: spec.pe_id.clone(),
                name: spec.behavior.name.clone(),
            })?;
        Ok(f(spec)?)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(String::as_str)
    }
}

/// One input to [`step_pe`].
#[derive(Debug, Clone)]
pub enum Input {
    Data { port: PortId, item: DataItem },
    Control(ControlSignal),
}

/// A PE outside of any scheduler.
pub struct PeInstance {
    pub id: PeId,
    pub role: Role,
    pub behavior: Box<dyn Behavior>,
    ids: IdGen,
    signal_seq: u64,
    pub processed: u64,
    pub errored: u64,
}

impl PeInstance {
    pub fn new(id: impl Into<PeId>, role: Role, behavior: Box<dyn Behavior>) -> Self {
        Self::with_ids(id, role, behavior, IdGen::default())
    }

    pub fn with_ids(id: impl Into<PeId>, role: Role, behavior: Box<dyn Behavior>, ids: IdGen) -> Self {
        PeInstance {
            id: id.into(),
            role,
            behavior,
            ids,
            signal_seq: 0,
            processed: 0,
            errored: 0,
        }
    }

    fn context(&mut self, now: Timestamp) -> StepContext<'_> {
        StepContext {
            now,
            pe: &self.id,
            role: self.role,
            ids: &self.ids,
            out: StepOutput::default(),
            signal_seq: &mut self.signal_seq,
        }
    }

    pub fn start(&mut self, now: Timestamp) -> Result<StepOutput, StepError> {
        let mut behavior = std::mem::replace(&mut self.behavior, Box::new(Inert));
        let mut ctx = self.context(now);
        let r = behavior.start(&mut ctx);
        let out = ctx.finish();
        self.behavior = behavior;
        r?;
        Ok(out)
    }

    pub fn timer(&mut self, now: Timestamp, token: u64) -> Result<StepOutput, StepError> {
        let mut behavior = std::mem::replace(&mut self.behavior, Box::new(Inert));
        let mut ctx = self.context(now);
        let r = behavior.on_timer(&mut ctx, token);
        let out = ctx.finish();
        self.behavior = behavior;
        r?;
        self.check_consumer(out)
    }

    fn check_consumer(&self, mut out: StepOutput) -> Result<StepOutput, StepError> {
        if self.role == Role::Consumer && !out.items.is_empty() {
            for it in out.items.drain(..) {
                out.errored.push((it.lineage, "consumer emitted".to_owned()));
            }
            return Err(StepError::ConsumerEmitted(self.id.clone()));
        }
        Ok(out)
    }
}

struct Inert;

impl Behavior for Inert {
    fn on_item(&mut self, _: &mut StepContext<'_>, _: &PortId, _: DataItem) -> Result<(), BehaviorError> {
        Ok(())
    }
}

/// Runs one batch of inputs through a PE. Control signals are applied in
/// order with data; a failing item is reported in `errored` and processing
/// continues with the rest of the batch.
pub fn step_pe(
    pe: &mut PeInstance,
    inputs: Vec<Input>,
    now: Timestamp,
) -> Result<StepOutput, StepError> {
    let mut total = StepOutput::default();
    for input in inputs {
        let mut behavior = std::mem::replace(&mut pe.behavior, Box::new(Inert));
        let role = pe.role;
        let mut ctx = pe.context(now);
        let res = match input {
            Input::Control(sig) => behavior.on_control(&mut ctx, sig).map_err(|e| (e, None)),
            Input::Data { port, item } => {
                if role == Role::Source {
                    drop(ctx);
                    pe.behavior = behavior;
                    return Err(StepError::SourceGivenData(pe.id.clone()));
                }
                let lineage = item.lineage.clone();
                let r = behavior.on_item(&mut ctx, &port, item);
                if r.is_ok() && role == Role::Consumer {
                    ctx.out.consumed.push(lineage.clone());
                }
                r.map_err(|e| (e, Some(lineage)))
            }
        };
        let mut out = ctx.finish();
        pe.behavior = behavior;
        match res {
            Ok(()) => pe.processed += 1,
            Err((e, lineage)) => {
                pe.errored += 1;
                if let Some(l) = lineage {
                    out.errored.push((l, e.message.clone()));
                }
            }
        }
        total.merge(out);
    }
    pe.check_consumer(total)
}

#[cfg(test)]
mod tests;
