//! Deterministic discrete-event execution.
//!
//! Each PE is a single server: a data item is handed to the behavior when
//! service starts and its outputs are published when service completes,
//! `service_time` later. Events at equal times run in scheduling order, so a
//! run is a pure function of topology, behaviors and their seeds.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};

use crate::channels::{ChannelBuffer, ControlChannel, Publish, PublishOutcome, QueueStats};
use crate::metrics::{EventKind, EventLog};
use crate::model::{ChannelId, DataItem, Lineage, PeId, PortId, Timestamp};
use crate::topology::{Role, Topology};

use super::{BehaviorRegistry, IdGen, PeInstance, StepError, StepOutput};

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Events scheduled after this time are not executed.
    pub max_time: Option<Timestamp>,
    pub max_events: Option<u64>,
}

#[derive(Debug)]
pub struct RunSummary {
    pub log: EventLog,
    pub end_time: Timestamp,
    /// Lineages still queued, held or in service when the run stopped.
    pub in_flight: Vec<Lineage>,
    pub channel_stats: Vec<(ChannelId, PeId, QueueStats)>,
    pub peak_state: BTreeMap<PeId, usize>,
    /// Runtime-level faults (misrouted control signals, consumers emitting).
    pub faults: Vec<String>,
    pub events: u64,
    pub truncated: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Ev {
    Start(usize),
    Timer(usize, u64),
    Done(usize),
}

struct Slot {
    pe: PeInstance,
    /// (data channel index, subscriber index, receiving port)
    inputs: Vec<(usize, usize, PortId)>,
    output: Option<usize>,
    config_in: Vec<usize>,
    control_out: BTreeMap<PeId, usize>,
    busy: bool,
    in_service: Option<Lineage>,
    held: Option<StepOutput>,
    blocked: VecDeque<DataItem>,
    deferred_timers: Vec<u64>,
    peak_state: usize,
}

pub struct VirtualRuntime {
    slots: Vec<Slot>,
    index: BTreeMap<PeId, usize>,
    data: Vec<ChannelBuffer>,
    /// data channel index -> publishing slot
    publisher: Vec<Option<usize>>,
    control: Vec<ControlChannel>,
    heap: BinaryHeap<Reverse<(Timestamp, u64, Ev)>>,
    seq: u64,
    now: Timestamp,
    log: EventLog,
    faults: Vec<String>,
    events: u64,
}

impl VirtualRuntime {
    pub fn new(topo: &Topology, registry: &BehaviorRegistry) -> Result<Self, StepError> {
        let ids = IdGen::default();
        let mut data = Vec::new();
        let mut data_index: BTreeMap<ChannelId, usize> = BTreeMap::new();
        let mut control = Vec::new();
        let mut control_index: BTreeMap<ChannelId, usize> = BTreeMap::new();
        for (cid, spec) in &topo.channels {
            match spec.flow_class {
                crate::channels::FlowClass::Data => {
                    let subs = topo.subscribers(cid);
                    if subs.is_empty() {
                        continue;
                    }
                    let buf = ChannelBuffer::new(spec.clone(), subs)
                        .map_err(|e| StepError::Setup(e.to_string()))?;
                    data_index.insert(cid.clone(), data.len());
                    data.push(buf);
                }
                crate::channels::FlowClass::Control => {
                    let Some(flow) = topo.control_flows.iter().find(|f| &f.channel == cid) else {
                        continue;
                    };
                    let ch = ControlChannel::new(spec.clone(), flow.to.clone())
                        .map_err(|e| StepError::Setup(e.to_string()))?;
                    control_index.insert(cid.clone(), control.len());
                    control.push(ch);
                }
            }
        }

        let mut slots = Vec::new();
        let mut index = BTreeMap::new();
        for (pid, spec) in &topo.pes {
            let role = topo
                .role(pid)
                .ok_or_else(|| StepError::Setup(format!("no role for `{pid}`")))?;
            let behavior = registry.build(spec)?;
            let mut inputs = Vec::new();
            for (cid, port) in topo.input_channels(pid) {
                if let Some(&ci) = data_index.get(&cid) {
                    let sub = data[ci].subscriber_index(pid).expect("subscriber registered");
                    if !inputs.iter().any(|(c, s, _)| *c == ci && *s == sub) {
                        inputs.push((ci, sub, port));
                    }
                }
            }
            let output = topo
                .output_channel(pid)
                .and_then(|c| data_index.get(c).copied());
            let config_in = topo
                .control_flows
                .iter()
                .filter(|f| &f.to == pid)
                .filter_map(|f| control_index.get(&f.channel).copied())
                .collect();
            let control_out = topo
                .control_flows
                .iter()
                .filter(|f| &f.from == pid)
                .filter_map(|f| control_index.get(&f.channel).map(|&i| (f.to.clone(), i)))
                .collect();
            index.insert(pid.clone(), slots.len());
            slots.push(Slot {
                pe: PeInstance::with_ids(pid.clone(), role, behavior, ids.clone()),
                inputs,
                output,
                config_in,
                control_out,
                busy: false,
                in_service: None,
                held: None,
                blocked: VecDeque::new(),
                deferred_timers: Vec::new(),
                peak_state: 0,
            });
        }
        let mut publisher = vec![None; data.len()];
        for (si, s) in slots.iter().enumerate() {
            if let Some(ci) = s.output {
                publisher[ci] = Some(si);
            }
        }
        Ok(VirtualRuntime {
            slots,
            index,
            data,
            publisher,
            control,
            heap: BinaryHeap::new(),
            seq: 0,
            now: Timestamp::ZERO,
            log: EventLog::default(),
            faults: Vec::new(),
            events: 0,
        })
    }

    pub fn slot_index(&self, pe: &PeId) -> Option<usize> {
        self.index.get(pe).copied()
    }

    fn push(&mut self, at: Timestamp, ev: Ev) {
        self.seq += 1;
        self.heap.push(Reverse((at, self.seq, ev)));
    }

    pub fn run(mut self, opts: &RunOptions) -> RunSummary {
        for i in 0..self.slots.len() {
            self.push(Timestamp::ZERO, Ev::Start(i));
        }
        let mut truncated = false;
        while let Some(Reverse((at, _, ev))) = self.heap.pop() {
            if opts.max_time.is_some_and(|m| at > m)
                || opts.max_events.is_some_and(|m| self.events >= m)
            {
                truncated = true;
                self.heap.push(Reverse((at, 0, ev)));
                break;
            }
            self.now = at;
            self.events += 1;
            match ev {
                Ev::Start(p) => {
                    let r = self.slots[p].pe.start(self.now);
                    self.absorb(p, r);
                    self.try_start(p);
                }
                Ev::Timer(p, token) => {
                    if !self.slots[p].blocked.is_empty() {
                        self.slots[p].deferred_timers.push(token);
                        continue;
                    }
                    self.deliver_controls(p);
                    let r = self.slots[p].pe.timer(self.now, token);
                    self.absorb(p, r);
                }
                Ev::Done(p) => {
                    let slot = &mut self.slots[p];
                    slot.busy = false;
                    slot.in_service = None;
                    if let Some(out) = slot.held.take() {
                        self.apply(p, out);
                    }
                    self.try_start(p);
                }
            }
            self.note_state();
        }
        self.finish(truncated)
    }

    fn note_state(&mut self) {
        for s in &mut self.slots {
            s.peak_state = s.peak_state.max(s.pe.behavior.state_size());
        }
    }

    fn absorb(&mut self, p: usize, r: Result<StepOutput, StepError>) {
        match r {
            Ok(out) => self.apply(p, out),
            Err(e) => self.faults.push(format!("{} at {}: {e}", self.slots[p].pe.id, self.now)),
        }
    }

    fn deliver_controls(&mut self, p: usize) {
        let chans = self.slots[p].config_in.clone();
        for c in chans {
            for sig in self.control[c].drain() {
                let r = super::step_pe(&mut self.slots[p].pe, vec![super::Input::Control(sig)], self.now);
                self.absorb(p, r);
            }
        }
    }

    fn try_start(&mut self, p: usize) {
        let slot = &self.slots[p];
        if slot.busy || !slot.blocked.is_empty() || slot.pe.role == Role::Source {
            return;
        }
        let mut best: Option<(Timestamp, usize)> = None;
        for (k, (ci, sub, _)) in slot.inputs.iter().enumerate() {
            if let Some(t) = self.data[*ci].peek_arrival(*sub) {
                if best.is_none_or(|(bt, _)| t < bt) {
                    best = Some((t, k));
                }
            }
        }
        let Some((_, k)) = best else {
            for (ci, sub, _) in &slot.inputs {
                self.data[*ci].set_waiting(*sub, true);
            }
            return;
        };
        let (ci, sub, port) = slot.inputs[k].clone();
        let (_, item) = self.data[ci].take(sub).expect("peeked item present");
        for (c, s, _) in &self.slots[p].inputs {
            self.data[*c].set_waiting(*s, false);
        }
        self.deliver_controls(p);
        let service = self.slots[p].pe.behavior.service_time(&item);
        let lineage = item.lineage.clone();
        let r = super::step_pe(
            &mut self.slots[p].pe,
            vec![super::Input::Data { port, item }],
            self.now,
        );
        let out = match r {
            Ok(out) => out,
            Err(e) => {
                self.faults.push(format!("{} at {}: {e}", self.slots[p].pe.id, self.now));
                let mut out = StepOutput::default();
                out.errored.push((lineage.clone(), e.to_string()));
                out
            }
        };
        let slot = &mut self.slots[p];
        slot.busy = true;
        slot.in_service = Some(lineage);
        slot.held = Some(out);
        let done = self.now.plus(service);
        self.push(done, Ev::Done(p));
        // Room freed on `ci`: a blocked publisher may proceed.
        if let Some(q) = self.publisher[ci] {
            self.unblock(q);
        }
    }

    fn apply(&mut self, p: usize, out: StepOutput) {
        let now = self.now;
        let loc = self.slots[p].pe.id.as_str().to_owned();
        let mut out = out;
        super::log_output(&mut self.log, &loc, now, &mut out);
        for sig in out.controls {
            match self.slots[p].control_out.get(&sig.target_pe) {
                Some(&c) => {
                    if let Err(e) = self.control[c].send(sig) {
                        self.faults.push(format!("{loc}: {e}"));
                    }
                }
                None => self
                    .faults
                    .push(format!("{loc}: no control flow to `{}`", sig.target_pe)),
            }
        }
        for (at, token) in out.timers {
            self.push(at, Ev::Timer(p, token));
        }
        for item in out.items {
            self.publish(p, item);
        }
    }

    fn publish(&mut self, p: usize, item: DataItem) {
        let Some(ci) = self.slots[p].output else {
            let loc = self.slots[p].pe.id.as_str().to_owned();
            self.faults.push(format!("{loc}: emitted without an output channel"));
            self.log.record_lineage(EventKind::Errored, &loc, self.now, item.lineage);
            return;
        };
        if !self.slots[p].blocked.is_empty() {
            self.slots[p].blocked.push_back(item);
            return;
        }
        match self.data[ci].publish(item, self.now) {
            Ok(Publish::Blocked(it)) => self.slots[p].blocked.push_back(it),
            Ok(Publish::Done(deliveries)) => {
                for d in deliveries {
                    match d.outcome {
                        PublishOutcome::Shed(rec) => self.log.record_shed(rec),
                        PublishOutcome::Delivered | PublishOutcome::Queued => {
                            if let Some(&s) = self.index.get(&d.subscriber) {
                                self.try_start(s);
                            }
                        }
                    }
                }
            }
            Err(e) => {
                let loc = self.slots[p].pe.id.as_str().to_owned();
                self.faults.push(format!("{loc}: {e}"));
            }
        }
    }

    fn unblock(&mut self, q: usize) {
        let Some(ci) = self.slots[q].output else { return };
        while let Some(it) = self.slots[q].blocked.pop_front() {
            match self.data[ci].publish(it, self.now) {
                Ok(Publish::Blocked(back)) => {
                    self.slots[q].blocked.push_front(back);
                    return;
                }
                Ok(Publish::Done(deliveries)) => {
                    for d in deliveries {
                        match d.outcome {
                            PublishOutcome::Shed(rec) => self.log.record_shed(rec),
                            _ => {
                                if let Some(&s) = self.index.get(&d.subscriber) {
                                    if s != q {
                                        self.try_start(s);
                                    }
                                }
                            }
                        }
                    }
                }
                Err(e) => {
                    self.faults.push(format!("{}: {e}", self.slots[q].pe.id));
                    return;
                }
            }
        }
        let timers = std::mem::take(&mut self.slots[q].deferred_timers);
        for token in timers {
            self.push(self.now, Ev::Timer(q, token));
        }
        self.try_start(q);
    }

    fn finish(mut self, truncated: bool) -> RunSummary {
        let mut in_flight = Vec::new();
        for buf in &mut self.data {
            in_flight.extend(buf.queued_items().map(|i| i.lineage.clone()));
            buf.close();
        }
        let mut peak_state = BTreeMap::new();
        for s in &self.slots {
            in_flight.extend(s.blocked.iter().map(|i| i.lineage.clone()));
            if let Some(l) = &s.in_service {
                in_flight.push(l.clone());
            }
            in_flight.extend(s.pe.behavior.in_flight());
            peak_state.insert(s.pe.id.clone(), s.peak_state);
        }
        let channel_stats = self
            .data
            .iter()
            .flat_map(|b| {
                b.all_stats()
                    .map(|(pe, st)| (b.id().clone(), pe.clone(), st.clone()))
                    .collect::<Vec<_>>()
            })
            .collect();
        RunSummary {
            log: self.log,
            end_time: self.now,
            in_flight,
            channel_stats,
            peak_state,
            faults: self.faults,
            events: self.events,
            truncated,
        }
    }
}
