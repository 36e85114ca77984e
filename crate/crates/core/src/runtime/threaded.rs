//! Threaded wall-clock execution: one thread per PE, channels as the only
//! synchronization points, events funneled to a single collector thread.

use std::collections::{BTreeMap, BinaryHeap, VecDeque};
use std::cmp::Reverse;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Sender};

use crate::channels::{
    ChannelBuffer, ControlChannel, FlowClass, Publish, PublishOutcome, SharedChannel, ShedRecord,
};
use crate::metrics::EventLog;
use crate::model::{ChannelId, DataItem, Lineage, PeId, PortId, Timestamp};
use crate::topology::{Role, Topology};

use super::{log_output, BehaviorRegistry, IdGen, Input, PeInstance, RunSummary, StepError, StepOutput};

#[derive(Clone, Debug)]
pub struct WallClockOptions {
    /// Wall seconds per run second; timers scheduled at run time `t` fire
    /// after `t * time_scale` of real time.
    pub time_scale: f64,
    pub max_duration: Option<Duration>,
    /// Consecutive idle observations (10 ms apart) that end the run.
    pub quiescent_checks: u32,
}

impl Default for WallClockOptions {
    fn default() -> Self {
        WallClockOptions {
            time_scale: 1.0,
            max_duration: None,
            quiescent_checks: 5,
        }
    }
}

enum Collected {
    Output(String, Timestamp, StepOutput),
    Shed(ShedRecord),
    Fault(String),
}

#[derive(Clone)]
struct Clock {
    start: Instant,
    scale: f64,
}

impl Clock {
    fn now(&self) -> Timestamp {
        Timestamp((self.start.elapsed().as_nanos() as f64 / self.scale) as u64)
    }

    fn wall_until(&self, t: Timestamp) -> Duration {
        let target = Duration::from_nanos((t.0 as f64 * self.scale) as u64);
        target.saturating_sub(self.start.elapsed())
    }
}

struct Worker {
    pe: PeInstance,
    inputs: Vec<(SharedChannel, usize, PortId)>,
    output: Option<SharedChannel>,
    config_in: Vec<Arc<Mutex<ControlChannel>>>,
    control_out: BTreeMap<PeId, Arc<Mutex<ControlChannel>>>,
    timers: BinaryHeap<Reverse<(Timestamp, u64, u64)>>,
    timer_seq: u64,
    blocked: VecDeque<DataItem>,
    in_service: Option<Lineage>,
    idle: Arc<AtomicBool>,
    stop: Arc<AtomicBool>,
    events: Sender<Collected>,
    clock: Clock,
    peak_state: usize,
    rr: usize,
}

struct Finished {
    pe: PeInstance,
    blocked: VecDeque<DataItem>,
    in_service: Option<Lineage>,
    peak_state: usize,
}

impl Worker {
    fn run(mut self) -> Finished {
        let now = self.clock.now();
        let r = self.pe.start(now);
        self.handle(now, r);
        while !self.stop.load(Ordering::Relaxed) {
            self.idle.store(false, Ordering::SeqCst);
            let mut progressed = self.flush_blocked();
            self.deliver_controls();
            progressed |= self.fire_timers();
            if self.blocked.is_empty() && self.pe.role != Role::Source {
                progressed |= self.serve_one();
            }
            self.peak_state = self.peak_state.max(self.pe.behavior.state_size());
            if !progressed {
                let quiet = self.blocked.is_empty()
                    && self.timers.is_empty()
                    && (self.pe.role != Role::Source || self.pe.behavior.exhausted());
                self.idle.store(quiet, Ordering::SeqCst);
                self.wait();
            }
        }
        Finished {
            pe: self.pe,
            blocked: self.blocked,
            in_service: self.in_service,
            peak_state: self.peak_state,
        }
    }

    fn wait(&mut self) {
        let cap = Duration::from_millis(2);
        let until_timer = self
            .timers
            .peek()
            .map(|Reverse((t, _, _))| self.clock.wall_until(*t))
            .unwrap_or(cap)
            .min(cap);
        match self.inputs.first() {
            Some((ch, idx, _)) if self.inputs.len() == 1 && self.blocked.is_empty() => {
                // Park on the single input; an arriving item is served next loop.
                if let Some((_, item)) = ch.take_timeout(*idx, until_timer) {
                    let port = self.inputs[0].2.clone();
                    self.process(port, item);
                }
            }
            _ => thread::sleep(until_timer),
        }
    }

    fn deliver_controls(&mut self) {
        let signals: Vec<_> = self
            .config_in
            .iter()
            .flat_map(|c| c.lock().expect("control lock").drain())
            .collect();
        for sig in signals {
            let now = self.clock.now();
            let r = super::step_pe(&mut self.pe, vec![Input::Control(sig)], now);
            self.handle(now, r);
        }
    }

    fn fire_timers(&mut self) -> bool {
        let mut fired = false;
        while self.blocked.is_empty() {
            let now = self.clock.now();
            match self.timers.peek() {
                Some(Reverse((t, _, _))) if *t <= now => {}
                _ => break,
            }
            let Reverse((_, _, token)) = self.timers.pop().expect("peeked");
            let r = self.pe.timer(now, token);
            self.handle(now, r);
            fired = true;
        }
        fired
    }

    fn serve_one(&mut self) -> bool {
        let n = self.inputs.len();
        for k in 0..n {
            let i = (self.rr + k) % n;
            let (ch, idx, port) = &self.inputs[i];
            if let Some((_, item)) = ch.try_take(*idx) {
                let port = port.clone();
                self.rr = (i + 1) % n;
                self.process(port, item);
                return true;
            }
        }
        false
    }

    fn process(&mut self, port: PortId, item: DataItem) {
        self.idle.store(false, Ordering::SeqCst);
        self.deliver_controls();
        let lineage = item.lineage.clone();
        self.in_service = Some(lineage.clone());
        let now = self.clock.now();
        let r = super::step_pe(&mut self.pe, vec![Input::Data { port, item }], now);
        let r = r.map_err(|e| {
            let _ = self.events.send(Collected::Fault(format!("{}: {e}", self.pe.id)));
            e
        });
        match r {
            Ok(out) => self.handle(now, Ok(out)),
            Err(e) => {
                let mut out = StepOutput::default();
                out.errored.push((lineage, e.to_string()));
                self.handle(now, Ok(out));
            }
        }
        self.in_service = None;
    }

    fn handle(&mut self, now: Timestamp, r: Result<StepOutput, StepError>) {
        let mut out = match r {
            Ok(out) => out,
            Err(e) => {
                let _ = self.events.send(Collected::Fault(format!("{}: {e}", self.pe.id)));
                return;
            }
        };
        for sig in out.controls.drain(..) {
            match self.control_out.get(&sig.target_pe) {
                Some(c) => {
                    if let Err(e) = c.lock().expect("control lock").send(sig) {
                        let _ = self.events.send(Collected::Fault(format!("{}: {e}", self.pe.id)));
                    }
                }
                None => {
                    let _ = self.events.send(Collected::Fault(format!(
                        "{}: no control flow to `{}`",
                        self.pe.id, sig.target_pe
                    )));
                }
            }
        }
        for (at, token) in out.timers.drain(..) {
            self.timer_seq += 1;
            self.timers.push(Reverse((at, self.timer_seq, token)));
        }
        let items = std::mem::take(&mut out.items);
        let _ = self.events.send(Collected::Output(self.pe.id.to_string(), now, out));
        for item in items {
            if self.blocked.is_empty() {
                self.publish(item);
            } else {
                self.blocked.push_back(item);
            }
        }
    }

    fn publish(&mut self, item: DataItem) {
        let Some(ch) = &self.output else {
            let mut out = StepOutput::default();
            out.errored.push((item.lineage, "emitted without an output channel".into()));
            let _ = self.events.send(Collected::Output(self.pe.id.to_string(), self.clock.now(), out));
            return;
        };
        let clock = self.clock.clone();
        match ch.publish(item, || clock.now(), Duration::from_millis(20)) {
            Ok(Publish::Blocked(back)) => self.blocked.push_back(back),
            Ok(Publish::Done(ds)) => {
                for d in ds {
                    if let PublishOutcome::Shed(rec) = d.outcome {
                        let _ = self.events.send(Collected::Shed(rec));
                    }
                }
            }
            Err(e) => {
                let _ = self.events.send(Collected::Fault(format!("{}: {e}", self.pe.id)));
            }
        }
    }

    fn flush_blocked(&mut self) -> bool {
        let mut moved = false;
        let pending = self.blocked.len();
        for _ in 0..pending {
            let Some(item) = self.blocked.pop_front() else { break };
            let before = self.blocked.len();
            self.publish(item);
            if self.blocked.len() > before {
                // Still blocked: restore order and retry later.
                let back = self.blocked.pop_back().expect("just pushed");
                self.blocked.push_front(back);
                break;
            }
            moved = true;
        }
        moved
    }
}

/// Handle for stopping a running [`WallClockRuntime`] from another thread.
#[derive(Clone, Debug, Default)]
pub struct StopHandle(Arc<AtomicBool>);

impl StopHandle {
    pub fn stop(&self) {
        self.0.store(true, Ordering::SeqCst);
    }

    pub fn is_stopped(&self) -> bool {
        self.0.load(Ordering::SeqCst)
    }
}

pub struct WallClockRuntime {
    workers: Vec<Worker>,
    data: Vec<SharedChannel>,
    control: Vec<Arc<Mutex<ControlChannel>>>,
    idle: Vec<Arc<AtomicBool>>,
    stop: StopHandle,
    rx: crossbeam_channel::Receiver<Collected>,
    opts: WallClockOptions,
}

impl WallClockRuntime {
    pub fn new(
        topo: &Topology,
        registry: &BehaviorRegistry,
        opts: WallClockOptions,
    ) -> Result<Self, StepError> {
        let ids = IdGen::default();
        let clock = Clock {
            start: Instant::now(),
            scale: opts.time_scale.max(1e-9),
        };
        let stop = StopHandle::default();
        let (tx, rx) = unbounded();
        let mut data = Vec::new();
        let mut data_index: BTreeMap<ChannelId, usize> = BTreeMap::new();
        let mut control = Vec::new();
        let mut control_index: BTreeMap<ChannelId, usize> = BTreeMap::new();
        for (cid, spec) in &topo.channels {
            match spec.flow_class {
                FlowClass::Data => {
                    let subs = topo.subscribers(cid);
                    if subs.is_empty() {
                        continue;
                    }
                    let buf = ChannelBuffer::new(spec.clone(), subs)
                        .map_err(|e| StepError::Setup(e.to_string()))?;
                    data_index.insert(cid.clone(), data.len());
                    data.push(SharedChannel::new(buf));
                }
                FlowClass::Control => {
                    let Some(flow) = topo.control_flows.iter().find(|f| &f.channel == cid) else {
                        continue;
                    };
                    let ch = ControlChannel::new(spec.clone(), flow.to.clone())
                        .map_err(|e| StepError::Setup(e.to_string()))?;
                    control_index.insert(cid.clone(), control.len());
                    control.push(Arc::new(Mutex::new(ch)));
                }
            }
        }
        let mut workers = Vec::new();
        let mut idle = Vec::new();
        for (pid, spec) in &topo.pes {
            let role = topo
                .role(pid)
                .ok_or_else(|| StepError::Setup(format!("no role for `{pid}`")))?;
            let behavior = registry.build(spec)?;
            let inputs = topo
                .input_channels(pid)
                .into_iter()
                .filter_map(|(cid, port)| {
                    let ci = *data_index.get(&cid)?;
                    let sub = data[ci].with(|b| b.subscriber_index(pid))?;
                    Some((data[ci].clone(), sub, port))
                })
                .collect();
            let output = topo
                .output_channel(pid)
                .and_then(|c| data_index.get(c))
                .map(|&i| data[i].clone());
            let config_in = topo
                .control_flows
                .iter()
                .filter(|f| &f.to == pid)
                .filter_map(|f| control_index.get(&f.channel).map(|&i| control[i].clone()))
                .collect();
            let control_out = topo
                .control_flows
                .iter()
                .filter(|f| &f.from == pid)
                .filter_map(|f| {
                    control_index
                        .get(&f.channel)
                        .map(|&i| (f.to.clone(), control[i].clone()))
                })
                .collect();
            let flag = Arc::new(AtomicBool::new(false));
            idle.push(flag.clone());
            workers.push(Worker {
                pe: PeInstance::with_ids(pid.clone(), role, behavior, ids.clone()),
                inputs,
                output,
                config_in,
                control_out,
                timers: BinaryHeap::new(),
                timer_seq: 0,
                blocked: VecDeque::new(),
                in_service: None,
                idle: flag,
                stop: stop.0.clone(),
                events: tx.clone(),
                clock: clock.clone(),
                peak_state: 0,
                rr: 0,
            });
        }
        Ok(WallClockRuntime {
            workers,
            data,
            control,
            idle,
            stop,
            rx,
            opts,
        })
    }

    pub fn stop_handle(&self) -> StopHandle {
        self.stop.clone()
    }

    fn quiescent(&self) -> bool {
        self.idle.iter().all(|f| f.load(Ordering::SeqCst))
            && self
                .data
                .iter()
                .all(|c| c.with(|b| b.queued_items().next().is_none()))
            && self
                .control
                .iter()
                .all(|c| c.lock().expect("control lock").pending_kinds().is_empty())
    }

    /// Runs until the topology goes quiet, the stop handle fires, or
    /// `max_duration` elapses.
    pub fn run(self) -> RunSummary {
        let started = Instant::now();
        let WallClockRuntime {
            workers,
            data,
            control,
            idle,
            stop,
            rx,
            opts,
        } = self;
        let collector = thread::spawn(move || {
            let mut log = EventLog::default();
            let mut faults = Vec::new();
            for ev in rx {
                match ev {
                    Collected::Output(loc, now, mut out) => log_output(&mut log, &loc, now, &mut out),
                    Collected::Shed(rec) => log.record_shed(rec),
                    Collected::Fault(f) => faults.push(f),
                }
            }
            (log, faults)
        });
        let handles: Vec<_> = workers
            .into_iter()
            .map(|w| {
                let name = format!("pe-{}", w.pe.id);
                thread::Builder::new()
                    .name(name)
                    .spawn(move || w.run())
                    .expect("spawn pe thread")
            })
            .collect();
        let probe = WallClockRuntime {
            workers: Vec::new(),
            data: data.clone(),
            control: control.clone(),
            idle,
            stop: stop.clone(),
            rx: unbounded().1,
            opts: opts.clone(),
        };
        let mut quiet = 0;
        let mut truncated = false;
        while !stop.is_stopped() {
            thread::sleep(Duration::from_millis(10));
            if opts.max_duration.is_some_and(|d| started.elapsed() >= d) {
                truncated = true;
                break;
            }
            if probe.quiescent() {
                quiet += 1;
                if quiet >= opts.quiescent_checks {
                    break;
                }
            } else {
                quiet = 0;
            }
        }
        stop.stop();
        let finished: Vec<Finished> = handles
            .into_iter()
            .map(|h| h.join().expect("pe thread panicked"))
            .collect();
        drop(probe);
        let mut in_flight = Vec::new();
        for c in &data {
            c.with(|b| {
                in_flight.extend(b.queued_items().map(|i| i.lineage.clone()));
                b.close();
            });
        }
        let mut peak_state = BTreeMap::new();
        for f in &finished {
            in_flight.extend(f.blocked.iter().map(|i| i.lineage.clone()));
            in_flight.extend(f.in_service.clone());
            in_flight.extend(f.pe.behavior.in_flight());
            peak_state.insert(f.pe.id.clone(), f.peak_state);
        }
        let channel_stats = data
            .iter()
            .flat_map(|c| {
                c.with(|b| {
                    b.all_stats()
                        .map(|(pe, st)| (b.id().clone(), pe.clone(), st.clone()))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        drop(finished);
        let (log, faults) = collector.join().expect("collector panicked");
        let end_time = Timestamp(started.elapsed().as_nanos() as u64);
        RunSummary {
            log,
            end_time,
            in_flight,
            channel_stats,
            peak_state,
            faults,
            events: 0,
            truncated,
        }
    }
}
