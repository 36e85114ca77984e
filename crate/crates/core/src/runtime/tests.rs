use super::*;
use crate::channels::{Modality, ShedPolicy};
use crate::metrics::flow_accounting;
use crate::model::{ControlBody, SignalKind};
use crate::topology::{build_topology, ChannelConfig, PeConfig, PeKind, TopologyConfig};
use std::collections::VecDeque;
use std::sync::Mutex;

struct Identity;

impl Behavior for Identity {
    fn on_item(&mut self, ctx: &mut StepContext<'_>, _: &PortId, item: DataItem) -> Result<(), BehaviorError> {
        let out = ctx.derive(&[&item], item.payload.clone());
        ctx.emit(out);
        Ok(())
    }
}

/// Drops items whose text is not an even number.
struct KeepEven;

impl Behavior for KeepEven {
    fn on_item(&mut self, ctx: &mut StepContext<'_>, _: &PortId, item: DataItem) -> Result<(), BehaviorError> {
        let even = item.text().and_then(|t| t.parse::<u64>().ok()).is_some_and(|n| n % 2 == 0);
        if even {
            let out = ctx.derive(&[&item], item.payload.clone());
            ctx.emit(out);
        } else {
            ctx.filter(&item);
        }
        Ok(())
    }
}

/// Emits one item per two inputs.
#[derive(Default)]
struct Pair {
    held: Option<DataItem>,
}

impl Behavior for Pair {
    fn on_item(&mut self, ctx: &mut StepContext<'_>, _: &PortId, item: DataItem) -> Result<(), BehaviorError> {
        match self.held.take() {
            None => self.held = Some(item),
            Some(a) => {
                let c = ctx.derive(&[&a, &item], Payload::Text("pair".into()));
                ctx.emit(c);
            }
        }
        Ok(())
    }

    fn state_size(&self) -> usize {
        self.held.is_some() as usize
    }

    fn in_flight(&self) -> Vec<Lineage> {
        self.held.iter().map(|i| i.lineage.clone()).collect()
    }
}

struct Failing;

impl Behavior for Failing {
    fn on_item(&mut self, ctx: &mut StepContext<'_>, _: &PortId, item: DataItem) -> Result<(), BehaviorError> {
        if item.text() == Some("bad") {
            return Err(ctx.error("cannot handle"));
        }
        let out = ctx.derive(&[&item], item.payload.clone());
        ctx.emit(out);
        Ok(())
    }
}

/// A consumer that breaks the contract.
struct Chatty;

impl Behavior for Chatty {
    fn on_item(&mut self, ctx: &mut StepContext<'_>, _: &PortId, item: DataItem) -> Result<(), BehaviorError> {
        ctx.emit(item);
        Ok(())
    }
}

#[derive(Default)]
struct Sink {
    seen: Arc<Mutex<Vec<String>>>,
}

impl Behavior for Sink {
    fn on_item(&mut self, _: &mut StepContext<'_>, _: &PortId, item: DataItem) -> Result<(), BehaviorError> {
        self.seen.lock().unwrap().push(format!("{}:{}", item.item_id, item.text().unwrap_or("")));
        Ok(())
    }
}

/// Emits `n` items `gap_ms` apart.
struct Counter {
    n: u64,
    gap_ms: f64,
}

impl Behavior for Counter {
    fn start(&mut self, ctx: &mut StepContext<'_>) -> Result<(), BehaviorError> {
        if self.n > 0 {
            ctx.schedule(ctx.now(), 0);
        }
        Ok(())
    }

    fn on_item(&mut self, ctx: &mut StepContext<'_>, _: &PortId, _: DataItem) -> Result<(), BehaviorError> {
        Err(ctx.error("sources take no input"))
    }

    fn on_timer(&mut self, ctx: &mut StepContext<'_>, k: u64) -> Result<(), BehaviorError> {
        let it = ctx.ingest(Payload::Text(k.to_string()));
        ctx.emit(it);
        if k + 1 < self.n {
            ctx.schedule(Timestamp::from_millis((k + 1) as f64 * self.gap_ms), k + 1);
        }
        Ok(())
    }
}

/// Processor with a fixed service time per item.
struct Slow {
    ms: f64,
}

impl Behavior for Slow {
    fn on_item(&mut self, ctx: &mut StepContext<'_>, _: &PortId, item: DataItem) -> Result<(), BehaviorError> {
        let out = ctx.derive(&[&item], item.payload.clone());
        ctx.emit(out);
        Ok(())
    }

    fn service_time(&self, _: &DataItem) -> SimDuration {
        SimDuration::from_millis(self.ms)
    }
}

/// Sliding window of the last `cap` items; emits each arrival.
struct Window {
    cap: usize,
    items: VecDeque<DataItem>,
}

impl Behavior for Window {
    fn on_item(&mut self, ctx: &mut StepContext<'_>, _: &PortId, item: DataItem) -> Result<(), BehaviorError> {
        let out = ctx.derive(&[&item], item.payload.clone());
        ctx.emit(out);
        self.items.push_back(item);
        if self.items.len() > self.cap {
            self.items.pop_front();
        }
        Ok(())
    }

    fn state_size(&self) -> usize {
        self.items.len()
    }
}

/// Forwards items and tells `target` the running count every `every` items.
struct Announcer {
    target: PeId,
    every: u64,
    seen: u64,
}

impl Behavior for Announcer {
    fn on_item(&mut self, ctx: &mut StepContext<'_>, _: &PortId, item: DataItem) -> Result<(), BehaviorError> {
        self.seen += 1;
        let out = ctx.derive(&[&item], item.payload.clone());
        ctx.emit(out);
        if self.seen % self.every == 0 {
            ctx.send_control(ControlSignal {
                signal_id: 0,
                target_pe: self.target.clone(),
                kind: SignalKind::ParameterUpdate,
                body: ControlBody::Params([("count".to_owned(), self.seen.to_string())].into()),
            });
        }
        Ok(())
    }
}

/// Consumer that records the latest parameter it was sent.
struct Tuned {
    latest: Arc<Mutex<Vec<String>>>,
}

impl Behavior for Tuned {
    fn on_item(&mut self, _: &mut StepContext<'_>, _: &PortId, _: DataItem) -> Result<(), BehaviorError> {
        Ok(())
    }

    fn on_control(&mut self, _: &mut StepContext<'_>, signal: ControlSignal) -> Result<(), BehaviorError> {
        if let ControlBody::Params(p) = signal.body {
            self.latest.lock().unwrap().push(p["count"].clone());
        }
        Ok(())
    }
}

fn text_item(id: u64, text: &str) -> DataItem {
    DataItem::from_source(ItemId(id), Payload::Text(text.into()), Timestamp::ZERO)
}

fn data(item: DataItem) -> Input {
    Input::Data {
        port: PortId::new("in"),
        item,
    }
}

#[test]
fn identity_keeps_payload_and_lineage() {
    let mut pe = PeInstance::new("id", Role::Processor, Box::new(Identity));
    let out = step_pe(&mut pe, vec![data(text_item(5, "hello"))], Timestamp::ZERO).unwrap();
    assert_eq!(out.items.len(), 1);
    let x = &out.items[0];
    assert_eq!(x.payload, Payload::Text("hello".into()));
    assert_eq!(x.lineage.ids().collect::<Vec<_>>(), vec![ItemId(5)]);
    assert_ne!(x.item_id, ItemId(5));
}

#[test]
fn filtered_item_is_recorded() {
    let mut pe = PeInstance::new("f", Role::Processor, Box::new(KeepEven));
    let out = step_pe(&mut pe, vec![data(text_item(1, "3")), data(text_item(2, "4"))], Timestamp::ZERO).unwrap();
    assert_eq!(out.items.len(), 1);
    assert_eq!(out.filtered.len(), 1);
    assert!(out.filtered[0].contains(ItemId(1)));
}

#[test]
fn join_unions_lineage() {
    let mut pe = PeInstance::new("j", Role::Processor, Box::new(Pair::default()));
    let a = text_item(1, "a");
    let b = DataItem {
        lineage: Lineage::union([Lineage::single(ItemId(2)), Lineage::single(ItemId(3))].iter()),
        ..text_item(4, "b")
    };
    let out = step_pe(&mut pe, vec![data(a), data(b)], Timestamp::ZERO).unwrap();
    let ids: Vec<ItemId> = out.items[0].lineage.ids().collect();
    assert_eq!(ids, vec![ItemId(1), ItemId(2), ItemId(3)]);
}

#[test]
fn behavior_failure_counts_item_as_errored() {
    let mut pe = PeInstance::new("x", Role::Processor, Box::new(Failing));
    let out = step_pe(
        &mut pe,
        vec![data(text_item(1, "ok")), data(text_item(2, "bad")), data(text_item(3, "ok"))],
        Timestamp::ZERO,
    )
    .unwrap();
    assert_eq!(out.items.len(), 2);
    assert_eq!(out.errored.len(), 1);
    assert!(out.errored[0].0.contains(ItemId(2)));
    assert!(out.errored[0].1.contains("cannot handle"));
    assert_eq!((pe.processed, pe.errored), (2, 1));
}

#[test]
fn consumer_may_not_emit() {
    let mut pe = PeInstance::new("c", Role::Consumer, Box::new(Chatty));
    let err = step_pe(&mut pe, vec![data(text_item(1, "x"))], Timestamp::ZERO).unwrap_err();
    assert_eq!(err, StepError::ConsumerEmitted(PeId::new("c")));
}

#[test]
fn consumer_reports_consumption() {
    let mut pe = PeInstance::new("c", Role::Consumer, Box::new(Sink::default()));
    let out = step_pe(&mut pe, vec![data(text_item(1, "x"))], Timestamp::ZERO).unwrap();
    assert!(out.items.is_empty());
    assert_eq!(out.consumed.len(), 1);
}

#[test]
fn source_rejects_data() {
    let mut pe = PeInstance::new("s", Role::Source, Box::new(Counter { n: 1, gap_ms: 1.0 }));
    let err = step_pe(&mut pe, vec![data(text_item(1, "x"))], Timestamp::ZERO).unwrap_err();
    assert_eq!(err, StepError::SourceGivenData(PeId::new("s")));
}

#[test]
fn source_lineage_is_own_id() {
    let mut pe = PeInstance::new("s", Role::Source, Box::new(Counter { n: 3, gap_ms: 1.0 }));
    let start = pe.start(Timestamp::ZERO).unwrap();
    assert_eq!(start.timers, vec![(Timestamp::ZERO, 0)]);
    let out = pe.timer(Timestamp::ZERO, 0).unwrap();
    let it = &out.items[0];
    assert_eq!(it.lineage.ids().collect::<Vec<_>>(), vec![it.item_id]);
    assert_eq!(out.ingested.len(), 1);
}

#[test]
fn registry_reports_unknown_behavior() {
    let mut reg = BehaviorRegistry::new();
    reg.register("identity", |_| Ok(Box::new(Identity)));
    let topo = build_topology(&line(5, 1.0, 0.0, 8, ShedPolicy::DropNewest)).unwrap();
    let spec = topo.pe(&PeId::new("sink")).unwrap();
    assert!(matches!(reg.build(spec), Err(StepError::UnknownBehavior { .. })));
    assert_eq!(reg.names().collect::<Vec<_>>(), vec!["identity"]);
}

/// source → work → sink over two point-to-point channels.
fn line(n: u64, gap_ms: f64, service_ms: f64, cap: usize, policy: ShedPolicy) -> TopologyConfig {
    TopologyConfig::new("line")
        .pe(PeConfig::new("src", PeKind::Ape, "counter").output("out").param("n", n).param("gap_ms", gap_ms))
        .pe(PeConfig::new("work", PeKind::Ape, "slow")
            .inputs(&["in"])
            .output("out")
            .param("ms", service_ms))
        .pe(PeConfig::new("sink", PeKind::Ape, "sink").inputs(&["in"]))
        .channel(ChannelConfig::data("a", Modality::PointToPoint, cap).policy(policy))
        .channel(ChannelConfig::data("b", Modality::PointToPoint, cap).policy(policy))
        .data_flow("src.out", "work.in", "a")
        .data_flow("work.out", "sink.in", "b")
}

fn num(spec: &ProcessingElementSpec, key: &str) -> f64 {
    spec.behavior.params.get(key).and_then(|v| v.as_f64()).unwrap_or(0.0)
}

fn registry(seen: Arc<Mutex<Vec<String>>>) -> BehaviorRegistry {
    let mut reg = BehaviorRegistry::new();
    reg.register("counter", |s| {
        Ok(Box::new(Counter {
            n: num(s, "n") as u64,
            gap_ms: num(s, "gap_ms"),
        }))
    });
    reg.register("slow", |s| Ok(Box::new(Slow { ms: num(s, "ms") })));
    reg.register("pair", |_| Ok(Box::new(Pair::default())));
    reg.register("keep_even", |_| Ok(Box::new(KeepEven)));
    reg.register("window", |s| {
        Ok(Box::new(Window {
            cap: num(s, "cap") as usize,
            items: VecDeque::new(),
        }))
    });
    reg.register("sink", move |_| Ok(Box::new(Sink { seen: seen.clone() })));
    reg
}

fn run_virtual(cfg: &TopologyConfig) -> (RunSummary, Vec<String>) {
    let seen = Arc::new(Mutex::new(Vec::new()));
    let topo = build_topology(cfg).unwrap();
    let rt = VirtualRuntime::new(&topo, &registry(seen.clone())).unwrap();
    let summary = rt.run(&RunOptions::default());
    let seen = seen.lock().unwrap().clone();
    (summary, seen)
}

#[test]
fn virtual_run_delivers_everything_below_capacity() {
    let (s, seen) = run_virtual(&line(50, 10.0, 2.0, 4, ShedPolicy::DropNewest));
    assert_eq!(seen.len(), 50);
    assert!(s.faults.is_empty(), "{:?}", s.faults);
    let flow = flow_accounting(&s.log, &s.in_flight);
    assert!(flow.balanced());
    assert_eq!((flow.ingested, flow.attributed, flow.shed), (50, 50, 0));
    // Last item ingested at 490 ms, then 2 ms of service.
    assert_eq!(s.end_time, Timestamp::from_millis(492.0));
}

#[test]
fn overload_sheds_and_still_balances() {
    for policy in [ShedPolicy::DropNewest, ShedPolicy::DropOldest] {
        let (s, seen) = run_virtual(&line(200, 1.0, 5.0, 4, policy));
        let flow = flow_accounting(&s.log, &s.in_flight);
        assert!(flow.balanced(), "{policy:?} {flow:?}");
        assert!(flow.shed > 100, "{policy:?} shed {}", flow.shed);
        assert_eq!(flow.attributed as usize, seen.len());
    }
}

#[test]
fn blocking_channels_lose_nothing() {
    let (s, seen) = run_virtual(&line(100, 1.0, 5.0, 2, ShedPolicy::Block));
    let flow = flow_accounting(&s.log, &s.in_flight);
    assert!(flow.balanced(), "{flow:?}");
    assert_eq!(flow.shed, 0);
    assert_eq!(seen.len(), 100);
    // Back-pressure paces the pipeline at the slow stage.
    assert!(s.end_time >= Timestamp::from_millis(500.0));
}

#[test]
fn in_flight_counts_held_state() {
    let cfg = TopologyConfig::new("pairs")
        .pe(PeConfig::new("src", PeKind::Ape, "counter").output("out").param("n", 7).param("gap_ms", 1.0))
        .pe(PeConfig::new("pair", PeKind::Ape, "pair").inputs(&["in"]).output("out"))
        .pe(PeConfig::new("sink", PeKind::Ape, "sink").inputs(&["in"]))
        .channel(ChannelConfig::data("a", Modality::PointToPoint, 16))
        .channel(ChannelConfig::data("b", Modality::PointToPoint, 16))
        .data_flow("src.out", "pair.in", "a")
        .data_flow("pair.out", "sink.in", "b");
    let (s, seen) = run_virtual(&cfg);
    assert_eq!(seen.len(), 3);
    let flow = flow_accounting(&s.log, &s.in_flight);
    assert!(flow.balanced());
    assert_eq!((flow.attributed, flow.in_flight), (6, 1));
}

#[test]
fn filtered_items_balance() {
    let cfg = TopologyConfig::new("filter")
        .pe(PeConfig::new("src", PeKind::Ape, "counter").output("out").param("n", 20).param("gap_ms", 1.0))
        .pe(PeConfig::new("f", PeKind::Ape, "keep_even").inputs(&["in"]).output("out"))
        .pe(PeConfig::new("sink", PeKind::Ape, "sink").inputs(&["in"]))
        .channel(ChannelConfig::data("a", Modality::PointToPoint, 16))
        .channel(ChannelConfig::data("b", Modality::PointToPoint, 16))
        .data_flow("src.out", "f.in", "a")
        .data_flow("f.out", "sink.in", "b");
    let (s, seen) = run_virtual(&cfg);
    let flow = flow_accounting(&s.log, &s.in_flight);
    assert!(flow.balanced());
    assert_eq!((flow.attributed, flow.filtered), (10, 10));
    assert_eq!(seen.len(), 10);
}

#[test]
fn state_stays_bounded() {
    let cap = 10;
    let cfg = TopologyConfig::new("window")
        .pe(PeConfig::new("src", PeKind::Ape, "counter").output("out").param("n", 100 * cap).param("gap_ms", 1.0))
        .pe(PeConfig::new("w", PeKind::Ape, "window").inputs(&["in"]).output("out").param("cap", cap))
        .pe(PeConfig::new("sink", PeKind::Ape, "sink").inputs(&["in"]))
        .channel(ChannelConfig::data("a", Modality::PointToPoint, 16))
        .channel(ChannelConfig::data("b", Modality::PointToPoint, 16))
        .data_flow("src.out", "w.in", "a")
        .data_flow("w.out", "sink.in", "b");
    let (s, seen) = run_virtual(&cfg);
    assert_eq!(seen.len() as u64, 100 * cap);
    assert_eq!(s.peak_state[&PeId::new("w")], cap as usize);
}

#[test]
fn virtual_runs_are_deterministic() {
    let cfg = line(300, 1.0, 3.0, 8, ShedPolicy::DropOldest);
    let render = |s: &RunSummary, seen: &[String]| {
        let events: Vec<String> = s
            .log
            .records
            .iter()
            .map(|e| format!("{:?}|{}|{}|{}|{:?}", e.kind, e.item_id, e.location, e.ts.0, e.lineage))
            .collect();
        format!("{}\n{}", events.join("\n"), seen.join(","))
    };
    let (a, seen_a) = run_virtual(&cfg);
    let (b, seen_b) = run_virtual(&cfg);
    assert_eq!(render(&a, &seen_a), render(&b, &seen_b));
}

#[test]
fn max_time_truncates_with_in_flight_accounted() {
    let seen = Arc::new(Mutex::new(Vec::new()));
    let topo = build_topology(&line(100, 10.0, 25.0, 64, ShedPolicy::Block)).unwrap();
    let rt = VirtualRuntime::new(&topo, &registry(seen)).unwrap();
    let s = rt.run(&RunOptions {
        max_time: Some(Timestamp::from_millis(300.0)),
        max_events: None,
    });
    assert!(s.truncated);
    let flow = flow_accounting(&s.log, &s.in_flight);
    assert!(flow.balanced(), "{flow:?}");
    assert!(flow.in_flight > 0);
}

fn control_topology() -> TopologyConfig {
    TopologyConfig::new("control")
        .pe(PeConfig::new("src", PeKind::Ape, "counter").output("out").param("n", 10).param("gap_ms", 1.0))
        .pe(PeConfig::new("ann", PeKind::Ape, "announcer").inputs(&["in"]).output("out"))
        .pe(PeConfig::new("tuned", PeKind::Ape, "tuned").inputs(&["in"]).config_ports(&["params"]))
        .channel(ChannelConfig::data("a", Modality::PointToPoint, 16))
        .channel(ChannelConfig::data("b", Modality::PointToPoint, 16))
        .channel(ChannelConfig::control("ctl"))
        .data_flow("src.out", "ann.in", "a")
        .data_flow("ann.out", "tuned.in", "b")
        .control_flow("ann", "tuned.params", "ctl")
}

fn control_registry(latest: Arc<Mutex<Vec<String>>>) -> BehaviorRegistry {
    let mut reg = registry(Arc::default());
    reg.register("announcer", |_| {
        Ok(Box::new(Announcer {
            target: PeId::new("tuned"),
            every: 3,
            seen: 0,
        }))
    });
    reg.register("tuned", move |_| Ok(Box::new(Tuned { latest: latest.clone() })));
    reg
}

#[test]
fn control_signals_reach_their_target() {
    let latest = Arc::new(Mutex::new(Vec::new()));
    let topo = build_topology(&control_topology()).unwrap();
    let s = VirtualRuntime::new(&topo, &control_registry(latest.clone()))
        .unwrap()
        .run(&RunOptions::default());
    assert!(s.faults.is_empty(), "{:?}", s.faults);
    let got = latest.lock().unwrap().clone();
    // Replace semantics may collapse signals, but the last one always lands.
    assert_eq!(got.last().map(String::as_str), Some("9"));
    assert!(got.windows(2).all(|w| w[0].parse::<u32>().unwrap() < w[1].parse::<u32>().unwrap()));
}

#[test]
fn wall_clock_run_balances() {
    let seen = Arc::new(Mutex::new(Vec::new()));
    let topo = build_topology(&line(40, 2.0, 1.0, 8, ShedPolicy::Block)).unwrap();
    let opts = WallClockOptions {
        time_scale: 0.5,
        max_duration: Some(std::time::Duration::from_secs(20)),
        quiescent_checks: 5,
    };
    let rt = WallClockRuntime::new(&topo, &registry(seen.clone()), opts).unwrap();
    let s = rt.run();
    let flow = flow_accounting(&s.log, &s.in_flight);
    assert!(flow.balanced(), "{flow:?}");
    assert_eq!(flow.ingested, 40);
    assert_eq!(seen.lock().unwrap().len(), 40);
}

#[test]
fn wall_clock_control_signals_arrive() {
    let latest = Arc::new(Mutex::new(Vec::new()));
    let topo = build_topology(&control_topology()).unwrap();
    let opts = WallClockOptions {
        time_scale: 1.0,
        max_duration: Some(std::time::Duration::from_secs(20)),
        quiescent_checks: 5,
    };
    let s = WallClockRuntime::new(&topo, &control_registry(latest.clone()), opts).unwrap().run();
    assert!(s.faults.is_empty(), "{:?}", s.faults);
    assert_eq!(latest.lock().unwrap().last().map(String::as_str), Some("9"));
}

#[test]
fn stop_handle_ends_an_endless_source() {
    let seen = Arc::new(Mutex::new(Vec::new()));
    let topo = build_topology(&line(u64::MAX, 1.0, 0.0, 8, ShedPolicy::DropNewest)).unwrap();
    let rt = WallClockRuntime::new(&topo, &registry(seen), WallClockOptions::default()).unwrap();
    let stop = rt.stop_handle();
    let t = std::thread::spawn(move || rt.run());
    std::thread::sleep(std::time::Duration::from_millis(200));
    stop.stop();
    let s = t.join().unwrap();
    assert!(stop.is_stopped());
    let flow = flow_accounting(&s.log, &s.in_flight);
    assert!(flow.ingested > 0);
    assert!(flow.balanced(), "{flow:?}");
}
