//! Behaviors and topology of the crisis-message classification pipeline:
//! collector → extractor → classifier → {output, tagger → annotator →
//! learner}, with the learner feeding models back to the classifier.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use crossbeam_channel::Receiver;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channels::{stable_hash, Modality, ShedPolicy};
use crate::crowd::{
    serve_request, Answer, CrowdBudget, CrowdConfig, CrowdEngine, CrowdRequest, SimulatedCrowd,
    Submission, WorkerModel,
};
use crate::learning::{
    features_of, features_of_text, select_for_labeling, text_of, tokenize, Classifier, Learner,
    LearnerConfig, NaiveBayes, SampleBuffer, SelectionMode,
};
use crate::model::{
    ControlBody, ControlSignal, DataItem, Lineage, Payload, PeId, PortId, SignalKind, SimDuration,
    Timestamp,
};
use crate::runtime::{Behavior, BehaviorError, BehaviorRegistry, StepContext};
use crate::topology::{ChannelConfig, PeConfig, PeKind, ProcessingElementSpec, TopologyConfig};

use super::dataset::DatasetRecord;

pub const ATTR_GOLD: &str = "gold";
pub const ATTR_RECORD: &str = "record_id";
pub const ATTR_PREDICTED: &str = "predicted";
pub const ATTR_CONFIDENCE: &str = "confidence";
pub const ATTR_MODEL: &str = "model_version";
pub const ATTR_BUFFER_SEQ: &str = "buffer_seq";
pub const ATTR_BUFFER_LATEST: &str = "buffer_latest";
pub const ATTR_BUFFER_CAP: &str = "buffer_capacity";
pub const ATTR_LABEL: &str = "label";
pub const ATTR_LABELS_USED: &str = "labels_used";
pub const UNCLASSIFIED: &str = "unclassified";

/// Live numbers exposed by the annotation service.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Board {
    pub labels_total: u64,
    pub tasks_open: u64,
    pub auc_latest: Option<f64>,
    pub model_version: u64,
    pub classified: u64,
    /// (run time, classified count) samples for the current output rate.
    #[serde(skip)]
    pub recent: Vec<(Timestamp, u64)>,
}

impl Board {
    fn note_output(&mut self, now: Timestamp) {
        self.classified += 1;
        self.recent.push((now, self.classified));
        let horizon = SimDuration::from_millis(5_000.0);
        let keep_from = self.recent.iter().position(|(t, _)| now.since(*t) <= horizon).unwrap_or(0);
        self.recent.drain(..keep_from);
    }

    /// Outputs per second over the last few seconds of run time.
    pub fn throughput_now(&self) -> f64 {
        match (self.recent.first(), self.recent.last()) {
            (Some(a), Some(b)) if b.0 > a.0 => (b.1 - a.1) as f64 / b.0.since(a.0).as_millis() / 1000.0,
            _ => 0.0,
        }
    }
}

pub type SharedBoard = Arc<Mutex<Board>>;

/// Crowd setup handed to every annotator.
#[derive(Clone, Debug)]
pub struct CrowdSetup {
    pub config: CrowdConfig,
    pub budget: CrowdBudget,
    pub workers: Vec<WorkerModel>,
    pub simulate: bool,
}

/// Environment shared by the pipeline behaviors of one run.
#[derive(Debug)]
pub struct AidrEnv {
    pub seed: u64,
    pub records: Arc<Vec<DatasetRecord>>,
    pub crowd: CrowdSetup,
    pub learner: LearnerConfig,
    pub board: SharedBoard,
    /// Remote label requests; taken by the first annotator built.
    pub requests: Mutex<Option<Receiver<CrowdRequest>>>,
    /// Every model version the learner produced.
    pub models: Mutex<Vec<Arc<NaiveBayes>>>,
}

impl AidrEnv {
    pub fn new(seed: u64, records: Vec<DatasetRecord>, crowd: CrowdSetup, learner: LearnerConfig) -> Self {
        AidrEnv {
            seed,
            records: Arc::new(records),
            crowd,
            learner,
            board: SharedBoard::default(),
            requests: Mutex::new(None),
            models: Mutex::new(Vec::new()),
        }
    }

    pub fn with_requests(self, rx: Receiver<CrowdRequest>) -> Self {
        *self.requests.lock().expect("request slot") = Some(rx);
        self
    }

    fn rng_for(&self, pe: &PeId) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed ^ stable_hash(pe.as_str().as_bytes()))
    }
}

fn param_f64(spec: &ProcessingElementSpec, key: &str, default: f64) -> Result<f64, BehaviorError> {
    match spec.behavior.params.get(key) {
        None => Ok(default),
        Some(v) => v
            .as_f64()
            .ok_or_else(|| BehaviorError::new(&spec.pe_id, format!("parameter `{key}` must be a number"))),
    }
}

fn param_usize(spec: &ProcessingElementSpec, key: &str, default: usize) -> Result<usize, BehaviorError> {
    match spec.behavior.params.get(key) {
        None => Ok(default),
        Some(v) => v
            .as_u64()
            .map(|x| x as usize)
            .ok_or_else(|| BehaviorError::new(&spec.pe_id, format!("parameter `{key}` must be a non-negative integer"))),
    }
}

fn param_str<'a>(spec: &'a ProcessingElementSpec, key: &str) -> Option<&'a str> {
    spec.behavior.params.get(key).and_then(|v| v.as_str())
}

/// Cost model `base + per_token * tokens`, in microseconds.
#[derive(Clone, Copy, Debug)]
struct Cost {
    base_us: f64,
    per_token_us: f64,
}

impl Cost {
    fn from_spec(spec: &ProcessingElementSpec) -> Result<Self, BehaviorError> {
        Ok(Cost {
            base_us: param_f64(spec, "base_us", 0.0)?,
            per_token_us: param_f64(spec, "per_token_us", 0.0)?,
        })
    }

    fn of(&self, tokens: usize) -> SimDuration {
        SimDuration(((self.base_us + self.per_token_us * tokens as f64) * 1e3).round() as u64)
    }
}

/// Emits dataset records at a fixed rate: record k at `k * 1e9 / rate` ns.
pub struct ReplaySource {
    records: Arc<Vec<DatasetRecord>>,
    rate: f64,
    limit: usize,
    next: usize,
}

impl ReplaySource {
    pub fn new(records: Arc<Vec<DatasetRecord>>, rate: f64, limit: Option<usize>) -> Self {
        let limit = limit.unwrap_or(records.len()).min(records.len());
        ReplaySource {
            records,
            rate,
            limit,
            next: 0,
        }
    }

    fn due(&self, k: usize) -> Timestamp {
        Timestamp((k as f64 * 1e9 / self.rate).round() as u64)
    }
}

impl Behavior for ReplaySource {
    fn start(&mut self, ctx: &mut StepContext<'_>) -> Result<(), BehaviorError> {
        if self.rate.is_nan() || self.rate <= 0.0 {
            return Err(ctx.error("replay rate must be positive"));
        }
        if self.limit > 0 {
            let at = self.due(0);
            ctx.schedule(at, 0);
        }
        Ok(())
    }

    fn on_item(&mut self, ctx: &mut StepContext<'_>, _: &PortId, _: DataItem) -> Result<(), BehaviorError> {
        Err(ctx.error("sources take no input"))
    }

    fn on_timer(&mut self, ctx: &mut StepContext<'_>, _token: u64) -> Result<(), BehaviorError> {
        let Some(rec) = self.records.get(self.next).filter(|_| self.next < self.limit) else {
            return Ok(());
        };
        let mut item = ctx.ingest(Payload::Text(rec.text.clone()));
        item = item.with_attr(ATTR_RECORD, rec.id.clone());
        if let Some(g) = &rec.gold_label {
            item = item.with_attr(ATTR_GOLD, g.clone());
        }
        ctx.emit(item);
        self.next += 1;
        if self.next < self.limit {
            let at = self.due(self.next);
            ctx.schedule(at, self.next as u64);
        }
        Ok(())
    }

    fn exhausted(&self) -> bool {
        self.next >= self.limit
    }
}

/// Text to unigram and bigram counts.
pub struct Extractor {
    cost: Cost,
}

impl Behavior for Extractor {
    fn on_item(&mut self, ctx: &mut StepContext<'_>, _: &PortId, item: DataItem) -> Result<(), BehaviorError> {
        let text = text_of(&item)
            .ok_or_else(|| ctx.error(format!("item {} has no text", item.item_id)))?
            .to_owned();
        let fv = features_of_text(item.item_id, &text);
        let payload = Payload::Value(serde_json::json!({
            "text": text,
            "features": fv.features,
        }));
        let out = ctx.derive(&[&item], payload);
        ctx.emit(out);
        Ok(())
    }

    fn service_time(&self, item: &DataItem) -> SimDuration {
        self.cost.of(text_of(item).map(|t| tokenize(t).len()).unwrap_or(0))
    }
}

/// Scores items with the latest model received over its control port.
/// Without a model, or for empty feature vectors, items pass through
/// marked unclassified.
pub struct ClassifierPe {
    cost: Cost,
    model: Option<Arc<dyn Classifier>>,
}

impl Behavior for ClassifierPe {
    fn on_item(&mut self, ctx: &mut StepContext<'_>, _: &PortId, item: DataItem) -> Result<(), BehaviorError> {
        let fv = features_of(&item).map_err(|e| ctx.error(e.to_string()))?;
        let mut out = ctx.derive(&[&item], item.payload.clone());
        match &self.model {
            Some(m) if !fv.is_empty() => {
                let p = m.predict(&fv).map_err(|e| ctx.error(e.to_string()))?;
                let class = m.classes()[p.class].clone();
                out = out
                    .with_attr(ATTR_PREDICTED, class)
                    .with_attr(ATTR_CONFIDENCE, format!("{:.9}", p.confidence))
                    .with_attr(ATTR_MODEL, m.version().to_string());
            }
            _ => {
                out = out.with_attr(ATTR_PREDICTED, UNCLASSIFIED).with_attr(ATTR_MODEL, "0");
            }
        }
        ctx.emit(out);
        Ok(())
    }

    fn on_control(&mut self, _ctx: &mut StepContext<'_>, signal: ControlSignal) -> Result<(), BehaviorError> {
        if let ControlBody::Model(m) = signal.body {
            if self.model.as_ref().is_none_or(|cur| m.version() > cur.version()) {
                self.model = Some(m);
            }
        }
        Ok(())
    }

    fn service_time(&self, item: &DataItem) -> SimDuration {
        let n = match &item.payload {
            Payload::Value(v) => v.get("features").and_then(|f| f.as_object()).map(|f| f.len()).unwrap_or(0),
            Payload::Text(t) => tokenize(t).len(),
        };
        self.cost.of(n)
    }
}

/// End of the automatic path.
pub struct OutputSink {
    board: SharedBoard,
}

impl Behavior for OutputSink {
    fn on_item(&mut self, ctx: &mut StepContext<'_>, _: &PortId, _item: DataItem) -> Result<(), BehaviorError> {
        self.board.lock().expect("board").note_output(ctx.now());
        Ok(())
    }
}

/// Buffers classified items and forwards one selected candidate for every
/// `select_every` arrivals.
pub struct Tagger {
    buffer: SampleBuffer,
    mode: SelectionMode,
    dedup: bool,
    select_every: u64,
    seen: u64,
    rng: ChaCha8Rng,
}

impl Behavior for Tagger {
    fn on_item(&mut self, ctx: &mut StepContext<'_>, _: &PortId, item: DataItem) -> Result<(), BehaviorError> {
        let fv = features_of(&item).map_err(|e| ctx.error(e.to_string()))?;
        if fv.is_empty() {
            ctx.filter(&item);
            return Ok(());
        }
        let confidence = item
            .attr(ATTR_CONFIDENCE)
            .and_then(|c| c.parse::<f64>().ok())
            .unwrap_or(0.0);
        let seq = self.buffer.inserted() + 1;
        let item = item.with_attr(ATTR_BUFFER_SEQ, seq.to_string());
        let (_, evicted) = self.buffer.insert(item, fv, confidence);
        if let Some(old) = evicted.filter(|b| !b.selected) {
            ctx.filter(&old.item);
        }
        self.seen += 1;
        if self.seen % self.select_every == 0 {
            if let Ok(picked) = select_for_labeling(&mut self.buffer, self.mode, self.dedup, 1, &mut self.rng) {
                for b in picked {
                    let out = ctx
                        .derive(&[&b.item], b.item.payload.clone())
                        .with_attr(ATTR_BUFFER_LATEST, self.buffer.inserted().to_string())
                        .with_attr(ATTR_BUFFER_CAP, self.buffer.capacity().to_string());
                    ctx.emit(out);
                }
            }
        }
        Ok(())
    }

    fn state_size(&self) -> usize {
        self.buffer.len()
    }

    fn in_flight(&self) -> Vec<Lineage> {
        self.buffer
            .items()
            .filter(|b| !b.selected)
            .map(|b| b.item.lineage.clone())
            .collect()
    }
}

const POLL_TOKEN: u64 = u64::MAX;

/// Crowd element: turns items into tasks, collects labels from simulated
/// workers and remote requests, and emits each item once its task closes.
pub struct Annotator {
    engine: CrowdEngine,
    sim: Option<SimulatedCrowd<ChaCha8Rng>>,
    requests: Option<Receiver<CrowdRequest>>,
    poll: SimDuration,
    lineages: BTreeMap<u64, Lineage>,
    board: SharedBoard,
}

impl Annotator {
    fn emit_resolved(&mut self, ctx: &mut StepContext<'_>, item: DataItem, answer: Answer, used: Option<u32>) {
        let label = match &answer {
            Answer::Option(i) => self.engine.config().template.options.get(*i).cloned().unwrap_or_default(),
            Answer::Text(t) => t.clone(),
        };
        let mut out = ctx.derive(&[&item], item.payload.clone()).with_attr(ATTR_LABEL, label);
        if let Some(used) = used {
            out = out.with_attr(ATTR_LABELS_USED, used.to_string());
        }
        ctx.emit(out);
    }

    fn handle_submission(&mut self, ctx: &mut StepContext<'_>, sub: Submission) {
        let lineage = self.lineages.get(&sub.record.task_id).cloned().unwrap_or_default();
        ctx.record_label(sub.record.clone(), lineage);
        if let Some((item, answer)) = sub.resolved {
            self.lineages.remove(&sub.record.task_id);
            self.emit_resolved(ctx, item, answer, Some(sub.outcome.labels_used));
        }
    }

    fn dispatch(&mut self, ctx: &mut StepContext<'_>) {
        if self.sim.is_none() {
            return;
        }
        let now = ctx.now();
        loop {
            let sim = self.sim.as_mut().expect("checked");
            let (timers, closed) = sim.dispatch(&mut self.engine, now);
            let progressed = !timers.is_empty() || !closed.is_empty();
            for (at, token) in timers {
                ctx.schedule(at, token);
            }
            for r in closed {
                match r {
                    Ok((item, answer)) => self.emit_resolved(ctx, item, answer, None),
                    Err(rec) => ctx.shed(rec),
                }
            }
            if !progressed {
                break;
            }
        }
    }

    fn publish_stats(&self) {
        let s = self.engine.stats();
        let mut b = self.board.lock().expect("board");
        b.labels_total = s.labels_total;
        b.tasks_open = s.tasks_open;
    }
}

impl Behavior for Annotator {
    fn start(&mut self, ctx: &mut StepContext<'_>) -> Result<(), BehaviorError> {
        if self.requests.is_some() {
            let at = ctx.now().plus(self.poll);
            ctx.schedule(at, POLL_TOKEN);
        }
        Ok(())
    }

    fn on_item(&mut self, ctx: &mut StepContext<'_>, _: &PortId, item: DataItem) -> Result<(), BehaviorError> {
        let now = ctx.now();
        let latest: Option<u64> = item.attr(ATTR_BUFFER_LATEST).and_then(|v| v.parse().ok());
        let cap: Option<u64> = item.attr(ATTR_BUFFER_CAP).and_then(|v| v.parse().ok());
        if let (Some(latest), Some(cap)) = (latest, cap) {
            // Tasks whose item has been evicted from the tagger's buffer.
            for rec in self.engine.expire_where(now, |_, it| {
                it.attr(ATTR_BUFFER_SEQ)
                    .and_then(|s| s.parse::<u64>().ok())
                    .is_some_and(|s| s + cap <= latest)
            }) {
                ctx.shed(rec);
            }
        }
        let options = &self.engine.config().template.options;
        let gold = item.attr(ATTR_GOLD).and_then(|g| options.iter().position(|o| o == g));
        let lineage = item.lineage.clone();
        let (task_id, shed) = self
            .engine
            .add_task(item, gold, 0.0, now)
            .map_err(|e| ctx.error(e.to_string()))?;
        self.lineages.insert(task_id, lineage);
        for rec in shed {
            ctx.shed(rec);
        }
        self.lineages.retain(|id, _| self.engine.task(*id).is_some_and(|(_, s)| s == crate::crowd::TaskStatus::Open));
        self.dispatch(ctx);
        self.publish_stats();
        Ok(())
    }

    fn on_timer(&mut self, ctx: &mut StepContext<'_>, token: u64) -> Result<(), BehaviorError> {
        let now = ctx.now();
        if token == POLL_TOKEN {
            let reqs: Vec<CrowdRequest> = self.requests.as_ref().map(|r| r.try_iter().collect()).unwrap_or_default();
            for req in reqs {
                if let Some(sub) = serve_request(&mut self.engine, req, now) {
                    self.handle_submission(ctx, sub);
                }
            }
            let at = now.plus(self.poll);
            ctx.schedule(at, POLL_TOKEN);
        } else if let Some(sim) = self.sim.as_mut() {
            match sim.complete(&mut self.engine, token, now) {
                Some(Ok(sub)) => self.handle_submission(ctx, sub),
                Some(Err(e)) => log::debug!("{}: simulated label rejected: {e}", ctx.pe()),
                None => {}
            }
        }
        self.dispatch(ctx);
        self.publish_stats();
        Ok(())
    }

    fn state_size(&self) -> usize {
        self.engine.open_count()
    }

    fn in_flight(&self) -> Vec<Lineage> {
        self.engine.open_lineages()
    }
}

/// Consumes decided labels, retrains on cadence and sends each new model
/// to the classifier.
pub struct LearnerPe {
    learner: Learner,
    target: PeId,
    env: Arc<AidrEnv>,
}

impl Behavior for LearnerPe {
    fn on_item(&mut self, ctx: &mut StepContext<'_>, _: &PortId, item: DataItem) -> Result<(), BehaviorError> {
        let label = item
            .attr(ATTR_LABEL)
            .ok_or_else(|| ctx.error(format!("item {} carries no label", item.item_id)))?
            .to_owned();
        let fv = features_of(&item).map_err(|e| ctx.error(e.to_string()))?;
        let model = self
            .learner
            .ingest_label(fv, &label, ctx.now())
            .map_err(|e| ctx.error(e.to_string()))?;
        if let Some(model) = model {
            let cp = self.learner.curve().last().cloned().expect("retrain adds a checkpoint");
            {
                let mut b = self.env.board.lock().expect("board");
                b.model_version = model.version;
                if cp.auc.is_some() {
                    b.auc_latest = cp.auc;
                }
            }
            ctx.checkpoint(cp);
            self.env.models.lock().expect("models").push(model.clone());
            ctx.send_control(ControlSignal {
                signal_id: 0,
                target_pe: self.target.clone(),
                kind: SignalKind::ModelUpdate,
                body: ControlBody::Model(model),
            });
        }
        Ok(())
    }

    fn state_size(&self) -> usize {
        self.learner.state_size()
    }
}

/// Registers `replay`, `extractor`, `classifier`, `sink`, `tagger`,
/// `annotator` and `learner`.
pub fn register_aidr(reg: &mut BehaviorRegistry, env: Arc<AidrEnv>) {
    let e = env.clone();
    reg.register("replay", move |spec| {
        let rate = param_f64(spec, "rate", 10.0)?;
        let limit = spec.behavior.params.get("limit").and_then(|v| v.as_u64()).map(|v| v as usize);
        Ok(Box::new(ReplaySource::new(e.records.clone(), rate, limit)))
    });
    reg.register("extractor", |spec| Ok(Box::new(Extractor { cost: Cost::from_spec(spec)? })));
    reg.register("classifier", |spec| {
        Ok(Box::new(ClassifierPe {
            cost: Cost::from_spec(spec)?,
            model: None,
        }))
    });
    let e = env.clone();
    reg.register("sink", move |_| Ok(Box::new(OutputSink { board: e.board.clone() })));
    let e = env.clone();
    reg.register("tagger", move |spec| {
        let mode = match param_str(spec, "mode") {
            Some(m) => serde_json::from_value(serde_json::Value::String(m.to_owned()))
                .map_err(|_| BehaviorError::new(&spec.pe_id, format!("unknown selection mode `{m}`")))?,
            None => e.learner.mode,
        };
        let dedup = spec
            .behavior
            .params
            .get("dedup")
            .and_then(|v| v.as_bool())
            .unwrap_or(e.learner.dedup);
        let select_every = param_usize(spec, "select_every", 5)?.max(1) as u64;
        Ok(Box::new(Tagger {
            buffer: SampleBuffer::new(
                param_usize(spec, "buffer", crate::learning::DEFAULT_BUFFER_CAPACITY)?,
                param_f64(spec, "jaccard", crate::learning::DEFAULT_JACCARD)?,
            ),
            mode,
            dedup,
            select_every,
            seen: 0,
            rng: e.rng_for(&spec.pe_id),
        }))
    });
    let e = env.clone();
    reg.register("annotator", move |spec| {
        let setup = &e.crowd;
        let engine = CrowdEngine::new(setup.config.clone(), setup.budget.clone(), setup.workers.clone())
            .map_err(|err| BehaviorError::new(&spec.pe_id, err.to_string()))?
            .with_location(spec.pe_id.as_str());
        let requests = e.requests.lock().expect("request slot").take();
        Ok(Box::new(Annotator {
            engine,
            sim: setup.simulate.then(|| SimulatedCrowd::new(e.rng_for(&spec.pe_id))),
            requests,
            poll: SimDuration::from_millis(param_f64(spec, "poll_ms", 20.0)?),
            lineages: BTreeMap::new(),
            board: e.board.clone(),
        }))
    });
    let e = env;
    reg.register("learner", move |spec| {
        let target = param_str(spec, "classifier").unwrap_or("classifier");
        Ok(Box::new(LearnerPe {
            learner: Learner::new(e.learner.clone()),
            target: target.into(),
            env: e.clone(),
        }))
    });
}

/// Knobs of the built-in pipeline topology.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AidrShape {
    pub rate: f64,
    pub limit: Option<usize>,
    pub queue_capacity: usize,
    pub extractor_base_us: f64,
    pub extractor_per_token_us: f64,
    pub classifier_base_us: f64,
    pub classifier_per_token_us: f64,
    pub buffer: usize,
    pub jaccard: f64,
    pub select_every: usize,
}

impl Default for AidrShape {
    fn default() -> Self {
        AidrShape {
            rate: 20.0,
            limit: None,
            queue_capacity: 4,
            extractor_base_us: 200.0,
            extractor_per_token_us: 20.0,
            classifier_base_us: 500.0,
            classifier_per_token_us: 100.0,
            buffer: crate::learning::DEFAULT_BUFFER_CAPACITY,
            jaccard: crate::learning::DEFAULT_JACCARD,
            select_every: 5,
        }
    }
}

pub fn aidr_topology(shape: &AidrShape) -> TopologyConfig {
    let mut collector = PeConfig::new("collector", PeKind::Ape, "replay")
        .output("out")
        .param("rate", shape.rate);
    if let Some(limit) = shape.limit {
        collector = collector.param("limit", limit as u64);
    }
    let q = shape.queue_capacity;
    TopologyConfig::new("aidr")
        .pe(collector)
        .pe(PeConfig::new("extractor", PeKind::Ape, "extractor")
            .inputs(&["in"])
            .output("out")
            .param("base_us", shape.extractor_base_us)
            .param("per_token_us", shape.extractor_per_token_us))
        .pe(PeConfig::new("classifier", PeKind::Ape, "classifier")
            .inputs(&["in"])
            .output("out")
            .config_ports(&["model"])
            .param("base_us", shape.classifier_base_us)
            .param("per_token_us", shape.classifier_per_token_us))
        .pe(PeConfig::new("output", PeKind::Ape, "sink").inputs(&["in"]))
        .pe(PeConfig::new("tagger", PeKind::Ape, "tagger")
            .inputs(&["in"])
            .output("out")
            .param("buffer", shape.buffer as u64)
            .param("jaccard", shape.jaccard)
            .param("select_every", shape.select_every as u64))
        .pe(PeConfig::new("annotator", PeKind::Cspe, "annotator").inputs(&["in"]).output("out"))
        .pe(PeConfig::new("learner", PeKind::Ape, "learner")
            .inputs(&["in"])
            .param("classifier", "classifier"))
        .channel(ChannelConfig::data("collected", Modality::PointToPoint, q).policy(ShedPolicy::DropNewest))
        .channel(ChannelConfig::data("extracted", Modality::PointToPoint, q).policy(ShedPolicy::DropNewest))
        .channel(ChannelConfig::data("classified", Modality::Broadcast, crate::channels::DEFAULT_CAPACITY))
        .channel(ChannelConfig::data("tagged", Modality::PointToPoint, crate::channels::DEFAULT_CAPACITY))
        .channel(ChannelConfig::data("labeled", Modality::PointToPoint, crate::channels::DEFAULT_CAPACITY))
        .channel(ChannelConfig::control("model_updates"))
        .data_flow("collector.out", "extractor.in", "collected")
        .data_flow("extractor.out", "classifier.in", "extracted")
        .data_flow("classifier.out", "output.in", "classified")
        .data_flow("classifier.out", "tagger.in", "classified")
        .data_flow("tagger.out", "annotator.in", "tagged")
        .data_flow("annotator.out", "learner.in", "labeled")
        .control_flow("learner", "classifier.model", "model_updates")
}
