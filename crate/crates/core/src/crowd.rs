//! Crowdsourced processing: task generation, assignment, simulated labels,
//! plurality aggregation with an adaptive redundancy loop, worker trust and
//! budget accounting.
//!
//! Everything here is transport-free. [`CrowdEngine`] owns the task pool and
//! budget; label providers (the in-process [`SimulatedCrowd`] or remote
//! workers reaching the engine through [`CrowdBridge`] messages) all feed the
//! same `submit` path.

use std::collections::{BTreeMap, BTreeSet};
use std::io;
use std::path::Path;
use std::time::Duration;

use crossbeam_channel::{bounded, Receiver, Sender};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channels::{ShedReason, ShedRecord};
use crate::model::{ChannelId, DataItem, ItemId, Lineage, Payload, SimDuration, Timestamp, WorkerId};

pub const DEFAULT_MAX_LABELS: u32 = 250;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Binary,
    NAry,
    DataEntry,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Binary => "binary",
            TaskKind::NAry => "n_ary",
            TaskKind::DataEntry => "data_entry",
        }
    }
}

/// How a task is rendered from an item. `{text}` in the question is replaced
/// by the item's text.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskTemplate {
    pub kind: TaskKind,
    pub question: String,
    #[serde(default)]
    pub options: Vec<String>,
    /// Skill key for skill-based assignment; defaults to the task kind.
    #[serde(default)]
    pub category: Option<String>,
}

impl TaskTemplate {
    pub fn informative() -> Self {
        TaskTemplate {
            kind: TaskKind::Binary,
            question: "Is this message informative with respect to the disaster? {text}".into(),
            options: vec!["informative".into(), "not informative".into()],
            category: None,
        }
    }

    pub fn validate(&self) -> Result<(), CrowdError> {
        let n = self.options.len();
        let ok = match self.kind {
            TaskKind::Binary => n == 2,
            TaskKind::NAry => n >= 2,
            TaskKind::DataEntry => n == 0,
        };
        if ok {
            Ok(())
        } else {
            Err(CrowdError::TemplateMismatch(format!(
                "{} task with {n} options",
                self.kind.as_str()
            )))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrowdTask {
    pub task_id: u64,
    pub item_id: ItemId,
    pub task_kind: TaskKind,
    pub question: String,
    pub options: Vec<String>,
    pub created_ts: Timestamp,
    pub required_labels: u32,
    pub assigned_worker: Option<WorkerId>,
    pub priority: f64,
    pub category: Option<String>,
}

impl CrowdTask {
    pub fn skill_key(&self) -> &str {
        self.category.as_deref().unwrap_or(self.task_kind.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Answer {
    Option(usize),
    Text(String),
}

impl std::fmt::Display for Answer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Answer::Option(i) => write!(f, "{i}"),
            Answer::Text(t) => f.write_str(t),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub task_id: u64,
    pub item_id: ItemId,
    pub worker_id: WorkerId,
    pub answer: Answer,
    pub submitted_ts: Timestamp,
    pub latency_ms: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    #[default]
    Standard,
    Expert,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkerModel {
    pub worker_id: WorkerId,
    pub accuracy: f64,
    pub speed_mean_ms: f64,
    #[serde(default)]
    pub speed_jitter_ms: f64,
    #[serde(default)]
    pub skills: BTreeMap<String, f64>,
    #[serde(default = "half")]
    pub trust: f64,
    #[serde(default)]
    pub agreements: u64,
    #[serde(default)]
    pub decided: u64,
    #[serde(default)]
    pub labels_given: u32,
    #[serde(default = "default_max_labels")]
    pub max_labels: u32,
    #[serde(default)]
    pub tier: Tier,
}

fn half() -> f64 {
    0.5
}

fn default_max_labels() -> u32 {
    DEFAULT_MAX_LABELS
}

impl WorkerModel {
    pub fn new(id: impl Into<WorkerId>, accuracy: f64, speed_mean_ms: f64) -> Self {
        WorkerModel {
            worker_id: id.into(),
            accuracy: accuracy.clamp(0.0, 1.0),
            speed_mean_ms,
            speed_jitter_ms: 0.0,
            skills: BTreeMap::new(),
            trust: 0.5,
            agreements: 0,
            decided: 0,
            labels_given: 0,
            max_labels: DEFAULT_MAX_LABELS,
            tier: Tier::Standard,
        }
    }

    pub fn with_jitter(mut self, jitter_ms: f64) -> Self {
        self.speed_jitter_ms = jitter_ms;
        self
    }

    pub fn with_skill(mut self, key: &str, p: f64) -> Self {
        self.skills.insert(key.to_owned(), p.clamp(0.0, 1.0));
        self
    }

    pub fn with_max_labels(mut self, max: u32) -> Self {
        self.max_labels = max;
        self
    }

    pub fn proficiency(&self, key: &str) -> f64 {
        self.skills.get(key).copied().unwrap_or(0.0)
    }

    pub fn has_capacity(&self) -> bool {
        self.labels_given < self.max_labels
    }
}

/// Worker pool file: `[[workers]]` tables with worker_id, accuracy,
/// speed_mean_ms and optional speed_jitter_ms, max_labels, skills, tier.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WorkerPoolConfig {
    #[serde(default)]
    pub workers: Vec<WorkerModel>,
    /// Route tasks that still disagree after `min_labels` to expert workers.
    #[serde(default)]
    pub escalate_to_experts: bool,
}

impl WorkerPoolConfig {
    pub fn uniform(n: usize, accuracy: f64, speed_mean_ms: f64, jitter_ms: f64) -> Self {
        WorkerPoolConfig {
            workers: (0..n)
                .map(|i| WorkerModel::new(format!("w{i:03}"), accuracy, speed_mean_ms).with_jitter(jitter_ms))
                .collect(),
            escalate_to_experts: false,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CrowdError> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| CrowdError::Config(e.to_string()))?;
        toml::from_str(&text).map_err(|e| CrowdError::Config(e.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetMode {
    FixedBudget,
    PerTaskCost,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrowdBudget {
    pub mode: BudgetMode,
    /// Max total labels under `fixed_budget`.
    pub k: Option<u64>,
    pub unit_cost: f64,
    /// Labels consumed.
    pub spent: u64,
}

impl CrowdBudget {
    pub fn fixed(k: u64) -> Self {
        CrowdBudget {
            mode: BudgetMode::FixedBudget,
            k: Some(k),
            unit_cost: 1.0,
            spent: 0,
        }
    }

    pub fn per_task(unit_cost: f64) -> Self {
        CrowdBudget {
            mode: BudgetMode::PerTaskCost,
            k: None,
            unit_cost,
            spent: 0,
        }
    }

    pub fn unit_cost(&self) -> f64 {
        self.unit_cost
    }

    pub fn cost(&self) -> f64 {
        self.spent as f64 * self.unit_cost
    }

    pub fn remaining(&self) -> Option<u64> {
        match self.mode {
            BudgetMode::FixedBudget => Some(self.k.unwrap_or(0).saturating_sub(self.spent)),
            BudgetMode::PerTaskCost => None,
        }
    }

    pub fn try_spend(&mut self) -> Result<(), CrowdError> {
        if self.remaining() == Some(0) {
            return Err(CrowdError::BudgetExhausted);
        }
        self.spent += 1;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregationConfig {
    pub min_labels: u32,
    pub agreement_q: f64,
    pub max_labels_r: u32,
    #[serde(default)]
    pub trust_weighted: bool,
}

impl Default for AggregationConfig {
    fn default() -> Self {
        AggregationConfig {
            min_labels: 3,
            agreement_q: 0.6,
            max_labels_r: 5,
            trust_weighted: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationStatus {
    Decided,
    NeedsMore,
    Exhausted,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AggregationOutcome {
    pub task_id: u64,
    pub decided_label: Option<Answer>,
    pub support: f64,
    pub labels_used: u32,
    pub status: AggregationStatus,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CrowdError {
    #[error("template mismatch: {0}")]
    TemplateMismatch(String),
    #[error("no eligible worker for task {0}")]
    NoEligibleWorker(u64),
    #[error("crowd budget exhausted")]
    BudgetExhausted,
    #[error("label for task {label_task} given to aggregation of task {task}")]
    ForeignLabel { task: u64, label_task: u64 },
    #[error("unknown task {0}")]
    UnknownTask(u64),
    #[error("worker `{worker}` already labeled task {task}")]
    DuplicateLabel { task: u64, worker: WorkerId },
    #[error("task {0} is already decided or expired")]
    TaskClosed(u64),
    #[error("no task available")]
    NoTaskAvailable,
    #[error("invalid answer: {0}")]
    InvalidAnswer(String),
    #[error("crowd config: {0}")]
    Config(String),
    #[error("crowd engine unavailable")]
    Disconnected,
}

/// Builds a task for `item`. The redundancy target starts at `min_labels`.
pub fn generate_task(
    task_id: u64,
    item: &DataItem,
    template: &TaskTemplate,
    agg: &AggregationConfig,
    now: Timestamp,
) -> Result<CrowdTask, CrowdError> {
    template.validate()?;
    let text = match &item.payload {
        Payload::Text(t) => t.clone(),
        Payload::Value(v) => v
            .get("text")
            .and_then(|t| t.as_str())
            .map(str::to_owned)
            .unwrap_or_else(|| v.to_string()),
    };
    Ok(CrowdTask {
        task_id,
        item_id: item.item_id,
        task_kind: template.kind,
        question: template.question.replace("{text}", &text),
        options: template.options.clone(),
        created_ts: now,
        required_labels: agg.min_labels.max(1),
        assigned_worker: None,
        priority: 0.0,
        category: template.category.clone(),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssignPolicy {
    #[default]
    Any,
    SkillBased,
}

/// Picks a worker for `task` among those with remaining capacity that have
/// not labeled it (`already`). A worker named by a skill directive
/// (`assigned_worker`) wins when eligible.
pub fn assign_task<R: Rng + ?Sized>(
    task: &CrowdTask,
    workers: &[&WorkerModel],
    already: &BTreeSet<WorkerId>,
    policy: AssignPolicy,
    rng: &mut R,
) -> Result<WorkerId, CrowdError> {
    let eligible: Vec<&WorkerModel> = workers
        .iter()
        .copied()
        .filter(|w| w.has_capacity() && !already.contains(&w.worker_id))
        .collect();
    if eligible.is_empty() {
        return Err(CrowdError::NoEligibleWorker(task.task_id));
    }
    if let Some(want) = &task.assigned_worker {
        if let Some(w) = eligible.iter().find(|w| &w.worker_id == want) {
            return Ok(w.worker_id.clone());
        }
    }
    match policy {
        AssignPolicy::Any => Ok(eligible
            .choose(rng)
            .expect("non-empty")
            .worker_id
            .clone()),
        AssignPolicy::SkillBased => {
            let key = task.skill_key();
            let best = eligible
                .iter()
                .max_by(|a, b| {
                    a.proficiency(key)
                        .total_cmp(&b.proficiency(key))
                        .then_with(|| b.worker_id.cmp(&a.worker_id))
                })
                .expect("non-empty");
            Ok(best.worker_id.clone())
        }
    }
}

fn draw_label<R: Rng + ?Sized>(
    task: &CrowdTask,
    worker: &WorkerModel,
    gold: usize,
    now: Timestamp,
    rng: &mut R,
) -> LabelRecord {
    let correct = rng.gen::<f64>() < worker.accuracy;
    let answer = match task.task_kind {
        TaskKind::DataEntry => {
            if correct {
                Answer::Text(gold.to_string())
            } else {
                Answer::Text(format!("{}?", gold))
            }
        }
        _ => {
            let n = task.options.len();
            if correct || n < 2 {
                Answer::Option(gold)
            } else {
                let k = rng.gen_range(0..n - 1);
                Answer::Option(if k >= gold { k + 1 } else { k })
            }
        }
    };
    let lo = (worker.speed_mean_ms - worker.speed_jitter_ms).max(0.0);
    let hi = (worker.speed_mean_ms + worker.speed_jitter_ms).max(lo);
    let latency_ms = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    LabelRecord {
        task_id: task.task_id,
        item_id: task.item_id,
        worker_id: worker.worker_id.clone(),
        answer,
        submitted_ts: now.plus(SimDuration::from_millis(latency_ms)),
        latency_ms,
    }
}

/// One simulated answer: gold with probability `accuracy`, otherwise a
/// uniformly chosen other option; latency uniform on mean ± jitter.
pub fn simulate_label<R: Rng + ?Sized>(
    task: &CrowdTask,
    worker: &mut WorkerModel,
    gold: usize,
    budget: &mut CrowdBudget,
    now: Timestamp,
    rng: &mut R,
) -> Result<LabelRecord, CrowdError> {
    budget.try_spend()?;
    let rec = draw_label(task, worker, gold, now, rng);
    worker.labels_given += 1;
    Ok(rec)
}

/// Plurality (optionally trust-weighted) vote with adaptive redundancy.
pub fn aggregate(
    task: &CrowdTask,
    labels: &[LabelRecord],
    cfg: &AggregationConfig,
    trust: &BTreeMap<WorkerId, f64>,
) -> Result<AggregationOutcome, CrowdError> {
    if let Some(l) = labels.iter().find(|l| l.task_id != task.task_id) {
        return Err(CrowdError::ForeignLabel {
            task: task.task_id,
            label_task: l.task_id,
        });
    }
    let count = labels.len() as u32;
    let mut outcome = AggregationOutcome {
        task_id: task.task_id,
        decided_label: None,
        support: 0.0,
        labels_used: count,
        status: AggregationStatus::NeedsMore,
    };
    if count == 0 {
        return Ok(outcome);
    }
    // Votes keyed by answer; options order by index, text answers by first appearance.
    let mut votes: Vec<(Answer, f64, usize)> = Vec::new();
    for (pos, l) in labels.iter().enumerate() {
        let w = if cfg.trust_weighted {
            trust.get(&l.worker_id).copied().unwrap_or(0.5)
        } else {
            1.0
        };
        match votes.iter_mut().find(|(a, _, _)| *a == l.answer) {
            Some(v) => v.1 += w,
            None => votes.push((l.answer.clone(), w, pos)),
        }
    }
    let total: f64 = votes.iter().map(|v| v.1).sum();
    let order_key = |a: &Answer, first: usize| match a {
        Answer::Option(i) => (0usize, *i),
        Answer::Text(_) => (1usize, first),
    };
    let (top, weight, _) = votes
        .iter()
        .max_by(|a, b| {
            a.1.total_cmp(&b.1)
                .then_with(|| order_key(&b.0, b.2).cmp(&order_key(&a.0, a.2)))
        })
        .expect("non-empty")
        .clone();
    let support = if total > 0.0 { weight / total } else { 0.0 };
    outcome.support = support;
    if count < cfg.min_labels {
        return Ok(outcome);
    }
    if support >= cfg.agreement_q {
        outcome.status = AggregationStatus::Decided;
        outcome.decided_label = Some(top);
    } else if count < cfg.max_labels_r {
        outcome.status = AggregationStatus::NeedsMore;
    } else {
        outcome.status = AggregationStatus::Exhausted;
        outcome.decided_label = Some(top);
    }
    Ok(outcome)
}

/// Laplace-smoothed agreement ratio `(agree + 1) / (decided + 2)`.
pub fn update_trust(worker: &mut WorkerModel, outcome: &AggregationOutcome, own_answer: &Answer) -> f64 {
    if outcome.status == AggregationStatus::Decided {
        if let Some(label) = &outcome.decided_label {
            worker.decided += 1;
            if label == own_answer {
                worker.agreements += 1;
            }
        }
    }
    worker.trust = (worker.agreements as f64 + 1.0) / (worker.decided as f64 + 2.0);
    worker.trust
}

/// Items per hour a crowd can label: `floor(workers * 3600 / seconds_per_label / redundancy)`.
pub fn crowd_capacity(workers: u64, seconds_per_label: f64, redundancy: u32) -> u64 {
    (workers as f64 * 3600.0 / seconds_per_label / redundancy as f64).floor() as u64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskStatus {
    Open,
    Decided,
    Exhausted,
    Expired,
}

#[derive(Debug, Clone)]
struct TaskState {
    task: CrowdTask,
    item: DataItem,
    gold: Option<usize>,
    labels: Vec<LabelRecord>,
    /// Assigned but not yet submitted, with assignment time.
    outstanding: BTreeMap<WorkerId, Timestamp>,
    status: TaskStatus,
    seq: u64,
}

impl TaskState {
    fn labeled_by(&self) -> BTreeSet<WorkerId> {
        self.labels
            .iter()
            .map(|l| l.worker_id.clone())
            .chain(self.outstanding.keys().cloned())
            .collect()
    }

    fn wants_labels(&self) -> bool {
        self.status == TaskStatus::Open
            && (self.labels.len() + self.outstanding.len()) < self.task.required_labels as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrowdConfig {
    pub template: TaskTemplate,
    #[serde(default)]
    pub aggregation: AggregationConfig,
    #[serde(default)]
    pub policy: AssignPolicy,
    /// Open tasks kept in the pool; the lowest-priority excess expires.
    pub max_pending: usize,
    /// Remote assignments not answered within this time are released (ms).
    pub assignment_timeout_ms: f64,
    #[serde(default)]
    pub escalate_to_experts: bool,
}

impl Default for CrowdConfig {
    fn default() -> Self {
        CrowdConfig {
            template: TaskTemplate::informative(),
            aggregation: AggregationConfig::default(),
            policy: AssignPolicy::Any,
            max_pending: 64,
            assignment_timeout_ms: 120_000.0,
            escalate_to_experts: false,
        }
    }
}

/// A label accepted by the engine and what it did to its task.
#[derive(Clone, Debug, PartialEq)]
pub struct Submission {
    pub record: LabelRecord,
    pub outcome: AggregationOutcome,
    /// Set once the task closed with a label: the item and its final answer.
    pub resolved: Option<(DataItem, Answer)>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CrowdStats {
    pub labels_total: u64,
    pub tasks_open: u64,
    pub tasks_decided: u64,
    pub tasks_exhausted: u64,
    pub tasks_expired: u64,
    pub budget_spent: u64,
}

/// Task pool, worker registry, budget and label log behind one owner.
#[derive(Debug)]
pub struct CrowdEngine {
    cfg: CrowdConfig,
    budget: CrowdBudget,
    workers: BTreeMap<WorkerId, WorkerModel>,
    tasks: BTreeMap<u64, TaskState>,
    next_task: u64,
    next_seq: u64,
    log: Vec<LabelRecord>,
    stats: CrowdStats,
    location: ChannelId,
}

impl CrowdEngine {
    pub fn new(cfg: CrowdConfig, budget: CrowdBudget, workers: Vec<WorkerModel>) -> Result<Self, CrowdError> {
        cfg.template.validate()?;
        Ok(CrowdEngine {
            cfg,
            budget,
            workers: workers.into_iter().map(|w| (w.worker_id.clone(), w)).collect(),
            tasks: BTreeMap::new(),
            next_task: 1,
            next_seq: 0,
            log: Vec::new(),
            stats: CrowdStats::default(),
            location: ChannelId::new("crowd"),
        })
    }

    /// Id used as the channel of shed records for expired tasks.
    pub fn with_location(mut self, loc: impl Into<ChannelId>) -> Self {
        self.location = loc.into();
        self
    }

    pub fn config(&self) -> &CrowdConfig {
        &self.cfg
    }

    pub fn budget(&self) -> &CrowdBudget {
        &self.budget
    }

    pub fn workers(&self) -> impl Iterator<Item = &WorkerModel> {
        self.workers.values()
    }

    pub fn worker(&self, id: &WorkerId) -> Option<&WorkerModel> {
        self.workers.get(id)
    }

    pub fn task(&self, id: u64) -> Option<(&CrowdTask, TaskStatus)> {
        self.tasks.get(&id).map(|t| (&t.task, t.status))
    }

    pub fn task_labels(&self, id: u64) -> &[LabelRecord] {
        self.tasks.get(&id).map(|t| t.labels.as_slice()).unwrap_or(&[])
    }

    pub fn label_log(&self) -> &[LabelRecord] {
        &self.log
    }

    pub fn stats(&self) -> CrowdStats {
        CrowdStats {
            tasks_open: self.tasks.values().filter(|t| t.status == TaskStatus::Open).count() as u64,
            budget_spent: self.budget.spent,
            ..self.stats.clone()
        }
    }

    fn outstanding_total(&self) -> u64 {
        self.tasks.values().map(|t| t.outstanding.len() as u64).sum()
    }

    fn budget_allows_assignment(&self) -> bool {
        match self.budget.remaining() {
            Some(left) => self.outstanding_total() < left,
            None => true,
        }
    }

    /// Open tasks in service order: priority descending, then creation order.
    pub fn queue(&self) -> Vec<u64> {
        let mut open: Vec<&TaskState> = self.tasks.values().filter(|t| t.status == TaskStatus::Open).collect();
        open.sort_by(|a, b| b.task.priority.total_cmp(&a.task.priority).then(a.seq.cmp(&b.seq)));
        open.into_iter().map(|t| t.task.task_id).collect()
    }

    /// Adds a task for `item`. Returns its id and shed records for tasks that
    /// expired to keep the pool within `max_pending`.
    pub fn add_task(
        &mut self,
        item: DataItem,
        gold: Option<usize>,
        priority: f64,
        now: Timestamp,
    ) -> Result<(u64, Vec<ShedRecord>), CrowdError> {
        let id = self.next_task;
        let mut task = generate_task(id, &item, &self.cfg.template, &self.cfg.aggregation, now)?;
        task.priority = priority;
        self.next_task += 1;
        self.next_seq += 1;
        self.tasks.insert(
            id,
            TaskState {
                task,
                item,
                gold,
                labels: Vec::new(),
                outstanding: BTreeMap::new(),
                status: TaskStatus::Open,
                seq: self.next_seq,
            },
        );
        let mut shed = Vec::new();
        loop {
            let untouched: Vec<u64> = self
                .queue()
                .into_iter()
                .filter(|id| {
                    let t = &self.tasks[id];
                    t.labels.is_empty() && t.outstanding.is_empty()
                })
                .collect();
            let open = self.tasks.values().filter(|t| t.status == TaskStatus::Open).count();
            if open <= self.cfg.max_pending || untouched.is_empty() {
                break;
            }
            let victim = *untouched.last().expect("non-empty");
            shed.extend(self.expire(victim, now));
        }
        Ok((id, shed))
    }

    fn expire(&mut self, id: u64, now: Timestamp) -> Option<ShedRecord> {
        let t = self.tasks.get_mut(&id)?;
        if t.status != TaskStatus::Open {
            return None;
        }
        t.status = TaskStatus::Expired;
        self.stats.tasks_expired += 1;
        let rec = ShedRecord {
            channel_id: self.location.clone(),
            item_id: t.item.item_id,
            shed_ts: now,
            reason: ShedReason::Prioritization,
            lineage: t.item.lineage.clone(),
        };
        self.prune(id);
        Some(rec)
    }

    /// Expires open tasks nobody has touched yet that match `pred`.
    pub fn expire_where(&mut self, now: Timestamp, pred: impl Fn(&CrowdTask, &DataItem) -> bool) -> Vec<ShedRecord> {
        let ids: Vec<u64> = self
            .tasks
            .values()
            .filter(|t| {
                t.status == TaskStatus::Open
                    && t.labels.is_empty()
                    && t.outstanding.is_empty()
                    && pred(&t.task, &t.item)
            })
            .map(|t| t.task.task_id)
            .collect();
        ids.into_iter().filter_map(|id| self.expire(id, now)).collect()
    }

    /// Closed tasks keep only a tombstone so late submissions get `TaskClosed`.
    fn prune(&mut self, id: u64) {
        if let Some(t) = self.tasks.get_mut(&id) {
            t.labels.shrink_to_fit();
            t.outstanding.clear();
            t.item.payload = Payload::Text(String::new());
        }
    }

    /// Lineages of items whose tasks are still open.
    pub fn open_lineages(&self) -> Vec<Lineage> {
        self.tasks
            .values()
            .filter(|t| t.status == TaskStatus::Open)
            .map(|t| t.item.lineage.clone())
            .collect()
    }

    pub fn open_count(&self) -> usize {
        self.tasks.values().filter(|t| t.status == TaskStatus::Open).count()
    }

    fn release_stale(&mut self, now: Timestamp) {
        let timeout = SimDuration::from_millis(self.cfg.assignment_timeout_ms);
        for t in self.tasks.values_mut() {
            t.outstanding.retain(|_, at| now.since(*at) < timeout);
        }
    }

    fn eligible_pool(&self, t: &TaskState) -> Vec<&WorkerModel> {
        let escalate = self.cfg.escalate_to_experts
            && t.labels.len() as u32 >= self.cfg.aggregation.min_labels;
        self.workers
            .values()
            .filter(|w| !escalate || w.tier == Tier::Expert)
            .collect()
    }

    /// Hands the highest-priority task this worker may label to a remote
    /// worker, registering self-declared workers on first contact.
    pub fn next_task_for(&mut self, worker: &WorkerId, now: Timestamp) -> Result<CrowdTask, CrowdError> {
        self.release_stale(now);
        if !self.budget_allows_assignment() {
            return Err(CrowdError::NoTaskAvailable);
        }
        self.workers
            .entry(worker.clone())
            .or_insert_with(|| WorkerModel::new(worker.clone(), 1.0, 0.0));
        if !self.workers[worker].has_capacity() {
            return Err(CrowdError::NoTaskAvailable);
        }
        for id in self.queue() {
            let t = &self.tasks[&id];
            if t.wants_labels() && !t.labeled_by().contains(worker) {
                let t = self.tasks.get_mut(&id).expect("queued task");
                t.outstanding.insert(worker.clone(), now);
                return Ok(t.task.clone());
            }
        }
        Err(CrowdError::NoTaskAvailable)
    }

    /// Reserves `task` for `worker` (simulated dispatch).
    pub fn assign(&mut self, task_id: u64, worker: &WorkerId, now: Timestamp) -> Result<CrowdTask, CrowdError> {
        if !self.budget_allows_assignment() {
            return Err(CrowdError::BudgetExhausted);
        }
        let t = self.tasks.get_mut(&task_id).ok_or(CrowdError::UnknownTask(task_id))?;
        if t.status != TaskStatus::Open {
            return Err(CrowdError::TaskClosed(task_id));
        }
        t.outstanding.insert(worker.clone(), now);
        Ok(t.task.clone())
    }

    pub fn gold(&self, task_id: u64) -> Option<usize> {
        self.tasks.get(&task_id).and_then(|t| t.gold)
    }

    /// Accepts one label and re-aggregates its task.
    pub fn submit(
        &mut self,
        task_id: u64,
        worker: &WorkerId,
        answer: Answer,
        now: Timestamp,
        latency_ms: Option<f64>,
    ) -> Result<Submission, CrowdError> {
        let t = self.tasks.get(&task_id).ok_or(CrowdError::UnknownTask(task_id))?;
        if t.status != TaskStatus::Open {
            return Err(CrowdError::TaskClosed(task_id));
        }
        if t.labels.iter().any(|l| &l.worker_id == worker) {
            return Err(CrowdError::DuplicateLabel {
                task: task_id,
                worker: worker.clone(),
            });
        }
        // Remote clients may name the option instead of giving its index.
        let answer = match answer {
            Answer::Text(text) if t.task.task_kind != TaskKind::DataEntry => {
                match t.task.options.iter().position(|o| *o == text) {
                    Some(i) => Answer::Option(i),
                    None => Answer::Text(text),
                }
            }
            a => a,
        };
        match (&answer, t.task.task_kind) {
            (Answer::Option(i), TaskKind::Binary | TaskKind::NAry) if *i < t.task.options.len() => {}
            (Answer::Text(_), TaskKind::DataEntry) => {}
            _ => return Err(CrowdError::InvalidAnswer(format!("{answer} for task {task_id}"))),
        }
        let reserved = t.outstanding.contains_key(worker);
        if !reserved && !self.budget_allows_assignment() {
            return Err(CrowdError::BudgetExhausted);
        }
        self.budget.try_spend()?;
        self.workers
            .entry(worker.clone())
            .or_insert_with(|| WorkerModel::new(worker.clone(), 1.0, 0.0))
            .labels_given += 1;
        let t = self.tasks.get_mut(&task_id).expect("checked");
        let assigned_at = t.outstanding.remove(worker);
        let latency_ms = latency_ms
            .or_else(|| assigned_at.map(|a| now.since(a).as_millis()))
            .unwrap_or(0.0);
        let record = LabelRecord {
            task_id,
            item_id: t.item.item_id,
            worker_id: worker.clone(),
            answer,
            submitted_ts: now,
            latency_ms,
        };
        t.labels.push(record.clone());
        self.log.push(record.clone());
        self.stats.labels_total += 1;

        let trust: BTreeMap<WorkerId, f64> = self.workers.iter().map(|(k, w)| (k.clone(), w.trust)).collect();
        let t = self.tasks.get_mut(&task_id).expect("checked");
        let outcome = aggregate(&t.task, &t.labels, &self.cfg.aggregation, &trust)?;
        let mut resolved = None;
        match outcome.status {
            AggregationStatus::NeedsMore => {
                if t.labels.len() as u32 >= t.task.required_labels {
                    t.task.required_labels = (t.task.required_labels + 1).min(self.cfg.aggregation.max_labels_r);
                }
            }
            AggregationStatus::Decided | AggregationStatus::Exhausted => {
                t.status = if outcome.status == AggregationStatus::Decided {
                    self.stats.tasks_decided += 1;
                    TaskStatus::Decided
                } else {
                    self.stats.tasks_exhausted += 1;
                    TaskStatus::Exhausted
                };
                let label = outcome.decided_label.clone().expect("closed outcome has label");
                resolved = Some((t.item.clone(), label));
                let answers: Vec<(WorkerId, Answer)> =
                    t.labels.iter().map(|l| (l.worker_id.clone(), l.answer.clone())).collect();
                for (w, a) in answers {
                    if let Some(wm) = self.workers.get_mut(&w) {
                        update_trust(wm, &outcome, &a);
                    }
                }
                self.prune(task_id);
            }
        }
        Ok(Submission {
            record,
            outcome,
            resolved,
        })
    }

    /// Closes an open task that can no longer collect labels, deciding with
    /// whatever labels it has. Returns the resolved item when it had labels.
    pub fn exhaust(&mut self, task_id: u64, now: Timestamp) -> Option<Result<(DataItem, Answer), ShedRecord>> {
        let t = self.tasks.get_mut(&task_id)?;
        if t.status != TaskStatus::Open || !t.outstanding.is_empty() {
            return None;
        }
        let cfg = AggregationConfig {
            min_labels: 1,
            agreement_q: f64::INFINITY,
            max_labels_r: 0,
            ..self.cfg.aggregation.clone()
        };
        let outcome = aggregate(&t.task, &t.labels, &cfg, &BTreeMap::new()).ok()?;
        match outcome.decided_label {
            Some(label) => {
                t.status = TaskStatus::Exhausted;
                self.stats.tasks_exhausted += 1;
                let item = t.item.clone();
                self.prune(task_id);
                Some(Ok((item, label)))
            }
            None => self.expire(task_id, now).map(Err),
        }
    }

    /// Tasks waiting for more labels, in service order.
    pub fn wanting(&self) -> Vec<u64> {
        self.queue()
            .into_iter()
            .filter(|id| self.tasks[id].wants_labels())
            .collect()
    }

    fn candidates(&self, task_id: u64) -> (Vec<&WorkerModel>, BTreeSet<WorkerId>) {
        let t = &self.tasks[&task_id];
        (self.eligible_pool(t), t.labeled_by())
    }
}

/// In-process simulated workers driven by the virtual clock.
#[derive(Debug)]
pub struct SimulatedCrowd<R> {
    rng: R,
    busy: BTreeSet<WorkerId>,
    pending: BTreeMap<u64, LabelRecord>,
    next_token: u64,
}

impl<R: Rng> SimulatedCrowd<R> {
    pub fn new(rng: R) -> Self {
        SimulatedCrowd {
            rng,
            busy: BTreeSet::new(),
            pending: BTreeMap::new(),
            next_token: 0,
        }
    }

    pub fn busy_workers(&self) -> usize {
        self.busy.len()
    }

    /// Assigns work to idle workers. Returns (completion time, token) pairs
    /// to be fed back to [`SimulatedCrowd::complete`], plus items whose tasks
    /// ran out of eligible workers.
    pub fn dispatch(
        &mut self,
        engine: &mut CrowdEngine,
        now: Timestamp,
    ) -> (Vec<(Timestamp, u64)>, Vec<Closed>) {
        let mut timers = Vec::new();
        let mut exhausted = Vec::new();
        for task_id in engine.wanting() {
            if !engine.budget_allows_assignment() {
                break;
            }
            let (stuck, idle_ids) = {
                let (pool, already) = engine.candidates(task_id);
                let stuck = pool
                    .iter()
                    .all(|w| !w.has_capacity() || already.contains(&w.worker_id));
                let idle: Vec<WorkerId> = pool
                    .iter()
                    .filter(|w| !self.busy.contains(&w.worker_id))
                    .map(|w| w.worker_id.clone())
                    .collect();
                (stuck, idle)
            };
            if stuck {
                if engine.tasks[&task_id].outstanding.is_empty() {
                    if let Some(r) = engine.exhaust(task_id, now) {
                        exhausted.push(r);
                    }
                }
                continue;
            }
            if idle_ids.is_empty() {
                continue;
            }
            let chosen = {
                let (_, already) = engine.candidates(task_id);
                let idle: Vec<&WorkerModel> = idle_ids.iter().filter_map(|id| engine.worker(id)).collect();
                let (task, _) = engine.task(task_id).expect("wanting task");
                match assign_task(task, &idle, &already, engine.cfg.policy, &mut self.rng) {
                    Ok(w) => w,
                    Err(_) => continue,
                }
            };
            let Ok(task) = engine.assign(task_id, &chosen, now) else { break };
            let gold = engine.gold(task_id).unwrap_or(0);
            let worker = engine.worker(&chosen).expect("registered worker");
            let rec = draw_label(&task, worker, gold, now, &mut self.rng);
            self.busy.insert(chosen);
            self.next_token += 1;
            timers.push((rec.submitted_ts, self.next_token));
            self.pending.insert(self.next_token, rec);
        }
        (timers, exhausted)
    }

    /// Delivers a finished simulated label to the engine.
    pub fn complete(
        &mut self,
        engine: &mut CrowdEngine,
        token: u64,
        now: Timestamp,
    ) -> Option<Result<Submission, CrowdError>> {
        let rec = self.pending.remove(&token)?;
        self.busy.remove(&rec.worker_id);
        Some(engine.submit(rec.task_id, &rec.worker_id, rec.answer, now, Some(rec.latency_ms)))
    }

    pub fn has_pending(&self) -> bool {
        !self.pending.is_empty()
    }
}

/// Acknowledgement returned to remote label submitters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubmitAck {
    pub status: AggregationStatus,
    pub labels_used: u32,
}

/// Requests remote workers send into the engine's owner.
#[derive(Debug)]
pub enum CrowdRequest {
    NextTask {
        worker: WorkerId,
        reply: Sender<Result<CrowdTask, CrowdError>>,
    },
    Submit {
        task_id: u64,
        worker: WorkerId,
        answer: Answer,
        client_latency_ms: Option<f64>,
        reply: Sender<Result<SubmitAck, CrowdError>>,
    },
    Stats {
        reply: Sender<CrowdStats>,
    },
}

/// A task the simulated crowd closed: its item and answer, or the shed
/// record when no eligible worker was left.
pub type Closed = Result<(DataItem, Answer), ShedRecord>;

/// Cloneable client handle to a crowd engine owned by another thread.
#[derive(Clone, Debug)]
pub struct CrowdBridge {
    tx: Sender<CrowdRequest>,
    timeout: Duration,
}

impl CrowdBridge {
    /// Creates a bridge and the receiving end the engine owner polls.
    pub fn channel(timeout: Duration) -> (CrowdBridge, Receiver<CrowdRequest>) {
        let (tx, rx) = crossbeam_channel::unbounded();
        (CrowdBridge { tx, timeout }, rx)
    }

    fn call<T>(&self, make: impl FnOnce(Sender<T>) -> CrowdRequest) -> Result<T, CrowdError> {
        let (reply, rx) = bounded(1);
        self.tx.send(make(reply)).map_err(|_| CrowdError::Disconnected)?;
        rx.recv_timeout(self.timeout).map_err(|_| CrowdError::Disconnected)
    }

    pub fn next_task(&self, worker: &WorkerId) -> Result<CrowdTask, CrowdError> {
        self.call(|reply| CrowdRequest::NextTask {
            worker: worker.clone(),
            reply,
        })?
    }

    pub fn submit(
        &self,
        task_id: u64,
        worker: &WorkerId,
        answer: Answer,
        client_latency_ms: Option<f64>,
    ) -> Result<SubmitAck, CrowdError> {
        self.call(|reply| CrowdRequest::Submit {
            task_id,
            worker: worker.clone(),
            answer,
            client_latency_ms,
            reply,
        })?
    }

    pub fn stats(&self) -> Result<CrowdStats, CrowdError> {
        self.call(|reply| CrowdRequest::Stats { reply })
    }
}

/// Applies one bridged request to the engine. Submissions that resolve a
/// task are returned so the owner can emit the labeled item.
pub fn serve_request(engine: &mut CrowdEngine, req: CrowdRequest, now: Timestamp) -> Option<Submission> {
    match req {
        CrowdRequest::NextTask { worker, reply } => {
            let _ = reply.send(engine.next_task_for(&worker, now));
            None
        }
        CrowdRequest::Submit {
            task_id,
            worker,
            answer,
            client_latency_ms,
            reply,
        } => match engine.submit(task_id, &worker, answer, now, client_latency_ms) {
            Ok(sub) => {
                let _ = reply.send(Ok(SubmitAck {
                    status: sub.outcome.status,
                    labels_used: sub.outcome.labels_used,
                }));
                Some(sub)
            }
            Err(e) => {
                let _ = reply.send(Err(e));
                None
            }
        },
        CrowdRequest::Stats { reply } => {
            let _ = reply.send(engine.stats());
            None
        }
    }
}

/// Writes `task_id,item_id,worker_id,answer,submitted_ts,latency_ms`.
pub fn write_label_csv<W: io::Write>(out: W, labels: &[LabelRecord]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["task_id", "item_id", "worker_id", "answer", "submitted_ts", "latency_ms"])?;
    for l in labels {
        w.write_record([
            l.task_id.to_string(),
            l.item_id.to_string(),
            l.worker_id.to_string(),
            l.answer.to_string(),
            format!("{:.6}", l.submitted_ts.as_millis()),
            format!("{:.3}", l.latency_ms),
        ])?;
    }
    w.flush()?;
    Ok(())
}
