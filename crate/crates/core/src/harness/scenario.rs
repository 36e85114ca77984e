//! Scenario configuration, execution and run artifacts.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::crowd::{
    write_label_csv, AggregationConfig, AssignPolicy, CrowdBudget, CrowdConfig, CrowdError,
    CrowdRequest, LabelRecord, TaskTemplate, WorkerModel, WorkerPoolConfig,
};
use crate::learning::{write_quality_csv, Classifier, LearnerConfig, QualityCheckpoint, SelectionMode};
use crate::metrics::{flow_accounting, summarize, write_metrics_csv, EventLog, FlowAccount, MetricsRecord, SweepTarget};
use crate::model::Timestamp;
use crate::runtime::{BehaviorRegistry, RunOptions, RunSummary, StepError, VirtualRuntime, WallClockOptions, WallClockRuntime};
use crate::topology::{build_topology, Topology, TopologyConfig, TopologyError};

use super::aidr::{aidr_topology, register_aidr, AidrEnv, AidrShape, CrowdSetup};
use super::dataset::{generate_dataset, load_dataset, DatasetError, DatasetParams};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("scenario config: {0}")]
    Config(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Crowd(#[from] CrowdError),
    #[error(transparent)]
    Step(#[from] StepError),
    #[error("writing {path}: {source}")]
    Output { path: PathBuf, source: io::Error },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    #[default]
    Virtual,
    Wall,
}

impl std::str::FromStr for RunMode {
    type Err = ScenarioError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "virtual" => Ok(RunMode::Virtual),
            "wall" => Ok(RunMode::Wall),
            _ => Err(ScenarioError::Config(format!("unknown mode `{s}`"))),
        }
    }
}

/// Either a JSON-lines file or generator parameters. The generator is
/// seeded from the scenario seed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSource {
    pub path: Option<PathBuf>,
    pub generate: Option<DatasetParams>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CrowdScenario {
    /// Simulated workers; ignored when `pool` names a worker file.
    pub workers: usize,
    pub accuracy: f64,
    pub speed_mean_ms: f64,
    pub jitter_ms: f64,
    pub pool: Option<PathBuf>,
    /// Fixed budget in labels; unlimited when absent.
    pub budget: Option<u64>,
    pub unit_cost: f64,
    pub aggregation: AggregationConfig,
    pub policy: AssignPolicy,
    pub max_pending: usize,
    pub assignment_timeout_ms: f64,
    /// Run the simulated workers (off when only remote annotators label).
    pub simulate: bool,
}

impl Default for CrowdScenario {
    fn default() -> Self {
        let base = CrowdConfig::default();
        CrowdScenario {
            workers: 30,
            accuracy: 0.9,
            speed_mean_ms: 3000.0,
            jitter_ms: 1000.0,
            pool: None,
            budget: None,
            unit_cost: 1.0,
            aggregation: AggregationConfig::default(),
            policy: AssignPolicy::Any,
            max_pending: base.max_pending,
            assignment_timeout_ms: base.assignment_timeout_ms,
            simulate: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearningScenario {
    pub mode: SelectionMode,
    pub dedup: bool,
    pub classes: Vec<String>,
    pub test_every: u64,
    pub retrain_every: u64,
    pub holdout_jaccard: Option<f64>,
}

impl Default for LearningScenario {
    fn default() -> Self {
        let d = LearnerConfig::default();
        LearningScenario {
            mode: d.mode,
            dedup: d.dedup,
            classes: d.classes,
            test_every: d.test_every,
            retrain_every: d.retrain_every,
            holdout_jaccard: d.holdout_jaccard,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    /// Offered rates as multiples of the measured capacity.
    pub multipliers: Vec<f64>,
    /// Run time offered at each rate, seconds.
    pub duration_s: f64,
    /// Offered rate of the run that measures capacity.
    pub saturation_rate: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            multipliers: vec![0.25, 0.5, 1.0, 2.0, 4.0],
            duration_s: 20.0,
            saturation_rate: 5000.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub name: String,
    pub seed: u64,
    /// Topology file; the built-in pipeline shaped by `shape` otherwise.
    pub topology: Option<PathBuf>,
    pub shape: AidrShape,
    pub dataset: DatasetSource,
    pub crowd: CrowdScenario,
    pub learning: LearningScenario,
    pub mode: RunMode,
    pub time_scale: f64,
    pub max_time_s: Option<f64>,
    pub sweep: SweepConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            name: "aidr".into(),
            seed: 1,
            topology: None,
            shape: AidrShape::default(),
            dataset: DatasetSource {
                path: None,
                generate: Some(DatasetParams::default()),
            },
            crowd: CrowdScenario::default(),
            learning: LearningScenario::default(),
            mode: RunMode::Virtual,
            time_scale: 1.0,
            max_time_s: None,
            sweep: SweepConfig::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self, ScenarioError> {
        toml::from_str(text).map_err(|e| ScenarioError::Config(e.to_string()))
    }

    /// Loads a scenario TOML file or a run manifest (JSON).
    pub fn load(path: impl AsRef<Path>) -> Result<(Self, PathBuf), ScenarioError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| ScenarioError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let cfg = if path.extension().is_some_and(|e| e == "json") {
            let m: Manifest = serde_json::from_str(&text).map_err(|e| ScenarioError::Config(e.to_string()))?;
            m.config
        } else {
            Self::from_toml(&text)?
        };
        Ok((cfg, base))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario config serializes")
    }

    /// SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn learner_config(&self) -> LearnerConfig {
        LearnerConfig {
            classes: self.learning.classes.clone(),
            positive_class: 0,
            test_every: self.learning.test_every,
            retrain_every: self.learning.retrain_every,
            holdout_jaccard: self.learning.holdout_jaccard,
            mode: self.learning.mode,
            dedup: self.learning.dedup,
        }
    }

    fn crowd_setup(&self, base: &Path) -> Result<CrowdSetup, ScenarioError> {
        let c = &self.crowd;
        let pool = match &c.pool {
            Some(p) => WorkerPoolConfig::load(resolve(base, p))?,
            None => WorkerPoolConfig::uniform(c.workers, c.accuracy, c.speed_mean_ms, c.jitter_ms),
        };
        let workers: Vec<WorkerModel> = pool.workers;
        let mut template = TaskTemplate::informative();
        template.options = self.learning.classes.clone();
        if template.options.len() > 2 {
            template.kind = crate::crowd::TaskKind::NAry;
        }
        let config = CrowdConfig {
            template,
            aggregation: c.aggregation.clone(),
            policy: c.policy,
            max_pending: c.max_pending,
            assignment_timeout_ms: c.assignment_timeout_ms,
            escalate_to_experts: pool.escalate_to_experts,
        };
        let budget = match c.budget {
            Some(k) => CrowdBudget::fixed(k),
            None => CrowdBudget::per_task(c.unit_cost),
        };
        Ok(CrowdSetup {
            config,
            budget,
            workers,
            simulate: c.simulate,
        })
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Everything needed to start one run.
pub struct Prepared {
    pub topology: Topology,
    pub registry: BehaviorRegistry,
    pub env: Arc<AidrEnv>,
}

pub fn prepare(
    cfg: &ScenarioConfig,
    base: &Path,
    requests: Option<crossbeam_channel::Receiver<CrowdRequest>>,
) -> Result<Prepared, ScenarioError> {
    let records = match (&cfg.dataset.path, &cfg.dataset.generate) {
        (Some(p), _) => load_dataset(resolve(base, p))?,
        (None, Some(params)) => generate_dataset(&DatasetParams {
            seed: cfg.seed,
            ..params.clone()
        })?,
        (None, None) => return Err(ScenarioError::Config("dataset needs a path or generator parameters".into())),
    };
    let topo_cfg = match &cfg.topology {
        Some(p) => TopologyConfig::load(resolve(base, p))?,
        None => aidr_topology(&cfg.shape),
    };
    let topology = build_topology(&topo_cfg)?;
    for w in &topology.warnings {
        log::warn!("topology `{}`: {w}", topology.name);
    }
    let mut env = AidrEnv::new(cfg.seed, records, cfg.crowd_setup(base)?, cfg.learner_config());
    if let Some(rx) = requests {
        env = env.with_requests(rx);
    }
    let env = Arc::new(env);
    let mut registry = BehaviorRegistry::new();
    register_aidr(&mut registry, env.clone());
    Ok(Prepared {
        topology,
        registry,
        env,
    })
}

/// Result of one run plus what was derived from it.
#[derive(Debug)]
pub struct ScenarioOutcome {
    pub summary: RunSummary,
    pub metrics: MetricsRecord,
    pub flow: FlowAccount,
    pub curve: Vec<QualityCheckpoint>,
    pub labels: Vec<LabelRecord>,
    pub env: Arc<AidrEnv>,
}

impl ScenarioOutcome {
    pub fn log(&self) -> &EventLog {
        &self.summary.log
    }
}

pub fn execute(prepared: Prepared, cfg: &ScenarioConfig) -> Result<ScenarioOutcome, ScenarioError> {
    let Prepared {
        topology,
        registry,
        env,
    } = prepared;
    let summary = match cfg.mode {
        RunMode::Virtual => {
            let opts = RunOptions {
                max_time: cfg.max_time_s.map(|s| Timestamp((s * 1e9) as u64)),
                max_events: None,
            };
            VirtualRuntime::new(&topology, &registry)?.run(&opts)
        }
        RunMode::Wall => {
            let opts = WallClockOptions {
                time_scale: cfg.time_scale,
                max_duration: cfg.max_time_s.map(|s| Duration::from_secs_f64(s * cfg.time_scale)),
                ..WallClockOptions::default()
            };
            WallClockRuntime::new(&topology, &registry, opts)?.run()
        }
    };
    Ok(outcome_of(summary, cfg, env))
}

pub fn outcome_of(summary: RunSummary, cfg: &ScenarioConfig, env: Arc<AidrEnv>) -> ScenarioOutcome {
    for f in &summary.faults {
        log::warn!("{f}");
    }
    let rate = cfg.shape.rate;
    let metrics = summarize(&summary.log, rate);
    let flow = flow_accounting(&summary.log, &summary.in_flight);
    let curve = summary.log.checkpoints.clone();
    let labels: Vec<LabelRecord> = summary.log.labels.clone();
    ScenarioOutcome {
        summary,
        metrics,
        flow,
        curve,
        labels,
        env,
    }
}

pub fn run_scenario(cfg: &ScenarioConfig, base: &Path) -> Result<ScenarioOutcome, ScenarioError> {
    let prepared = prepare(cfg, base, None)?;
    execute(prepared, cfg)
}

/// What is needed to rerun a scenario exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub seed: u64,
    pub config_hash: String,
    pub cspflow_version: String,
    pub mode: RunMode,
    pub config: ScenarioConfig,
}

impl Manifest {
    pub fn of(cfg: &ScenarioConfig) -> Self {
        Manifest {
            name: cfg.name.clone(),
            seed: cfg.seed,
            config_hash: cfg.hash(),
            cspflow_version: env!("CARGO_PKG_VERSION").to_owned(),
            mode: cfg.mode,
            config: cfg.clone(),
        }
    }
}

fn write_file(path: PathBuf, write: impl FnOnce(&mut Vec<u8>) -> io::Result<()>) -> Result<(), ScenarioError> {
    let mut buf = Vec::new();
    write(&mut buf)
        .and_then(|_| fs::write(&path, &buf))
        .map_err(|source| ScenarioError::Output { path, source })
}

fn csv_io(e: csv::Error) -> io::Error {
    io::Error::other(e)
}

/// Writes metrics.csv, quality.csv, labels.csv, shed.csv, model.json and
/// manifest.json into `dir`.
pub fn write_outputs(dir: &Path, cfg: &ScenarioConfig, out: &ScenarioOutcome) -> Result<(), ScenarioError> {
    fs::create_dir_all(dir).map_err(|source| ScenarioError::Output {
        path: dir.to_path_buf(),
        source,
    })?;
    write_file(dir.join("metrics.csv"), |b| {
        write_metrics_csv(b, std::slice::from_ref(&out.metrics)).map_err(csv_io)
    })?;
    write_file(dir.join("quality.csv"), |b| write_quality_csv(b, &out.curve).map_err(csv_io))?;
    write_file(dir.join("labels.csv"), |b| write_label_csv(b, &out.labels).map_err(csv_io))?;
    write_file(dir.join("shed.csv"), |b| {
        crate::channels::write_shed_csv(b, &out.summary.log.sheds).map_err(csv_io)
    })?;
    if let Some(model) = out.env.models.lock().expect("models").last() {
        write_file(dir.join("model.json"), |b| {
            serde_json::to_writer_pretty(&mut *b, &model.snapshot()).map_err(io::Error::other)
        })?;
    }
    write_file(dir.join("manifest.json"), |b| {
        serde_json::to_writer_pretty(&mut *b, &Manifest::of(cfg)).map_err(io::Error::other)
    })?;
    Ok(())
}

/// Runs the pipeline once per offered rate, each for `duration_s` of
/// offered input.
pub struct PipelineSweep<'a> {
    pub cfg: ScenarioConfig,
    pub base: &'a Path,
}

impl SweepTarget for PipelineSweep<'_> {
    fn run_at(&mut self, rate: f64) -> Result<EventLog, String> {
        let mut cfg = self.cfg.clone();
        cfg.mode = RunMode::Virtual;
        cfg.shape.rate = rate;
        cfg.shape.limit = Some((rate * cfg.sweep.duration_s).round().max(1.0) as usize);
        let n = cfg.shape.limit.unwrap_or(0);
        if let Some(g) = cfg.dataset.generate.as_mut() {
            g.n = g.n.max(n);
        }
        run_scenario(&cfg, self.base)
            .map(|o| o.summary.log)
            .map_err(|e| e.to_string())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepOutcome {
    pub capacity: f64,
    pub rows: Vec<MetricsRecord>,
}

/// Measures capacity with one saturating run, then sweeps the configured
/// multiples of it.
pub fn run_sweep(cfg: &ScenarioConfig, base: &Path) -> Result<SweepOutcome, ScenarioError> {
    let mut target = PipelineSweep { cfg: cfg.clone(), base };
    let sat = cfg.sweep.saturation_rate;
    let log = target.run_at(sat).map_err(ScenarioError::Config)?;
    let capacity = summarize(&log, sat).throughput;
    if capacity.is_nan() || capacity <= 0.0 {
        return Err(ScenarioError::Config("saturation run produced no output".into()));
    }
    let rates: Vec<f64> = cfg.sweep.multipliers.iter().map(|m| m * capacity).collect();
    let rows = crate::metrics::load_sweep(&mut target, &rates)
        .map_err(|e| ScenarioError::Config(e.to_string()))?;
    Ok(SweepOutcome { capacity, rows })
}

pub fn write_sweep(dir: &Path, sweep: &SweepOutcome) -> Result<(), ScenarioError> {
    fs::create_dir_all(dir).map_err(|source| ScenarioError::Output {
        path: dir.to_path_buf(),
        source,
    })?;
    write_file(dir.join("sweep.csv"), |b| write_metrics_csv(b, &sweep.rows).map_err(csv_io))
}
