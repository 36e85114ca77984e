//! Design patterns for mixing automatic and crowd elements: fragment
//! builders and structural checks over data-flow graphs.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channels::Modality;
use crate::model::PeId;
use crate::topology::{ChannelConfig, PeConfig, PeKind, Topology, TopologyConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatternKind {
    QaLoop,
    SkillAssignment,
    DetectVerify,
    SupervisedLearning,
    SubtaskChain,
    HumanOptional,
    HumanMandatory,
}

impl std::str::FromStr for PatternKind {
    type Err = PatternError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        serde_json::from_value(serde_json::Value::String(s.to_owned()))
            .map_err(|_| PatternError::UnknownPattern(s.to_owned()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatternSpec {
    pub pattern: PatternKind,
    #[serde(default)]
    pub parameters: serde_json::Map<String, serde_json::Value>,
}

impl PatternSpec {
    pub fn new(pattern: PatternKind) -> Self {
        PatternSpec {
            pattern,
            parameters: serde_json::Map::new(),
        }
    }

    pub fn param(mut self, key: &str, value: impl Into<serde_json::Value>) -> Self {
        self.parameters.insert(key.to_owned(), value.into());
        self
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PatternError {
    #[error("pattern needs a behavior bound to `{0}`")]
    MissingBinding(String),
    #[error("subtask chains need at least 2 crowd stages, got {0}")]
    InvalidChainLength(usize),
    #[error("unknown pattern `{0}`")]
    UnknownPattern(String),
    #[error("composition `{0}` is not serial, parallel or hybrid")]
    InvalidComposition(String),
}

/// Behavior names for a pattern's slots. `source` and `sink` default to
/// the stub endpoints `source` and `sink`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Bindings(BTreeMap<String, String>);

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(mut self, slot: &str, behavior: &str) -> Self {
        self.0.insert(slot.to_owned(), behavior.to_owned());
        self
    }

    fn get(&self, slot: &str) -> Result<&str, PatternError> {
        self.0
            .get(slot)
            .map(String::as_str)
            .ok_or_else(|| PatternError::MissingBinding(slot.to_owned()))
    }

    fn get_or<'a>(&'a self, slot: &str, default: &'a str) -> &'a str {
        self.0.get(slot).map(String::as_str).unwrap_or(default)
    }
}

/// A pattern instance: its canonical elements plus stub endpoints that make
/// the fragment a valid stand-alone topology.
#[derive(Clone, Debug)]
pub struct Fragment {
    pub config: TopologyConfig,
    /// The pattern's own elements, upstream first.
    pub core: Vec<PeId>,
    pub entry: PeId,
    pub exit: PeId,
}

struct Builder {
    cfg: TopologyConfig,
    core: Vec<PeId>,
    channels: usize,
}

impl Builder {
    fn new(name: &str) -> Self {
        Builder {
            cfg: TopologyConfig::new(name),
            core: Vec::new(),
            channels: 0,
        }
    }

    fn pe(&mut self, pe: PeConfig, core: bool) {
        if core {
            self.core.push(pe.id.clone());
        }
        self.cfg = std::mem::replace(&mut self.cfg, TopologyConfig::new("")).pe(pe);
    }

    /// Data channel from `from` to each of `to`; broadcast when fanning out.
    fn flow(&mut self, from: &str, to: &[(&str, &str)]) {
        self.channels += 1;
        let id = format!("d{}", self.channels);
        let modality = if to.len() > 1 {
            Modality::Broadcast
        } else {
            Modality::PointToPoint
        };
        let mut cfg = std::mem::replace(&mut self.cfg, TopologyConfig::new(""))
            .channel(ChannelConfig::data(&id, modality, crate::channels::DEFAULT_CAPACITY));
        for (pe, port) in to {
            cfg = cfg.data_flow(&format!("{from}.out"), &format!("{pe}.{port}"), &id);
        }
        self.cfg = cfg;
    }

    fn control(&mut self, from: &str, to: &str, port: &str) {
        self.channels += 1;
        let id = format!("c{}", self.channels);
        self.cfg = std::mem::replace(&mut self.cfg, TopologyConfig::new(""))
            .channel(ChannelConfig::control(&id))
            .control_flow(from, &format!("{to}.{port}"), &id);
    }

    fn finish(self, entry: &str, exit: &str) -> Fragment {
        Fragment {
            config: self.cfg,
            core: self.core,
            entry: entry.into(),
            exit: exit.into(),
        }
    }
}

fn ape(id: &str, behavior: &str) -> PeConfig {
    PeConfig::new(id, PeKind::Ape, behavior).inputs(&["in"]).output("out")
}

fn cspe(id: &str, behavior: &str) -> PeConfig {
    PeConfig::new(id, PeKind::Cspe, behavior).inputs(&["in"]).output("out")
}

fn endpoints(b: &mut Builder, bind: &Bindings, sink_inputs: &[&str]) {
    b.pe(PeConfig::new("source", PeKind::Ape, bind.get_or("source", "source")).output("out"), false);
    b.pe(PeConfig::new("sink", PeKind::Ape, bind.get_or("sink", "sink")).inputs(sink_inputs), false);
}

pub fn build_pattern(spec: &PatternSpec, bind: &Bindings) -> Result<Fragment, PatternError> {
    let name = serde_json::to_value(spec.pattern)
        .ok()
        .and_then(|v| v.as_str().map(str::to_owned))
        .unwrap_or_default();
    let mut b = Builder::new(&name);
    match spec.pattern {
        PatternKind::QaLoop => {
            let crowd = bind.get("crowd")?;
            let agg = bind.get("aggregator")?;
            endpoints(&mut b, bind, &["in"]);
            b.pe(cspe("crowd", crowd).config_ports(&["more"]), true);
            b.pe(ape("aggregator", agg), true);
            b.flow("source", &[("crowd", "in")]);
            b.flow("crowd", &[("aggregator", "in")]);
            b.flow("aggregator", &[("sink", "in")]);
            b.control("aggregator", "crowd", "more");
            Ok(b.finish("crowd", "aggregator"))
        }
        PatternKind::SkillAssignment => {
            let assigner = bind.get("assigner")?;
            let crowd = bind.get("crowd")?;
            endpoints(&mut b, bind, &["in"]);
            b.pe(ape("assigner", assigner), true);
            b.pe(cspe("crowd", crowd).config_ports(&["directive"]), true);
            b.flow("source", &[("assigner", "in")]);
            b.flow("assigner", &[("crowd", "in")]);
            b.flow("crowd", &[("sink", "in")]);
            b.control("assigner", "crowd", "directive");
            Ok(b.finish("assigner", "crowd"))
        }
        PatternKind::DetectVerify => {
            let detector = bind.get("detector")?;
            let crowd = bind.get("crowd")?;
            endpoints(&mut b, bind, &["in"]);
            let mut det = ape("detector", detector);
            if let Some(t) = spec.parameters.get("threshold") {
                det = det.param("threshold", t.clone());
            }
            b.pe(det, true);
            b.pe(cspe("verify", crowd), true);
            b.flow("source", &[("detector", "in")]);
            b.flow("detector", &[("verify", "in")]);
            b.flow("verify", &[("sink", "in")]);
            Ok(b.finish("detector", "verify"))
        }
        PatternKind::SupervisedLearning => {
            let classifier = bind.get("classifier")?;
            let sampler = bind.get("sampler")?;
            let crowd = bind.get("crowd")?;
            let learner = bind.get("learner")?;
            endpoints(&mut b, bind, &["in"]);
            b.pe(ape("classifier", classifier).config_ports(&["model"]), true);
            b.pe(ape("sampler", sampler), true);
            b.pe(cspe("crowd", crowd), true);
            b.pe(PeConfig::new("learner", PeKind::Ape, learner).inputs(&["in"]), true);
            b.flow("source", &[("classifier", "in")]);
            b.flow("classifier", &[("sink", "in"), ("sampler", "in")]);
            b.flow("sampler", &[("crowd", "in")]);
            b.flow("crowd", &[("learner", "in")]);
            b.control("learner", "classifier", "model");
            Ok(b.finish("classifier", "classifier"))
        }
        PatternKind::SubtaskChain => {
            let k = spec
                .parameters
                .get("stages")
                .and_then(|v| v.as_u64())
                .unwrap_or(2) as usize;
            if k < 2 {
                return Err(PatternError::InvalidChainLength(k));
            }
            let crowd = bind.get("crowd")?;
            let glue = bind.get_or("glue", "identity");
            let composition = spec
                .parameters
                .get("composition")
                .and_then(|v| v.as_str())
                .unwrap_or("serial");
            match composition {
                "serial" => {
                    endpoints(&mut b, bind, &["in"]);
                    let mut prev = "source".to_owned();
                    for i in 0..k {
                        let c = format!("crowd{i}");
                        b.pe(cspe(&c, crowd), true);
                        b.flow(&prev, &[(&c, "in")]);
                        prev = c;
                        if i + 1 < k {
                            let g = format!("glue{i}");
                            b.pe(ape(&g, glue), true);
                            b.flow(&prev, &[(&g, "in")]);
                            prev = g;
                        }
                    }
                    b.flow(&prev, &[("sink", "in")]);
                    Ok(b.finish("crowd0", &prev))
                }
                "parallel" | "hybrid" => {
                    let ports: Vec<String> = (0..k).map(|i| format!("in{i}")).collect();
                    let refs: Vec<&str> = ports.iter().map(String::as_str).collect();
                    endpoints(&mut b, bind, &refs);
                    let crowds: Vec<String> = (0..k).map(|i| format!("crowd{i}")).collect();
                    let targets: Vec<(&str, &str)> = crowds.iter().map(|c| (c.as_str(), "in")).collect();
                    if composition == "parallel" {
                        b.flow("source", &targets);
                    } else {
                        b.pe(ape("split", glue), true);
                        b.flow("source", &[("split", "in")]);
                        b.flow("split", &targets);
                    }
                    for (i, c) in crowds.iter().enumerate() {
                        b.pe(cspe(c, crowd), true);
                        let g = format!("glue{i}");
                        b.pe(ape(&g, glue), true);
                        b.flow(c, &[(&g, "in")]);
                        b.flow(&g, &[("sink", refs[i])]);
                    }
                    Ok(b.finish("crowd0", "sink"))
                }
                other => Err(PatternError::InvalidComposition(other.to_owned())),
            }
        }
        PatternKind::HumanOptional => {
            let auto = bind.get("auto")?;
            let crowd = bind.get("crowd")?;
            endpoints(&mut b, bind, &["auto", "crowd"]);
            b.pe(ape("auto", auto), true);
            b.pe(cspe("crowd", crowd), true);
            b.flow("source", &[("auto", "in"), ("crowd", "in")]);
            b.flow("auto", &[("sink", "auto")]);
            b.flow("crowd", &[("sink", "crowd")]);
            Ok(b.finish("auto", "crowd"))
        }
        PatternKind::HumanMandatory => {
            let crowd = bind.get("crowd")?;
            endpoints(&mut b, bind, &["in"]);
            b.pe(cspe("crowd", crowd), true);
            b.flow("source", &[("crowd", "in")]);
            b.flow("crowd", &[("sink", "in")]);
            Ok(b.finish("crowd", "crowd"))
        }
    }
}

/// Adjacency view of a topology's data flows.
#[derive(Clone, Debug)]
pub struct DataGraph {
    pub nodes: Vec<PeId>,
    pub cspe: Vec<bool>,
    pub sources: Vec<usize>,
    pub consumers: Vec<usize>,
    pub succ: Vec<Vec<usize>>,
    pub pred: Vec<Vec<usize>>,
}

impl DataGraph {
    pub fn from_topology(t: &Topology) -> Self {
        let nodes: Vec<PeId> = t.pes.keys().cloned().collect();
        let idx: BTreeMap<&PeId, usize> = nodes.iter().enumerate().map(|(i, p)| (p, i)).collect();
        let mut succ = vec![BTreeSet::new(); nodes.len()];
        let mut pred = vec![BTreeSet::new(); nodes.len()];
        for f in &t.data_flows {
            let (a, b) = (idx[&f.from], idx[&f.to]);
            succ[a].insert(b);
            pred[b].insert(a);
        }
        DataGraph {
            cspe: nodes.iter().map(|p| t.is_cspe(p)).collect(),
            sources: t.sources().map(|p| idx[p]).collect(),
            consumers: t.consumers().map(|p| idx[p]).collect(),
            succ: succ.into_iter().map(|s| s.into_iter().collect()).collect(),
            pred: pred.into_iter().map(|s| s.into_iter().collect()).collect(),
            nodes,
        }
    }

    fn path_ids(&self, path: &[usize]) -> Vec<PeId> {
        path.iter().map(|&i| self.nodes[i].clone()).collect()
    }
}

/// Result of a path property check, with the witnessing CSPE-free path.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PathCheck {
    pub holds: bool,
    pub path: Option<Vec<PeId>>,
}

/// Forward BFS from automatic sources through automatic elements.
fn cspe_free_path_forward(g: &DataGraph) -> Option<Vec<usize>> {
    let n = g.nodes.len();
    let mut parent: Vec<Option<usize>> = vec![None; n];
    let mut seen = vec![false; n];
    let mut queue = VecDeque::new();
    for &s in &g.sources {
        if !g.cspe[s] {
            seen[s] = true;
            queue.push_back(s);
        }
    }
    let is_consumer: BTreeSet<usize> = g.consumers.iter().copied().collect();
    while let Some(u) = queue.pop_front() {
        if is_consumer.contains(&u) {
            let mut path = vec![u];
            let mut cur = u;
            while let Some(p) = parent[cur] {
                path.push(p);
                cur = p;
            }
            path.reverse();
            return Some(path);
        }
        for &v in &g.succ[u] {
            if !seen[v] && !g.cspe[v] {
                seen[v] = true;
                parent[v] = Some(u);
                queue.push_back(v);
            }
        }
    }
    None
}

/// Backward BFS from automatic consumers; the path is read off the
/// successor pointers.
fn cspe_free_path_backward(g: &DataGraph) -> Option<Vec<usize>> {
    let n = g.nodes.len();
    let mut next: Vec<Option<usize>> = vec![None; n];
    let mut seen = vec![false; n];
    let mut stack = Vec::new();
    for &c in &g.consumers {
        if !g.cspe[c] {
            seen[c] = true;
            stack.push(c);
        }
    }
    let is_source: BTreeSet<usize> = g.sources.iter().copied().collect();
    while let Some(u) = stack.pop() {
        if is_source.contains(&u) {
            let mut path = vec![u];
            let mut cur = u;
            while let Some(nx) = next[cur] {
                path.push(nx);
                cur = nx;
            }
            return Some(path);
        }
        for &p in &g.pred[u] {
            if !seen[p] && !g.cspe[p] {
                seen[p] = true;
                next[p] = Some(u);
                stack.push(p);
            }
        }
    }
    None
}

/// True iff some source-to-consumer data path avoids every CSPE; the
/// witness is one such path.
pub fn check_human_optional(t: &Topology) -> PathCheck {
    let g = DataGraph::from_topology(t);
    let path = cspe_free_path_forward(&g);
    PathCheck {
        holds: path.is_some(),
        path: path.map(|p| g.path_ids(&p)),
    }
}

/// True iff every source-to-consumer data path passes a CSPE; otherwise the
/// returned path is a CSPE-free counterexample.
pub fn check_human_mandatory(t: &Topology) -> PathCheck {
    let g = DataGraph::from_topology(t);
    let path = cspe_free_path_backward(&g);
    PathCheck {
        holds: path.is_none(),
        path: path.map(|p| g.path_ids(&p)),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Composition {
    Serial,
    Parallel,
    Hybrid,
}

/// Serial: the data graph is one path. Parallel: two or more source to
/// consumer paths sharing no interior element and joined by no other edge.
/// Anything else is hybrid.
pub fn classify_composition(t: &Topology) -> Composition {
    let g = DataGraph::from_topology(t);
    if t.cycles() {
        return Composition::Hybrid;
    }
    let endpoint: BTreeSet<usize> = g.sources.iter().chain(&g.consumers).copied().collect();
    let interior_ok = (0..g.nodes.len())
        .filter(|i| !endpoint.contains(i))
        .all(|i| g.succ[i].len() == 1 && g.pred[i].len() == 1);
    // Each source out-edge starts exactly one path when interiors are chains.
    let paths: usize = g.sources.iter().map(|&s| g.succ[s].len()).sum();
    if !interior_ok {
        return Composition::Hybrid;
    }
    let single = g.sources.len() == 1 && g.consumers.len() == 1 && paths == 1;
    match paths {
        1 if single => Composition::Serial,
        n if n >= 2 => Composition::Parallel,
        _ => Composition::Hybrid,
    }
}

/// CSPEs on human-mandatory paths whose configured `min_labels` is below
/// `min`. Informational; the runtime does not enforce it.
pub fn redundancy_shortfalls(t: &Topology, min: u32) -> Vec<PeId> {
    t.pes
        .values()
        .filter(|p| p.is_cspe())
        .filter(|p| {
            let have = p
                .behavior
                .params
                .get("min_labels")
                .and_then(|v| v.as_u64())
                .unwrap_or(3) as u32;
            have < min
        })
        .map(|p| p.pe_id.clone())
        .collect()
}
