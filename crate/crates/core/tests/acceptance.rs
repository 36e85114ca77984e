//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero when any fails.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use cspflow::crowd::{
    aggregate, crowd_capacity, generate_task, AggregationConfig, AggregationStatus, Answer, AssignPolicy,
    LabelRecord, TaskKind, TaskTemplate,
};
use cspflow::harness::*;
use cspflow::learning::{auc, features_of_text, Learner, LearnerConfig, SelectionMode};
use cspflow::metrics::EventKind;
use cspflow::patterns::{check_human_mandatory, check_human_optional};
use cspflow::topology::{ChannelConfig, PeConfig};
use cspflow::{build_topology, DataItem, ItemId, Modality, PeId, PeKind, Payload, ShedPolicy, Timestamp, Topology, TopologyConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = fn() -> Outcome;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(limit: Duration, start: Instant, res: Outcome) -> Outcome {
    let took = start.elapsed();
    let tag = format!("{:.2}s, limit {}s", took.as_secs_f64(), limit.as_secs());
    match res {
        Ok(d) if took < limit => Ok(format!("{d} ({tag})")),
        Ok(d) => Err(format!("{d} (too slow: {tag})")),
        Err(d) => Err(format!("{d} ({tag})")),
    }
}

fn here() -> &'static Path {
    Path::new(".")
}

fn generated(n: usize) -> ScenarioConfig {
    let mut cfg = ScenarioConfig::default();
    cfg.dataset.generate.as_mut().unwrap().n = n;
    cfg
}

// ---------------------------------------------------------------- 1

fn set_policy(t: &mut Topology, channel: &str, policy: ShedPolicy, capacity: usize) {
    let spec = t.channels.get_mut(&channel.into()).expect("channel");
    spec.shed_policy = policy;
    spec.capacity = capacity;
}

fn flow_conservation() -> Outcome {
    type Tweak = Box<dyn Fn(&mut Topology)>;
    let mut matrix: Vec<(&str, ScenarioConfig, Option<Tweak>)> = Vec::new();
    matrix.push(("passive", generated(3000), None));
    let mut c = generated(3000);
    c.learning.mode = SelectionMode::Active;
    c.learning.dedup = true;
    matrix.push(("active+dedup", c, None));
    let mut c = generated(10_000);
    c.shape.rate = 2000.0;
    matrix.push(("overload drop_newest", c.clone(), None));
    matrix.push((
        "overload drop_oldest",
        c.clone(),
        Some(Box::new(|t: &mut Topology| {
            set_policy(t, "collected", ShedPolicy::DropOldest, 4);
            set_policy(t, "extracted", ShedPolicy::DropOldest, 4);
        })),
    ));
    matrix.push((
        "overload block",
        c,
        Some(Box::new(|t: &mut Topology| {
            set_policy(t, "collected", ShedPolicy::Block, 2);
            set_policy(t, "extracted", ShedPolicy::Block, 2);
        })),
    ));
    let mut c = generated(3000);
    c.crowd.budget = Some(100);
    matrix.push(("fixed budget 100", c, None));
    let mut c = generated(3000);
    c.max_time_s = Some(30.0);
    matrix.push(("truncated at 30 s", c, None));
    let mut c = generated(3000);
    c.crowd.policy = AssignPolicy::SkillBased;
    c.crowd.aggregation.trust_weighted = true;
    c.crowd.accuracy = 0.7;
    c.crowd.workers = 5;
    matrix.push(("skill-based trust-weighted small crowd", c, None));
    let mut c = generated(4000);
    c.shape.rate = 600.0;
    c.shape.queue_capacity = 1;
    matrix.push(("unit queues", c, None));

    let mut lines = Vec::new();
    let mut ok = true;
    let mut with_in_flight = 0;
    for (name, cfg, tweak) in matrix {
        let start = Instant::now();
        let mut prepared = prepare(&cfg, here(), None).map_err(|e| format!("{name}: {e}"))?;
        if let Some(f) = tweak {
            f(&mut prepared.topology);
        }
        let out = execute(prepared, &cfg).map_err(|e| format!("{name}: {e}"))?;
        let f = &out.flow;
        let took = start.elapsed();
        let exact = f.ingested == f.attributed + f.shed + f.filtered + f.in_flight
            && f.errored == 0
            && f.unaccounted.is_empty()
            && f.ingested > 0;
        let fast = took < Duration::from_secs(10);
        if f.in_flight > 0 {
            with_in_flight += 1;
        }
        if !(exact && fast) {
            ok = false;
            lines.push(format!("{name}: {f:?} in {:.2}s", took.as_secs_f64()));
        }
    }
    if with_in_flight == 0 {
        ok = false;
        lines.push("no scenario left items in flight".into());
    }
    check(ok, if lines.is_empty() { "9 scenarios balance exactly, each < 10 s".into() } else { lines.join("; ") })
}

// ---------------------------------------------------------------- 2

/// Service rate of the slowest stage, from the per-item cost model applied
/// to the generated texts directly.
fn slowest_stage_rate(cfg: &ScenarioConfig) -> f64 {
    let data = generate_dataset(&DatasetParams {
        seed: cfg.seed,
        ..cfg.dataset.generate.clone().unwrap()
    })
    .unwrap();
    let s = &cfg.shape;
    let (mut ext, mut cls) = (0.0, 0.0);
    for r in &data {
        let toks: Vec<String> = r
            .text
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(str::to_lowercase)
            .collect();
        let mut distinct: BTreeSet<String> = toks.iter().cloned().collect();
        for w in toks.windows(2) {
            distinct.insert(format!("{} {}", w[0], w[1]));
        }
        ext += s.extractor_base_us + s.extractor_per_token_us * toks.len() as f64;
        cls += s.classifier_base_us + s.classifier_per_token_us * distinct.len() as f64;
    }
    let n = data.len() as f64;
    let slowest_us = (ext / n).max(cls / n);
    1e6 / slowest_us
}

fn load_adaptability() -> Outcome {
    let cfg = ScenarioConfig::default();
    let sweep = run_sweep(&cfg, here()).map_err(|e| e.to_string())?;
    let cap = sweep.capacity;
    let mut bad = Vec::new();
    let oracle = slowest_stage_rate(&cfg);
    if (cap / oracle - 1.0).abs() > 0.10 {
        bad.push(format!("capacity {cap:.1}/s vs slowest stage {oracle:.1}/s"));
    }
    let mut p95_1x = None;
    let mut p95_4x = None;
    for (m, row) in cfg.sweep.multipliers.iter().zip(&sweep.rows) {
        if *m >= 1.0 && (row.throughput / cap - 1.0).abs() > 0.10 {
            bad.push(format!("{m}x throughput {:.1}", row.throughput));
        }
        if *m < 1.0 && row.shed_count != 0 {
            bad.push(format!("{m}x shed {}", row.shed_count));
        }
        if *m == 1.0 {
            p95_1x = Some(row.latency_p95);
        }
        if *m == 4.0 {
            p95_4x = Some(row.latency_p95);
        }
    }
    let (p1, p4) = (p95_1x.ok_or("no 1x row")?, p95_4x.ok_or("no 4x row")?);
    if p4 > 2.0 * p1 {
        bad.push(format!("p95 {p4:.2} ms at 4x > 2 x {p1:.2} ms"));
    }
    let thr: Vec<String> = sweep.rows.iter().map(|r| format!("{:.0}", r.throughput)).collect();
    let detail = format!(
        "capacity {cap:.1}/s (stage oracle {oracle:.1}/s), throughput [{}], p95 1x {p1:.2} ms 4x {p4:.2} ms",
        thr.join(", ")
    );
    if bad.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{detail}; {}", bad.join("; ")))
    }
}

// ---------------------------------------------------------------- 3

/// Mean over seeds of (labels used, AUC) per model version.
fn mean_curve(mode: SelectionMode, dedup: bool, seeds: u64, n: usize) -> Result<BTreeMap<u64, (f64, f64)>, String> {
    let mut acc: BTreeMap<u64, (f64, f64, u32)> = BTreeMap::new();
    for seed in 1..=seeds {
        let mut cfg = generated(n);
        cfg.seed = seed;
        cfg.learning.mode = mode;
        cfg.learning.dedup = dedup;
        let out = run_scenario(&cfg, here()).map_err(|e| e.to_string())?;
        for c in &out.curve {
            if let Some(a) = c.auc {
                let e = acc.entry(c.version).or_default();
                e.0 += c.labels_used as f64;
                e.1 += a;
                e.2 += 1;
            }
        }
    }
    // Only versions every seed reached.
    Ok(acc
        .into_iter()
        .filter(|(_, (_, _, k))| *k as u64 == seeds)
        .map(|(v, (l, a, k))| (v, (l / k as f64, a / k as f64)))
        .collect())
}

fn auc_at_400(curve: &BTreeMap<u64, (f64, f64)>) -> Option<(f64, f64)> {
    curve.values().rev().find(|(l, _)| *l <= 400.0).copied()
}

fn quality_vs_labels() -> Outcome {
    let mut curves = BTreeMap::new();
    for mode in [SelectionMode::Passive, SelectionMode::Active] {
        for dedup in [false, true] {
            curves.insert((mode.as_str(), dedup), mean_curve(mode, dedup, 10, 3000)?);
        }
    }
    let base = &curves[&("passive", false)];
    let deduped = &curves[&("passive", true)];
    let (labels_off, target) = auc_at_400(base).ok_or("no checkpoint below 400 labels")?;
    let reached = deduped.values().find(|(_, a)| *a >= target).map(|(l, _)| *l);
    let summary: Vec<String> = curves
        .iter()
        .map(|((m, d), c)| {
            let a = auc_at_400(c).map(|(_, a)| format!("{a:.3}")).unwrap_or("n/a".into());
            format!("{m}{}={a}", if *d { "+dedup" } else { "" })
        })
        .collect();
    let mut detail = format!("AUC@400 {}; target {target:.3} at {labels_off:.0} labels", summary.join(" "));
    let ok = match reached {
        Some(l) => {
            let ratio = l / labels_off;
            detail.push_str(&format!(", dedup reaches it at {l:.0} (ratio {ratio:.2})"));
            target >= 0.85 && ratio <= 0.6
        }
        None => {
            detail.push_str(", dedup never reaches it");
            false
        }
    };
    check(ok, detail)
}

// ---------------------------------------------------------------- 4

fn capacity_arithmetic() -> Outcome {
    let a = crowd_capacity(1, 9.0, 1);
    let b = crowd_capacity(3000, 9.0, 3);
    let c = crowd_capacity(500, 9.0, 3);
    check(
        a == 400 && b == 400_000 && c.abs_diff(66_667) <= 1,
        format!("(1, 9 s, 1) -> {a}/h, (3000, 9 s, 3) -> {b}/h, (500, 9 s, 3) -> {c}/h"),
    )
}

// ---------------------------------------------------------------- 5

fn pairwise_auc(s: &[(f64, bool)]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for p in s.iter().filter(|x| x.1) {
        for n in s.iter().filter(|x| !x.1) {
            pairs += 1.0;
            if p.0 > n.0 {
                wins += 1.0;
            } else if p.0 == n.0 {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

fn auc_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut tied_sets = 0;
    for k in 0..1000 {
        let n = rng.gen_range(2..=50);
        let levels = rng.gen_range(2..=12);
        let mut s: Vec<(f64, bool)> = (0..n)
            .map(|_| (rng.gen_range(0..levels) as f64 / levels as f64, rng.gen_bool(0.5)))
            .collect();
        // Both classes present.
        s[0].1 = true;
        s[1].1 = false;
        let distinct: BTreeSet<u64> = s.iter().map(|x| x.0.to_bits()).collect();
        if distinct.len() < s.len() {
            tied_sets += 1;
        }
        let got = auc(&s).map_err(|e| e.to_string())?;
        let want = pairwise_auc(&s);
        if got != want {
            return Err(format!("set {k}: {got} vs brute force {want}"));
        }
    }
    check(tied_sets > 0, format!("1000 sets of size 2..50 match exactly, {tied_sets} with ties"))
}

// ---------------------------------------------------------------- 6

fn aggregation_oracle() -> Outcome {
    let tpl = TaskTemplate {
        kind: TaskKind::NAry,
        question: "{text}".into(),
        options: vec!["a".into(), "b".into(), "c".into()],
        category: None,
    };
    let item = DataItem::from_source(ItemId(1), Payload::Text("x".into()), Timestamp::ZERO);
    let cfgs = [
        AggregationConfig::default(),
        AggregationConfig {
            min_labels: 1,
            agreement_q: 0.5,
            max_labels_r: 4,
            trust_weighted: false,
        },
    ];
    let mut multisets = BTreeSet::new();
    let mut checked = 0;
    for cfg in &cfgs {
        let task = generate_task(1, &item, &tpl, cfg, Timestamp::ZERO).map_err(|e| e.to_string())?;
        for len in 0..=5u32 {
            for code in 0..3usize.pow(len) {
                let mut answers = Vec::new();
                let mut c = code;
                for _ in 0..len {
                    answers.push(c % 3);
                    c /= 3;
                }
                let labels: Vec<LabelRecord> = answers
                    .iter()
                    .enumerate()
                    .map(|(i, a)| LabelRecord {
                        task_id: 1,
                        item_id: ItemId(1),
                        worker_id: format!("w{i}").into(),
                        answer: Answer::Option(*a),
                        submitted_ts: Timestamp::ZERO,
                        latency_ms: 0.0,
                    })
                    .collect();
                let mut tally = [0u32; 3];
                for a in &answers {
                    tally[*a] += 1;
                }
                multisets.insert(tally);
                let out = aggregate(&task, &labels, cfg, &BTreeMap::new()).map_err(|e| e.to_string())?;
                let top_count = *tally.iter().max().unwrap();
                let top = tally.iter().position(|t| *t == top_count).unwrap();
                let support = if len == 0 { 0.0 } else { top_count as f64 / len as f64 };
                let expect = if len < cfg.min_labels {
                    (AggregationStatus::NeedsMore, None)
                } else if support >= cfg.agreement_q {
                    (AggregationStatus::Decided, Some(Answer::Option(top)))
                } else if len < cfg.max_labels_r {
                    (AggregationStatus::NeedsMore, None)
                } else {
                    (AggregationStatus::Exhausted, Some(Answer::Option(top)))
                };
                if (out.status, out.decided_label.clone()) != expect || out.labels_used != len {
                    return Err(format!("{answers:?} under {cfg:?}: got {:?}/{:?}", out.status, out.decided_label));
                }
                checked += 1;
            }
        }
    }
    Ok(format!("{checked} label sequences ({} multisets) over 3 options agree with the tally", multisets.len()))
}

// ---------------------------------------------------------------- 7

/// Directed graph on `n` PEs: p0 is the only source, p{n-1} the only
/// consumer, every other PE has one input and one output port.
fn digraph(n: usize, edges: &[(usize, usize)]) -> TopologyConfig {
    let mut cfg = TopologyConfig::new("g");
    for i in 0..n {
        let mut pe = PeConfig::new(&format!("p{i}"), PeKind::Ape, "x");
        if i > 0 {
            pe = pe.inputs(&["in"]);
        }
        if i + 1 < n {
            pe = pe.output("out");
        }
        cfg = cfg.pe(pe);
    }
    for i in 0..n {
        let outs: Vec<usize> = edges.iter().filter(|e| e.0 == i).map(|e| e.1).collect();
        if outs.is_empty() {
            continue;
        }
        let ch = format!("o{i}");
        let modality = if outs.len() > 1 { Modality::Broadcast } else { Modality::PointToPoint };
        cfg = cfg.channel(ChannelConfig::data(&ch, modality, 4));
        for j in outs {
            cfg = cfg.data_flow(&format!("p{i}.out"), &format!("p{j}.in"), &ch);
        }
    }
    cfg
}

/// Whether some simple path p0 -> p{n-1} avoids the CSPEs in `mask`.
fn free_path_exists(n: usize, edges: &[(usize, usize)], mask: u32) -> bool {
    fn dfs(u: usize, n: usize, edges: &[(usize, usize)], mask: u32, seen: &mut Vec<bool>) -> bool {
        if mask & (1 << u) != 0 {
            return false;
        }
        if u == n - 1 {
            return true;
        }
        seen[u] = true;
        let found = edges.iter().any(|&(a, b)| a == u && !seen[b] && dfs(b, n, edges, mask, seen));
        seen[u] = false;
        found
    }
    dfs(0, n, edges, mask, &mut vec![false; n])
}

fn pattern_duality() -> Outcome {
    let mut graphs = 0u64;
    let mut checks = 0u64;
    let mut mandatory = 0u64;
    for n in 2..=5usize {
        let candidates: Vec<(usize, usize)> = (0..n - 1)
            .flat_map(|a| (1..n).filter(move |&b| b != a).map(move |b| (a, b)))
            .collect();
        for set in 1u32..(1 << candidates.len()) {
            let edges: Vec<(usize, usize)> =
                candidates.iter().enumerate().filter(|(i, _)| set & (1 << i) != 0).map(|(_, e)| *e).collect();
            let Ok(mut topo) = build_topology(&digraph(n, &edges)) else {
                continue;
            };
            graphs += 1;
            let ids: Vec<PeId> = (0..n).map(|i| PeId::new(format!("p{i}"))).collect();
            for mask in 1u32..(1 << n) {
                for (i, id) in ids.iter().enumerate() {
                    topo.pes.get_mut(id).unwrap().kind = if mask & (1 << i) != 0 { PeKind::Cspe } else { PeKind::Ape };
                }
                let opt = check_human_optional(&topo).holds;
                let man = check_human_mandatory(&topo).holds;
                let oracle = free_path_exists(n, &edges, mask);
                if opt == man || opt != oracle {
                    return Err(format!("n={n} edges={edges:?} cspe mask {mask:b}: optional {opt}, mandatory {man}, oracle {oracle}"));
                }
                checks += 1;
                mandatory += man as u64;
            }
        }
    }
    Ok(format!("{graphs} valid digraphs, {checks} CSPE assignments, {mandatory} human-mandatory"))
}

// ---------------------------------------------------------------- 8

fn retrain_cadence() -> Outcome {
    let mut learner = Learner::new(LearnerConfig::default());
    let classes = LearnerConfig::default().classes;
    let mut versions = Vec::new();
    for i in 0..1000u64 {
        let class = &classes[(i % 3 % 2) as usize];
        let text = format!("w{} w{} {class}", i % 17, i % 29);
        if let Some(m) = learner
            .ingest_label(features_of_text(ItemId(i), &text), class, Timestamp(i))
            .map_err(|e| e.to_string())?
        {
            versions.push(m.version);
        }
    }
    let monotone = versions.windows(2).all(|w| w[0] < w[1]) && versions.first() == Some(&1);
    let curve_ok = learner.curve().iter().map(|c| c.version).eq(versions.iter().copied());
    check(
        learner.retrains() == 16 && learner.train_count() == 800 && learner.test_count() == 200 && monotone && curve_ok,
        format!(
            "{} retrains, {} train / {} test, versions {:?}",
            learner.retrains(),
            learner.train_count(),
            learner.test_count(),
            versions
        ),
    )
}

// ---------------------------------------------------------------- 9

fn determinism() -> Outcome {
    let seed_dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let first = ScenarioConfig::default();
    write_outputs(seed_dir.path(), &first, &run_scenario(&first, here()).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let manifest = seed_dir.path().join("manifest.json");
    let mut outputs = Vec::new();
    for _ in 0..2 {
        let (cfg, base) = ScenarioConfig::load(&manifest).map_err(|e| e.to_string())?;
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let out = run_scenario(&cfg, &base).map_err(|e| e.to_string())?;
        write_outputs(dir.path(), &cfg, &out).map_err(|e| e.to_string())?;
        outputs.push(dir);
    }
    let mut compared = Vec::new();
    for f in ["metrics.csv", "quality.csv", "labels.csv", "shed.csv"] {
        let a = std::fs::read(outputs[0].path().join(f)).map_err(|e| e.to_string())?;
        let b = std::fs::read(outputs[1].path().join(f)).map_err(|e| e.to_string())?;
        let c = std::fs::read(seed_dir.path().join(f)).map_err(|e| e.to_string())?;
        if a != b || a != c {
            return Err(format!("{f} differs between runs"));
        }
        compared.push(format!("{f} {}B", a.len()));
    }
    Ok(format!("identical: {}", compared.join(", ")))
}

// ---------------------------------------------------------------- 10

fn budget_safety() -> Outcome {
    let mut cfg = generated(10_000);
    // Well above capacity, yet enough classified items to outrun the budget.
    cfg.shape.rate = 1000.0;
    cfg.crowd.budget = Some(500);
    cfg.crowd.workers = 200;
    cfg.crowd.speed_mean_ms = 200.0;
    cfg.crowd.jitter_ms = 100.0;
    let prepared = prepare(&cfg, here(), None).map_err(|e| e.to_string())?;
    if !check_human_optional(&prepared.topology).holds {
        return Err("pipeline is not human-optional".into());
    }
    let out = execute(prepared, &cfg).map_err(|e| e.to_string())?;
    let log = out.log();
    let labels = out.labels.len();
    let ingested: BTreeSet<ItemId> = log.of_kind(EventKind::Ingested).map(|r| r.item_id).collect();
    let classified: BTreeSet<ItemId> = log
        .of_kind(EventKind::Emitted)
        .filter(|r| r.location == "output")
        .flat_map(|r| r.lineage.ids().collect::<Vec<_>>())
        .collect();
    let shed: BTreeSet<ItemId> = log.sheds.iter().flat_map(|s| s.lineage.ids().collect::<Vec<_>>()).collect();
    let missing = ingested.iter().filter(|id| !classified.contains(id) && !shed.contains(id)).count();
    check(
        labels <= 500 && out.env.board.lock().unwrap().labels_total == labels as u64 && missing == 0 && ingested.len() == 10_000,
        format!(
            "{labels} labels, {} of {} items classified, {} shed, {missing} neither",
            classified.len(),
            ingested.len(),
            ingested.len() - classified.len()
        ),
    )
}

fn main() {
    let criteria: [(&str, u64, Criterion); 10] = [
        ("flow conservation", 90, flow_conservation),
        ("load adaptability", 60, load_adaptability),
        ("quality vs labels", 300, quality_vs_labels),
        ("crowd capacity arithmetic", 1, capacity_arithmetic),
        ("AUC oracle", 5, auc_oracle),
        ("aggregation oracle", 1, aggregation_oracle),
        ("pattern duality", 30, pattern_duality),
        ("retrain cadence", 1, retrain_cadence),
        ("determinism", 20, determinism),
        ("budget safety", 30, budget_safety),
    ];
    let filter = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let mut failed = 0;
    let mut ran = 0;
    for (i, (name, limit, f)) in criteria.into_iter().enumerate() {
        if filter.as_deref().is_some_and(|p| !name.contains(p)) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let res = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match within(Duration::from_secs(limit), start, res) {
            Ok(d) => println!("PASS [{:>2}] {name}: {d}", i + 1),
            Err(d) => {
                failed += 1;
                println!("FAIL [{:>2}] {name}: {d}", i + 1)
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
