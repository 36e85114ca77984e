//! Run measurement: event log, latency (first-output rule), throughput,
//! flow accounting, load sweeps and cost/quality reports.

use std::collections::{BTreeMap, BTreeSet};
use std::io;

use serde::Serialize;
use thiserror::Error;

use crate::channels::ShedRecord;
use crate::crowd::{CrowdBudget, LabelRecord};
use crate::learning::QualityCheckpoint;
use crate::model::{ItemId, Lineage, Timestamp};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Ingested,
    /// An item finished at a consumer.
    Emitted,
    Shed,
    Filtered,
    Errored,
    Labeled,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EventRecord {
    pub item_id: ItemId,
    pub kind: EventKind,
    /// PE or channel id.
    pub location: String,
    pub ts: Timestamp,
    pub lineage: Lineage,
}

#[derive(Clone, Debug, Default)]
pub struct EventLog {
    pub records: Vec<EventRecord>,
    pub sheds: Vec<ShedRecord>,
    pub labels: Vec<LabelRecord>,
    pub checkpoints: Vec<QualityCheckpoint>,
}

impl EventLog {
    pub fn record(&mut self, kind: EventKind, item_id: ItemId, loc: &str, ts: Timestamp, lineage: Lineage) {
        self.records.push(EventRecord {
            item_id,
            kind,
            location: loc.to_owned(),
            ts,
            lineage,
        });
    }

    /// Records an event about a set of source items; the record's item id is
    /// the lowest tracked id (0 when untracked).
    pub fn record_lineage(&mut self, kind: EventKind, loc: &str, ts: Timestamp, lineage: Lineage) {
        let id = lineage.ids().next().unwrap_or(ItemId(0));
        self.record(kind, id, loc, ts, lineage);
    }

    pub fn record_shed(&mut self, rec: ShedRecord) {
        self.record(
            EventKind::Shed,
            rec.item_id,
            rec.channel_id.as_str(),
            rec.shed_ts,
            rec.lineage.clone(),
        );
        self.sheds.push(rec);
    }

    pub fn record_label(&mut self, label: LabelRecord, loc: &str, lineage: Lineage) {
        self.record(EventKind::Labeled, label.item_id, loc, label.submitted_ts, lineage);
        self.labels.push(label);
    }

    pub fn of_kind(&self, kind: EventKind) -> impl Iterator<Item = &EventRecord> {
        self.records.iter().filter(move |r| r.kind == kind)
    }

    pub fn count(&self, kind: EventKind) -> usize {
        self.of_kind(kind).count()
    }

    /// (first, last) ingest times.
    pub fn ingest_span(&self) -> Option<(Timestamp, Timestamp)> {
        let mut it = self.of_kind(EventKind::Ingested).map(|r| r.ts);
        let first = it.next()?;
        let (lo, hi) = it.fold((first, first), |(lo, hi), t| (lo.min(t), hi.max(t)));
        Some((lo, hi))
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("item {0} was never ingested")]
    UnknownItem(ItemId),
    #[error("empty measurement window")]
    EmptyWindow,
    #[error("sweep rates must be ascending")]
    UnsortedRates,
    #[error("run at rate {rate}: {message}")]
    Run { rate: f64, message: String },
}

/// Latency in ms of one input item, or `None` if it never reached an output.
pub fn item_latency(log: &EventLog, id: ItemId) -> Result<Option<f64>, MetricsError> {
    let ingest = log
        .of_kind(EventKind::Ingested)
        .find(|r| r.item_id == id)
        .ok_or(MetricsError::UnknownItem(id))?
        .ts;
    Ok(log
        .of_kind(EventKind::Emitted)
        .filter(|r| r.lineage.contains(id))
        .map(|r| r.ts)
        .min()
        .map(|t| t.since(ingest).as_millis()))
}

/// Latencies (ms) of every ingested item that reached an output, in one pass.
pub fn all_latencies(log: &EventLog) -> BTreeMap<ItemId, f64> {
    let mut ingest = BTreeMap::new();
    for r in log.of_kind(EventKind::Ingested) {
        ingest.entry(r.item_id).or_insert(r.ts);
    }
    first_outputs(log)
        .into_iter()
        .filter_map(|(id, out)| ingest.get(&id).map(|t| (id, out.since(*t).as_millis())))
        .collect()
}

/// Input items per second whose first output falls within `[start, end)`.
/// Each ingested item counts once however many outputs it reaches.
pub fn throughput(log: &EventLog, start: Timestamp, end: Timestamp) -> Result<f64, MetricsError> {
    if end <= start {
        return Err(MetricsError::EmptyWindow);
    }
    let n = first_outputs(log)
        .into_values()
        .filter(|t| *t >= start && *t < end)
        .count();
    Ok(n as f64 / end.since(start).0 as f64 * 1e9)
}

fn first_outputs(log: &EventLog) -> BTreeMap<ItemId, Timestamp> {
    let mut first: BTreeMap<ItemId, Timestamp> = BTreeMap::new();
    for r in log.of_kind(EventKind::Emitted) {
        for id in r.lineage.ids() {
            first
                .entry(id)
                .and_modify(|t| *t = (*t).min(r.ts))
                .or_insert(r.ts);
        }
    }
    first
}

/// Nearest-rank percentile, `p` in (0, 100]. `sorted` must be ascending.
pub fn percentile(sorted: &[f64], p: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
    Some(sorted[rank.min(sorted.len()) - 1])
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct LatencySummary {
    pub count: usize,
    pub mean: f64,
    pub p50: f64,
    pub p95: f64,
}

pub fn latency_summary(values: impl IntoIterator<Item = f64>) -> LatencySummary {
    let mut v: Vec<f64> = values.into_iter().collect();
    if v.is_empty() {
        return LatencySummary::default();
    }
    v.sort_by(f64::total_cmp);
    LatencySummary {
        count: v.len(),
        mean: v.iter().sum::<f64>() / v.len() as f64,
        p50: percentile(&v, 50.0).unwrap_or(0.0),
        p95: percentile(&v, 95.0).unwrap_or(0.0),
    }
}

/// Where each ingested item ended up. An item is attributed if any output
/// carries it; otherwise the first matching of in-flight, errored, shed,
/// filtered is used.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct FlowAccount {
    pub ingested: u64,
    pub attributed: u64,
    pub in_flight: u64,
    pub errored: u64,
    pub shed: u64,
    pub filtered: u64,
    pub unaccounted: Vec<ItemId>,
}

impl FlowAccount {
    pub fn balanced(&self) -> bool {
        self.unaccounted.is_empty()
            && self.ingested
                == self.attributed + self.in_flight + self.errored + self.shed + self.filtered
    }
}

pub fn flow_accounting(log: &EventLog, in_flight: &[Lineage]) -> FlowAccount {
    let ids_of = |kind: EventKind| -> BTreeSet<ItemId> {
        log.of_kind(kind).flat_map(|r| r.lineage.ids()).collect()
    };
    let attributed = ids_of(EventKind::Emitted);
    let errored = ids_of(EventKind::Errored);
    let shed = ids_of(EventKind::Shed);
    let filtered = ids_of(EventKind::Filtered);
    let pending: BTreeSet<ItemId> = in_flight.iter().flat_map(|l| l.ids()).collect();
    let mut acc = FlowAccount::default();
    let ingested: BTreeSet<ItemId> = log.of_kind(EventKind::Ingested).map(|r| r.item_id).collect();
    for id in ingested {
        acc.ingested += 1;
        if attributed.contains(&id) {
            acc.attributed += 1;
        } else if pending.contains(&id) {
            acc.in_flight += 1;
        } else if errored.contains(&id) {
            acc.errored += 1;
        } else if shed.contains(&id) {
            acc.shed += 1;
        } else if filtered.contains(&id) {
            acc.filtered += 1;
        } else {
            acc.unaccounted.push(id);
        }
    }
    acc
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub window_start: Timestamp,
    pub window_end: Timestamp,
    pub input_rate: f64,
    pub throughput: f64,
    pub latency_mean_ms: f64,
    pub latency_p50: f64,
    pub latency_p95: f64,
    pub shed_count: u64,
    pub labels_used: u64,
    pub cost: f64,
    pub auc: Option<f64>,
}

/// Summarizes one run. The window is the ingest span; throughput counts
/// outputs produced while input was still being offered. `shed_count` is
/// the number of input items lost to shedding: items shed on one branch
/// that still reached a consumer on another are not counted.
pub fn summarize(log: &EventLog, input_rate: f64) -> MetricsRecord {
    let (start, end) = log.ingest_span().unwrap_or_default();
    let tput = throughput(log, start, end).unwrap_or(0.0);
    let first = first_outputs(log);
    let lost: BTreeSet<ItemId> = log
        .of_kind(EventKind::Shed)
        .flat_map(|r| r.lineage.ids())
        .filter(|id| !first.contains_key(id))
        .collect();
    let lat = latency_summary(all_latencies(log).into_values());
    MetricsRecord {
        window_start: start,
        window_end: end,
        input_rate,
        throughput: tput,
        latency_mean_ms: lat.mean,
        latency_p50: lat.p50,
        latency_p95: lat.p95,
        shed_count: lost.len() as u64,
        labels_used: log.labels.len() as u64,
        cost: log.labels.len() as f64,
        auc: log.checkpoints.iter().rev().find_map(|c| c.auc),
    }
}

/// Something that can be run once per offered rate.
pub trait SweepTarget {
    fn run_at(&mut self, rate: f64) -> Result<EventLog, String>;
}

pub fn load_sweep(target: &mut dyn SweepTarget, rates: &[f64]) -> Result<Vec<MetricsRecord>, MetricsError> {
    if rates.windows(2).any(|w| w[0] > w[1]) {
        return Err(MetricsError::UnsortedRates);
    }
    rates
        .iter()
        .map(|&rate| {
            target
                .run_at(rate)
                .map(|log| summarize(&log, rate))
                .map_err(|message| MetricsError::Run { rate, message })
        })
        .collect()
}

/// Writes `rate,throughput,latency_mean,latency_p50,latency_p95,shed,labels,auc`.
pub fn write_metrics_csv<W: io::Write>(out: W, rows: &[MetricsRecord]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "rate",
        "throughput",
        "latency_mean",
        "latency_p50",
        "latency_p95",
        "shed",
        "labels",
        "auc",
    ])?;
    for r in rows {
        w.write_record([
            format!("{:.3}", r.input_rate),
            format!("{:.6}", r.throughput),
            format!("{:.6}", r.latency_mean_ms),
            format!("{:.6}", r.latency_p50),
            format!("{:.6}", r.latency_p95),
            r.shed_count.to_string(),
            r.labels_used.to_string(),
            r.auc.map(|a| format!("{a:.6}")).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostPoint {
    /// Crowd labels purchased by the time of the checkpoint.
    pub labels: u64,
    pub cost: f64,
    pub auc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostReport {
    pub labels_used: u64,
    pub cost: f64,
    pub labels_per_output: f64,
    pub curve: Vec<CostPoint>,
}

pub fn cost_report(log: &EventLog, budget: &CrowdBudget) -> CostReport {
    let labels_used = log.labels.len() as u64;
    let unit = budget.unit_cost();
    let outputs = log.count(EventKind::Emitted);
    let mut label_ts: Vec<Timestamp> = log.labels.iter().map(|l| l.submitted_ts).collect();
    label_ts.sort();
    let curve = log
        .checkpoints
        .iter()
        .filter_map(|cp| {
            let auc = cp.auc?;
            let labels = label_ts.partition_point(|t| *t <= cp.ts) as u64;
            Some(CostPoint {
                labels,
                cost: labels as f64 * unit,
                auc,
            })
        })
        .collect();
    CostReport {
        labels_used,
        cost: labels_used as f64 * unit,
        labels_per_output: if outputs == 0 {
            0.0
        } else {
            labels_used as f64 / outputs as f64
        },
        curve,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn log_of(events: &[(EventKind, u64, u64, &[u64])]) -> EventLog {
        let mut log = EventLog::default();
        for (kind, id, ts, lineage) in events {
            let lin = Lineage::union(lineage.iter().map(|i| Lineage::single(ItemId(*i))).collect::<Vec<_>>().iter());
            log.record(*kind, ItemId(*id), "x", Timestamp::from_millis(*ts as f64), lin);
        }
        log
    }

    #[test]
    fn latency_of_sole_output() {
        let log = log_of(&[
            (EventKind::Ingested, 1, 100, &[1]),
            (EventKind::Emitted, 9, 140, &[1]),
        ]);
        assert_eq!(item_latency(&log, ItemId(1)).unwrap(), Some(40.0));
    }

    #[test]
    fn latency_uses_first_output() {
        let log = log_of(&[
            (EventKind::Ingested, 1, 100, &[1]),
            (EventKind::Emitted, 8, 170, &[1]),
            (EventKind::Emitted, 9, 150, &[1, 2]),
        ]);
        assert_eq!(item_latency(&log, ItemId(1)).unwrap(), Some(50.0));
        assert_eq!(all_latencies(&log)[&ItemId(1)], 50.0);
    }

    #[test]
    fn shed_item_has_no_latency() {
        let log = log_of(&[
            (EventKind::Ingested, 1, 100, &[1]),
            (EventKind::Shed, 1, 101, &[1]),
        ]);
        assert_eq!(item_latency(&log, ItemId(1)).unwrap(), None);
        assert_eq!(
            item_latency(&log, ItemId(2)).unwrap_err(),
            MetricsError::UnknownItem(ItemId(2))
        );
    }

    #[test]
    fn throughput_counts_outputs_in_window() {
        let ids: Vec<[u64; 1]> = (0..100).map(|i| [i]).collect();
        let mut events: Vec<(EventKind, u64, u64, &[u64])> =
            ids.iter().map(|l| (EventKind::Emitted, l[0], l[0] * 20, &l[..])).collect();
        // A second output of an already counted item does not add to throughput.
        events.push((EventKind::Emitted, 3, 1990, &ids[3][..]));
        let log = log_of(&events);
        let t = throughput(&log, Timestamp::ZERO, Timestamp::from_millis(2000.0)).unwrap();
        assert!((t - 50.0).abs() < 1e-9);
        let t = throughput(&log, Timestamp::from_millis(1000.0), Timestamp::from_millis(2000.0)).unwrap();
        assert!((t - 50.0).abs() < 1e-9);
        let empty = EventLog::default();
        assert_eq!(throughput(&empty, Timestamp(0), Timestamp(10)).unwrap(), 0.0);
        assert_eq!(throughput(&empty, Timestamp(10), Timestamp(10)), Err(MetricsError::EmptyWindow));
    }

    #[test]
    fn nearest_rank() {
        let v: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(percentile(&v, 50.0), Some(10.0));
        assert_eq!(percentile(&v, 95.0), Some(19.0));
        assert_eq!(percentile(&v, 100.0), Some(20.0));
        assert_eq!(percentile(&[3.0], 1.0), Some(3.0));
    }

    #[test]
    fn flow_precedence() {
        let log = log_of(&[
            (EventKind::Ingested, 1, 0, &[1]),
            (EventKind::Ingested, 2, 0, &[2]),
            (EventKind::Ingested, 3, 0, &[3]),
            (EventKind::Ingested, 4, 0, &[4]),
            (EventKind::Shed, 1, 1, &[1]),
            (EventKind::Emitted, 5, 2, &[1]),
            (EventKind::Shed, 2, 1, &[2]),
            (EventKind::Filtered, 3, 1, &[3]),
        ]);
        let acc = flow_accounting(&log, &[Lineage::single(ItemId(4))]);
        assert_eq!((acc.attributed, acc.shed, acc.filtered, acc.in_flight), (1, 1, 1, 1));
        assert!(acc.balanced());
        let acc = flow_accounting(&log, &[]);
        assert_eq!(acc.unaccounted, vec![ItemId(4)]);
        assert!(!acc.balanced());
    }

    #[test]
    fn zero_label_cost_report() {
        let r = cost_report(&EventLog::default(), &CrowdBudget::per_task(0.05));
        assert_eq!(r.labels_used, 0);
        assert_eq!(r.cost, 0.0);
        assert!(r.curve.is_empty());
    }

    #[test]
    fn metrics_csv_header() {
        let mut out = Vec::new();
        write_metrics_csv(&mut out, &[]).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "rate,throughput,latency_mean,latency_p50,latency_p95,shed,labels,auc\n"
        );
    }

    struct Unsorted;
    impl SweepTarget for Unsorted {
        fn run_at(&mut self, _: f64) -> Result<EventLog, String> {
            Ok(EventLog::default())
        }
    }

    #[test]
    fn sweep_requires_ascending_rates() {
        assert_eq!(load_sweep(&mut Unsorted, &[2.0, 1.0]), Err(MetricsError::UnsortedRates));
        assert_eq!(load_sweep(&mut Unsorted, &[1.0, 2.0]).unwrap().len(), 2);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn p50_not_above_p95(mut v in proptest::collection::vec(0.0f64..1e4, 1..200)) {
                v.sort_by(f64::total_cmp);
                let s = latency_summary(v.iter().copied());
                prop_assert!(s.p50 <= s.p95);
                prop_assert!(s.p50 >= 0.0);
            }
        }
    }
}
