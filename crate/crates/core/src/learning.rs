//! Feature extraction, near-duplicate buffering, sample selection, the
//! incremental classifier and its quality measurement.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::io;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channels::stable_hash;
use crate::model::{DataItem, ItemId, Payload, Timestamp};

pub const DEFAULT_BUFFER_CAPACITY: usize = 1000;
pub const DEFAULT_JACCARD: f64 = 0.7;
pub const TEST_EVERY: u64 = 5;
pub const RETRAIN_EVERY: u64 = 50;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LearningError {
    #[error("item {0} has no text payload")]
    NonTextPayload(ItemId),
    #[error("buffer has no candidates after de-duplication")]
    EmptyAfterDedup,
    #[error("unknown class `{0}`")]
    UnknownClass(String),
    #[error("model has not been trained")]
    UntrainedModel,
    #[error("AUC undefined: test set has a single class")]
    SingleClassTestSet,
    #[error("bad model snapshot: {0}")]
    Snapshot(String),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub item_id: ItemId,
    pub features: BTreeMap<String, u32>,
}

impl FeatureVector {
    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    /// Unigram terms (bigrams are the `_`-joined ones).
    pub fn unigrams(&self) -> impl Iterator<Item = &str> {
        self.features.keys().map(String::as_str).filter(|t| !t.contains('_'))
    }

    /// Sorted hashes of the unigram set, used for Jaccard comparisons.
    pub fn signature(&self) -> Signature {
        let mut v: Vec<u64> = self.unigrams().map(|t| stable_hash(t.as_bytes())).collect();
        v.sort_unstable();
        v.dedup();
        Signature(v)
    }
}

/// A set of term hashes in ascending order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Signature(Vec<u64>);

impl Signature {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// |a ∩ b| / |a ∪ b|; 0 when both are empty.
pub fn jaccard(a: &Signature, b: &Signature) -> f64 {
    let (mut i, mut j, mut inter) = (0, 0, 0usize);
    while i < a.0.len() && j < b.0.len() {
        match a.0[i].cmp(&b.0[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    let union = a.0.len() + b.0.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

pub fn features_of_text(item_id: ItemId, text: &str) -> FeatureVector {
    let toks = tokenize(text);
    let mut features = BTreeMap::new();
    for t in &toks {
        *features.entry(t.clone()).or_insert(0) += 1;
    }
    for w in toks.windows(2) {
        *features.entry(format!("{}_{}", w[0], w[1])).or_insert(0) += 1;
    }
    FeatureVector { item_id, features }
}

/// Unigram and adjacent-bigram counts of an item's text.
pub fn extract_features(item: &DataItem) -> Result<FeatureVector, LearningError> {
    match &item.payload {
        Payload::Text(t) => Ok(features_of_text(item.item_id, t)),
        Payload::Value(v) => v
            .get("text")
            .and_then(|t| t.as_str())
            .map(|t| features_of_text(item.item_id, t))
            .ok_or(LearningError::NonTextPayload(item.item_id)),
    }
}

/// Features carried by an item: a `features` object in a structured payload
/// (as attached by the extractor) or, failing that, freshly extracted.
pub fn features_of(item: &DataItem) -> Result<FeatureVector, LearningError> {
    if let Payload::Value(v) = &item.payload {
        if let Some(f) = v.get("features") {
            if let Ok(features) = serde_json::from_value::<BTreeMap<String, u32>>(f.clone()) {
                return Ok(FeatureVector {
                    item_id: item.item_id,
                    features,
                });
            }
        }
    }
    extract_features(item)
}

/// Text of an item, from either payload form.
pub fn text_of(item: &DataItem) -> Option<&str> {
    match &item.payload {
        Payload::Text(t) => Some(t),
        Payload::Value(v) => v.get("text").and_then(|t| t.as_str()),
    }
}

#[derive(Clone, Debug)]
pub struct BufferedItem {
    /// Insertion counter; an item leaves the buffer once `capacity` newer
    /// items have been inserted.
    pub seq: u64,
    pub item: DataItem,
    pub features: FeatureVector,
    pub signature: Signature,
    pub confidence: f64,
    pub near_dup: bool,
    pub selected: bool,
}

/// Bounded buffer of the latest candidates, oldest evicted first.
#[derive(Clone, Debug)]
pub struct SampleBuffer {
    capacity: usize,
    threshold: f64,
    items: VecDeque<BufferedItem>,
    inserted: u64,
}

impl SampleBuffer {
    pub fn new(capacity: usize, threshold: f64) -> Self {
        SampleBuffer {
            capacity: capacity.max(1),
            threshold,
            items: VecDeque::new(),
            inserted: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    pub fn items(&self) -> impl Iterator<Item = &BufferedItem> {
        self.items.iter()
    }

    /// Oldest insertion sequence still buffered.
    pub fn oldest_seq(&self) -> Option<u64> {
        self.items.front().map(|b| b.seq)
    }

    fn max_similarity(&self, sig: &Signature) -> f64 {
        self.items
            .iter()
            .map(|b| jaccard(sig, &b.signature))
            .fold(0.0, f64::max)
    }

    /// Flags and inserts an item. Returns the near-duplicate flag and the
    /// evicted item, if any.
    pub fn insert(&mut self, item: DataItem, features: FeatureVector, confidence: f64) -> (bool, Option<BufferedItem>) {
        let signature = features.signature();
        let near_dup = !signature.is_empty() && self.max_similarity(&signature) >= self.threshold;
        self.inserted += 1;
        self.items.push_back(BufferedItem {
            seq: self.inserted,
            item,
            features,
            signature,
            confidence,
            near_dup,
            selected: false,
        });
        let evicted = if self.items.len() > self.capacity {
            self.items.pop_front()
        } else {
            None
        };
        (near_dup, evicted)
    }
}

/// True iff the item's unigram set has Jaccard ≥ the buffer threshold with
/// some buffered item; the item is then inserted (evicting the oldest).
pub fn near_duplicate(buffer: &mut SampleBuffer, item: &DataItem) -> Result<bool, LearningError> {
    let features = features_of(item)?;
    Ok(buffer.insert(item.clone(), features, 1.0).0)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    #[default]
    Passive,
    Active,
}

impl SelectionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SelectionMode::Passive => "passive",
            SelectionMode::Active => "active",
        }
    }
}

/// Picks up to `n` unselected candidates and marks them selected. Passive
/// draws a seeded uniform sample; active takes the lowest confidences,
/// oldest first on ties.
pub fn select_for_labeling<R: Rng + ?Sized>(
    buffer: &mut SampleBuffer,
    mode: SelectionMode,
    dedup: bool,
    n: usize,
    rng: &mut R,
) -> Result<Vec<BufferedItem>, LearningError> {
    let mut cand: Vec<usize> = buffer
        .items
        .iter()
        .enumerate()
        .filter(|(_, b)| !b.selected && !(dedup && b.near_dup))
        .map(|(i, _)| i)
        .collect();
    if cand.is_empty() {
        return Err(LearningError::EmptyAfterDedup);
    }
    let n = n.min(cand.len());
    let chosen: Vec<usize> = match mode {
        SelectionMode::Passive => {
            let (picked, _) = cand.partial_shuffle(rng, n);
            picked.to_vec()
        }
        SelectionMode::Active => {
            cand.sort_by(|&a, &b| {
                buffer.items[a]
                    .confidence
                    .total_cmp(&buffer.items[b].confidence)
                    .then(a.cmp(&b))
            });
            cand.truncate(n);
            cand
        }
    };
    Ok(chosen
        .into_iter()
        .map(|i| {
            buffer.items[i].selected = true;
            buffer.items[i].clone()
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub class: usize,
    pub confidence: f64,
    pub posteriors: Vec<f64>,
}

/// Anything the classifier PE can score items with.
pub trait Classifier: fmt::Debug + Send + Sync {
    fn version(&self) -> u64;
    fn classes(&self) -> &[String];
    fn trained_on(&self) -> u64;
    fn predict(&self, features: &FeatureVector) -> Result<Prediction, LearningError>;
    /// Self-describing snapshot for persistence.
    fn snapshot(&self) -> serde_json::Value;
}

/// Sufficient statistics for multinomial naive Bayes; updated per example.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NbStats {
    pub classes: Vec<String>,
    pub class_counts: Vec<u64>,
    pub term_counts: Vec<BTreeMap<String, u64>>,
    pub term_totals: Vec<u64>,
    pub vocab: usize,
    #[serde(skip)]
    seen: BTreeSet<String>,
}

impl NbStats {
    pub fn new(classes: Vec<String>) -> Self {
        let k = classes.len();
        NbStats {
            classes,
            class_counts: vec![0; k],
            term_counts: vec![BTreeMap::new(); k],
            term_totals: vec![0; k],
            vocab: 0,
            seen: BTreeSet::new(),
        }
    }

    pub fn add(&mut self, features: &FeatureVector, class: usize) {
        self.class_counts[class] += 1;
        for (t, &c) in &features.features {
            *self.term_counts[class].entry(t.clone()).or_insert(0) += u64::from(c);
            self.term_totals[class] += u64::from(c);
            if self.seen.insert(t.clone()) {
                self.vocab += 1;
            }
        }
    }

    pub fn examples(&self) -> u64 {
        self.class_counts.iter().sum()
    }
}

/// Multinomial naive Bayes with Laplace smoothing. Terms outside the training
/// vocabulary are ignored; the class prior is Laplace-smoothed as well.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NaiveBayes {
    pub version: u64,
    pub alpha: f64,
    pub stats: NbStats,
}

pub const SNAPSHOT_FORMAT: &str = "cspflow-naive-bayes";

impl NaiveBayes {
    pub fn from_stats(stats: NbStats, version: u64) -> Self {
        NaiveBayes {
            version,
            alpha: 1.0,
            stats,
        }
    }

    pub fn train<'a>(
        classes: Vec<String>,
        examples: impl IntoIterator<Item = (&'a FeatureVector, usize)>,
        version: u64,
    ) -> Self {
        let mut stats = NbStats::new(classes);
        for (f, c) in examples {
            stats.add(f, c);
        }
        Self::from_stats(stats, version)
    }

    /// Unnormalized log posteriors.
    pub fn log_scores(&self, features: &FeatureVector) -> Vec<f64> {
        let s = &self.stats;
        let k = s.classes.len() as f64;
        let n = s.examples() as f64;
        let v = s.vocab as f64;
        (0..s.classes.len())
            .map(|c| {
                let mut lp = ((s.class_counts[c] as f64 + self.alpha) / (n + self.alpha * k)).ln();
                let denom = s.term_totals[c] as f64 + self.alpha * v;
                for (t, &cnt) in &features.features {
                    if !s.seen_term(t) {
                        continue;
                    }
                    let tc = s.term_counts[c].get(t).copied().unwrap_or(0) as f64;
                    lp += f64::from(cnt) * ((tc + self.alpha) / denom).ln();
                }
                lp
            })
            .collect()
    }

    pub fn from_snapshot(v: &serde_json::Value) -> Result<Self, LearningError> {
        if v.get("format").and_then(|f| f.as_str()) != Some(SNAPSHOT_FORMAT) {
            return Err(LearningError::Snapshot("unrecognized format".into()));
        }
        let mut nb: NaiveBayes = serde_json::from_value(v["model"].clone())
            .map_err(|e| LearningError::Snapshot(e.to_string()))?;
        nb.stats.rebuild_seen();
        Ok(nb)
    }
}

impl NbStats {
    fn seen_term(&self, t: &str) -> bool {
        self.seen.contains(t)
    }

    fn rebuild_seen(&mut self) {
        self.seen = self
            .term_counts
            .iter()
            .flat_map(|m| m.keys().cloned())
            .collect();
        self.vocab = self.seen.len();
    }
}

impl Classifier for NaiveBayes {
    fn version(&self) -> u64 {
        self.version
    }

    fn classes(&self) -> &[String] {
        &self.stats.classes
    }

    fn trained_on(&self) -> u64 {
        self.stats.examples()
    }

    fn predict(&self, features: &FeatureVector) -> Result<Prediction, LearningError> {
        if self.version == 0 {
            return Err(LearningError::UntrainedModel);
        }
        let lp = self.log_scores(features);
        let m = lp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = lp.iter().map(|x| (x - m).exp()).collect();
        let z: f64 = exp.iter().sum();
        let posteriors: Vec<f64> = exp.iter().map(|e| e / z).collect();
        let (class, &confidence) = posteriors
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            .expect("at least one class");
        Ok(Prediction {
            class,
            confidence,
            posteriors,
        })
    }

    fn snapshot(&self) -> serde_json::Value {
        serde_json::json!({
            "format": SNAPSHOT_FORMAT,
            "format_version": 1,
            "classes": self.stats.classes,
            "model_version": self.version,
            "trained_on": self.trained_on(),
            "model": self,
        })
    }
}

/// Exact area under the ROC curve of `(score, is_positive)` pairs: the
/// probability a positive outscores a negative, ties counting one half.
pub fn auc(scored: &[(f64, bool)]) -> Result<f64, LearningError> {
    let pos = scored.iter().filter(|s| s.1).count();
    let neg = scored.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(LearningError::SingleClassTestSet);
    }
    let mut v: Vec<(f64, bool)> = scored.to_vec();
    v.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Sum over positives of (#negatives below + half #negatives tied).
    let mut twice_wins: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut i = 0;
    while i < v.len() {
        let mut j = i;
        let (mut p, mut n) = (0u128, 0u128);
        while j < v.len() && v[j].0.total_cmp(&v[i].0).is_eq() {
            if v[j].1 {
                p += 1;
            } else {
                n += 1;
            }
            j += 1;
        }
        twice_wins += p * (2 * neg_below + n);
        neg_below += n;
        i = j;
    }
    Ok(twice_wins as f64 / (2.0 * pos as f64 * neg as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledExample {
    pub item_id: ItemId,
    pub features: FeatureVector,
    pub label: String,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityCheckpoint {
    pub ts: Timestamp,
    pub version: u64,
    pub labels_used: u64,
    pub train_count: u64,
    pub test_count: u64,
    /// Test examples the AUC was computed over.
    pub evaluated: u64,
    pub auc: Option<f64>,
    pub mode: String,
    pub dedup: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearnerConfig {
    pub classes: Vec<String>,
    /// Class whose posterior is the AUC score.
    pub positive_class: usize,
    pub test_every: u64,
    pub retrain_every: u64,
    /// Test examples this similar to a training example are left out of
    /// the reported AUC. `None` scores the whole test split.
    pub holdout_jaccard: Option<f64>,
    pub mode: SelectionMode,
    pub dedup: bool,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        LearnerConfig {
            classes: vec!["informative".into(), "not informative".into()],
            positive_class: 0,
            test_every: TEST_EVERY,
            retrain_every: RETRAIN_EVERY,
            holdout_jaccard: Some(DEFAULT_JACCARD),
            mode: SelectionMode::Passive,
            dedup: false,
        }
    }
}

/// Online learner: deterministic modulo split, periodic retraining.
#[derive(Debug)]
pub struct Learner {
    cfg: LearnerConfig,
    stats: NbStats,
    received: u64,
    train_count: u64,
    test: Vec<(FeatureVector, usize, Signature)>,
    train_sigs: Vec<Signature>,
    version: u64,
    latest: Option<Arc<NaiveBayes>>,
    curve: Vec<QualityCheckpoint>,
}

impl Learner {
    pub fn new(cfg: LearnerConfig) -> Self {
        Learner {
            stats: NbStats::new(cfg.classes.clone()),
            cfg,
            received: 0,
            train_count: 0,
            test: Vec::new(),
            train_sigs: Vec::new(),
            version: 0,
            latest: None,
            curve: Vec::new(),
        }
    }

    pub fn config(&self) -> &LearnerConfig {
        &self.cfg
    }

    pub fn class_index(&self, label: &str) -> Result<usize, LearningError> {
        self.cfg
            .classes
            .iter()
            .position(|c| c == label)
            .ok_or_else(|| LearningError::UnknownClass(label.to_owned()))
    }

    /// Split for the next arriving label (positions 5, 10, ... are test).
    pub fn next_split(&self) -> Split {
        if (self.received + 1) % self.cfg.test_every == 0 {
            Split::Test
        } else {
            Split::Train
        }
    }

    /// Routes one decided label to its split and retrains when the training
    /// count reaches a multiple of the cadence. Returns the new model, if any.
    pub fn ingest_label(
        &mut self,
        features: FeatureVector,
        label: &str,
        now: Timestamp,
    ) -> Result<Option<Arc<NaiveBayes>>, LearningError> {
        let class = self.class_index(label)?;
        let split = self.next_split();
        self.received += 1;
        let sig = features.signature();
        match split {
            Split::Test => {
                self.test.push((features, class, sig));
                Ok(None)
            }
            Split::Train => {
                self.stats.add(&features, class);
                self.train_sigs.push(sig);
                self.train_count += 1;
                if self.train_count % self.cfg.retrain_every != 0 {
                    return Ok(None);
                }
                self.version += 1;
                let model = Arc::new(NaiveBayes::from_stats(self.stats.clone(), self.version));
                let (auc, evaluated) = self.evaluate(&model);
                self.curve.push(QualityCheckpoint {
                    ts: now,
                    version: self.version,
                    labels_used: self.received,
                    train_count: self.train_count,
                    test_count: self.test.len() as u64,
                    evaluated,
                    auc,
                    mode: self.cfg.mode.as_str().to_owned(),
                    dedup: self.cfg.dedup,
                });
                self.latest = Some(model.clone());
                Ok(Some(model))
            }
        }
    }

    fn evaluate(&self, model: &NaiveBayes) -> (Option<f64>, u64) {
        let pos = self.cfg.positive_class;
        let scored: Vec<(f64, bool)> = self
            .test
            .iter()
            .filter(|(_, _, sig)| match self.cfg.holdout_jaccard {
                Some(th) => !self.train_sigs.iter().any(|t| jaccard(sig, t) >= th),
                None => true,
            })
            .filter_map(|(f, c, _)| {
                let p = model.predict(f).ok()?;
                Some((p.posteriors[pos], *c == pos))
            })
            .collect();
        (auc(&scored).ok(), scored.len() as u64)
    }

    pub fn received(&self) -> u64 {
        self.received
    }

    pub fn train_count(&self) -> u64 {
        self.train_count
    }

    pub fn test_count(&self) -> u64 {
        self.test.len() as u64
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn retrains(&self) -> u64 {
        self.curve.len() as u64
    }

    pub fn latest(&self) -> Option<&Arc<NaiveBayes>> {
        self.latest.as_ref()
    }

    pub fn curve(&self) -> &[QualityCheckpoint] {
        &self.curve
    }

    /// Vocabulary-sized state plus the held test split.
    pub fn state_size(&self) -> usize {
        self.stats.vocab + self.test.len()
    }
}

/// Writes `labels_used,train_count,test_count,auc,mode,dedup`.
pub fn write_quality_csv<W: io::Write>(out: W, rows: &[QualityCheckpoint]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["labels_used", "train_count", "test_count", "auc", "mode", "dedup"])?;
    for r in rows {
        w.write_record([
            r.labels_used.to_string(),
            r.train_count.to_string(),
            r.test_count.to_string(),
            r.auc.map(|a| format!("{a:.6}")).unwrap_or_default(),
            r.mode.clone(),
            r.dedup.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads rows written by [`write_quality_csv`].
pub fn read_quality_csv<R: io::Read>(input: R) -> csv::Result<Vec<QualityCheckpoint>> {
    let mut rd = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for row in rd.records() {
        let row = row?;
        let num = |i: usize| row.get(i).and_then(|s| s.parse::<u64>().ok()).unwrap_or(0);
        out.push(QualityCheckpoint {
            ts: Timestamp::ZERO,
            version: out.len() as u64 + 1,
            labels_used: num(0),
            train_count: num(1),
            test_count: num(2),
            evaluated: 0,
            auc: row.get(3).and_then(|s| s.parse().ok()),
            mode: row.get(4).unwrap_or("").to_owned(),
            dedup: row.get(5) == Some("true"),
        });
    }
    Ok(out)
}

/// AUC of the latest checkpoint with at most `labels` labels used.
pub fn auc_at(curve: &[QualityCheckpoint], labels: u64) -> Option<f64> {
    curve
        .iter()
        .filter(|c| c.labels_used <= labels)
        .filter_map(|c| c.auc)
        .next_back()
}

/// Labels used at the first checkpoint whose AUC reaches `target`.
pub fn labels_to_reach(curve: &[QualityCheckpoint], target: f64) -> Option<u64> {
    curve
        .iter()
        .find(|c| c.auc.is_some_and(|a| a >= target))
        .map(|c| c.labels_used)
}
