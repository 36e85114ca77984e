//! Synthetic message streams and their JSON-lines files.

use std::collections::BTreeSet;
use std::fs;
use std::io::{self, BufRead, Write};
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: String,
    pub text: String,
    pub ts_ms: u64,
    pub gold_label: Option<String>,
    pub is_retweet: bool,
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("invalid dataset parameters: {0}")]
    InvalidParams(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Generator knobs. Class-indicative tokens follow their message's class
/// with probability `1 - noise`; the rest of each message is drawn from a
/// vocabulary shared by all classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetParams {
    pub n: usize,
    pub classes: Vec<String>,
    pub vocab_per_class: usize,
    pub shared_vocab: usize,
    /// Share of an original message's tokens drawn from class vocabularies.
    pub signal_fraction: f64,
    pub noise: f64,
    pub retweet_fraction: f64,
    /// Share of non-retweets that are one-token edits of a recent original.
    pub near_dup_fraction: f64,
    /// Number of most recent originals retweets and edits draw from.
    pub window: usize,
    pub zipf_exponent: f64,
    pub min_tokens: usize,
    pub max_tokens: usize,
    /// Spacing of `ts_ms` between consecutive records.
    pub gap_ms: u64,
    pub seed: u64,
}

impl Default for DatasetParams {
    fn default() -> Self {
        DatasetParams {
            n: 6000,
            classes: vec!["informative".into(), "not informative".into()],
            vocab_per_class: 150,
            shared_vocab: 600,
            signal_fraction: 0.5,
            noise: 0.2,
            retweet_fraction: 1.0 / 3.0,
            near_dup_fraction: 0.5,
            window: 200,
            zipf_exponent: 0.8,
            min_tokens: 8,
            max_tokens: 16,
            gap_ms: 100,
            seed: 1,
        }
    }
}

impl DatasetParams {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |m: &str| Err(DatasetError::InvalidParams(m.to_owned()));
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if self.n == 0 {
            return bad("n must be positive");
        }
        if self.classes.len() < 2 {
            return bad("at least two classes are needed");
        }
        if self.vocab_per_class == 0 || self.shared_vocab == 0 || self.window == 0 {
            return bad("vocabularies and window must be positive");
        }
        if !unit(self.noise) || !unit(self.retweet_fraction) || !unit(self.near_dup_fraction) || !unit(self.signal_fraction) {
            return bad("noise and fractions must lie in [0, 1]");
        }
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return bad("token length range is empty");
        }
        if self.zipf_exponent.is_nan() || self.zipf_exponent < 0.0 {
            return bad("zipf exponent must be non-negative");
        }
        Ok(())
    }
}

fn zipf(n: usize, s: f64) -> WeightedIndex<f64> {
    WeightedIndex::new((1..=n).map(|k| (k as f64).powf(-s))).expect("positive weights")
}

/// Popularity-weighted pick among the last `window` originals.
fn pick_recent<R: Rng>(pop: &mut [u64], window: usize, rng: &mut R) -> usize {
    let lo = pop.len().saturating_sub(window);
    let w = WeightedIndex::new(pop[lo..].iter().map(|&p| p as f64 + 1.0)).expect("positive weights");
    let j = lo + w.sample(rng);
    pop[j] += 1;
    j
}

pub fn generate_dataset(p: &DatasetParams) -> Result<Vec<DatasetRecord>, DatasetError> {
    p.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let k = p.classes.len();
    let n_rt = ((p.n as f64) * p.retweet_fraction).round() as usize;
    let n_rt = n_rt.min(p.n - 1);
    // The first record is always an original so every retweet has a source.
    let rt_pos: BTreeSet<usize> = index::sample(&mut rng, p.n - 1, n_rt).into_iter().map(|i| i + 1).collect();
    let class_tok = zipf(p.vocab_per_class, p.zipf_exponent);
    let shared_tok = zipf(p.shared_vocab, p.zipf_exponent);
    let mut originals: Vec<(Vec<String>, usize)> = Vec::new();
    let mut pop: Vec<u64> = Vec::new();
    let mut out = Vec::with_capacity(p.n);
    for i in 0..p.n {
        let (text, label, is_retweet) = if rt_pos.contains(&i) {
            let j = pick_recent(&mut pop, p.window, &mut rng);
            let (toks, label) = &originals[j];
            (format!("RT {}", toks.join(" ")), *label, true)
        } else if !originals.is_empty() && rng.gen::<f64>() < p.near_dup_fraction {
            let j = pick_recent(&mut pop, p.window, &mut rng);
            let (toks, label) = &originals[j];
            let mut toks = toks.clone();
            let at = rng.gen_range(0..toks.len());
            toks[at] = format!("s{}", shared_tok.sample(&mut rng));
            (toks.join(" "), *label, false)
        } else {
            let label = rng.gen_range(0..k);
            let len = rng.gen_range(p.min_tokens..=p.max_tokens);
            let mut toks = Vec::with_capacity(len);
            for _ in 0..len {
                if rng.gen::<f64>() < p.signal_fraction {
                    let c = if rng.gen::<f64>() < p.noise {
                        (label + rng.gen_range(1..k)) % k
                    } else {
                        label
                    };
                    toks.push(format!("c{c}w{}", class_tok.sample(&mut rng)));
                } else {
                    toks.push(format!("s{}", shared_tok.sample(&mut rng)));
                }
            }
            let text = toks.join(" ");
            originals.push((toks, label));
            pop.push(0);
            (text, label, false)
        };
        out.push(DatasetRecord {
            id: format!("m{i:07}"),
            text,
            ts_ms: i as u64 * p.gap_ms,
            gold_label: Some(p.classes[label].clone()),
            is_retweet,
        });
    }
    Ok(out)
}

pub fn write_dataset<W: Write>(mut out: W, records: &[DatasetRecord]) -> io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn save_dataset(path: impl AsRef<Path>, records: &[DatasetRecord]) -> Result<(), DatasetError> {
    let f = fs::File::create(path)?;
    write_dataset(io::BufWriter::new(f), records)?;
    Ok(())
}

/// Parses JSON lines, checking unique ids and non-decreasing timestamps.
/// Errors name the 1-based line. Blank lines are skipped.
pub fn read_dataset<R: BufRead>(input: R) -> Result<Vec<DatasetRecord>, DatasetError> {
    let mut out: Vec<DatasetRecord> = Vec::new();
    let mut ids = BTreeSet::new();
    for (i, line) in input.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DatasetRecord = serde_json::from_str(&line).map_err(|e| DatasetError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if !ids.insert(rec.id.clone()) {
            return Err(DatasetError::Parse {
                line: line_no,
                message: format!("duplicate id `{}`", rec.id),
            });
        }
        if out.last().is_some_and(|prev| prev.ts_ms > rec.ts_ms) {
            return Err(DatasetError::Parse {
                line: line_no,
                message: "ts_ms decreases".into(),
            });
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<DatasetRecord>, DatasetError> {
    let f = fs::File::open(path)?;
    read_dataset(io::BufReader::new(f))
}
