//! Reference-based metrics: unigram F1 (and its knowledge variants), Rare F1,
//! BLEU-4, ROUGE-L and answer presence.
//!
//! All functions are pure and operate on [`TokenSequence`]s produced by
//! [`normalize`], so every metric shares one normalization convention.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::textnorm::{normalize, TokenSequence};

pub const DEFAULT_RARITY_CUTOFF: f64 = 0.5;
const BLEU_EPSILON: f64 = 1e-9;
const ROUGE_BETA: f64 = 1.2;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("empty reference corpus")]
    EmptyCorpus,
    #[error("rarity cutoff must lie strictly between 0 and 1, got {0}")]
    InvalidCutoff(f64),
    #[error("unanswerable check: every answer normalizes to nothing")]
    Unanswerable,
    #[error("rarity table io: {0}")]
    Io(#[from] std::io::Error),
    #[error("rarity table json: {0}")]
    Json(#[from] serde_json::Error),
}

fn counts(tokens: &[String]) -> HashMap<&str, usize> {
    let mut map = HashMap::new();
    for t in tokens {
        *map.entry(t.as_str()).or_insert(0) += 1;
    }
    map
}

/// Harmonic mean of bag-of-words precision and recall. Zero when either side
/// is empty or nothing overlaps.
pub fn unigram_f1(pred: &TokenSequence, reference: &TokenSequence) -> f64 {
    if pred.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let ref_counts = counts(reference);
    let overlap: usize = counts(pred)
        .iter()
        .map(|(w, c)| (*c).min(ref_counts.get(w).copied().unwrap_or(0)))
        .sum();
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / pred.len() as f64;
    let recall = overlap as f64 / reference.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// KF1 / PKF1: unigram F1 of a response against a knowledge sentence (gold or
/// predicted).
pub fn knowledge_f1(response: &TokenSequence, knowledge: &TokenSequence) -> f64 {
    unigram_f1(response, knowledge)
}

/// Words covering the head of a corpus' frequency mass; everything else is
/// "rare".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RarityTable {
    pub cutoff_mass: f64,
    /// Frequent words in rank order (count desc, then word asc).
    pub frequent: Vec<String>,
    #[serde(skip)]
    lookup: HashSet<String>,
    #[serde(skip)]
    pub corpus_size: usize,
}

impl RarityTable {
    pub fn new(cutoff_mass: f64, frequent: Vec<String>, corpus_size: usize) -> Self {
        let lookup = frequent.iter().cloned().collect();
        Self {
            cutoff_mass,
            frequent,
            lookup,
            corpus_size,
        }
    }

    pub fn is_frequent(&self, word: &str) -> bool {
        self.lookup.contains(word)
    }

    pub fn is_rare(&self, word: &str) -> bool {
        !self.is_frequent(word)
    }

    /// Drops every frequent word.
    pub fn filter(&self, tokens: &TokenSequence) -> TokenSequence {
        TokenSequence::from_tokens(tokens.iter().filter(|t| self.is_rare(t)).cloned())
    }

    pub fn save_json(&self, path: &Path) -> Result<(), MetricError> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self, MetricError> {
        let raw: RarityTable = serde_json::from_slice(&std::fs::read(path)?)?;
        Ok(Self::new(raw.cutoff_mass, raw.frequent, 0))
    }
}

/// Counts normalized tokens across `references` and keeps the shortest
/// frequency-ranked prefix whose cumulative mass reaches `cutoff_mass`.
pub fn build_rarity_table<S: AsRef<str>>(
    references: &[S],
    cutoff_mass: f64,
) -> Result<RarityTable, MetricError> {
    if !(cutoff_mass > 0.0 && cutoff_mass < 1.0) {
        return Err(MetricError::InvalidCutoff(cutoff_mass));
    }
    let mut freq: HashMap<String, usize> = HashMap::new();
    let mut total = 0usize;
    for r in references {
        for t in normalize(r.as_ref()).into_inner() {
            *freq.entry(t).or_insert(0) += 1;
            total += 1;
        }
    }
    if total == 0 {
        return Err(MetricError::EmptyCorpus);
    }
    let mut ranked: Vec<(String, usize)> = freq.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

    let mut frequent = Vec::new();
    let mut cumulative = 0usize;
    for (word, count) in ranked {
        frequent.push(word);
        cumulative += count;
        if cumulative as f64 / total as f64 >= cutoff_mass {
            break;
        }
    }
    Ok(RarityTable::new(cutoff_mass, frequent, total))
}

/// Unigram F1 restricted to rare words. Zero when filtering empties both
/// sides.
pub fn rare_f1(pred: &TokenSequence, reference: &TokenSequence, rarity: &RarityTable) -> f64 {
    unigram_f1(&rarity.filter(pred), &rarity.filter(reference))
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut map = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *map.entry(w).or_insert(0) += 1;
        }
    }
    map
}

/// Sentence-level BLEU-4 with add-epsilon smoothing on zero match counts and
/// the standard brevity penalty.
pub fn bleu4(pred: &TokenSequence, reference: &TokenSequence) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let total = pred.len().saturating_sub(n - 1);
        let precision = if total == 0 {
            BLEU_EPSILON
        } else {
            let ref_grams = ngram_counts(reference, n);
            let matches: usize = ngram_counts(pred, n)
                .iter()
                .map(|(g, c)| (*c).min(ref_grams.get(g).copied().unwrap_or(0)))
                .sum();
            if matches == 0 {
                BLEU_EPSILON / total as f64
            } else {
                matches as f64 / total as f64
            }
        };
        log_sum += precision.ln();
    }
    let brevity = if pred.len() < reference.len() {
        (1.0 - reference.len() as f64 / pred.len() as f64).exp()
    } else {
        1.0
    };
    brevity * (log_sum / 4.0).exp()
}

pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F-measure with beta = 1.2.
pub fn rouge_l(pred: &TokenSequence, reference: &TokenSequence) -> f64 {
    if pred.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(pred, reference);
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / pred.len() as f64;
    let r = lcs as f64 / reference.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * r / (r + b2 * p)
}

/// 1 if any answer occurs as a contiguous token run in the response. Answers
/// that normalize to nothing are ignored; if none remain the check is
/// unanswerable.
pub fn answer_present<S: AsRef<str>>(response: &str, answers: &[S]) -> Result<u8, MetricError> {
    let response = normalize(response);
    let mut answerable = false;
    for answer in answers {
        let answer = normalize(answer.as_ref());
        if answer.is_empty() {
            continue;
        }
        answerable = true;
        if response.contains_run(&answer) {
            return Ok(1);
        }
    }
    if answerable {
        Ok(0)
    } else {
        Err(MetricError::Unanswerable)
    }
}

/// Column identifiers of a metric report, in report order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Metric {
    #[serde(rename = "f1")]
    F1,
    #[serde(rename = "kf1")]
    Kf1,
    #[serde(rename = "pkf1")]
    Pkf1,
    #[serde(rename = "rf1")]
    Rf1,
    #[serde(rename = "bleu4")]
    Bleu4,
    #[serde(rename = "rougeL")]
    RougeL,
    #[serde(rename = "ap")]
    Ap,
    #[serde(rename = "gap")]
    Gap,
}

impl Metric {
    pub const ALL: [Metric; 8] = [
        Metric::F1,
        Metric::Kf1,
        Metric::Pkf1,
        Metric::Rf1,
        Metric::Bleu4,
        Metric::RougeL,
        Metric::Ap,
        Metric::Gap,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::F1 => "f1",
            Metric::Kf1 => "kf1",
            Metric::Pkf1 => "pkf1",
            Metric::Rf1 => "rf1",
            Metric::Bleu4 => "bleu4",
            Metric::RougeL => "rougeL",
            Metric::Ap => "ap",
            Metric::Gap => "gap",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One value per metric column; `None` where the reference was missing.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricValues {
    pub f1: Option<f64>,
    pub kf1: Option<f64>,
    pub pkf1: Option<f64>,
    pub rf1: Option<f64>,
    pub bleu4: Option<f64>,
    #[serde(rename = "rougeL")]
    pub rouge_l: Option<f64>,
    pub ap: Option<f64>,
    pub gap: Option<f64>,
}

impl MetricValues {
    pub fn get(&self, metric: Metric) -> Option<f64> {
        match metric {
            Metric::F1 => self.f1,
            Metric::Kf1 => self.kf1,
            Metric::Pkf1 => self.pkf1,
            Metric::Rf1 => self.rf1,
            Metric::Bleu4 => self.bleu4,
            Metric::RougeL => self.rouge_l,
            Metric::Ap => self.ap,
            Metric::Gap => self.gap,
        }
    }

    fn slot(&mut self, metric: Metric) -> &mut Option<f64> {
        match metric {
            Metric::F1 => &mut self.f1,
            Metric::Kf1 => &mut self.kf1,
            Metric::Pkf1 => &mut self.pkf1,
            Metric::Rf1 => &mut self.rf1,
            Metric::Bleu4 => &mut self.bleu4,
            Metric::RougeL => &mut self.rouge_l,
            Metric::Ap => &mut self.ap,
            Metric::Gap => &mut self.gap,
        }
    }

    pub fn set(&mut self, metric: Metric, value: f64) {
        *self.slot(metric) = Some(value);
    }

    pub fn is_empty(&self) -> bool {
        Metric::ALL.iter().all(|m| self.get(*m).is_none())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub example_id: String,
    #[serde(flatten)]
    pub values: MetricValues,
}

impl MetricRow {
    pub fn new(example_id: impl Into<String>) -> Self {
        Self {
            example_id: example_id.into(),
            values: MetricValues::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnCount {
    pub evaluated: usize,
    pub skipped: usize,
}

/// Per-example rows plus column means over the defined values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub aggregate: MetricValues,
    pub counts: BTreeMap<Metric, ColumnCount>,
    pub per_example: Vec<MetricRow>,
}

impl MetricReport {
    pub fn from_rows(rows: Vec<MetricRow>) -> Self {
        let mut aggregate = MetricValues::default();
        let mut counts = BTreeMap::new();
        for metric in Metric::ALL {
            let defined: Vec<f64> = rows.iter().filter_map(|r| r.values.get(metric)).collect();
            counts.insert(
                metric,
                ColumnCount {
                    evaluated: defined.len(),
                    skipped: rows.len() - defined.len(),
                },
            );
            if !defined.is_empty() {
                aggregate.set(metric, defined.iter().sum::<f64>() / defined.len() as f64);
            }
        }
        Self {
            aggregate,
            counts,
            per_example: rows,
        }
    }
}
