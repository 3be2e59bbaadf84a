//! Per-condition classification metrics and negative flip rate.
//!
//! Label 1 is the positive class. An unparseable answer is never a true
//! positive or true negative: it counts against accuracy and, for label-1
//! samples, against recall.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::manifest::Label;
use crate::normalize::NormalizedAnswer;
use crate::sms::Condition;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetricsError {
    #[error("no prediction records")]
    Empty,
    #[error("duplicate sample id {0:?}")]
    DuplicateId(String),
    #[error("records mix conditions {0} and {1}")]
    MixedConditions(Condition, Condition),
    #[error("base records must be no_shift, got {0}")]
    BaseNotNoShift(Condition),
    #[error("sample sets differ: only in base {only_base:?}, only in shifted {only_shifted:?}")]
    IdMismatch {
        only_base: Vec<String>,
        only_shifted: Vec<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub sample_id: String,
    pub condition: Condition,
    pub verdict: NormalizedAnswer,
    pub y_hat: Option<Label>,
    pub label: Label,
}

impl PredictionRecord {
    pub fn new(sample_id: impl Into<String>, condition: Condition, verdict: NormalizedAnswer, label: Label) -> Self {
        PredictionRecord {
            sample_id: sample_id.into(),
            condition,
            y_hat: verdict.verdict.label(),
            verdict,
            label,
        }
    }

    pub fn is_correct(&self) -> bool {
        self.y_hat == Some(self.label)
    }
}

/// Integer confusion counts. Merging is associative and commutative, so
/// partial counts from any split of the records sum to the serial result.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
    pub unparseable: u64,
    pub unparseable_positive: u64,
}

impl ConfusionCounts {
    pub fn add(&mut self, r: &PredictionRecord) {
        match (r.y_hat, r.label) {
            (None, label) => {
                self.unparseable += 1;
                if label == Label::Positive {
                    self.unparseable_positive += 1;
                }
            }
            (Some(Label::Positive), Label::Positive) => self.tp += 1,
            (Some(Label::Positive), Label::Negative) => self.fp += 1,
            (Some(Label::Negative), Label::Negative) => self.tn += 1,
            (Some(Label::Negative), Label::Positive) => self.fn_ += 1,
        }
    }

    pub fn merge(self, o: ConfusionCounts) -> ConfusionCounts {
        ConfusionCounts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            tn: self.tn + o.tn,
            fn_: self.fn_ + o.fn_,
            unparseable: self.unparseable + o.unparseable,
            unparseable_positive: self.unparseable_positive + o.unparseable_positive,
        }
    }

    pub fn n(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_ + self.unparseable
    }

    pub fn finish(&self) -> MetricSet {
        let n = self.n();
        let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let positives = self.tp + self.fn_ + self.unparseable_positive;
        MetricSet {
            n,
            tp: self.tp,
            fp: self.fp,
            tn: self.tn,
            fn_: self.fn_,
            unparseable: self.unparseable,
            positives,
            accuracy: ratio(self.tp + self.tn, n),
            precision: ratio(self.tp, self.tp + self.fp),
            recall: ratio(self.tp, positives),
            // 2PR/(P+R) rewritten over integer counts
            f1: ratio(2 * self.tp, 2 * self.tp + self.fp + (positives - self.tp)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub n: u64,
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub unparseable: u64,
    /// Records with label 1, including unparseable ones.
    pub positives: u64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn single_condition(records: &[PredictionRecord]) -> Result<Condition, MetricsError> {
    let first = records.first().ok_or(MetricsError::Empty)?.condition;
    if let Some(r) = records.iter().find(|r| r.condition != first) {
        return Err(MetricsError::MixedConditions(first, r.condition));
    }
    Ok(first)
}

fn by_id(records: &[PredictionRecord]) -> Result<HashMap<&str, &PredictionRecord>, MetricsError> {
    let mut map = HashMap::with_capacity(records.len());
    for r in records {
        if map.insert(r.sample_id.as_str(), r).is_some() {
            return Err(MetricsError::DuplicateId(r.sample_id.clone()));
        }
    }
    Ok(map)
}

pub fn metric_set(records: &[PredictionRecord]) -> Result<MetricSet, MetricsError> {
    single_condition(records)?;
    by_id(records)?;
    let mut counts = ConfusionCounts::default();
    for r in records {
        counts.add(r);
    }
    Ok(counts.finish())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NfrResult {
    pub n: u64,
    pub base_correct: u64,
    pub flipped: u64,
    /// flipped / n
    pub nfr_paper: f64,
    /// flipped / base_correct; absent when nothing was correct in the base.
    pub nfr_conditional: Option<f64>,
}

pub fn nfr(base: &[PredictionRecord], shifted: &[PredictionRecord]) -> Result<NfrResult, MetricsError> {
    let base_cond = single_condition(base)?;
    if base_cond != Condition::NoShift {
        return Err(MetricsError::BaseNotNoShift(base_cond));
    }
    single_condition(shifted)?;
    let b = by_id(base)?;
    let s = by_id(shifted)?;

    let only_base: BTreeSet<&str> = b.keys().filter(|k| !s.contains_key(*k)).copied().collect();
    let only_shifted: BTreeSet<&str> = s.keys().filter(|k| !b.contains_key(*k)).copied().collect();
    if !only_base.is_empty() || !only_shifted.is_empty() {
        return Err(MetricsError::IdMismatch {
            only_base: only_base.into_iter().map(String::from).collect(),
            only_shifted: only_shifted.into_iter().map(String::from).collect(),
        });
    }

    let mut base_correct = 0u64;
    let mut flipped = 0u64;
    for (id, rb) in &b {
        if rb.is_correct() {
            base_correct += 1;
            if !s[id].is_correct() {
                flipped += 1;
            }
        }
    }
    let n = b.len() as u64;
    Ok(NfrResult {
        n,
        base_correct,
        flipped,
        nfr_paper: flipped as f64 / n as f64,
        nfr_conditional: (base_correct > 0).then(|| flipped as f64 / base_correct as f64),
    })
}
