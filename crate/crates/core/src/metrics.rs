//! Evaluation metrics: AUC, micro-F1, string F1, Pos-F1 and ROUGE-1.
//!
//! F-measures are computed from counts as `2·tp / (2·tp + fp + fn)`, which is
//! algebraically the harmonic mean of precision and recall and keeps results
//! exact for ratios of small integers.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::registry::{Gold, BLANK};
use crate::text::{tokenize, TokenUnit};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricError {
    #[error("AUC needs at least one positive and one negative example (got {positives} / {negatives})")]
    SingleClass { positives: usize, negatives: usize },
    #[error("record {0} is missing field {1}")]
    MissingField(usize, &'static str),
    #[error("record {0} has a non-finite ranking score")]
    NonFinite(usize),
    #[error("no records")]
    Empty,
    #[error("Pos-F1 undefined: every record has the blank gold")]
    NoPositives,
    #[error("ROUGE reference is empty")]
    EmptyReference,
}

/// One prediction paired with its gold annotation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    #[serde(default)]
    pub ranking_score: Option<f64>,
    #[serde(default)]
    pub predicted_label: Option<String>,
    #[serde(default)]
    pub predicted_text: Option<String>,
    pub gold: Gold,
}

impl PredictionRecord {
    pub fn label(predicted: Option<&str>, gold: &str) -> Self {
        Self {
            ranking_score: None,
            predicted_label: predicted.map(str::to_string),
            predicted_text: None,
            gold: Gold::Label(gold.to_string()),
        }
    }

    pub fn ranked(score: f64, gold: &str) -> Self {
        Self {
            ranking_score: Some(score),
            ..Self::label(None, gold)
        }
    }

    pub fn text(predicted: &str, gold: &str) -> Self {
        Self {
            ranking_score: None,
            predicted_label: None,
            predicted_text: Some(predicted.to_string()),
            gold: Gold::Text(gold.to_string()),
        }
    }

    fn gold_str(&self) -> &str {
        match &self.gold {
            Gold::Label(s) | Gold::Text(s) => s,
        }
    }
}

/// Area under the ROC curve with `positive` as the positive class.
///
/// Equals `(concordant + 0.5·tied) / (P·N)` over all positive/negative pairs.
pub fn auc(records: &[PredictionRecord], positive: &str) -> Result<f64, MetricError> {
    let mut scored = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        let s = r.ranking_score.ok_or(MetricError::MissingField(i, "ranking_score"))?;
        if !s.is_finite() {
            return Err(MetricError::NonFinite(i));
        }
        scored.push((s, r.gold_str() == positive));
    }
    let positives = scored.iter().filter(|(_, p)| *p).count();
    let negatives = scored.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(MetricError::SingleClass { positives, negatives });
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));

    // counted in half-pair units: concordant = 2, tied = 1
    let mut half_units: u64 = 0;
    let mut negatives_below: u64 = 0;
    let mut i = 0;
    while i < scored.len() {
        let mut j = i;
        let (mut pos_g, mut neg_g) = (0u64, 0u64);
        while j < scored.len() && scored[j].0 == scored[i].0 {
            if scored[j].1 {
                pos_g += 1;
            } else {
                neg_g += 1;
            }
            j += 1;
        }
        half_units += 2 * pos_g * negatives_below + pos_g * neg_g;
        negatives_below += neg_g;
        i = j;
    }
    Ok(half_units as f64 / (2 * positives as u64 * negatives as u64) as f64)
}

/// Micro-averaged F1 with TP/FP/FN pooled over labels. A record without a
/// predicted label contributes a false negative only.
pub fn micro_f1(records: &[PredictionRecord]) -> Result<f64, MetricError> {
    if records.is_empty() {
        return Err(MetricError::Empty);
    }
    let (mut tp, mut fp, mut fneg) = (0u64, 0u64, 0u64);
    for r in records {
        match &r.predicted_label {
            Some(p) if p == r.gold_str() => tp += 1,
            Some(_) => {
                fp += 1;
                fneg += 1;
            }
            None => fneg += 1,
        }
    }
    Ok(f_from_counts(tp, fp, fneg))
}

fn f_from_counts(tp: u64, fp: u64, fneg: u64) -> f64 {
    let denom = 2 * tp + fp + fneg;
    if denom == 0 {
        return 0.0;
    }
    (2 * tp) as f64 / denom as f64
}

fn bag<'a>(tokens: &[&'a str]) -> HashMap<&'a str, usize> {
    let mut m = HashMap::new();
    for t in tokens {
        *m.entry(*t).or_insert(0) += 1;
    }
    m
}

fn clipped_overlap(a: &[&str], b: &[&str]) -> usize {
    let bb = bag(b);
    bag(a)
        .iter()
        .map(|(t, n)| (*n).min(bb.get(t).copied().unwrap_or(0)))
        .sum()
}

/// Token-multiset F1 under the default tokenization.
pub fn string_f1(predicted: &str, gold: &str) -> f64 {
    string_f1_with(predicted, gold, TokenUnit::Auto)
}

pub fn string_f1_with(predicted: &str, gold: &str, unit: TokenUnit) -> f64 {
    let p = tokenize(predicted, unit);
    let g = tokenize(gold, unit);
    match (p.is_empty(), g.is_empty()) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => {
            let common = clipped_overlap(&p, &g) as u64;
            (2 * common) as f64 / (p.len() + g.len()) as f64
        }
    }
}

/// Mean string F1 over records whose gold text is not the blank marker.
pub fn pos_f1(records: &[PredictionRecord]) -> Result<f64, MetricError> {
    pos_f1_with(records, TokenUnit::Auto)
}

pub fn pos_f1_with(records: &[PredictionRecord], unit: TokenUnit) -> Result<f64, MetricError> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, r) in records.iter().enumerate() {
        let gold = r.gold_str();
        if gold == BLANK {
            continue;
        }
        let pred = r
            .predicted_text
            .as_deref()
            .ok_or(MetricError::MissingField(i, "predicted_text"))?;
        sum += string_f1_with(pred, gold, unit);
        n += 1;
    }
    if n == 0 {
        return Err(MetricError::NoPositives);
    }
    Ok(sum / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rouge1 {
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
}

/// ROUGE-1 over clipped unigram counts. `f` is the headline number.
pub fn rouge1(predicted: &str, gold: &str) -> Result<Rouge1, MetricError> {
    rouge1_with(predicted, gold, TokenUnit::Auto)
}

pub fn rouge1_with(predicted: &str, gold: &str, unit: TokenUnit) -> Result<Rouge1, MetricError> {
    let g = tokenize(gold, unit);
    if g.is_empty() {
        return Err(MetricError::EmptyReference);
    }
    let p = tokenize(predicted, unit);
    if p.is_empty() {
        return Ok(Rouge1 {
            precision: 0.0,
            recall: 0.0,
            f: 0.0,
        });
    }
    let common = clipped_overlap(&p, &g) as u64;
    Ok(Rouge1 {
        precision: common as f64 / p.len() as f64,
        recall: common as f64 / g.len() as f64,
        f: (2 * common) as f64 / (p.len() + g.len()) as f64,
    })
}

/// Mean ROUGE-1 F over records, for generation tasks.
pub fn mean_rouge1(records: &[PredictionRecord]) -> Result<f64, MetricError> {
    mean_text_metric(records, |p, g| rouge1(p, g).map(|r| r.f))
}

/// Mean string F1 over records.
pub fn mean_string_f1(records: &[PredictionRecord]) -> Result<f64, MetricError> {
    mean_text_metric(records, |p, g| Ok(string_f1(p, g)))
}

fn mean_text_metric(
    records: &[PredictionRecord],
    f: impl Fn(&str, &str) -> Result<f64, MetricError>,
) -> Result<f64, MetricError> {
    if records.is_empty() {
        return Err(MetricError::Empty);
    }
    let mut sum = 0.0;
    for (i, r) in records.iter().enumerate() {
        let pred = r
            .predicted_text
            .as_deref()
            .ok_or(MetricError::MissingField(i, "predicted_text"))?;
        sum += f(pred, r.gold_str())?;
    }
    Ok(sum / records.len() as f64)
}
