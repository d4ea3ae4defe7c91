//! Metrics, sample aggregation and the ensemble decision rule.
//!
//! Per-token evaluation treats every token as an instance. Per-sample
//! evaluation first averages a sample's token probabilities. An ensemble
//! calls a sample human only when every member's averaged score is below
//! the threshold; a score exactly at the threshold counts as AI.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::tokenizer::Vocabulary;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("{what}: {left} vs {right} entries")]
    LengthMismatch { what: &'static str, left: usize, right: usize },
    #[error("empty probability list")]
    EmptyList,
    #[error("sample `{0}` has no label")]
    MissingLabel(String),
    #[error("sample `{sample}` has no score from detector `{detector}`")]
    MissingDetectorScore { sample: String, detector: String },
    #[error("duplicate sample id `{0}`")]
    DuplicateSample(String),
    #[error("probability {0} is outside [0, 1]")]
    InvalidProbability(f64),
    #[error("ensemble has no members")]
    EmptyEnsemble,
}

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    PerToken,
    PerSample,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Class {
    Human,
    Ai,
}

impl Class {
    pub fn label(self) -> u8 {
        match self {
            Class::Human => 0,
            Class::Ai => 1,
        }
    }

    /// `Ai` for scores at or above the threshold.
    pub fn from_score(score: f64, threshold: f64) -> Class {
        if score < threshold {
            Class::Human
        } else {
            Class::Ai
        }
    }
}

/// Confusion counts with the positive class being AI (label 1).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Confusion {
    pub fn record(&mut self, predicted: Class, label: u8) {
        match (predicted, label == 1) {
            (Class::Ai, true) => self.tp += 1,
            (Class::Ai, false) => self.fp += 1,
            (Class::Human, false) => self.tn += 1,
            (Class::Human, true) => self.fn_ += 1,
        }
    }

    pub fn merge(&mut self, other: &Confusion) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.tn += other.tn;
        self.fn_ += other.fn_;
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub granularity: Granularity,
    #[serde(flatten)]
    pub counts: Confusion,
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auc: f64,
    /// Mean binary cross-entropy, when computed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
    /// Metrics whose denominator was zero; they are reported as 0.
    pub undefined: Vec<String>,
}

impl MetricsReport {
    /// Derives every ratio from the counts; `auc` is `None` when one class is absent.
    pub fn from_counts(granularity: Granularity, counts: Confusion, auc: Option<f64>) -> Self {
        let mut undefined = Vec::new();
        let mut ratio = |num: u64, den: u64, name: &str| -> Option<f64> {
            if den == 0 {
                undefined.push(name.to_string());
                None
            } else {
                Some(num as f64 / den as f64)
            }
        };
        let Confusion { tp, fp, tn, fn_ } = counts;
        let accuracy = ratio(tp + tn, counts.total(), "accuracy");
        let precision = ratio(tp, tp + fp, "precision");
        let recall = ratio(tp, tp + fn_, "recall");
        let tnr = if tn + fp == 0 { None } else { Some(tn as f64 / (tn + fp) as f64) };
        let balanced_accuracy = match (recall, tnr) {
            (Some(tpr), Some(tnr)) => Some((tpr + tnr) / 2.0),
            _ => None,
        };
        let f1 = match (precision, recall) {
            (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
            _ => None,
        };
        if balanced_accuracy.is_none() {
            undefined.push(String::from("balanced_accuracy"));
        }
        if f1.is_none() {
            undefined.push(String::from("f1"));
        }
        if auc.is_none() {
            undefined.push(String::from("auc"));
        }
        MetricsReport {
            granularity,
            counts,
            accuracy: accuracy.unwrap_or(0.0),
            balanced_accuracy: balanced_accuracy.unwrap_or(0.0),
            precision: precision.unwrap_or(0.0),
            recall: recall.unwrap_or(0.0),
            f1: f1.unwrap_or(0.0),
            auc: auc.unwrap_or(0.0),
            loss: None,
            undefined,
        }
    }

    pub fn is_defined(&self, metric: &str) -> bool {
        !self.undefined.iter().any(|m| m == metric)
    }
}

/// ROC AUC via the rank-sum statistic with midranks for ties. `None` when
/// either class is absent.
///
/// Ranks are kept doubled so the sum is an exact integer; the result equals
/// `(#{pos > neg} + #{pos == neg} / 2) / (P * N)`.
pub fn auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let positives = labels.iter().filter(|&&y| y == 1).count() as u64;
    let negatives = labels.len() as u64 - positives;
    if positives == 0 || negatives == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut doubled_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share the midrank (i + j + 2) / 2
        let doubled_midrank = (i + j + 2) as u128;
        let tied_positives = order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as u128;
        doubled_rank_sum += doubled_midrank * tied_positives;
        i = j + 1;
    }
    let p = positives as u128;
    let numerator = doubled_rank_sum - p * (p + 1);
    Some(numerator as f64 / (2 * p * negatives as u128) as f64)
}

fn check_probability(p: f64) -> Result<(), EvalError> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(EvalError::InvalidProbability(p))
    }
}

/// Mean binary cross-entropy of probabilities against labels (logs clamped at 1e-12).
pub fn mean_bce(probs: &[f64], labels: &[u8]) -> f64 {
    let sum: f64 = probs
        .iter()
        .zip(labels)
        .map(|(p, y)| {
            if *y == 1 {
                -libm::log(p.max(1e-12))
            } else {
                -libm::log((1.0 - p).max(1e-12))
            }
        })
        .sum();
    sum / probs.len().max(1) as f64
}

/// Every token is an instance.
pub fn per_token_metrics(probs: &[f64], labels: &[u8], threshold: f64) -> Result<MetricsReport, EvalError> {
    if probs.len() != labels.len() {
        return Err(EvalError::LengthMismatch { what: "token probabilities and labels", left: probs.len(), right: labels.len() });
    }
    let mut counts = Confusion::default();
    for (&p, &y) in probs.iter().zip(labels) {
        check_probability(p)?;
        counts.record(Class::from_score(p, threshold), y);
    }
    let mut report = MetricsReport::from_counts(Granularity::PerToken, counts, auc(probs, labels));
    if !probs.is_empty() {
        report.loss = Some(mean_bce(probs, labels));
    }
    Ok(report)
}

/// Arithmetic mean, summed with Neumaier compensation.
pub fn aggregate_sample(probs: &[f64]) -> Result<f64, EvalError> {
    if probs.is_empty() {
        return Err(EvalError::EmptyList);
    }
    let mut sum = 0.0f64;
    let mut compensation = 0.0f64;
    for &p in probs {
        let t = sum + p;
        if sum.abs() >= p.abs() {
            compensation += (sum - t) + p;
        } else {
            compensation += (p - t) + sum;
        }
        sum = t;
    }
    Ok((sum + compensation) / probs.len() as f64)
}

/// Scores of one sample from one detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePrediction {
    /// Per-token probabilities; empty when only a sample score is known.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub token_probs: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_labels: Option<Vec<u8>>,
}

impl SamplePrediction {
    pub fn tokens(token_probs: Vec<f64>, label: Option<u8>) -> Self {
        Self { token_probs, sample_score: None, label, token_labels: None }
    }

    /// Mean token probability, or the stored sample score.
    pub fn score(&self) -> Result<f64, EvalError> {
        match self.sample_score {
            Some(s) => Ok(s),
            None => aggregate_sample(&self.token_probs),
        }
    }
}

/// Predictions of one detector over a set of samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub detector_id: String,
    pub samples: BTreeMap<String, SamplePrediction>,
}

impl PredictionSet {
    pub fn new(detector_id: impl Into<String>) -> Self {
        Self { detector_id: detector_id.into(), samples: BTreeMap::new() }
    }

    pub fn insert(&mut self, sample_id: impl Into<String>, prediction: SamplePrediction) -> Result<(), EvalError> {
        let id = sample_id.into();
        if prediction.token_probs.is_empty() && prediction.sample_score.is_none() {
            return Err(EvalError::EmptyList);
        }
        for &p in prediction.token_probs.iter().chain(prediction.sample_score.as_ref()) {
            check_probability(p)?;
        }
        if let (Some(labels), false) = (&prediction.token_labels, prediction.token_probs.is_empty()) {
            if labels.len() != prediction.token_probs.len() {
                return Err(EvalError::LengthMismatch {
                    what: "token probabilities and token labels",
                    left: prediction.token_probs.len(),
                    right: labels.len(),
                });
            }
        }
        if self.samples.contains_key(&id) {
            return Err(EvalError::DuplicateSample(id));
        }
        self.samples.insert(id, prediction);
        Ok(())
    }

    /// Per-token metrics over all samples; a sample without token labels
    /// contributes its sample label for every token.
    pub fn per_token_metrics(&self, threshold: f64) -> Result<MetricsReport, EvalError> {
        let mut probs = Vec::new();
        let mut labels = Vec::new();
        for (id, p) in &self.samples {
            if p.token_probs.is_empty() {
                continue;
            }
            probs.extend_from_slice(&p.token_probs);
            match (&p.token_labels, p.label) {
                (Some(tl), _) => labels.extend_from_slice(tl),
                (None, Some(l)) => labels.extend(core::iter::repeat(l).take(p.token_probs.len())),
                (None, None) => return Err(EvalError::MissingLabel(id.clone())),
            }
        }
        per_token_metrics(&probs, &labels, threshold)
    }

    /// Aggregated score and label of every sample, in id order.
    pub fn sample_scores(&self) -> Result<Vec<(String, f64, u8)>, EvalError> {
        self.samples
            .iter()
            .map(|(id, p)| {
                let label = p.label.ok_or_else(|| EvalError::MissingLabel(id.clone()))?;
                Ok((id.clone(), p.score()?, label))
            })
            .collect()
    }

    pub fn per_sample_metrics(&self, threshold: f64) -> Result<MetricsReport, EvalError> {
        let scored = self.sample_scores()?;
        Ok(sample_metrics(&scored, threshold))
    }
}

fn sample_metrics(scored: &[(String, f64, u8)], threshold: f64) -> MetricsReport {
    let mut counts = Confusion::default();
    for (_, score, label) in scored {
        counts.record(Class::from_score(*score, threshold), *label);
    }
    let scores: Vec<f64> = scored.iter().map(|s| s.1).collect();
    let labels: Vec<u8> = scored.iter().map(|s| s.2).collect();
    MetricsReport::from_counts(Granularity::PerSample, counts, auc(&scores, &labels))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleMember {
    pub detector_id: String,
    #[serde(default)]
    pub checkpoint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub members: Vec<EnsembleMember>,
    pub threshold: f64,
}

impl EnsembleSpec {
    pub fn new<I, S>(detector_ids: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            members: detector_ids
                .into_iter()
                .map(|id| EnsembleMember { detector_id: id.into(), checkpoint: String::new() })
                .collect(),
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

/// Human only if every member's score is below the threshold.
pub fn ensemble_classify(scores: &BTreeMap<String, f64>, spec: &EnsembleSpec) -> Result<Class, EvalError> {
    if spec.members.is_empty() {
        return Err(EvalError::EmptyEnsemble);
    }
    let mut all_below = true;
    for member in &spec.members {
        let score = scores.get(&member.detector_id).ok_or_else(|| EvalError::MissingDetectorScore {
            sample: String::new(),
            detector: member.detector_id.clone(),
        })?;
        all_below &= *score < spec.threshold;
    }
    Ok(if all_below { Class::Human } else { Class::Ai })
}

/// Which members fired on one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleAttribution {
    pub sample_id: String,
    pub label: u8,
    pub predicted: Class,
    pub scores: BTreeMap<String, f64>,
    /// Members whose score reached the threshold.
    pub fired: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MemberFireCounts {
    pub on_ai: u64,
    pub on_human: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleEvaluation {
    /// Per-sample metrics; AUC uses the largest member score as the
    /// ensemble score, which orders samples consistently with the rule.
    pub report: MetricsReport,
    pub members: BTreeMap<String, MemberFireCounts>,
    pub samples: Vec<SampleAttribution>,
}

/// Applies the ensemble rule to every sample of the first member's set.
/// Labels come from the first member.
pub fn ensemble_evaluate(sets: &[PredictionSet], spec: &EnsembleSpec) -> Result<EnsembleEvaluation, EvalError> {
    if spec.members.is_empty() || sets.is_empty() {
        return Err(EvalError::EmptyEnsemble);
    }
    let by_id: BTreeMap<&str, &PredictionSet> = sets.iter().map(|s| (s.detector_id.as_str(), s)).collect();
    for member in &spec.members {
        if !by_id.contains_key(member.detector_id.as_str()) {
            return Err(EvalError::MissingDetectorScore { sample: String::from("*"), detector: member.detector_id.clone() });
        }
    }
    let reference = by_id[spec.members[0].detector_id.as_str()];
    let mut counts = Confusion::default();
    let mut members: BTreeMap<String, MemberFireCounts> =
        spec.members.iter().map(|m| (m.detector_id.clone(), MemberFireCounts::default())).collect();
    let mut samples = Vec::with_capacity(reference.samples.len());
    let mut ensemble_scores = Vec::with_capacity(reference.samples.len());
    let mut labels = Vec::with_capacity(reference.samples.len());

    for (sample_id, first) in &reference.samples {
        let label = first.label.ok_or_else(|| EvalError::MissingLabel(sample_id.clone()))?;
        let mut scores = BTreeMap::new();
        for member in &spec.members {
            let prediction = by_id[member.detector_id.as_str()].samples.get(sample_id).ok_or_else(|| {
                EvalError::MissingDetectorScore { sample: sample_id.clone(), detector: member.detector_id.clone() }
            })?;
            scores.insert(member.detector_id.clone(), prediction.score()?);
        }
        let predicted = ensemble_classify(&scores, spec)?;
        counts.record(predicted, label);
        let fired: Vec<String> =
            scores.iter().filter(|(_, s)| **s >= spec.threshold).map(|(id, _)| id.clone()).collect();
        for id in &fired {
            let c = members.get_mut(id).expect("member registered");
            if label == 1 {
                c.on_ai += 1;
            } else {
                c.on_human += 1;
            }
        }
        ensemble_scores.push(scores.values().copied().fold(f64::NEG_INFINITY, f64::max));
        labels.push(label);
        samples.push(SampleAttribution { sample_id: sample_id.clone(), label, predicted, scores, fired });
    }
    let report = MetricsReport::from_counts(Granularity::PerSample, counts, auc(&ensemble_scores, &labels));
    Ok(EnsembleEvaluation { report, members, samples })
}

/// Keeps at most `limit` tokens of `text`, cut at a character boundary.
/// The result re-encodes to at most `limit` tokens, so truncation is idempotent.
pub fn truncate_for_context(text: &str, limit: usize, vocab: &Vocabulary) -> String {
    let seq = vocab.encode(text);
    if seq.len() <= limit {
        return text.to_string();
    }
    let mut keep = limit;
    loop {
        let mut end = if keep == 0 { 0 } else { seq.offsets[keep - 1].end };
        while !text.is_char_boundary(end) {
            end -= 1;
        }
        let candidate = &text[..end];
        if keep == 0 || vocab.count_tokens(candidate) <= limit {
            return candidate.to_string();
        }
        keep -= 1;
    }
}
