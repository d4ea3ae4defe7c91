//! Training and running detectors over labeled splits, and the prediction
//! and report file formats.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tokdetect_core::detector::{
    encode_samples, predict_samples, train, Backbone, EncodedSample, HeadParams, TrainConfig, TrainOutcome,
};
use tokdetect_core::evalkit::{
    truncate_for_context, EnsembleEvaluation, MetricsReport, PredictionSet, SamplePrediction,
};
use tokdetect_core::sampler::LabeledSample;
use tokdetect_core::tokenizer::TokenId;
use tokdetect_core::Vocabulary;

use crate::checkpoint::{Checkpoint, CheckpointHeader, HEAD_FORMAT};
use crate::error::{Error, Result};
use crate::fsio::{read_jsonl, write_jsonl};

pub type Row = (String, Vec<TokenId>, Vec<u8>);

/// Tokenizes labeled samples, keeping at most `max_len` tokens of each and
/// giving every token its sample's label. With `context_limit`, texts are
/// first cut to that many tokens at a character boundary.
pub fn prepare_rows(samples: &[LabeledSample], vocab: &Vocabulary, max_len: usize, context_limit: Option<usize>) -> Vec<Row> {
    samples
        .par_iter()
        .map(|s| {
            let mut ids = match context_limit {
                Some(limit) => vocab.encode(&truncate_for_context(&s.sample.text, limit, vocab)).ids,
                None => vocab.encode(&s.sample.text).ids,
            };
            ids.truncate(max_len);
            let labels = vec![s.label; ids.len()];
            (s.sample.id.clone(), ids, labels)
        })
        .collect()
}

/// Backbone outputs for every row, computed in parallel, in input order.
pub fn encode_rows(backbone: &Backbone, rows: &[Row]) -> Result<Vec<EncodedSample>> {
    let parts: Vec<_> = rows.par_chunks(8).map(|chunk| encode_samples(backbone, chunk)).collect();
    let mut out = Vec::with_capacity(rows.len());
    for part in parts {
        out.extend(part?);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct TrainedDetector {
    pub checkpoint: Checkpoint,
    pub outcome: TrainOutcome,
}

/// Encodes both splits with the frozen backbone and trains the head. The
/// checkpoint holds the head from the best validation epoch.
pub fn train_detector(
    detector_id: &str,
    train_split: &[LabeledSample],
    val_split: &[LabeledSample],
    vocab: &Vocabulary,
    backbone: &Backbone,
    backbone_file: Option<String>,
    cfg: &TrainConfig,
) -> Result<TrainedDetector> {
    let max_len = backbone.config().max_seq_len;
    let train_set = encode_rows(backbone, &prepare_rows(train_split, vocab, max_len, None))?;
    let val_set = encode_rows(backbone, &prepare_rows(val_split, vocab, max_len, None))?;
    let c = backbone.d_model();
    let outcome = train(&train_set, &val_set, c, cfg)?;
    let step = match outcome.best_epoch {
        Some(e) => outcome.epochs[e - 1].step,
        None => 0,
    };
    let header = CheckpointHeader {
        format: String::from(HEAD_FORMAT),
        detector_id: detector_id.to_string(),
        d_model: c,
        feature_width: 2 * c,
        backbone: backbone.config().clone(),
        backbone_checksum: backbone.checksum(),
        backbone_file,
        vocabulary_id: vocab.id(),
        train: cfg.clone(),
        step,
        epoch: outcome.best_epoch,
        metric: outcome.best_val_accuracy,
        payload_len: 2 * c + 1,
    };
    Ok(TrainedDetector { checkpoint: Checkpoint { header, head: outcome.best_head.clone() }, outcome })
}

/// `step,epoch,lr,loss,val_acc`; `val_acc` is filled on the last step of each epoch.
pub fn training_log_csv(outcome: &TrainOutcome) -> String {
    let last_steps: BTreeMap<u64, f64> = outcome.epochs.iter().map(|e| (e.step, e.val_accuracy)).collect();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["step", "epoch", "lr", "loss", "val_acc"]).expect("writing to memory");
    for s in &outcome.steps {
        let val = last_steps.get(&s.step).map(|v| v.to_string()).unwrap_or_default();
        w.write_record([s.step.to_string(), s.epoch.to_string(), s.lr.to_string(), s.loss.to_string(), val])
            .expect("writing to memory");
    }
    String::from_utf8(w.into_inner().expect("writing to memory")).expect("csv output is UTF-8")
}

/// Runs one detector over labeled samples.
pub fn predict(
    detector_id: &str,
    backbone: &Backbone,
    head: &HeadParams,
    vocab: &Vocabulary,
    samples: &[LabeledSample],
    context_limit: Option<usize>,
) -> Result<PredictionSet> {
    let rows = prepare_rows(samples, vocab, backbone.config().max_seq_len, context_limit);
    let encoded = encode_rows(backbone, &rows)?;
    let probs = predict_samples(&encoded, head, backbone.d_model())?;
    let mut set = PredictionSet::new(detector_id);
    for ((s, p), row) in samples.iter().zip(probs).zip(rows) {
        set.insert(
            s.sample.id.clone(),
            SamplePrediction { token_probs: p, sample_score: None, label: Some(s.label), token_labels: Some(row.2) },
        )?;
    }
    Ok(set)
}

/// One line of a prediction file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub sample_id: String,
    pub detector_id: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub token_probs: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<u8>,
}

pub fn prediction_records(set: &PredictionSet) -> Vec<PredictionRecord> {
    set.samples
        .iter()
        .map(|(id, p)| PredictionRecord {
            sample_id: id.clone(),
            detector_id: set.detector_id.clone(),
            token_probs: p.token_probs.clone(),
            sample_score: p.sample_score,
            label: p.label,
        })
        .collect()
}

pub fn write_predictions(path: &Path, set: &PredictionSet) -> Result<()> {
    write_jsonl(path, &prediction_records(set))
}

/// Groups prediction lines by detector, in order of first appearance.
pub fn read_predictions(path: &Path) -> Result<Vec<PredictionSet>> {
    let records: Vec<PredictionRecord> = read_jsonl(path)?;
    let mut sets: Vec<PredictionSet> = Vec::new();
    for r in records {
        let idx = match sets.iter().position(|s| s.detector_id == r.detector_id) {
            Some(i) => i,
            None => {
                sets.push(PredictionSet::new(r.detector_id.clone()));
                sets.len() - 1
            }
        };
        let prediction =
            SamplePrediction { token_probs: r.token_probs, sample_score: r.sample_score, label: r.label, token_labels: None };
        sets[idx].insert(r.sample_id, prediction).map_err(|e| Error::format(path, e))?;
    }
    Ok(sets)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub detector_id: String,
    pub threshold: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_token: Option<MetricsReport>,
    pub per_sample: MetricsReport,
}

/// Per-token metrics need token probabilities on every sample; prediction
/// files holding only sample scores get per-sample metrics alone.
pub fn evaluate_set(set: &PredictionSet, threshold: f64) -> Result<EvaluationReport> {
    let has_tokens = set.samples.values().all(|p| !p.token_probs.is_empty());
    Ok(EvaluationReport {
        detector_id: set.detector_id.clone(),
        threshold,
        per_token: if has_tokens { Some(set.per_token_metrics(threshold)?) } else { None },
        per_sample: set.per_sample_metrics(threshold)?,
    })
}

/// One row per granularity:
/// `detector,granularity,accuracy,balanced_accuracy,precision,recall,f1,auc,loss,tp,fp,tn,fn,undefined`.
pub fn metrics_csv<'a, I>(reports: I) -> String
where
    I: IntoIterator<Item = (&'a str, &'a MetricsReport)>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "detector", "granularity", "accuracy", "balanced_accuracy", "precision", "recall", "f1", "auc", "loss", "tp",
        "fp", "tn", "fn", "undefined",
    ])
    .expect("writing to memory");
    for (detector, r) in reports {
        let granularity = serde_json::to_value(r.granularity).expect("enum serializes");
        w.write_record([
            detector.to_string(),
            granularity.as_str().unwrap_or_default().to_string(),
            r.accuracy.to_string(),
            r.balanced_accuracy.to_string(),
            r.precision.to_string(),
            r.recall.to_string(),
            r.f1.to_string(),
            r.auc.to_string(),
            r.loss.map(|l| l.to_string()).unwrap_or_default(),
            r.counts.tp.to_string(),
            r.counts.fp.to_string(),
            r.counts.tn.to_string(),
            r.counts.fn_.to_string(),
            r.undefined.join(";"),
        ])
        .expect("writing to memory");
    }
    String::from_utf8(w.into_inner().expect("writing to memory")).expect("csv output is UTF-8")
}

/// `sample_id,label,predicted,fired,<one score column per member>`.
pub fn attribution_csv(eval: &EnsembleEvaluation) -> String {
    let members: Vec<&String> = eval.members.keys().collect();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec![String::from("sample_id"), String::from("label"), String::from("predicted"), String::from("fired")];
    header.extend(members.iter().map(|m| format!("score:{m}")));
    w.write_record(&header).expect("writing to memory");
    for s in &eval.samples {
        let mut row = vec![
            s.sample_id.clone(),
            s.label.to_string(),
            format!("{:?}", s.predicted).to_lowercase(),
            s.fired.join(";"),
        ];
        row.extend(members.iter().map(|m| s.scores.get(*m).map(|v| v.to_string()).unwrap_or_default()));
        w.write_record(&row).expect("writing to memory");
    }
    String::from_utf8(w.into_inner().expect("writing to memory")).expect("csv output is UTF-8")
}
