use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::backbone::Backbone;
use super::head::{bce_loss_and_grad, build_features, head_predict, HeadParams};
use super::schedule::lr_at;
use super::tensor::Tensor3;
use super::{DetectorError, THRESHOLD};
use crate::seed::rng_for;
use crate::tokenizer::TokenId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub min_lr: f64,
    pub max_lr: f64,
    pub batch_size: usize,
    pub warmup_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            min_lr: 2e-5,
            max_lr: 2e-4,
            batch_size: 64,
            warmup_fraction: 0.20,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), DetectorError> {
        let bad = |m: &str| Err(DetectorError::Config(String::from(m)));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.min_lr >= 0.0 && self.min_lr <= self.max_lr) {
            return bad("learning rates must satisfy 0 <= min_lr <= max_lr");
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 0.5) {
            return bad("warmup_fraction must be in (0, 0.5)");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must be in [0, 1)");
        }
        Ok(())
    }
}

/// Adam over a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n_params: usize, cfg: &TrainConfig) -> Self {
        Self { beta1: cfg.beta1, beta2: cfg.beta2, eps: cfg.adam_eps, m: vec![0.0; n_params], v: vec![0.0; n_params], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - libm::pow(self.beta1, self.t as f64);
        let c2 = 1.0 - libm::pow(self.beta2, self.t as f64);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(self.m.iter_mut()).zip(self.v.iter_mut()) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (libm::sqrt(v_hat) + self.eps);
        }
    }
}

/// Backbone output for one sample, cached because the backbone is frozen.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSample {
    pub id: String,
    /// `(n, C)` row-major.
    pub reps: Vec<f64>,
    pub labels: Vec<u8>,
}

impl EncodedSample {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Runs the backbone over `(id, token ids, per-token labels)` samples.
pub fn encode_samples(
    backbone: &Backbone,
    samples: &[(String, Vec<TokenId>, Vec<u8>)],
) -> Result<Vec<EncodedSample>, DetectorError> {
    samples
        .iter()
        .map(|(id, ids, labels)| {
            if ids.is_empty() {
                return Err(DetectorError::Shape(alloc::format!("sample `{id}` has no tokens")));
            }
            Ok(EncodedSample { id: id.clone(), reps: backbone.encode(ids)?, labels: labels.clone() })
        })
        .collect()
}

/// Left-pads a group of cached samples into `(B, T, C)` with mask and labels.
fn pad_batch(samples: &[&EncodedSample], dim: usize) -> (Tensor3, Vec<bool>, Vec<u8>) {
    let len = samples.iter().map(|s| s.len()).max().unwrap_or(0);
    let mut reps = Tensor3::zeros(samples.len(), len, dim);
    let mut mask = vec![false; samples.len() * len];
    let mut labels = vec![0u8; samples.len() * len];
    for (b, s) in samples.iter().enumerate() {
        let pads = len - s.len();
        for t in 0..s.len() {
            reps.at_mut(b, pads + t).copy_from_slice(&s.reps[t * dim..(t + 1) * dim]);
            mask[b * len + pads + t] = true;
            labels[b * len + pads + t] = s.labels[t];
        }
    }
    (reps, mask, labels)
}

/// Token probabilities for each sample, in order.
pub fn predict_samples(samples: &[EncodedSample], head: &HeadParams, dim: usize) -> Result<Vec<Vec<f64>>, DetectorError> {
    samples
        .iter()
        .map(|s| {
            let (reps, mask, _) = pad_batch(&[s], dim);
            let features = build_features(&reps, &mask)?;
            Ok(head_predict(&features, head))
        })
        .collect()
}

/// Token accuracy (threshold 0.5) and mean token loss of `head` on `samples`.
pub fn evaluate_tokens(samples: &[EncodedSample], head: &HeadParams, dim: usize) -> Result<(f64, f64), DetectorError> {
    let mut correct = 0usize;
    let mut total = 0usize;
    let mut loss_sum = 0.0;
    for s in samples {
        let (reps, mask, labels) = pad_batch(&[s], dim);
        let features = build_features(&reps, &mask)?;
        let out = bce_loss_and_grad(&features, &labels, &mask, head)?;
        loss_sum += out.loss * out.count as f64;
        for (p, y) in head_predict(&features, head).iter().zip(&labels) {
            correct += usize::from((*p >= THRESHOLD) == (*y == 1));
        }
        total += out.count;
    }
    if total == 0 {
        return Err(DetectorError::AllMasked);
    }
    Ok((correct as f64 / total as f64, loss_sum / total as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    /// Last step of the epoch.
    pub step: u64,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Head from the epoch with the highest validation token accuracy
    /// (earliest on ties); the initial head when no epoch ran.
    pub best_head: HeadParams,
    pub best_epoch: Option<usize>,
    pub best_val_accuracy: Option<f64>,
    pub final_head: HeadParams,
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochSummary>,
}

/// Trains the head with Adam on cached backbone outputs. Only the head's
/// parameters change; the backbone is not an input.
pub fn train(
    train_set: &[EncodedSample],
    val_set: &[EncodedSample],
    dim: usize,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, DetectorError> {
    cfg.validate()?;
    let width = 2 * dim;
    let mut head = HeadParams::zeros(width);
    let mut outcome = TrainOutcome {
        best_head: head.clone(),
        best_epoch: None,
        best_val_accuracy: None,
        final_head: head.clone(),
        steps: Vec::new(),
        epochs: Vec::new(),
    };
    if cfg.epochs == 0 {
        return Ok(outcome);
    }
    if train_set.is_empty() || val_set.is_empty() {
        return Err(DetectorError::Config(String::from("train and validation splits must be non-empty")));
    }
    for s in train_set.iter().chain(val_set) {
        if s.is_empty() || s.reps.len() != s.len() * dim {
            return Err(DetectorError::Shape(alloc::format!("sample `{}` has inconsistent shapes", s.id)));
        }
    }

    let batches_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let total_steps = (batches_per_epoch * cfg.epochs) as u64;
    let mut adam = Adam::new(width + 1, cfg);
    let mut params = vec![0.0; width + 1];
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut rng = rng_for(cfg.seed, "train.shuffle");
    let mut step = 0u64;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let members: Vec<&EncodedSample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (reps, mask, labels) = pad_batch(&members, dim);
            let features = build_features(&reps, &mask)?;
            let grad = bce_loss_and_grad(&features, &labels, &mask, &head)?;
            let lr = lr_at(step, total_steps, cfg);
            let mut g = grad.dw;
            g.push(grad.db);
            adam.step(&mut params, &g, lr);
            head.w.copy_from_slice(&params[..width]);
            head.b = params[width];
            outcome.steps.push(StepLog { step, epoch, lr, loss: grad.loss });
            epoch_loss += grad.loss;
            step += 1;
        }
        let (val_accuracy, val_loss) = evaluate_tokens(val_set, &head, dim)?;
        outcome.epochs.push(EpochSummary {
            epoch,
            step: step - 1,
            train_loss: epoch_loss / batches_per_epoch as f64,
            val_accuracy,
            val_loss,
        });
        if outcome.best_val_accuracy.map_or(true, |best| val_accuracy > best) {
            outcome.best_val_accuracy = Some(val_accuracy);
            outcome.best_epoch = Some(epoch);
            outcome.best_head = head.clone();
        }
    }
    outcome.final_head = head;
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::format;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Samples whose representations are separable by the sign of the
    /// first coordinate of the final token.
    fn separable(n: usize, dim: usize, seed: u64) -> Vec<EncodedSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let label = (i % 2) as u8;
                let len = rng.gen_range(3..12);
                let sign = if label == 1 { 1.0 } else { -1.0 };
                let mut reps = Vec::with_capacity(len * dim);
                for _ in 0..len {
                    reps.push(sign * rng.gen_range(0.5..1.5));
                    for _ in 1..dim {
                        reps.push(rng.gen_range(-1.0..1.0));
                    }
                }
                EncodedSample { id: format!("s{i}"), reps, labels: vec![label; len] }
            })
            .collect()
    }

    fn cfg() -> TrainConfig {
        TrainConfig { min_lr: 1e-3, max_lr: 2e-2, batch_size: 8, seed: 4, ..TrainConfig::default() }
    }

    #[test]
    fn separable_task_is_learned() {
        let train_set = separable(120, 6, 1);
        let val_set = separable(40, 6, 2);
        let out = train(&train_set, &val_set, 6, &cfg()).unwrap();
        assert_eq!(out.epochs.len(), 5);
        assert!(out.best_val_accuracy.unwrap() >= 0.99, "{:?}", out.epochs);
        assert!(out.epochs[4].train_loss < out.epochs[0].train_loss);
        assert_eq!(out.steps.len(), 5 * 15);
        assert!(out.best_head.is_finite());
    }

    #[test]
    fn zero_epochs_returns_initial_head() {
        let out = train(&[], &[], 4, &TrainConfig { epochs: 0, ..cfg() }).unwrap();
        assert_eq!(out.best_head, HeadParams::zeros(8));
        assert!(out.steps.is_empty() && out.epochs.is_empty());
    }

    #[test]
    fn same_seed_same_trajectory() {
        let train_set = separable(50, 4, 7);
        let val_set = separable(10, 4, 8);
        let a = train(&train_set, &val_set, 4, &cfg()).unwrap();
        let b = train(&train_set, &val_set, 4, &cfg()).unwrap();
        assert_eq!(a, b);
        let c = train(&train_set, &val_set, 4, &TrainConfig { seed: 5, ..cfg() }).unwrap();
        assert_ne!(a.steps, c.steps);
    }

    #[test]
    fn best_epoch_is_kept() {
        let train_set = separable(40, 4, 9);
        let val_set = separable(20, 4, 10);
        let out = train(&train_set, &val_set, 4, &cfg()).unwrap();
        let best = out.epochs.iter().map(|e| e.val_accuracy).fold(f64::MIN, f64::max);
        assert_eq!(out.best_val_accuracy, Some(best));
        let first_best = out.epochs.iter().find(|e| e.val_accuracy == best).unwrap().epoch;
        assert_eq!(out.best_epoch, Some(first_best));
        let (acc, _) = evaluate_tokens(&val_set, &out.best_head, 4).unwrap();
        assert_eq!(acc, best);
    }

    #[test]
    fn adam_moves_against_gradient() {
        let c = TrainConfig::default();
        let mut adam = Adam::new(2, &c);
        let mut p = [1.0, -1.0];
        adam.step(&mut p, &[0.5, -0.5], 0.1);
        // the first bias-corrected step has magnitude ~lr
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { batch_size: 0, ..cfg() }.validate().is_err());
        assert!(TrainConfig { min_lr: 1.0, max_lr: 0.1, ..cfg() }.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }
}
