use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::tensor::{Tensor3, TokenBatch};
use super::DetectorError;
use crate::seed::rng_for;
use crate::tokenizer::TokenId;

/// Shape of the frozen decoder plus the seed its weights are drawn from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl BackboneConfig {
    /// 64-wide, 2 layers, 4 heads.
    pub fn desk(vocab_size: usize, max_seq_len: usize, seed: u64) -> Self {
        Self { vocab_size, d_model: 64, n_layers: 2, n_heads: 4, max_seq_len, seed }
    }

    pub fn validate(&self) -> Result<(), DetectorError> {
        if self.vocab_size == 0 || self.d_model == 0 || self.n_heads == 0 || self.max_seq_len == 0 {
            return Err(DetectorError::Config(String::from("backbone dimensions must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(DetectorError::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn n_weights(&self) -> usize {
        let c = self.d_model;
        self.vocab_size * c + self.max_seq_len * c + self.n_layers * layer_size(c) + 2 * c
    }
}

fn layer_size(c: usize) -> usize {
    // ln1 (2c), q k v o (4c²), ln2 (2c), w1 (4c²) + b1 (4c), w2 (4c²) + b2 (c)
    2 * c + 4 * c * c + 2 * c + 4 * c * c + 4 * c + 4 * c * c + c
}

/// Offsets of one layer's tensors in the flat weight vector.
struct LayerView {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

impl LayerView {
    fn at(start: usize, c: usize) -> Self {
        let mut off = start;
        let mut next = |n: usize| {
            let here = off;
            off += n;
            here
        };
        LayerView {
            ln1_g: next(c),
            ln1_b: next(c),
            wq: next(c * c),
            wk: next(c * c),
            wv: next(c * c),
            wo: next(c * c),
            ln2_g: next(c),
            ln2_b: next(c),
            w1: next(4 * c * c),
            b1: next(4 * c),
            w2: next(4 * c * c),
            b2: next(c),
        }
    }
}

/// Frozen pre-norm causal transformer. Weights never change after construction.
#[derive(Debug, Clone)]
pub struct Backbone {
    config: BackboneConfig,
    weights: Vec<f64>,
}

impl Backbone {
    /// Draws weights from the config seed.
    pub fn new(config: BackboneConfig) -> Result<Self, DetectorError> {
        config.validate()?;
        let c = config.d_model;
        let mut rng = rng_for(config.seed, "backbone.weights");
        let mut weights = Vec::with_capacity(config.n_weights());
        let mut normal = |std: f64, n: usize, out: &mut Vec<f64>| {
            for _ in 0..n {
                out.push(std * standard_normal(&mut rng));
            }
        };
        normal(1.0, config.vocab_size * c, &mut weights);
        normal(0.1, config.max_seq_len * c, &mut weights);
        let proj = 1.0 / libm::sqrt(c as f64);
        for _ in 0..config.n_layers {
            weights.extend(core::iter::repeat(1.0).take(c));
            weights.extend(core::iter::repeat(0.0).take(c));
            normal(proj, 4 * c * c, &mut weights);
            weights.extend(core::iter::repeat(1.0).take(c));
            weights.extend(core::iter::repeat(0.0).take(c));
            normal(proj, 4 * c * c, &mut weights);
            weights.extend(core::iter::repeat(0.0).take(4 * c));
            normal(proj / 2.0, 4 * c * c, &mut weights);
            weights.extend(core::iter::repeat(0.0).take(c));
        }
        weights.extend(core::iter::repeat(1.0).take(c));
        weights.extend(core::iter::repeat(0.0).take(c));
        debug_assert_eq!(weights.len(), config.n_weights());
        Ok(Self { config, weights })
    }

    /// Uses externally supplied weights in the flat layout.
    pub fn from_weights(config: BackboneConfig, weights: Vec<f64>) -> Result<Self, DetectorError> {
        config.validate()?;
        if weights.len() != config.n_weights() {
            return Err(DetectorError::Shape(format!(
                "backbone expects {} weights, got {}",
                config.n_weights(),
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(DetectorError::Config(String::from("backbone weights must be finite")));
        }
        Ok(Self { config, weights })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// SHA-256 of the little-endian weight bytes, hex encoded.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for w in &self.weights {
            hasher.update(w.to_le_bytes());
        }
        let mut hex = String::with_capacity(64);
        for b in hasher.finalize() {
            hex.push_str(&format!("{b:02x}"));
        }
        hex
    }

    /// Representations `(B, T, C)` for a left-padded batch. Padding rows are
    /// zero; real tokens are positioned from 0 at the first real token and
    /// never attend to padding, so their values do not depend on the pad count.
    pub fn forward(&self, batch: &TokenBatch) -> Result<Tensor3, DetectorError> {
        batch.validate()?;
        let c = self.config.d_model;
        let mut out = Tensor3::zeros(batch.batch, batch.len, c);
        for b in 0..batch.batch {
            let start = batch.first_real(b)?;
            let ids = &batch.ids[b * batch.len + start..(b + 1) * batch.len];
            let reps = self.encode(ids)?;
            for (t, rep) in reps.chunks_exact(c).enumerate() {
                out.at_mut(b, start + t).copy_from_slice(rep);
            }
        }
        Ok(out)
    }

    /// Representations of one unpadded sequence, row-major `(n, C)`.
    pub fn encode(&self, ids: &[TokenId]) -> Result<Vec<f64>, DetectorError> {
        let cfg = &self.config;
        let n = ids.len();
        if n > cfg.max_seq_len {
            return Err(DetectorError::SequenceTooLong { len: n, max: cfg.max_seq_len });
        }
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
            return Err(DetectorError::TokenOutOfRange { id, vocab_size: cfg.vocab_size });
        }
        let c = cfg.d_model;
        let w = &self.weights;
        let tok = 0;
        let pos = cfg.vocab_size * c;

        let mut x = vec![0.0; n * c];
        for (t, &id) in ids.iter().enumerate() {
            let e = &w[tok + id as usize * c..tok + (id as usize + 1) * c];
            let p = &w[pos + t * c..pos + (t + 1) * c];
            for ((xi, ei), pi) in x[t * c..(t + 1) * c].iter_mut().zip(e).zip(p) {
                *xi = ei + pi;
            }
        }

        let layers_start = pos + cfg.max_seq_len * c;
        for layer in 0..cfg.n_layers {
            let v = LayerView::at(layers_start + layer * layer_size(c), c);
            let h = layer_norm(&x, c, &w[v.ln1_g..v.ln1_g + c], &w[v.ln1_b..v.ln1_b + c]);
            let attn = self.attention(&h, n, &v);
            let proj = matmul(&attn, n, c, &w[v.wo..v.wo + c * c], c);
            add_in_place(&mut x, &proj);

            let h = layer_norm(&x, c, &w[v.ln2_g..v.ln2_g + c], &w[v.ln2_b..v.ln2_b + c]);
            let mut hidden = matmul(&h, n, c, &w[v.w1..v.w1 + 4 * c * c], 4 * c);
            for row in hidden.chunks_exact_mut(4 * c) {
                for (hv, bv) in row.iter_mut().zip(&w[v.b1..v.b1 + 4 * c]) {
                    *hv = gelu(*hv + bv);
                }
            }
            let mut mlp = matmul(&hidden, n, 4 * c, &w[v.w2..v.w2 + 4 * c * c], c);
            for row in mlp.chunks_exact_mut(c) {
                add_in_place(row, &w[v.b2..v.b2 + c]);
            }
            add_in_place(&mut x, &mlp);
        }
        let lnf = layers_start + cfg.n_layers * layer_size(c);
        Ok(layer_norm(&x, c, &w[lnf..lnf + c], &w[lnf + c..lnf + 2 * c]))
    }

    fn attention(&self, h: &[f64], n: usize, v: &LayerView) -> Vec<f64> {
        let c = self.config.d_model;
        let heads = self.config.n_heads;
        let dh = c / heads;
        let w = &self.weights;
        let q = matmul(h, n, c, &w[v.wq..v.wq + c * c], c);
        let k = matmul(h, n, c, &w[v.wk..v.wk + c * c], c);
        let val = matmul(h, n, c, &w[v.wv..v.wv + c * c], c);
        let scale = 1.0 / libm::sqrt(dh as f64);
        let mut out = vec![0.0; n * c];
        let mut scores = vec![0.0; n];
        for head in 0..heads {
            let cols = head * dh..(head + 1) * dh;
            for t in 0..n {
                let qt = &q[t * c + cols.start..t * c + cols.end];
                let mut max = f64::NEG_INFINITY;
                for s in 0..=t {
                    let ks = &k[s * c + cols.start..s * c + cols.end];
                    let dot: f64 = qt.iter().zip(ks).map(|(a, b)| a * b).sum();
                    scores[s] = dot * scale;
                    max = max.max(scores[s]);
                }
                let mut denom = 0.0;
                for score in scores.iter_mut().take(t + 1) {
                    *score = libm::exp(*score - max);
                    denom += *score;
                }
                let ot = &mut out[t * c + cols.start..t * c + cols.end];
                for (s, score) in scores.iter().enumerate().take(t + 1) {
                    let p = score / denom;
                    let vs = &val[s * c + cols.start..s * c + cols.end];
                    for (o, vv) in ot.iter_mut().zip(vs) {
                        *o += p * vv;
                    }
                }
            }
        }
        out
    }
}

/// `(n, k) x (k, m)`, both row-major.
fn matmul(a: &[f64], n: usize, k: usize, b: &[f64], m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for (j, &aij) in a[i * k..(i + 1) * k].iter().enumerate() {
            for (o, bv) in row.iter_mut().zip(&b[j * m..(j + 1) * m]) {
                *o += aij * bv;
            }
        }
    }
    out
}

fn add_in_place(x: &mut [f64], y: &[f64]) {
    for (a, b) in x.iter_mut().zip(y) {
        *a += b;
    }
}

fn layer_norm(x: &[f64], c: usize, gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks_exact(c) {
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let inv = 1.0 / libm::sqrt(var + 1e-5);
        out.extend(row.iter().zip(gain).zip(bias).map(|((v, g), b)| (v - mean) * inv * g + b));
    }
    out
}

fn gelu(x: f64) -> f64 {
    const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
    0.5 * x * (1.0 + libm::tanh(SQRT_2_OVER_PI * (x + 0.044_715 * x * x * x)))
}

/// Box-Muller draw from N(0, 1).
fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen::<f64>();
    libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(2.0 * core::f64::consts::PI * u2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;

    fn tiny() -> Backbone {
        Backbone::new(BackboneConfig { vocab_size: 40, d_model: 16, n_layers: 2, n_heads: 4, max_seq_len: 32, seed: 5 })
            .unwrap()
    }

    fn batch(rows: &[&[TokenId]]) -> TokenBatch {
        let rows: Vec<_> = rows
            .iter()
            .enumerate()
            .map(|(i, ids)| (i.to_string(), ids.to_vec(), vec![0u8; ids.len()]))
            .collect();
        TokenBatch::left_padded(&rows, 0).unwrap()
    }

    #[test]
    fn weight_count_matches_layout() {
        let b = tiny();
        assert_eq!(b.weights().len(), b.config().n_weights());
        assert_eq!(b.checksum(), tiny().checksum());
        let other = Backbone::new(BackboneConfig { seed: 6, ..b.config().clone() }).unwrap();
        assert_ne!(b.checksum(), other.checksum());
    }

    #[test]
    fn single_token_depends_on_token_and_position_zero() {
        let b = tiny();
        let alone = b.encode(&[7]).unwrap();
        let first_of_many = b.encode(&[7, 3, 9]).unwrap();
        assert_eq!(alone[..], first_of_many[..16]);
        assert_ne!(alone, b.encode(&[8]).unwrap());
    }

    #[test]
    fn left_padding_does_not_change_real_tokens() {
        let b = tiny();
        let text: &[TokenId] = &[5, 6, 7, 8, 9];
        let long: &[TokenId] = &[1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12];
        let reps = b.forward(&batch(&[text, long])).unwrap();
        let pads = 7;
        let direct = b.encode(text).unwrap();
        for t in 0..text.len() {
            assert_eq!(reps.at(0, pads + t), &direct[t * 16..(t + 1) * 16]);
        }
        assert!(reps.at(0, 0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn later_tokens_do_not_affect_earlier_positions() {
        let b = tiny();
        let base = b.encode(&[1, 2, 3, 4, 5, 6]).unwrap();
        let perturbed = b.encode(&[1, 2, 3, 39, 5, 6]).unwrap();
        assert_eq!(base[..3 * 16], perturbed[..3 * 16]);
        assert_ne!(base[3 * 16..4 * 16], perturbed[3 * 16..4 * 16]);
    }

    #[test]
    fn limits_are_enforced() {
        let b = tiny();
        assert_eq!(b.encode(&[1; 33]), Err(DetectorError::SequenceTooLong { len: 33, max: 32 }));
        assert!(matches!(b.encode(&[40]), Err(DetectorError::TokenOutOfRange { .. })));
        let bad = BackboneConfig { d_model: 10, n_heads: 4, ..b.config().clone() };
        assert!(Backbone::new(bad).is_err());
        assert!(Backbone::from_weights(b.config().clone(), vec![0.0; 3]).is_err());
    }

    #[test]
    fn outputs_are_finite_and_normalized() {
        let b = tiny();
        let reps = b.encode(&[3, 1, 4, 1, 5, 9, 2, 6]).unwrap();
        assert!(reps.iter().all(|v| v.is_finite()));
        for row in reps.chunks_exact(16) {
            let mean = row.iter().sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-9);
        }
    }
}
