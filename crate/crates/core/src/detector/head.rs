use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::tensor::{first_real, Tensor3};
use super::DetectorError;

/// Trainable linear head over `2C` features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    pub w: Vec<f64>,
    pub b: f64,
}

impl HeadParams {
    /// `w = 0, b = 0`: every token starts at p = 0.5.
    pub fn zeros(feature_width: usize) -> Self {
        Self { w: vec![0.0; feature_width], b: 0.0 }
    }

    pub fn feature_width(&self) -> usize {
        self.w.len()
    }

    pub fn is_finite(&self) -> bool {
        self.b.is_finite() && self.w.iter().all(|v| v.is_finite())
    }

    pub fn logit(&self, feature: &[f64]) -> f64 {
        self.w.iter().zip(feature).map(|(w, f)| w * f).sum::<f64>() + self.b
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + libm::exp(-z))
    } else {
        let e = libm::exp(z);
        e / (1.0 + e)
    }
}

/// `(B, T, C)` to `(B, T, 2C)`: each position's representation followed by
/// the representation of its row's last real token.
pub fn build_features(reps: &Tensor3, mask: &[bool]) -> Result<Tensor3, DetectorError> {
    let (batch, len, c) = reps.shape();
    if mask.len() != batch * len {
        return Err(DetectorError::Shape(alloc::format!("mask has {} entries for ({batch}, {len})", mask.len())));
    }
    let mut out = Tensor3::zeros(batch, len, 2 * c);
    for b in 0..batch {
        let row_mask = &mask[b * len..(b + 1) * len];
        first_real(row_mask, b)?;
        let last = row_mask.iter().rposition(|&m| m).ok_or(DetectorError::EmptyRow(b))?;
        let final_rep = reps.at(b, last);
        for t in 0..len {
            let f = out.at_mut(b, t);
            f[..c].copy_from_slice(reps.at(b, t));
            f[c..].copy_from_slice(final_rep);
        }
    }
    Ok(out)
}

/// `sigmoid(w . f + b)` for every position, `(B, T)` row-major.
pub fn head_predict(features: &Tensor3, head: &HeadParams) -> Vec<f64> {
    features.data.chunks_exact(features.dim).map(|f| sigmoid(head.logit(f))).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossAndGrad {
    pub loss: f64,
    pub dw: Vec<f64>,
    pub db: f64,
    /// Number of unmasked positions averaged over.
    pub count: usize,
}

const LOG_CLAMP: f64 = 1e-12;

/// Mean binary cross-entropy over unmasked positions and its gradient with
/// respect to the head.
pub fn bce_loss_and_grad(
    features: &Tensor3,
    labels: &[u8],
    mask: &[bool],
    head: &HeadParams,
) -> Result<LossAndGrad, DetectorError> {
    let width = features.dim;
    let positions = features.batch * features.len;
    if labels.len() != positions || mask.len() != positions || head.w.len() != width {
        return Err(DetectorError::Shape(alloc::format!(
            "features ({}, {}, {width}), {} labels, {} mask entries, head width {}",
            features.batch,
            features.len,
            labels.len(),
            mask.len(),
            head.w.len()
        )));
    }
    let mut loss = 0.0;
    let mut dw = vec![0.0; width];
    let mut db = 0.0;
    let mut count = 0usize;
    for (i, f) in features.data.chunks_exact(width).enumerate() {
        if !mask[i] {
            continue;
        }
        let p = sigmoid(head.logit(f));
        let y = labels[i] as f64;
        loss -= y * libm::log(p.max(LOG_CLAMP)) + (1.0 - y) * libm::log((1.0 - p).max(LOG_CLAMP));
        let err = p - y;
        for (g, x) in dw.iter_mut().zip(f) {
            *g += err * x;
        }
        db += err;
        count += 1;
    }
    if count == 0 {
        return Err(DetectorError::AllMasked);
    }
    let n = count as f64;
    for g in dw.iter_mut() {
        *g /= n;
    }
    Ok(LossAndGrad { loss: loss / n, dw, db: db / n, count })
}
