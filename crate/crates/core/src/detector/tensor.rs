use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::DetectorError;
use crate::tokenizer::TokenId;

/// Dense row-major `(batch, len, dim)` array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    pub batch: usize,
    pub len: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(batch: usize, len: usize, dim: usize) -> Self {
        Self { batch, len, dim, data: vec![0.0; batch * len * dim] }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.batch, self.len, self.dim)
    }

    pub fn at(&self, b: usize, t: usize) -> &[f64] {
        let start = (b * self.len + t) * self.dim;
        &self.data[start..start + self.dim]
    }

    pub fn at_mut(&mut self, b: usize, t: usize) -> &mut [f64] {
        let start = (b * self.len + t) * self.dim;
        &mut self.data[start..start + self.dim]
    }
}

/// Left-padded token ids with mask and per-token labels, all `(B, T)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub batch: usize,
    pub len: usize,
    pub ids: Vec<TokenId>,
    /// `true` on real tokens.
    pub mask: Vec<bool>,
    pub labels: Vec<u8>,
    pub sample_ids: Vec<String>,
}

impl TokenBatch {
    /// Pads every row on the left to the longest row.
    pub fn left_padded(rows: &[(String, Vec<TokenId>, Vec<u8>)], pad_id: TokenId) -> Result<Self, DetectorError> {
        let len = rows.iter().map(|(_, ids, _)| ids.len()).max().unwrap_or(0);
        let mut batch = TokenBatch {
            batch: rows.len(),
            len,
            ids: Vec::with_capacity(rows.len() * len),
            mask: Vec::with_capacity(rows.len() * len),
            labels: Vec::with_capacity(rows.len() * len),
            sample_ids: Vec::with_capacity(rows.len()),
        };
        for (row, (id, ids, labels)) in rows.iter().enumerate() {
            if ids.len() != labels.len() {
                return Err(DetectorError::Shape(alloc::format!(
                    "row {row}: {} ids but {} labels",
                    ids.len(),
                    labels.len()
                )));
            }
            let pads = len - ids.len();
            batch.ids.extend(core::iter::repeat(pad_id).take(pads).chain(ids.iter().copied()));
            batch.mask.extend(core::iter::repeat(false).take(pads).chain(core::iter::repeat(true).take(ids.len())));
            batch.labels.extend(core::iter::repeat(0).take(pads).chain(labels.iter().copied()));
            batch.sample_ids.push(id.clone());
        }
        Ok(batch)
    }

    pub fn row_mask(&self, b: usize) -> &[bool] {
        &self.mask[b * self.len..(b + 1) * self.len]
    }

    /// Index of the first real token of row `b`; errors if the row is empty
    /// or not left-padded.
    pub fn first_real(&self, b: usize) -> Result<usize, DetectorError> {
        first_real(self.row_mask(b), b)
    }

    pub fn validate(&self) -> Result<(), DetectorError> {
        let n = self.batch * self.len;
        if self.ids.len() != n || self.mask.len() != n || self.labels.len() != n || self.sample_ids.len() != self.batch {
            return Err(DetectorError::Shape(alloc::format!("batch arrays do not match ({}, {})", self.batch, self.len)));
        }
        for b in 0..self.batch {
            self.first_real(b)?;
        }
        Ok(())
    }
}

pub(crate) fn first_real(mask: &[bool], row: usize) -> Result<usize, DetectorError> {
    let start = mask.iter().position(|&m| m).ok_or(DetectorError::EmptyRow(row))?;
    if mask[start..].iter().all(|&m| m) {
        Ok(start)
    } else {
        Err(DetectorError::NotLeftPadded(row))
    }
}
