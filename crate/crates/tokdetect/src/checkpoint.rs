//! Binary weight files: one JSON header line, then little-endian `f64`s.
//!
//! Head checkpoints store `w` followed by `b`. Backbone files store the flat
//! backbone weights. Both headers carry enough to rebuild or verify the
//! backbone the head was trained on.

use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tokdetect_core::detector::{Backbone, BackboneConfig, HeadParams, TrainConfig};

use crate::error::{Error, Result};
use crate::fsio::atomic_write;

pub const HEAD_FORMAT: &str = "tokdetect-head/1";
pub const BACKBONE_FORMAT: &str = "tokdetect-backbone/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub detector_id: String,
    pub d_model: usize,
    pub feature_width: usize,
    pub backbone: BackboneConfig,
    pub backbone_checksum: String,
    /// Set when the backbone weights came from a file rather than the seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backbone_file: Option<String>,
    pub vocabulary_id: String,
    pub train: TrainConfig,
    /// Last optimizer step of the saved epoch.
    pub step: u64,
    pub epoch: Option<usize>,
    /// Validation token accuracy of the saved head.
    pub metric: Option<f64>,
    pub payload_len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub head: HeadParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneHeader {
    pub format: String,
    pub config: BackboneConfig,
    pub checksum: String,
    pub payload_len: usize,
}

fn write_weight_file<H: Serialize>(path: &Path, header: &H, payload: &[f64]) -> Result<()> {
    let line = serde_json::to_string(header).map_err(|e| Error::format(path, e))?;
    atomic_write(path, |w| {
        w.write_all(line.as_bytes())?;
        w.write_all(b"\n")?;
        for v in payload {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    })
}

fn read_weight_file<H: DeserializeOwned>(path: &Path) -> Result<(H, Vec<f64>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let newline = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| Error::format(path, "missing header line"))?;
    let header = serde_json::from_slice(&bytes[..newline]).map_err(|e| Error::format(path, e))?;
    let payload = &bytes[newline + 1..];
    if payload.len() % 8 != 0 {
        return Err(Error::format(path, "payload is not a whole number of f64 values"));
    }
    let values = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Ok((header, values))
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut payload = ckpt.head.w.clone();
    payload.push(ckpt.head.b);
    let mut header = ckpt.header.clone();
    header.payload_len = payload.len();
    write_weight_file(path, &header, &payload)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let (header, mut payload): (CheckpointHeader, Vec<f64>) = read_weight_file(path)?;
    let mismatch = |reason: String| Error::CheckpointMismatch { path: path.into(), reason };
    if header.format != HEAD_FORMAT {
        return Err(mismatch(format!("unknown format `{}`", header.format)));
    }
    if payload.len() != header.payload_len || payload.len() != header.feature_width + 1 {
        return Err(mismatch(format!(
            "payload has {} values, header expects {} (feature width {} + bias)",
            payload.len(),
            header.payload_len,
            header.feature_width
        )));
    }
    if header.feature_width != 2 * header.d_model || header.d_model != header.backbone.d_model {
        return Err(mismatch(format!(
            "feature width {} does not match 2 x backbone width {}",
            header.feature_width, header.backbone.d_model
        )));
    }
    let b = payload.pop().expect("non-empty payload");
    Ok(Checkpoint { header, head: HeadParams { w: payload, b } })
}

pub fn save_backbone(path: &Path, backbone: &Backbone) -> Result<()> {
    let header = BackboneHeader {
        format: String::from(BACKBONE_FORMAT),
        config: backbone.config().clone(),
        checksum: backbone.checksum(),
        payload_len: backbone.weights().len(),
    };
    write_weight_file(path, &header, backbone.weights())
}

pub fn load_backbone(path: &Path) -> Result<Backbone> {
    let (header, payload): (BackboneHeader, Vec<f64>) = read_weight_file(path)?;
    if header.format != BACKBONE_FORMAT {
        return Err(Error::format(path, format!("unknown format `{}`", header.format)));
    }
    let backbone = Backbone::from_weights(header.config, payload)?;
    if backbone.checksum() != header.checksum {
        return Err(Error::format(path, "weights do not match the header checksum"));
    }
    Ok(backbone)
}

/// Rebuilds the backbone a checkpoint was trained on: from `file` when given
/// (or recorded in the header), otherwise from the config seed. The result
/// must hash to the recorded checksum.
pub fn backbone_for(ckpt_path: &Path, header: &CheckpointHeader, file: Option<&Path>) -> Result<Backbone> {
    let recorded = header.backbone_file.as_ref().map(|f| ckpt_path.parent().unwrap_or(Path::new(".")).join(f));
    let backbone = match file.map(Path::to_path_buf).or(recorded) {
        Some(p) => load_backbone(&p)?,
        None => Backbone::new(header.backbone.clone())?,
    };
    if backbone.checksum() != header.backbone_checksum {
        return Err(Error::CheckpointMismatch {
            path: ckpt_path.into(),
            reason: String::from("backbone weights differ from the ones the head was trained on"),
        });
    }
    if 2 * backbone.d_model() != header.feature_width {
        return Err(Error::CheckpointMismatch {
            path: ckpt_path.into(),
            reason: format!("feature width {} != 2 x {}", header.feature_width, backbone.d_model()),
        });
    }
    Ok(backbone)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Backbone {
        Backbone::new(BackboneConfig { vocab_size: 259, d_model: 8, n_layers: 1, n_heads: 2, max_seq_len: 16, seed: 3 })
            .unwrap()
    }

    fn checkpoint(backbone: &Backbone) -> Checkpoint {
        let c = backbone.d_model();
        Checkpoint {
            header: CheckpointHeader {
                format: String::from(HEAD_FORMAT),
                detector_id: String::from("d"),
                d_model: c,
                feature_width: 2 * c,
                backbone: backbone.config().clone(),
                backbone_checksum: backbone.checksum(),
                backbone_file: None,
                vocabulary_id: String::from("byte"),
                train: TrainConfig::default(),
                step: 7,
                epoch: Some(2),
                metric: Some(0.75),
                payload_len: 0,
            },
            head: HeadParams { w: (0..2 * c).map(|i| i as f64 * 0.1 - 0.3).collect(), b: -0.125 },
        }
    }

    #[test]
    fn head_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.ckpt");
        let bb = tiny();
        let ckpt = checkpoint(&bb);
        save_checkpoint(&path, &ckpt).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.head, ckpt.head);
        assert_eq!(back.header.payload_len, 17);
        assert_eq!(backbone_for(&path, &back.header, None).unwrap().checksum(), bb.checksum());
        let bytes = std::fs::read(&path).unwrap();
        let header_len = bytes.iter().position(|&b| b == b'\n').unwrap() + 1;
        assert_eq!(bytes.len() - header_len, 17 * 8);
    }

    #[test]
    fn wrong_width_is_a_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.ckpt");
        let mut ckpt = checkpoint(&tiny());
        ckpt.header.feature_width = 10;
        ckpt.head.w.truncate(10);
        save_checkpoint(&path, &ckpt).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::CheckpointMismatch { .. })));
    }

    #[test]
    fn different_backbone_is_a_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.ckpt");
        let mut ckpt = checkpoint(&tiny());
        ckpt.header.backbone.seed = 4;
        save_checkpoint(&path, &ckpt).unwrap();
        let header = load_checkpoint(&path).unwrap().header;
        assert!(matches!(backbone_for(&path, &header, None), Err(Error::CheckpointMismatch { .. })));
    }

    #[test]
    fn backbone_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.bin");
        let bb = tiny();
        save_backbone(&path, &bb).unwrap();
        let back = load_backbone(&path).unwrap();
        assert_eq!(back.weights(), bb.weights());
    }
}
