//! Vocabulary files: JSON with base64 token bytes and the merge list.

use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use tokdetect_core::tokenizer::{Specials, TokenId};
use tokdetect_core::Vocabulary;

use crate::error::{Error, Result};
use crate::fsio::{read_json, write_json};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabularyFile {
    pub id: String,
    pub specials: Specials,
    pub tokens: Vec<String>,
    pub merges: Vec<(TokenId, TokenId)>,
}

impl VocabularyFile {
    pub fn from_vocabulary(vocab: &Vocabulary) -> Self {
        Self {
            id: vocab.id(),
            specials: vocab.specials(),
            tokens: vocab.tokens().iter().map(|t| STANDARD.encode(t)).collect(),
            merges: vocab.merges().to_vec(),
        }
    }

    pub fn into_vocabulary(self, path: &Path) -> Result<Vocabulary> {
        let tokens = self
            .tokens
            .iter()
            .map(|t| STANDARD.decode(t).map_err(|e| Error::format(path, e)))
            .collect::<Result<Vec<_>>>()?;
        let vocab = Vocabulary::from_parts(tokens, self.merges, self.specials)?;
        if vocab.id() != self.id {
            return Err(Error::format(path, format!("content hashes to `{}`, file says `{}`", vocab.id(), self.id)));
        }
        Ok(vocab)
    }
}

pub fn write_vocabulary(path: &Path, vocab: &Vocabulary) -> Result<()> {
    write_json(path, &VocabularyFile::from_vocabulary(vocab))
}

pub fn read_vocabulary(path: &Path) -> Result<Vocabulary> {
    read_json::<VocabularyFile>(path)?.into_vocabulary(path)
}

/// The vocabulary at `path`, or the byte vocabulary when none is given.
pub fn load_or_default(path: Option<&Path>) -> Result<Vocabulary> {
    match path {
        Some(p) => read_vocabulary(p),
        None => Ok(Vocabulary::byte_level()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tokdetect_core::tokenizer::train_merges;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.json");
        let vocab = train_merges(["the cat sat on the mat", "the hat"], 12);
        write_vocabulary(&path, &vocab).unwrap();
        let back = read_vocabulary(&path).unwrap();
        assert_eq!(back.id(), vocab.id());
        assert_eq!(back.encode("the mat").ids, vocab.encode("the mat").ids);
    }

    #[test]
    fn tampered_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.json");
        let mut file = VocabularyFile::from_vocabulary(&train_merges(["aaaa bbbb"], 2));
        file.id = String::from("bpe2-000000000000");
        write_json(&path, &file).unwrap();
        assert!(read_vocabulary(&path).is_err());
    }
}
