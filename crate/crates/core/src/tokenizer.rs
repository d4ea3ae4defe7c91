//! Reference byte-level tokenizer with an optional BPE merge table.
//!
//! Every byte value has its own token, so any input is encodable and
//! `decode(encode(s)) == s` holds for every string. Merges are applied
//! greedily, lowest rank first, inside whitespace-delimited chunks: a chunk
//! boundary sits before every ASCII whitespace byte that follows a
//! non-whitespace byte.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::ops::Range;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub type TokenId = u32;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TokenizerError {
    #[error("token id {id} is out of range for a vocabulary of {size}")]
    InvalidId { id: TokenId, size: usize },
    #[error("decoded bytes are not valid UTF-8")]
    InvalidUtf8,
    #[error("invalid vocabulary: {0}")]
    InvalidVocabulary(String),
}

/// Ids of the special tokens. They carry no text and are stripped on decode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Specials {
    pub pad_id: TokenId,
    pub bos_id: TokenId,
    pub eos_id: TokenId,
}

/// Token ids plus the byte span of each token in the source text.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TokenSeq {
    pub ids: Vec<TokenId>,
    pub offsets: Vec<Range<usize>>,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// An immutable vocabulary: dense token ids, byte sequences, ordered merges.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<Vec<u8>>,
    merges: Vec<(TokenId, TokenId)>,
    specials: Specials,
    byte_ids: [TokenId; 256],
    /// (left, right) -> (rank, merged id)
    merge_table: BTreeMap<(TokenId, TokenId), (u32, TokenId)>,
    is_special: Vec<bool>,
}

impl Vocabulary {
    /// The merge-free byte vocabulary: ids 0..=255 are bytes, then pad, bos, eos.
    pub fn byte_level() -> Self {
        let mut tokens: Vec<Vec<u8>> = (0..=255u8).map(|b| alloc::vec![b]).collect();
        tokens.push(b"<pad>".to_vec());
        tokens.push(b"<bos>".to_vec());
        tokens.push(b"<eos>".to_vec());
        let specials = Specials { pad_id: 256, bos_id: 257, eos_id: 258 };
        Self::from_parts(tokens, Vec::new(), specials).expect("byte vocabulary is valid")
    }

    /// Builds and validates a vocabulary. Each merge `(a, b)` must have a
    /// non-special token whose bytes are `bytes(a) ++ bytes(b)`.
    pub fn from_parts(
        tokens: Vec<Vec<u8>>,
        merges: Vec<(TokenId, TokenId)>,
        specials: Specials,
    ) -> Result<Self, TokenizerError> {
        let size = tokens.len();
        let invalid = |msg: String| Err(TokenizerError::InvalidVocabulary(msg));
        let ids = [specials.pad_id, specials.bos_id, specials.eos_id];
        if ids.iter().any(|&id| id as usize >= size) {
            return invalid(format!("special ids {ids:?} must be below {size}"));
        }
        if ids[0] == ids[1] || ids[0] == ids[2] || ids[1] == ids[2] {
            return invalid(format!("special ids {ids:?} must be distinct"));
        }
        let mut is_special = alloc::vec![false; size];
        for id in ids {
            is_special[id as usize] = true;
        }

        let mut by_bytes: BTreeMap<&[u8], TokenId> = BTreeMap::new();
        for (id, bytes) in tokens.iter().enumerate() {
            if is_special[id] {
                continue;
            }
            if bytes.is_empty() {
                return invalid(format!("token {id} has no bytes"));
            }
            if by_bytes.insert(bytes.as_slice(), id as TokenId).is_some() {
                return invalid(format!("token {id} duplicates the bytes of another token"));
            }
        }

        let mut byte_ids = [0 as TokenId; 256];
        for b in 0..=255u8 {
            match by_bytes.get([b].as_slice()) {
                Some(&id) => byte_ids[b as usize] = id,
                None => return invalid(format!("byte 0x{b:02x} has no token")),
            }
        }

        let mut merge_table = BTreeMap::new();
        for (rank, &(left, right)) in merges.iter().enumerate() {
            if left as usize >= size || right as usize >= size {
                return invalid(format!("merge {rank} references an unknown id"));
            }
            if is_special[left as usize] || is_special[right as usize] {
                return invalid(format!("merge {rank} references a special token"));
            }
            let mut joined = tokens[left as usize].clone();
            joined.extend_from_slice(&tokens[right as usize]);
            let Some(&merged) = by_bytes.get(joined.as_slice()) else {
                return invalid(format!("merge {rank} produces bytes with no token"));
            };
            if merge_table.insert((left, right), (rank as u32, merged)).is_some() {
                return invalid(format!("merge {rank} is listed twice"));
            }
        }

        Ok(Self { tokens, merges, specials, byte_ids, merge_table, is_special })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn specials(&self) -> Specials {
        self.specials
    }

    pub fn tokens(&self) -> &[Vec<u8>] {
        &self.tokens
    }

    pub fn merges(&self) -> &[(TokenId, TokenId)] {
        &self.merges
    }

    /// Stable identifier: `byte` for the plain byte vocabulary, otherwise a
    /// digest of tokens and merges.
    pub fn id(&self) -> String {
        if self.merges.is_empty() && self.tokens.len() == 259 && self.specials.pad_id == 256 {
            return String::from("byte");
        }
        let mut hasher = Sha256::new();
        for t in &self.tokens {
            hasher.update((t.len() as u64).to_le_bytes());
            hasher.update(t);
        }
        for (a, b) in &self.merges {
            hasher.update(a.to_le_bytes());
            hasher.update(b.to_le_bytes());
        }
        let digest = hasher.finalize();
        let mut hex = String::new();
        for byte in &digest[..6] {
            hex.push_str(&format!("{byte:02x}"));
        }
        format!("bpe{}-{hex}", self.merges.len())
    }

    pub fn encode(&self, text: &str) -> TokenSeq {
        let bytes = text.as_bytes();
        let mut seq = TokenSeq {
            ids: Vec::with_capacity(bytes.len()),
            offsets: Vec::with_capacity(bytes.len()),
        };
        if self.merges.is_empty() {
            for (i, &b) in bytes.iter().enumerate() {
                seq.ids.push(self.byte_ids[b as usize]);
                seq.offsets.push(i..i + 1);
            }
            return seq;
        }
        for chunk in chunk_spans(bytes) {
            self.encode_chunk(bytes, chunk, &mut seq);
        }
        seq
    }

    fn encode_chunk(&self, bytes: &[u8], chunk: Range<usize>, out: &mut TokenSeq) {
        let mut ids: Vec<TokenId> = bytes[chunk.clone()].iter().map(|&b| self.byte_ids[b as usize]).collect();
        let mut spans: Vec<Range<usize>> = chunk.clone().map(|i| i..i + 1).collect();
        loop {
            let best = ids
                .windows(2)
                .filter_map(|w| self.merge_table.get(&(w[0], w[1])).map(|&(rank, merged)| (rank, w[0], w[1], merged)))
                .min_by_key(|&(rank, ..)| rank);
            let Some((_, left, right, merged)) = best else { break };
            let mut next_ids = Vec::with_capacity(ids.len());
            let mut next_spans = Vec::with_capacity(spans.len());
            let mut i = 0;
            while i < ids.len() {
                if i + 1 < ids.len() && ids[i] == left && ids[i + 1] == right {
                    next_ids.push(merged);
                    next_spans.push(spans[i].start..spans[i + 1].end);
                    i += 2;
                } else {
                    next_ids.push(ids[i]);
                    next_spans.push(spans[i].clone());
                    i += 1;
                }
            }
            ids = next_ids;
            spans = next_spans;
        }
        out.ids.extend(ids);
        out.offsets.extend(spans);
    }

    /// Concatenated bytes of `ids`, with special tokens dropped.
    pub fn decode_bytes(&self, ids: &[TokenId]) -> Result<Vec<u8>, TokenizerError> {
        let mut out = Vec::new();
        for &id in ids {
            let Some(bytes) = self.tokens.get(id as usize) else {
                return Err(TokenizerError::InvalidId { id, size: self.tokens.len() });
            };
            if !self.is_special[id as usize] {
                out.extend_from_slice(bytes);
            }
        }
        Ok(out)
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<String, TokenizerError> {
        String::from_utf8(self.decode_bytes(ids)?).map_err(|_| TokenizerError::InvalidUtf8)
    }

    pub fn count_tokens(&self, text: &str) -> usize {
        if self.merges.is_empty() {
            return text.len();
        }
        self.encode(text).len()
    }
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::byte_level()
    }
}

/// Splits `bytes` into merge chunks.
pub fn chunk_spans(bytes: &[u8]) -> Vec<Range<usize>> {
    let mut spans = Vec::new();
    let mut start = 0;
    for i in 1..bytes.len() {
        if bytes[i].is_ascii_whitespace() && !bytes[i - 1].is_ascii_whitespace() {
            spans.push(start..i);
            start = i;
        }
    }
    if start < bytes.len() {
        spans.push(start..bytes.len());
    }
    spans
}

/// Learns `n_merges` merges on top of the byte vocabulary from `texts`,
/// most frequent adjacent pair first (ties broken by smallest pair).
pub fn train_merges<'a, I>(texts: I, n_merges: usize) -> Vocabulary
where
    I: IntoIterator<Item = &'a str>,
{
    let base = Vocabulary::byte_level();
    let mut tokens = base.tokens.clone();
    let specials = base.specials;

    let mut words: BTreeMap<Vec<TokenId>, u64> = BTreeMap::new();
    for text in texts {
        let bytes = text.as_bytes();
        for span in chunk_spans(bytes) {
            let ids = bytes[span].iter().map(|&b| base.byte_ids[b as usize]).collect();
            *words.entry(ids).or_insert(0) += 1;
        }
    }
    let mut words: Vec<(Vec<TokenId>, u64)> = words.into_iter().collect();

    let mut merges = Vec::new();
    for _ in 0..n_merges {
        let mut pairs: BTreeMap<(TokenId, TokenId), u64> = BTreeMap::new();
        for (ids, freq) in &words {
            for w in ids.windows(2) {
                *pairs.entry((w[0], w[1])).or_insert(0) += freq;
            }
        }
        // BTreeMap iteration is ascending, so the first maximum is the smallest pair.
        let mut best: Option<((TokenId, TokenId), u64)> = None;
        for (pair, count) in pairs {
            if best.map_or(true, |(_, c)| count > c) {
                best = Some((pair, count));
            }
        }
        let Some(((left, right), _)) = best else { break };
        let mut joined = tokens[left as usize].clone();
        joined.extend_from_slice(&tokens[right as usize]);
        let merged = match tokens.iter().position(|t| *t == joined) {
            Some(existing) if !matches!(existing, 256..=258) => existing as TokenId,
            _ => {
                tokens.push(joined);
                (tokens.len() - 1) as TokenId
            }
        };
        merges.push((left, right));
        for (ids, _) in words.iter_mut() {
            let mut out = Vec::with_capacity(ids.len());
            let mut i = 0;
            while i < ids.len() {
                if i + 1 < ids.len() && ids[i] == left && ids[i + 1] == right {
                    out.push(merged);
                    i += 2;
                } else {
                    out.push(ids[i]);
                    i += 1;
                }
            }
            *ids = out;
        }
    }
    Vocabulary::from_parts(tokens, merges, specials).expect("trained vocabulary is valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;
    use proptest::prelude::*;

    fn small_bpe() -> Vocabulary {
        let corpus = ["the cat sat on the mat", "the hat and the bat", "that is the thing"];
        train_merges(corpus.iter().copied(), 20)
    }

    #[test]
    fn empty_text_is_empty_sequence() {
        let v = Vocabulary::byte_level();
        assert!(v.encode("").is_empty());
        assert_eq!(v.count_tokens(""), 0);
        assert_eq!(v.decode(&[]).unwrap(), "");
    }

    #[test]
    fn byte_vocab_gives_one_token_per_byte() {
        let v = Vocabulary::byte_level();
        let text = "a".repeat(100);
        assert_eq!(v.count_tokens(&text), 100);
        assert_eq!(v.encode("zażółć").len(), "zażółć".len());
    }

    #[test]
    fn specials_are_stripped_on_decode() {
        let v = Vocabulary::byte_level();
        let s = v.specials();
        let x = v.encode("x").ids[0];
        let y = v.encode("y").ids[0];
        assert_eq!(v.decode(&[s.pad_id, x, y]).unwrap(), "xy");
        assert_eq!(v.decode(&[s.bos_id, x, s.eos_id]).unwrap(), "x");
    }

    #[test]
    fn out_of_range_id_is_rejected() {
        let v = Vocabulary::byte_level();
        assert_eq!(v.decode(&[259]), Err(TokenizerError::InvalidId { id: 259, size: 259 }));
    }

    #[test]
    fn vocabulary_validation() {
        let base = Vocabulary::byte_level();
        let mut tokens = base.tokens().to_vec();
        tokens.pop();
        let bad = Specials { pad_id: 256, bos_id: 257, eos_id: 258 };
        assert!(Vocabulary::from_parts(tokens.clone(), vec![], bad).is_err());
        let dup = Specials { pad_id: 256, bos_id: 256, eos_id: 257 };
        assert!(Vocabulary::from_parts(base.tokens().to_vec(), vec![], dup).is_err());
        let mut missing_byte = base.tokens().to_vec();
        missing_byte[0] = b"zz".to_vec();
        assert!(Vocabulary::from_parts(missing_byte, vec![], base.specials()).is_err());
        // merge whose product is not in the token list
        assert!(Vocabulary::from_parts(base.tokens().to_vec(), vec![(97, 98)], base.specials()).is_err());
    }

    #[test]
    fn merges_shorten_frequent_words() {
        let v = small_bpe();
        assert!(!v.merges().is_empty());
        assert!(v.count_tokens("the the the") < "the the the".len());
        assert_ne!(v.id(), "byte");
        assert_eq!(Vocabulary::byte_level().id(), "byte");
    }

    #[test]
    fn offsets_tile_the_input() {
        let v = small_bpe();
        let text = "the cat  sat\n\non thé mat";
        let seq = v.encode(text);
        let mut pos = 0;
        for span in &seq.offsets {
            assert_eq!(span.start, pos);
            assert!(span.end > span.start);
            pos = span.end;
        }
        assert_eq!(pos, text.len());
    }

    #[test]
    fn merge_boundary_can_add_tokens() {
        // Greedy BPE is not subadditive: "ab" and "cd" are one token each,
        // but in "abcd" the higher-priority b+c merge blocks both.
        let base = Vocabulary::byte_level();
        let mut tokens = base.tokens().to_vec();
        tokens.push(b"bc".to_vec());
        tokens.push(b"ab".to_vec());
        tokens.push(b"cd".to_vec());
        let (a, b, c, d) = (97, 98, 99, 100);
        let v = Vocabulary::from_parts(tokens, vec![(b, c), (a, b), (c, d)], base.specials()).unwrap();
        assert_eq!(v.count_tokens("ab"), 1);
        assert_eq!(v.count_tokens("cd"), 1);
        assert_eq!(v.count_tokens("abcd"), 3);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn round_trip_byte_vocab(s in any::<String>()) {
            let v = Vocabulary::byte_level();
            prop_assert_eq!(v.decode(&v.encode(&s).ids).unwrap(), s);
        }

        #[test]
        fn round_trip_bpe(s in "[a-z ]{0,40}|\\PC{0,30}") {
            let v = small_bpe();
            let seq = v.encode(&s);
            prop_assert_eq!(v.count_tokens(&s), seq.len());
            prop_assert_eq!(v.decode(&seq.ids).unwrap(), s);
        }

        #[test]
        fn byte_counts_are_additive(a in any::<String>(), b in any::<String>()) {
            let v = Vocabulary::byte_level();
            let joined = a.clone() + &b;
            prop_assert_eq!(v.count_tokens(&joined), v.count_tokens(&a) + v.count_tokens(&b));
        }

        #[test]
        fn bpe_counts_are_additive_at_chunk_boundaries(a in "[a-z]{1,12}( [a-z]{1,8}){0,4}", b in "( [a-z]{1,8}){1,4}") {
            let v = small_bpe();
            let joined = a.clone() + &b;
            prop_assert_eq!(v.count_tokens(&joined), v.count_tokens(&a) + v.count_tokens(&b));
        }

        #[test]
        fn encoding_is_deterministic(s in "\\PC{0,64}") {
            let v = small_bpe();
            prop_assert_eq!(v.encode(&s), v.encode(&s.to_string()));
        }
    }
}
