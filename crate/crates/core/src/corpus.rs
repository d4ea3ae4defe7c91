//! Text samples, corpus statistics, deduplication and length filtering.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use unicode_normalization::UnicodeNormalization;

use crate::tokenizer::Vocabulary;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CorpusError {
    #[error("line {line}: malformed record: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("line {line}: missing field `{field}`")]
    MissingField { line: usize, field: &'static str },
    #[error("invalid source `{0}` (expected `Human` or `Generator:<name>`)")]
    InvalidSource(String),
    #[error("sample `{0}` has empty text")]
    EmptyText(String),
    #[error("sample `{id}` caches {cached} tokens but the tokenizer counts {actual}")]
    TokenCountMismatch { id: String, cached: usize, actual: usize },
    #[error("human sample `{0}` must not carry a generator name")]
    HumanWithGenerator(String),
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
}

/// Who wrote a text.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Source {
    Human,
    Generator(String),
}

impl Source {
    pub fn generator(name: &str) -> Self {
        Source::Generator(name.to_string())
    }

    pub fn is_human(&self) -> bool {
        matches!(self, Source::Human)
    }

    pub fn generator_name(&self) -> Option<&str> {
        match self {
            Source::Human => None,
            Source::Generator(name) => Some(name),
        }
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Source::Human => f.write_str("Human"),
            Source::Generator(name) => write!(f, "Generator:{name}"),
        }
    }
}

impl FromStr for Source {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("human") {
            return Ok(Source::Human);
        }
        match s.split_once(':') {
            Some((kind, name)) if kind.eq_ignore_ascii_case("generator") && !name.trim().is_empty() => {
                Ok(Source::Generator(name.trim().to_string()))
            }
            Some((kind, _)) if kind.eq_ignore_ascii_case("human") => Err(CorpusError::HumanWithGenerator(s.to_string())),
            _ => Err(CorpusError::InvalidSource(s.to_string())),
        }
    }
}

impl Serialize for Source {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Source {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(deserializer)?;
        raw.parse().map_err(serde::de::Error::custom)
    }
}

/// Provenance of a generated sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationOrigin {
    pub source_sample_id: String,
    pub preset: String,
}

/// One text with its provenance and cached counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextSample {
    pub id: String,
    pub text: String,
    pub source: Source,
    pub genre: String,
    #[serde(default)]
    pub token_count: usize,
    #[serde(default)]
    pub sentence_count: usize,
    #[serde(default)]
    pub word_count: usize,
    /// Extra named fields used to fill prompt templates (e.g. `subreddit`).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub fields: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin: Option<GenerationOrigin>,
}

impl TextSample {
    /// Normalizes the text and fills every cached count.
    pub fn new(id: impl Into<String>, text: &str, source: Source, genre: impl Into<String>, vocab: &Vocabulary) -> Self {
        let mut sample = TextSample {
            id: id.into(),
            text: text.to_string(),
            source,
            genre: genre.into(),
            token_count: 0,
            sentence_count: 0,
            word_count: 0,
            fields: BTreeMap::new(),
            origin: None,
        };
        sample.annotate(vocab);
        sample
    }

    /// Applies NFC and recomputes the token, sentence and word counts.
    pub fn annotate(&mut self, vocab: &Vocabulary) {
        self.text = normalize_text(&self.text);
        self.token_count = vocab.count_tokens(&self.text);
        self.sentence_count = count_sentences(&self.text);
        self.word_count = count_words(&self.text);
    }

    pub fn validate(&self, vocab: &Vocabulary) -> Result<(), CorpusError> {
        if self.text.trim().is_empty() {
            return Err(CorpusError::EmptyText(self.id.clone()));
        }
        let actual = vocab.count_tokens(&self.text);
        if actual != self.token_count {
            return Err(CorpusError::TokenCountMismatch { id: self.id.clone(), cached: self.token_count, actual });
        }
        Ok(())
    }

    pub fn stats(&self) -> CorpusStats {
        CorpusStats {
            n_samples: 1,
            n_sentences: self.sentence_count as u64,
            n_words: self.word_count as u64,
            n_tokens: self.token_count as u64,
        }
    }
}

pub fn normalize_text(text: &str) -> String {
    text.nfc().collect()
}

/// Sentences end at `.`, `!` or `?` followed by whitespace or end of text.
/// Counts the non-blank pieces between such boundaries.
pub fn count_sentences(text: &str) -> usize {
    let mut count = 0;
    let mut has_content = false;
    let mut chars = text.chars().peekable();
    while let Some(c) = chars.next() {
        if !c.is_whitespace() {
            has_content = true;
        }
        let terminal = matches!(c, '.' | '!' | '?');
        if terminal && chars.peek().map_or(true, |n| n.is_whitespace()) && has_content {
            count += 1;
            has_content = false;
        }
    }
    if has_content {
        count += 1;
    }
    count
}

pub fn count_words(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Sample, sentence, word and token totals.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub n_samples: u64,
    pub n_sentences: u64,
    pub n_words: u64,
    pub n_tokens: u64,
}

impl CorpusStats {
    pub fn add(&mut self, sample: &TextSample) {
        self.merge(&sample.stats());
    }

    pub fn merge(&mut self, other: &CorpusStats) {
        self.n_samples += other.n_samples;
        self.n_sentences += other.n_sentences;
        self.n_words += other.n_words;
        self.n_tokens += other.n_tokens;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupBy {
    None,
    Genre,
    /// Two groups: `human` and `ai`.
    Source,
    /// `human` plus one group per generator.
    Generator,
}

impl GroupBy {
    pub fn key(self, sample: &TextSample) -> Option<String> {
        match self {
            GroupBy::None => None,
            GroupBy::Genre => Some(sample.genre.clone()),
            GroupBy::Source => Some(String::from(if sample.source.is_human() { "human" } else { "ai" })),
            GroupBy::Generator => Some(match &sample.source {
                Source::Human => String::from("human"),
                Source::Generator(name) => name.clone(),
            }),
        }
    }
}

impl FromStr for GroupBy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(GroupBy::None),
            "genre" => Ok(GroupBy::Genre),
            "source" => Ok(GroupBy::Source),
            "generator" | "model" => Ok(GroupBy::Generator),
            other => Err(format!("unknown grouping `{other}`")),
        }
    }
}

/// Per-group statistics plus the total over all groups.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupedStats {
    pub group_by: GroupBy,
    pub groups: BTreeMap<String, CorpusStats>,
    pub total: CorpusStats,
}

impl GroupedStats {
    pub fn new(group_by: GroupBy) -> Self {
        Self { group_by, groups: BTreeMap::new(), total: CorpusStats::default() }
    }

    pub fn add(&mut self, sample: &TextSample) {
        if let Some(key) = self.group_by.key(sample) {
            self.groups.entry(key).or_default().add(sample);
        }
        self.total.add(sample);
    }

    /// Associative, commutative merge of two accumulators over disjoint inputs.
    pub fn merge(&mut self, other: &GroupedStats) {
        for (key, stats) in &other.groups {
            self.groups.entry(key.clone()).or_default().merge(stats);
        }
        self.total.merge(&other.total);
    }

    /// Rows `(group, stats)` with the total last.
    pub fn rows(&self) -> Vec<(String, CorpusStats)> {
        let mut rows: Vec<_> = self.groups.iter().map(|(k, v)| (k.clone(), *v)).collect();
        rows.push((String::from("total"), self.total));
        rows
    }
}

pub fn compute_stats<'a, I>(samples: I, group_by: GroupBy) -> GroupedStats
where
    I: IntoIterator<Item = &'a TextSample>,
{
    let mut stats = GroupedStats::new(group_by);
    for sample in samples {
        stats.add(sample);
    }
    stats
}

/// Drops exact duplicate texts within each (source, genre) group, keeping
/// the first occurrence. Texts are compared after normalization.
#[derive(Debug, Default, Clone)]
pub struct Deduper {
    seen: BTreeSet<[u8; 32]>,
    dropped: usize,
}

impl Deduper {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns `true` the first time a (source, genre, text) triple is seen.
    pub fn admit(&mut self, sample: &TextSample) -> bool {
        let source = sample.source.to_string();
        let mut hasher = Sha256::new();
        for part in [source.as_str(), sample.genre.as_str(), sample.text.as_str()] {
            hasher.update((part.len() as u64).to_le_bytes());
            hasher.update(part.as_bytes());
        }
        let fresh = self.seen.insert(hasher.finalize().into());
        if !fresh {
            self.dropped += 1;
        }
        fresh
    }

    pub fn dropped(&self) -> usize {
        self.dropped
    }
}

pub fn dedup<I>(samples: I) -> impl Iterator<Item = TextSample>
where
    I: IntoIterator<Item = TextSample>,
{
    let mut deduper = Deduper::new();
    samples.into_iter().filter(move |s| deduper.admit(s))
}

/// Keeps samples with `token_count <= max_tokens`, preserving order.
pub fn filter_by_length<I>(samples: I, max_tokens: usize) -> impl Iterator<Item = TextSample>
where
    I: IntoIterator<Item = TextSample>,
{
    samples.into_iter().filter(move |s| s.token_count <= max_tokens)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub source: Source,
    pub genre: String,
    pub sample_count: u64,
    pub token_count: u64,
}

/// Index of corpus files with their expected counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub tokenizer_id: String,
    pub entries: Vec<ManifestEntry>,
    pub total_tokens: u64,
}

impl CorpusManifest {
    pub fn new(tokenizer_id: impl Into<String>, entries: Vec<ManifestEntry>) -> Self {
        let total_tokens = entries.iter().map(|e| e.token_count).sum();
        Self { tokenizer_id: tokenizer_id.into(), entries, total_tokens }
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        let sum: u64 = self.entries.iter().map(|e| e.token_count).sum();
        if sum != self.total_tokens {
            return Err(CorpusError::InvalidManifest(format!(
                "entry token counts sum to {sum}, manifest total is {}",
                self.total_tokens
            )));
        }
        let mut seen = BTreeSet::new();
        for e in &self.entries {
            if !seen.insert((&e.source, &e.genre, &e.path)) {
                return Err(CorpusError::InvalidManifest(format!(
                    "duplicate entry ({}, {}, {})",
                    e.source, e.genre, e.path
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    fn sample(id: &str, text: &str, source: Source, genre: &str) -> TextSample {
        TextSample::new(id, text, source, genre, &Vocabulary::byte_level())
    }

    #[test]
    fn source_round_trips_through_its_string_form() {
        assert_eq!("Generator:phi-4".parse::<Source>().unwrap(), Source::generator("phi-4"));
        assert_eq!("Human".parse::<Source>().unwrap(), Source::Human);
        assert_eq!(Source::generator("phi-4").to_string(), "Generator:phi-4");
        assert!(matches!("Human:bob".parse::<Source>(), Err(CorpusError::HumanWithGenerator(_))));
        assert!("Generator:".parse::<Source>().is_err());
        assert!("robot".parse::<Source>().is_err());
    }

    #[test]
    fn sentence_and_word_counts() {
        assert_eq!(count_sentences("Hello there. How are you? Fine!"), 3);
        assert_eq!(count_sentences("No terminal punctuation"), 1);
        assert_eq!(count_sentences("Version 3.5 is out. Yes"), 2);
        assert_eq!(count_sentences("Wow!!! Ok."), 2);
        assert_eq!(count_sentences(""), 0);
        assert_eq!(count_sentences("   "), 0);
        assert_eq!(count_words("  a b\tc\n\nd "), 4);
    }

    #[test]
    fn dedup_keeps_first_of_identical_texts() {
        let h = Source::Human;
        let samples = vec![
            sample("1", "same text", h.clone(), "blogs"),
            sample("2", "same text", h.clone(), "blogs"),
            sample("3", "other text", h.clone(), "blogs"),
        ];
        let kept: Vec<_> = dedup(samples).map(|s| s.id).collect();
        assert_eq!(kept, ["1", "3"]);
    }

    #[test]
    fn dedup_is_scoped_per_source_and_genre() {
        let samples = vec![
            sample("1", "same", Source::Human, "blogs"),
            sample("2", "same", Source::Human, "xsum"),
            sample("3", "same", Source::generator("m"), "blogs"),
        ];
        assert_eq!(dedup(samples).count(), 3);
    }

    #[test]
    fn nfc_merges_visually_identical_texts() {
        let composed = sample("1", "caf\u{e9}", Source::Human, "g");
        let decomposed = sample("2", "cafe\u{301}", Source::Human, "g");
        assert_eq!(composed.text, decomposed.text);
        assert_eq!(dedup(vec![composed, decomposed]).count(), 1);
    }

    #[test]
    fn stats_by_source() {
        let mut human = sample("h", "x", Source::Human, "g");
        human.token_count = 10;
        let mut ai = sample("a", "y", Source::generator("m"), "g");
        ai.token_count = 20;
        let stats = compute_stats([&human, &ai], GroupBy::Source);
        assert_eq!(stats.groups["human"].n_tokens, 10);
        assert_eq!(stats.groups["ai"].n_tokens, 20);
        assert_eq!(stats.total.n_tokens, 30);
        let empty = compute_stats(core::iter::empty(), GroupBy::Genre);
        assert_eq!(empty.total, CorpusStats::default());
        assert!(empty.groups.is_empty());
    }

    #[test]
    fn single_sample_group_equals_sample() {
        let s = sample("1", "One. Two three.", Source::generator("m"), "g");
        for g in [GroupBy::None, GroupBy::Genre, GroupBy::Source, GroupBy::Generator] {
            let stats = compute_stats([&s], g);
            assert_eq!(stats.total, s.stats());
            for v in stats.groups.values() {
                assert_eq!(*v, s.stats());
            }
        }
    }

    #[test]
    fn length_filter_bound_is_inclusive() {
        let mut at = sample("a", "x", Source::Human, "g");
        at.token_count = 8192;
        let mut over = sample("b", "x", Source::Human, "g");
        over.token_count = 8193;
        let kept: Vec<_> = filter_by_length(vec![at, over], 8192).map(|s| s.id).collect();
        assert_eq!(kept, ["a"]);
    }

    #[test]
    fn validation_catches_stale_counts_and_empty_text() {
        let v = Vocabulary::byte_level();
        let mut s = sample("a", "hello", Source::Human, "g");
        assert!(s.validate(&v).is_ok());
        s.token_count = 4;
        assert!(matches!(s.validate(&v), Err(CorpusError::TokenCountMismatch { .. })));
        let blank = sample("b", " ", Source::Human, "g");
        assert!(matches!(blank.validate(&v), Err(CorpusError::EmptyText(_))));
    }

    #[test]
    fn manifest_validation() {
        let entry = |path: &str, tokens| ManifestEntry {
            path: path.into(),
            source: Source::Human,
            genre: "g".into(),
            sample_count: 1,
            token_count: tokens,
        };
        let ok = CorpusManifest::new("byte", vec![entry("a", 3), entry("b", 4)]);
        assert_eq!(ok.total_tokens, 7);
        assert!(ok.validate().is_ok());
        let mut bad_sum = ok.clone();
        bad_sum.total_tokens = 8;
        assert!(bad_sum.validate().is_err());
        let dup = CorpusManifest::new("byte", vec![entry("a", 3), entry("a", 4)]);
        assert!(dup.validate().is_err());
    }

    fn arb_samples() -> impl Strategy<Value = Vec<TextSample>> {
        let one = ("[a-c]{1,3}( [a-c]{1,3}){0,3}[.!]?", 0..3u8, 0..3u8).prop_map(|(text, src, genre)| {
            let source = if src == 0 { Source::Human } else { Source::Generator(format!("m{src}")) };
            (text, source, format!("g{genre}"))
        });
        proptest::collection::vec(one, 0..40).prop_map(|items| {
            items
                .into_iter()
                .enumerate()
                .map(|(i, (text, source, genre))| sample(&format!("s{i}"), &text, source, &genre))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn dedup_is_idempotent(samples in arb_samples()) {
            let once: Vec<_> = dedup(samples).collect();
            let twice: Vec<_> = dedup(once.clone()).collect();
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn stats_are_additive_over_partitions(samples in arb_samples(), cut in 0usize..40) {
            let cut = cut.min(samples.len());
            for g in [GroupBy::Genre, GroupBy::Source, GroupBy::Generator] {
                let whole = compute_stats(&samples, g);
                let mut left = compute_stats(&samples[..cut], g);
                let right = compute_stats(&samples[cut..], g);
                let mut right_first = right.clone();
                right_first.merge(&left);
                left.merge(&right);
                prop_assert_eq!(&left, &whole);
                prop_assert_eq!(&right_first, &whole);
                let mut sum = CorpusStats::default();
                for v in whole.groups.values() {
                    sum.merge(v);
                }
                prop_assert_eq!(sum, whole.total);
            }
        }

        #[test]
        fn length_filters_compose_as_min(samples in arb_samples(), a in 1usize..12, b in 1usize..12) {
            let nested: Vec<_> = filter_by_length(filter_by_length(samples.clone(), a), b).collect();
            let direct: Vec<_> = filter_by_length(samples, a.min(b)).collect();
            prop_assert_eq!(nested, direct);
        }
    }
}
