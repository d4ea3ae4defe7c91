//! Seeded synthetic corpora for demos and tests.
//!
//! Every source writes pseudo-words drawn from its own letter pool, with its
//! own word-length and sentence-length habits, so the sources have clearly
//! different token distributions. Genres change sentence counts.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Source, TextSample};
use crate::seed::rng_for;
use crate::tokenizer::Vocabulary;

const ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyz";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub generators: Vec<String>,
    pub genres: Vec<String>,
    /// Samples for every (source, genre) pair.
    pub samples_per_stratum: usize,
    /// Sentences per sample, before the genre multiplier.
    pub min_sentences: usize,
    pub max_sentences: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            generators: ["alpha-7b", "alpha-13b", "beta-8b"].iter().map(|s| String::from(*s)).collect(),
            genres: ["essay", "news"].iter().map(|s| String::from(*s)).collect(),
            samples_per_stratum: 300,
            min_sentences: 1,
            max_sentences: 3,
            seed: 0,
        }
    }
}

/// Writing habits of one source.
#[derive(Debug, Clone, PartialEq)]
struct Style {
    letters: Vec<u8>,
    min_word: usize,
    max_word: usize,
    min_words: usize,
    max_words: usize,
    terminator: u8,
}

impl Style {
    /// Style `k` takes the `k`-th six-letter window of the alphabet.
    fn nth(k: usize) -> Style {
        let letters = (0..6).map(|i| ALPHABET[(6 * k + i) % ALPHABET.len()]).collect();
        Style {
            letters,
            min_word: 2 + k % 3,
            max_word: 5 + k % 4,
            min_words: 4 + k % 2,
            max_words: 9 + 2 * (k % 3),
            terminator: [b'.', b'!', b'?', b'.'][k % 4],
        }
    }

    fn word<R: Rng>(&self, rng: &mut R, out: &mut String) {
        let n = rng.gen_range(self.min_word..=self.max_word);
        for _ in 0..n {
            out.push(self.letters[rng.gen_range(0..self.letters.len())] as char);
        }
    }

    fn sentence<R: Rng>(&self, rng: &mut R, out: &mut String) {
        let n = rng.gen_range(self.min_words..=self.max_words);
        let start = out.len();
        for i in 0..n {
            if i > 0 {
                out.push(' ');
            }
            self.word(rng, out);
        }
        if let Some(first) = out[start..].chars().next() {
            let upper = first.to_ascii_uppercase();
            out.replace_range(start..start + 1, upper.encode_utf8(&mut [0u8; 4]));
        }
        out.push(self.terminator as char);
    }
}

/// Generates `samples_per_stratum` texts for human writing and every
/// generator in every genre. Ids look like `human-essay-00007`.
pub fn synth_corpus(cfg: &SynthConfig, vocab: &Vocabulary) -> Vec<TextSample> {
    let mut sources = Vec::with_capacity(cfg.generators.len() + 1);
    sources.push(Source::Human);
    sources.extend(cfg.generators.iter().map(|g| Source::generator(g)));
    let mut out = Vec::with_capacity(sources.len() * cfg.genres.len() * cfg.samples_per_stratum);
    for (k, source) in sources.iter().enumerate() {
        let style = Style::nth(k);
        let slug = source.generator_name().unwrap_or("human");
        for (g, genre) in cfg.genres.iter().enumerate() {
            let mut rng = rng_for(cfg.seed, &format!("synth.{slug}.{genre}"));
            for i in 0..cfg.samples_per_stratum {
                let sentences = rng.gen_range(cfg.min_sentences..=cfg.max_sentences.max(cfg.min_sentences)) + g;
                let mut text = String::new();
                for s in 0..sentences {
                    if s > 0 {
                        text.push(' ');
                    }
                    style.sentence(&mut rng, &mut text);
                }
                out.push(TextSample::new(format!("{slug}-{genre}-{i:05}"), &text, source.clone(), genre.clone(), vocab));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::count_sentences;
    use alloc::collections::BTreeSet;

    #[test]
    fn deterministic_and_sized() {
        let v = Vocabulary::byte_level();
        let cfg = SynthConfig { samples_per_stratum: 5, ..SynthConfig::default() };
        let a = synth_corpus(&cfg, &v);
        assert_eq!(a, synth_corpus(&cfg, &v));
        assert_eq!(a.len(), 4 * 2 * 5);
        let ids: BTreeSet<_> = a.iter().map(|s| s.id.clone()).collect();
        assert_eq!(ids.len(), a.len());
        let other = synth_corpus(&SynthConfig { seed: 1, ..cfg }, &v);
        assert_ne!(a, other);
    }

    #[test]
    fn sources_use_separate_letters() {
        let v = Vocabulary::byte_level();
        let corpus = synth_corpus(&SynthConfig { samples_per_stratum: 3, ..SynthConfig::default() }, &v);
        let letters = |name: &str| -> BTreeSet<char> {
            corpus
                .iter()
                .filter(|s| s.id.starts_with(name))
                .flat_map(|s| s.text.chars())
                .filter(|c| c.is_ascii_alphabetic())
                .map(|c| c.to_ascii_lowercase())
                .collect()
        };
        let human = letters("human-");
        let beta = letters("beta-8b-");
        assert!(human.is_disjoint(&beta));
    }

    #[test]
    fn sentence_counts_follow_genre() {
        let v = Vocabulary::byte_level();
        let cfg = SynthConfig { samples_per_stratum: 10, min_sentences: 2, max_sentences: 2, ..SynthConfig::default() };
        for s in synth_corpus(&cfg, &v) {
            let expected = if s.genre == "essay" { 2 } else { 3 };
            assert_eq!(count_sentences(&s.text), expected, "{}", s.text);
            assert_eq!(s.sentence_count, expected);
        }
    }
}
