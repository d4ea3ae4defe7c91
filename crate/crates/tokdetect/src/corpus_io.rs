//! JSON-lines corpora, manifests, splits and statistics tables.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tokdetect_core::corpus::{CorpusError, CorpusManifest, Deduper, GroupedStats, ManifestEntry, Source, TextSample};
use tokdetect_core::sampler::LabeledSample;
use tokdetect_core::Vocabulary;

use crate::error::{Error, Result};
use crate::fsio::{atomic_write, read_json, read_jsonl, write_json, write_jsonl};

const REQUIRED: [&str; 4] = ["id", "text", "source", "genre"];

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadOptions {
    /// Skip and count malformed lines instead of aborting.
    pub skip_malformed: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadReport {
    pub loaded: usize,
    pub malformed: usize,
    pub duplicates: usize,
}

impl LoadReport {
    pub fn merge(&mut self, other: &LoadReport) {
        self.loaded += other.loaded;
        self.malformed += other.malformed;
        self.duplicates += other.duplicates;
    }
}

fn parse_record(path: &Path, line_no: usize, line: &str, vocab: &Vocabulary) -> Result<TextSample> {
    let malformed = |reason: String| Error::MalformedRecord { path: path.into(), line: line_no, reason };
    let value: serde_json::Value = serde_json::from_str(line).map_err(|e| malformed(e.to_string()))?;
    let object = value.as_object().ok_or_else(|| malformed(String::from("not a JSON object")))?;
    for field in REQUIRED {
        if !object.contains_key(field) {
            return Err(Error::MissingField { path: path.into(), line: line_no, field });
        }
    }
    let cached = object.get("token_count").and_then(|v| v.as_u64());
    let mut sample: TextSample = serde_json::from_value(value).map_err(|e| malformed(e.to_string()))?;
    sample.annotate(vocab);
    if sample.text.trim().is_empty() {
        return Err(malformed(String::from("empty text")));
    }
    if let Some(cached) = cached {
        if cached as usize != sample.token_count {
            return Err(CorpusError::TokenCountMismatch {
                id: sample.id.clone(),
                cached: cached as usize,
                actual: sample.token_count,
            }
            .into());
        }
    }
    Ok(sample)
}

/// Reads one corpus file: NFC-normalizes, recounts and drops duplicate texts
/// within each (source, genre) group. A cached `token_count` that disagrees
/// with the tokenizer is an error.
pub fn load_corpus(path: &Path, vocab: &Vocabulary, opts: LoadOptions) -> Result<(Vec<TextSample>, LoadReport)> {
    let mut deduper = Deduper::new();
    load_with(path, vocab, opts, &mut deduper)
}

fn load_with(
    path: &Path,
    vocab: &Vocabulary,
    opts: LoadOptions,
    deduper: &mut Deduper,
) -> Result<(Vec<TextSample>, LoadReport)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut report = LoadReport::default();
    let mut out = Vec::new();
    let before = deduper.dropped();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_record(path, i + 1, &line, vocab) {
            Ok(sample) => {
                if deduper.admit(&sample) {
                    out.push(sample);
                }
            }
            Err(Error::MalformedRecord { .. }) if opts.skip_malformed => report.malformed += 1,
            Err(e) => return Err(e),
        }
    }
    report.loaded = out.len();
    report.duplicates = deduper.dropped() - before;
    Ok((out, report))
}

/// Loads several files in parallel and concatenates them in argument order.
/// Deduplication spans all files.
pub fn load_corpora(paths: &[PathBuf], vocab: &Vocabulary, opts: LoadOptions) -> Result<(Vec<TextSample>, LoadReport)> {
    let parts: Vec<Result<(Vec<TextSample>, LoadReport)>> =
        paths.par_iter().map(|p| load_with(p, vocab, opts, &mut Deduper::new())).collect();
    let mut deduper = Deduper::new();
    let mut report = LoadReport::default();
    let mut samples = Vec::new();
    for part in parts {
        let (part, r) = part?;
        report.malformed += r.malformed;
        report.duplicates += r.duplicates;
        samples.extend(part.into_iter().filter(|s| deduper.admit(s)));
    }
    report.duplicates += deduper.dropped();
    report.loaded = samples.len();
    Ok((samples, report))
}

/// Loads every file listed in a manifest (paths relative to the manifest)
/// and checks the listed sample and token counts.
pub fn load_manifest_corpus(manifest_path: &Path, vocab: &Vocabulary, opts: LoadOptions) -> Result<(Vec<TextSample>, LoadReport)> {
    let manifest: CorpusManifest = read_json(manifest_path)?;
    manifest.validate()?;
    if manifest.tokenizer_id != vocab.id() {
        return Err(Error::format(
            manifest_path,
            format!("manifest counts tokens with `{}`, current tokenizer is `{}`", manifest.tokenizer_id, vocab.id()),
        ));
    }
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let paths: Vec<PathBuf> = manifest.entries.iter().map(|e| base.join(&e.path)).collect();
    let (samples, report) = load_corpora(&paths, vocab, opts)?;
    let mut counted: BTreeMap<(Source, String), (u64, u64)> = BTreeMap::new();
    for s in &samples {
        let c = counted.entry((s.source.clone(), s.genre.clone())).or_default();
        c.0 += 1;
        c.1 += s.token_count as u64;
    }
    let mut expected: BTreeMap<(Source, String), (u64, u64)> = BTreeMap::new();
    for e in &manifest.entries {
        let c = expected.entry((e.source.clone(), e.genre.clone())).or_default();
        c.0 += e.sample_count;
        c.1 += e.token_count;
    }
    if counted != expected {
        return Err(Error::format(manifest_path, "sample or token counts differ from the listed files"));
    }
    Ok((samples, report))
}

pub fn write_corpus(path: &Path, samples: &[TextSample]) -> Result<()> {
    write_jsonl(path, samples)
}

/// Writes one file per (source, genre) group under `dir` plus `manifest.json`.
pub fn write_corpus_dir(dir: &Path, samples: &[TextSample], vocab: &Vocabulary) -> Result<CorpusManifest> {
    let mut groups: BTreeMap<(Source, String), Vec<TextSample>> = BTreeMap::new();
    for s in samples {
        groups.entry((s.source.clone(), s.genre.clone())).or_default().push(s.clone());
    }
    let mut entries = Vec::with_capacity(groups.len());
    for ((source, genre), members) in groups {
        let slug = source.generator_name().unwrap_or("human");
        let name = format!("{slug}__{genre}.jsonl");
        write_corpus(&dir.join(&name), &members)?;
        entries.push(ManifestEntry {
            path: name,
            source,
            genre,
            sample_count: members.len() as u64,
            token_count: members.iter().map(|s| s.token_count as u64).sum(),
        });
    }
    let manifest = CorpusManifest::new(vocab.id(), entries);
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

#[derive(Serialize)]
struct StatsRow<'a> {
    group: &'a str,
    n_samples: u64,
    n_sentences: u64,
    n_words: u64,
    n_tokens: u64,
}

pub fn stats_csv(stats: &GroupedStats) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for (group, s) in stats.rows() {
        w.serialize(StatsRow {
            group: &group,
            n_samples: s.n_samples,
            n_sentences: s.n_sentences,
            n_words: s.n_words,
            n_tokens: s.n_tokens,
        })
        .expect("writing to memory");
    }
    String::from_utf8(w.into_inner().expect("writing to memory")).expect("csv output is UTF-8")
}

pub fn write_split(path: &Path, samples: &[LabeledSample]) -> Result<()> {
    write_jsonl(path, samples)
}

pub fn read_split(path: &Path) -> Result<Vec<LabeledSample>> {
    read_jsonl(path)
}

/// Writes a string through a temporary file.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    atomic_write(path, |w| w.write_all(text.as_bytes()))
}
