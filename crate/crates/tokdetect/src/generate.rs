//! Generation client for OpenAI-style chat-completions endpoints.
//!
//! Prompts are rendered from a template, over-long ones are dropped, the
//! rest are grouped into batches and every batch gets a sampling preset
//! drawn up-front from the seed. Requests run on a bounded set of workers;
//! a single writer appends outputs and journal lines, so a rerun can skip
//! every sample already journaled as `ok`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};
use tokdetect_core::corpus::{GenerationOrigin, Source, TextSample};
use tokdetect_core::genpipe::{assign_presets, extract_response, ChatPrompt, Message, PromptTemplate, SamplingPreset};
use tokdetect_core::seed::rng_for;
use tokdetect_core::Vocabulary;

use crate::error::{Error, Result};
use crate::fsio::write_jsonl;

pub const DEFAULT_MAX_PROMPT_TOKENS: usize = 16_384;
pub const API_KEY_ENV: &str = "TOKDETECT_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_attempts: 5, base_delay_ms: 1000, max_delay_ms: 60_000 }
    }
}

impl RetryPolicy {
    /// Exponential delay before retry `attempt` (1-based), jittered by a
    /// factor in [0.5, 1.5).
    pub fn delay<R: Rng>(&self, attempt: u32, rng: &mut R) -> Duration {
        let exp = self.base_delay_ms.saturating_mul(1u64 << (attempt - 1).min(30));
        let capped = exp.min(self.max_delay_ms) as f64;
        Duration::from_millis((capped * rng.gen_range(0.5..1.5)) as u64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationJob {
    pub template: PromptTemplate,
    pub model: String,
    pub endpoint: String,
    pub max_prompt_tokens: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub max_tokens: Option<u32>,
    pub stop: Vec<String>,
    pub concurrency: usize,
    pub retry: RetryPolicy,
    /// Generate for a seeded random subset of this many prompts.
    pub subset: Option<usize>,
}

impl GenerationJob {
    pub fn new(template: PromptTemplate, model: &str, endpoint: &str) -> Self {
        Self {
            template,
            model: model.to_string(),
            endpoint: endpoint.to_string(),
            max_prompt_tokens: DEFAULT_MAX_PROMPT_TOKENS,
            batch_size: 8,
            seed: 0,
            max_tokens: None,
            stop: Vec::new(),
            concurrency: 8,
            retry: RetryPolicy::default(),
            subset: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_prompt_tokens == 0 || self.batch_size == 0 || self.concurrency == 0 || self.retry.max_attempts == 0 {
            return Err(Error::Config(String::from(
                "max_prompt_tokens, batch_size, concurrency and max_attempts must be positive",
            )));
        }
        Ok(())
    }
}

/// Body of one chat-completions request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub top_p: f64,
    pub top_k: i32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub stop: Vec<String>,
}

impl ChatRequest {
    pub fn new(job: &GenerationJob, prompt: &ChatPrompt, preset: &SamplingPreset) -> Self {
        Self {
            model: job.model.clone(),
            messages: prompt.messages.to_vec(),
            temperature: preset.temperature,
            top_p: preset.top_p,
            top_k: preset.top_k,
            max_tokens: job.max_tokens,
            stop: job.stop.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AttemptError {
    /// Worth retrying: transport failures, 429 and 5xx.
    Transient(String),
    Permanent(String),
}

pub trait ChatBackend: Sync {
    fn complete(&self, request: &ChatRequest) -> std::result::Result<String, AttemptError>;
}

/// Blocking HTTP backend. The bearer token is read from an environment variable.
pub struct HttpBackend {
    agent: ureq::Agent,
    url: String,
    api_key: Option<String>,
}

impl HttpBackend {
    pub fn new(endpoint: &str, api_key: Option<String>, timeout: Duration) -> Self {
        let trimmed = endpoint.trim_end_matches('/');
        let url = if trimmed.ends_with("/chat/completions") {
            trimmed.to_string()
        } else {
            format!("{trimmed}/v1/chat/completions")
        };
        let agent = ureq::AgentBuilder::new().timeout(timeout).build();
        Self { agent, url, api_key }
    }

    pub fn from_env(endpoint: &str, timeout: Duration) -> Self {
        Self::new(endpoint, std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()), timeout)
    }

    pub fn url(&self) -> &str {
        &self.url
    }
}

impl ChatBackend for HttpBackend {
    fn complete(&self, request: &ChatRequest) -> std::result::Result<String, AttemptError> {
        let mut call = self.agent.post(&self.url);
        if let Some(key) = &self.api_key {
            call = call.set("Authorization", &format!("Bearer {key}"));
        }
        let response = match call.send_json(request) {
            Ok(r) => r,
            Err(ureq::Error::Status(code, r)) => {
                let body = r.into_string().unwrap_or_default();
                let msg = format!("status {code}: {}", body.chars().take(200).collect::<String>());
                return Err(if code == 429 || code >= 500 { AttemptError::Transient(msg) } else { AttemptError::Permanent(msg) });
            }
            Err(e) => return Err(AttemptError::Transient(e.to_string())),
        };
        let body: serde_json::Value = response.into_json().map_err(|e| AttemptError::Transient(e.to_string()))?;
        body.pointer("/choices/0/message/content")
            .and_then(|v| v.as_str())
            .map(str::to_string)
            .ok_or_else(|| AttemptError::Permanent(String::from("response has no choices[0].message.content")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Ok,
    Failed,
}

/// One journal line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JournalEntry {
    pub sample_id: String,
    pub status: Status,
    pub preset: String,
    /// Milliseconds since the Unix epoch.
    pub timestamp: u64,
    #[serde(default)]
    pub attempts: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Latest status per source sample id. A missing journal is empty; a torn
/// last line from an interrupted run is ignored.
pub fn read_journal(path: &Path) -> Result<BTreeMap<String, Status>> {
    let mut out = BTreeMap::new();
    let file = match std::fs::File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(out),
        Err(e) => return Err(Error::io(path, e)),
    };
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if let Ok(entry) = serde_json::from_str::<JournalEntry>(&line) {
            out.insert(entry.sample_id, entry.status);
        }
    }
    Ok(out)
}

/// A rendered prompt that passed the length filter.
#[derive(Debug, Clone, PartialEq)]
pub struct PlannedPrompt {
    pub source_index: usize,
    pub prompt: ChatPrompt,
    pub preset: SamplingPreset,
    pub batch: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GenerationPlan {
    #[serde(skip)]
    pub prompts: Vec<PlannedPrompt>,
    /// Source ids dropped for exceeding the prompt limit.
    pub filtered_out: Vec<String>,
    pub n_batches: usize,
}

/// Renders, filters, optionally subsets, batches and assigns presets. Only
/// the seed and corpus determine the plan.
pub fn plan(job: &GenerationJob, corpus: &[TextSample], vocab: &Vocabulary) -> Result<GenerationPlan> {
    let mut kept = Vec::new();
    let mut filtered_out = Vec::new();
    for (i, sample) in corpus.iter().enumerate() {
        let prompt = job.template.render_sample(sample)?;
        if prompt.token_count(vocab) > job.max_prompt_tokens {
            filtered_out.push(sample.id.clone());
        } else {
            kept.push((i, prompt));
        }
    }
    if let Some(n) = job.subset {
        if n < kept.len() {
            let mut rng = rng_for(job.seed, "genpipe.subset");
            let mut chosen = sample_indices(&mut rng, kept.len(), n).into_vec();
            chosen.sort_unstable();
            let chosen: BTreeSet<usize> = chosen.into_iter().collect();
            kept = kept.into_iter().enumerate().filter(|(j, _)| chosen.contains(j)).map(|(_, p)| p).collect();
        }
    }
    let n_batches = kept.len().div_ceil(job.batch_size);
    let presets = assign_presets(n_batches, job.seed);
    let prompts = kept
        .into_iter()
        .enumerate()
        .map(|(j, (source_index, prompt))| {
            let batch = j / job.batch_size;
            PlannedPrompt { source_index, prompt, preset: presets[batch].clone(), batch }
        })
        .collect();
    Ok(GenerationPlan { prompts, filtered_out, n_batches })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub planned: usize,
    pub filtered_out: usize,
    pub skipped_done: usize,
    pub requested: usize,
    pub succeeded: usize,
    pub failed: usize,
    pub preset_counts: BTreeMap<String, usize>,
}

enum Outcome {
    Done { index: usize, text: String, attempts: u32 },
    Failed { index: usize, error: String, attempts: u32 },
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

fn request_with_retry<B: ChatBackend + ?Sized>(
    backend: &B,
    request: &ChatRequest,
    prefix: &str,
    retry: &RetryPolicy,
    index: usize,
) -> Outcome {
    let mut rng = rand::thread_rng();
    let mut last = String::new();
    for attempt in 1..=retry.max_attempts {
        match backend.complete(request) {
            Ok(completion) => {
                let text = extract_response(&completion, prefix);
                return if text.is_empty() {
                    Outcome::Failed { index, error: String::from("empty completion"), attempts: attempt }
                } else {
                    Outcome::Done { index, text, attempts: attempt }
                };
            }
            Err(AttemptError::Permanent(e)) => return Outcome::Failed { index, error: e, attempts: attempt },
            Err(AttemptError::Transient(e)) => {
                last = e;
                if attempt < retry.max_attempts {
                    std::thread::sleep(retry.delay(attempt, &mut rng));
                }
            }
        }
    }
    Outcome::Failed { index, error: last, attempts: retry.max_attempts }
}

/// Id of the generated sample made from `source_id`.
pub fn generated_id(source_id: &str, model: &str) -> String {
    format!("{source_id}@{model}")
}

/// Runs (or resumes) a job. Generated samples are appended to `output` and
/// every attempt's result to `journal`; prompts journaled `ok` are skipped.
/// When the run ends the output file is rewritten in prompt order.
pub fn run_generation<B: ChatBackend + ?Sized>(
    job: &GenerationJob,
    corpus: &[TextSample],
    vocab: &Vocabulary,
    backend: &B,
    output: &Path,
    journal: &Path,
) -> Result<GenerationReport> {
    job.validate()?;
    let plan = plan(job, corpus, vocab)?;
    let done = read_journal(journal)?;
    let mut report = GenerationReport { planned: plan.prompts.len(), filtered_out: plan.filtered_out.len(), ..Default::default() };
    for p in &plan.prompts {
        *report.preset_counts.entry(p.preset.name.clone()).or_default() += 1;
    }
    let todo: Vec<&PlannedPrompt> = plan
        .prompts
        .iter()
        .filter(|p| done.get(&corpus[p.source_index].id) != Some(&Status::Ok))
        .collect();
    report.skipped_done = plan.prompts.len() - todo.len();
    report.requested = todo.len();

    for path in [output, journal] {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let open = |path: &Path| OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e));
    let mut out_file = open(output)?;
    let mut journal_file = open(journal)?;

    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<Outcome>();
    let workers = job.concurrency.min(todo.len()).max(1);
    let write_result: Result<()> = std::thread::scope(|scope| {
        for _ in 0..workers {
            let tx = tx.clone();
            let (next, todo) = (&next, &todo);
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(p) = todo.get(i) else { break };
                let request = ChatRequest::new(job, &p.prompt, &p.preset);
                let outcome = request_with_retry(backend, &request, p.prompt.assistant_prefix(), &job.retry, i);
                if tx.send(outcome).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        // Single writer: the only place outputs and journal lines are appended.
        for outcome in rx {
            let (index, status, error, attempts, text) = match outcome {
                Outcome::Done { index, text, attempts } => (index, Status::Ok, None, attempts, Some(text)),
                Outcome::Failed { index, error, attempts } => (index, Status::Failed, Some(error), attempts, None),
            };
            let p = todo[index];
            let source = &corpus[p.source_index];
            if let Some(text) = text {
                let mut sample =
                    TextSample::new(generated_id(&source.id, &job.model), &text, Source::generator(&job.model), source.genre.clone(), vocab);
                sample.origin = Some(GenerationOrigin { source_sample_id: source.id.clone(), preset: p.preset.name.clone() });
                let line = serde_json::to_string(&sample).expect("sample serializes");
                writeln!(out_file, "{line}").and_then(|_| out_file.flush()).map_err(|e| Error::io(output, e))?;
                report.succeeded += 1;
            } else {
                report.failed += 1;
            }
            let entry = JournalEntry {
                sample_id: source.id.clone(),
                status,
                preset: p.preset.name.clone(),
                timestamp: now_ms(),
                attempts,
                error,
            };
            let line = serde_json::to_string(&entry).expect("entry serializes");
            writeln!(journal_file, "{line}").and_then(|_| journal_file.flush()).map_err(|e| Error::io(journal, e))?;
        }
        Ok(())
    });
    write_result?;
    drop(out_file);
    compact_output(output, &plan, corpus, &job.model)?;
    Ok(report)
}

/// Rewrites the output in prompt order, keeping the last line per id.
fn compact_output(output: &Path, plan: &GenerationPlan, corpus: &[TextSample], model: &str) -> Result<()> {
    let file = std::fs::File::open(output).map_err(|e| Error::io(output, e))?;
    let mut by_id: BTreeMap<String, TextSample> = BTreeMap::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(output, e))?;
        if let Ok(sample) = serde_json::from_str::<TextSample>(&line) {
            by_id.insert(sample.id.clone(), sample);
        }
    }
    let mut ordered: Vec<TextSample> = Vec::with_capacity(by_id.len());
    for p in &plan.prompts {
        if let Some(s) = by_id.remove(&generated_id(&corpus[p.source_index].id, model)) {
            ordered.push(s);
        }
    }
    // Samples from earlier runs whose prompts are no longer planned stay at the end.
    ordered.extend(by_id.into_values());
    write_jsonl(output, &ordered)
}

/// Default location of the journal for an output file: `<output>.journal.jsonl`.
pub fn journal_path_for(output: &Path) -> PathBuf {
    let mut name = output.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".journal.jsonl");
    output.with_file_name(name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Mutex;
    use tokdetect_core::genpipe::builtin_template;

    struct Echo {
        calls: Mutex<Vec<String>>,
        fail_first: usize,
    }

    impl ChatBackend for Echo {
        fn complete(&self, request: &ChatRequest) -> std::result::Result<String, AttemptError> {
            let mut calls = self.calls.lock().unwrap();
            calls.push(request.messages[1].content.clone());
            if calls.len() <= self.fail_first {
                return Err(AttemptError::Transient(String::from("busy")));
            }
            Ok(format!("{}echo {}", request.messages[2].content, request.messages[1].content.len()))
        }
    }

    fn corpus(n: usize) -> Vec<TextSample> {
        let v = Vocabulary::byte_level();
        (0..n).map(|i| TextSample::new(format!("s{i}"), &format!("post number {i}"), Source::Human, "blogs", &v)).collect()
    }

    fn job() -> GenerationJob {
        let mut job = GenerationJob::new(builtin_template("blogs").unwrap(), "m", "http://unused");
        job.retry.base_delay_ms = 1;
        job.batch_size = 2;
        job.concurrency = 3;
        job
    }

    #[test]
    fn retry_delay_grows_and_is_capped() {
        let policy = RetryPolicy { max_attempts: 5, base_delay_ms: 100, max_delay_ms: 1000 };
        let mut rng = rand::thread_rng();
        for attempt in 1..=6 {
            let d = policy.delay(attempt, &mut rng).as_millis() as f64;
            let nominal = (100.0 * 2f64.powi(attempt as i32 - 1)).min(1000.0);
            assert!(d >= nominal * 0.5 && d < nominal * 1.5, "{attempt}: {d}");
        }
    }

    #[test]
    fn transient_failures_are_retried() {
        let dir = tempfile::tempdir().unwrap();
        let backend = Echo { calls: Mutex::new(Vec::new()), fail_first: 2 };
        let mut j = job();
        j.concurrency = 1;
        let out = dir.path().join("o.jsonl");
        let report =
            run_generation(&j, &corpus(1), &Vocabulary::byte_level(), &backend, &out, &journal_path_for(&out)).unwrap();
        assert_eq!((report.succeeded, report.failed), (1, 0));
        assert_eq!(backend.calls.lock().unwrap().len(), 3);
        let samples: Vec<TextSample> = crate::fsio::read_jsonl(&out).unwrap();
        let prompt_len = backend.calls.lock().unwrap()[0].len();
        assert_eq!(samples[0].text, format!("echo {prompt_len}"));
        assert_eq!(samples[0].origin.as_ref().unwrap().source_sample_id, "s0");
    }

    #[test]
    fn exhausted_retries_are_journaled_as_failed() {
        let dir = tempfile::tempdir().unwrap();
        let backend = Echo { calls: Mutex::new(Vec::new()), fail_first: usize::MAX };
        let out = dir.path().join("o.jsonl");
        let report =
            run_generation(&job(), &corpus(3), &Vocabulary::byte_level(), &backend, &out, &journal_path_for(&out)).unwrap();
        assert_eq!(report.failed, 3);
        assert_eq!(backend.calls.lock().unwrap().len(), 15);
        let journal = read_journal(&journal_path_for(&out)).unwrap();
        assert!(journal.values().all(|s| *s == Status::Failed));
    }

    #[test]
    fn plan_is_seed_determined() {
        let v = Vocabulary::byte_level();
        let mut j = job();
        j.subset = Some(5);
        let a = plan(&j, &corpus(20), &v).unwrap();
        let b = plan(&j, &corpus(20), &v).unwrap();
        assert_eq!(a.prompts, b.prompts);
        assert_eq!(a.prompts.len(), 5);
        assert_eq!(a.n_batches, 3);
        assert!(a.prompts.windows(2).all(|w| w[0].source_index < w[1].source_index));
        for p in &a.prompts {
            assert_eq!(p.preset, a.prompts[p.batch * 2].preset);
        }
    }

    #[test]
    fn request_body_shape() {
        let j = job();
        let prompt = j.template.render_sample(&corpus(1)[0]).unwrap();
        let preset = SamplingPreset::by_name("deterministic").unwrap();
        let body = serde_json::to_value(ChatRequest::new(&j, &prompt, &preset)).unwrap();
        assert_eq!(body["model"], "m");
        assert_eq!(body["messages"].as_array().unwrap().len(), 3);
        assert_eq!(body["messages"][2]["role"], "assistant");
        assert_eq!(body["top_k"], -1);
        assert!(body.get("max_tokens").is_none());
    }
}
