//! The `tokdetect` command line.
//!
//! Settings resolve as flags, then the matching section of the `--config`
//! JSON file, then built-in defaults. All randomness comes from `--seed`,
//! split into named sub-seeds per component.

use std::ffi::OsString;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use clap::{ArgAction, Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use tokdetect_core::corpus::{compute_stats, GroupBy, TextSample};
use tokdetect_core::detector::{Backbone, BackboneConfig, TrainConfig};
use tokdetect_core::evalkit::{ensemble_evaluate, EnsembleMember, EnsembleSpec, PredictionSet, DEFAULT_THRESHOLD};
use tokdetect_core::genpipe::{builtin_template, PromptTemplate};
use tokdetect_core::sampler::{build_dataset, DatasetSpec, LabeledSample};
use tokdetect_core::seed::derive_seed;
use tokdetect_core::synth::{synth_corpus, SynthConfig};
use tokdetect_core::tokenizer::train_merges;
use tokdetect_core::Vocabulary;

use crate::checkpoint::{backbone_for, load_checkpoint, save_backbone, save_checkpoint};
use crate::corpus_io::{
    load_corpora, load_manifest_corpus, read_split, stats_csv, write_corpus_dir, write_split, write_text, LoadOptions,
    LoadReport,
};
use crate::detect::{
    attribution_csv, evaluate_set, metrics_csv, predict, read_predictions, train_detector, training_log_csv,
    write_predictions,
};
use crate::error::{Error, Result};
use crate::fsio::{read_json, write_json};
use crate::generate::{journal_path_for, run_generation, GenerationJob, HttpBackend, RetryPolicy};
use crate::manifest::{manifest_path_for, RunManifest};
use crate::vocab_io::{load_or_default, write_vocabulary};

#[derive(Debug, Parser)]
#[command(name = "tokdetect", version, about = "Token-level detection of machine-generated text")]
pub struct Cli {
    /// JSON file with defaults: top-level `seed` and `jobs`, plus one object per subcommand.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed; every component derives its own seed from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: logical CPUs).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Corpus statistics as CSV.
    Stats(StatsArgs),
    /// Write a seeded synthetic corpus.
    Synth(SynthArgs),
    /// Learn BPE merges from a corpus.
    TrainVocab(TrainVocabArgs),
    /// Tokenize text from a flag, a file or stdin.
    Tokenize(TokenizeArgs),
    /// Generate machine text against a chat-completions endpoint.
    Generate(GenerateArgs),
    /// Build balanced train and validation splits.
    BuildDataset(BuildDatasetArgs),
    /// Write a seeded backbone to a weights file.
    InitBackbone(InitBackboneArgs),
    /// Train a detector head on a built dataset.
    Train(TrainArgs),
    /// Evaluate one detector or a prediction file.
    Evaluate(EvaluateArgs),
    /// Evaluate an ensemble under the all-below-threshold rule.
    EnsembleEval(EnsembleEvalArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Stats(_) => "stats",
            Command::Synth(_) => "synth",
            Command::TrainVocab(_) => "train-vocab",
            Command::Tokenize(_) => "tokenize",
            Command::Generate(_) => "generate",
            Command::BuildDataset(_) => "build-dataset",
            Command::InitBackbone(_) => "init-backbone",
            Command::Train(_) => "train",
            Command::Evaluate(_) => "evaluate",
            Command::EnsembleEval(_) => "ensemble-eval",
        }
    }
}

const COMMANDS: [&str; 10] = [
    "stats",
    "synth",
    "train-vocab",
    "tokenize",
    "generate",
    "build-dataset",
    "init-backbone",
    "train",
    "evaluate",
    "ensemble-eval",
];

/// Parses and runs; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.exit_code() == 2 {
                eprintln!("run `tokdetect --help` for usage");
            }
            e.exit_code()
        }
    }
}

pub fn execute(cli: Cli) -> Result<()> {
    let file = match &cli.config {
        Some(path) => read_json::<Value>(path).map_err(|e| Error::Config(e.to_string()))?,
        None => Value::Object(Map::new()),
    };
    let file = file.as_object().cloned().ok_or_else(|| Error::Config(String::from("config file must hold a JSON object")))?;
    for key in file.keys() {
        if key != "seed" && key != "jobs" && !COMMANDS.contains(&key.as_str()) {
            return Err(Error::Config(format!("unknown config key `{key}`")));
        }
    }
    let seed = match cli.seed {
        Some(s) => s,
        None => match file.get("seed") {
            Some(v) => v.as_u64().ok_or_else(|| Error::Config(String::from("`seed` must be a non-negative integer")))?,
            None => 0,
        },
    };
    let jobs = match cli.jobs {
        Some(j) => Some(j),
        None => file.get("jobs").and_then(Value::as_u64).map(|j| j as usize),
    };
    if jobs == Some(0) {
        return Err(Error::Config(String::from("--jobs must be at least 1")));
    }
    let section = file.get(cli.command.name()).cloned();
    let ctx = Ctx { seed, command: cli.command.name() };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(j) = jobs {
        builder = builder.num_threads(j);
    }
    let pool = builder.build().map_err(|e| Error::Config(e.to_string()))?;
    pool.install(|| match cli.command {
        Command::Stats(a) => stats(&ctx, resolve(section, &a)?),
        Command::Synth(a) => synth(&ctx, resolve(section, &a)?),
        Command::TrainVocab(a) => train_vocab(&ctx, resolve(section, &a)?),
        Command::Tokenize(a) => tokenize(resolve(section, &a)?),
        Command::Generate(a) => generate(&ctx, resolve(section, &a)?),
        Command::BuildDataset(a) => build(&ctx, resolve(section, &a)?),
        Command::InitBackbone(a) => init_backbone(&ctx, resolve(section, &a)?),
        Command::Train(a) => train(&ctx, resolve(section, &a)?),
        Command::Evaluate(a) => evaluate(&ctx, resolve(section, &a)?),
        Command::EnsembleEval(a) => ensemble_eval(&ctx, resolve(section, &a)?),
    })
}

struct Ctx {
    seed: u64,
    command: &'static str,
}

impl Ctx {
    fn manifest<C: Serialize>(&self, cfg: &C) -> (RunManifest, Instant) {
        let config = serde_json::to_value(cfg).expect("config serializes");
        (RunManifest::new(self.command, config, Some(self.seed)), Instant::now())
    }
}

/// Defaults, overlaid by the config-file section, overlaid by the flags that
/// were actually given (null, `false` and empty lists count as not given).
fn resolve<A, C>(section: Option<Value>, flags: &A) -> Result<C>
where
    A: Serialize,
    C: Serialize + DeserializeOwned + Default,
{
    let mut merged = serde_json::to_value(C::default()).expect("defaults serialize");
    let target = merged.as_object_mut().expect("configs are objects");
    if let Some(section) = section {
        let section = section.as_object().cloned().ok_or_else(|| Error::Config(String::from("config sections must be objects")))?;
        for (k, v) in section {
            target.insert(k, v);
        }
    }
    if let Value::Object(given) = serde_json::to_value(flags).expect("flags serialize") {
        for (k, v) in given {
            let absent = match &v {
                Value::Null | Value::Bool(false) => true,
                Value::Array(a) => a.is_empty(),
                _ => false,
            };
            if !absent {
                target.insert(k, v);
            }
        }
    }
    serde_json::from_value(merged).map_err(|e| Error::Config(e.to_string()))
}

fn split_list(items: &[String]) -> Vec<String> {
    items.iter().flat_map(|s| s.split(',')).map(str::trim).filter(|s| !s.is_empty()).map(str::to_string).collect()
}

fn load_input_corpus(
    corpus: &[PathBuf],
    manifest: &Option<PathBuf>,
    vocab: &Vocabulary,
    skip_malformed: bool,
    run: &mut RunManifest,
) -> Result<(Vec<TextSample>, LoadReport)> {
    let opts = LoadOptions { skip_malformed };
    let mut samples = Vec::new();
    let mut report = LoadReport::default();
    if let Some(m) = manifest {
        let (s, r) = load_manifest_corpus(m, vocab, opts)?;
        samples.extend(s);
        report.merge(&r);
        run.input(m)?;
    }
    if !corpus.is_empty() {
        let (s, r) = load_corpora(corpus, vocab, opts)?;
        samples.extend(s);
        report.merge(&r);
        for p in corpus {
            run.input(p)?;
        }
    }
    if manifest.is_none() && corpus.is_empty() {
        return Err(Error::Config(String::from("give --corpus files or a --manifest")));
    }
    Ok((samples, report))
}

fn finish(mut run: RunManifest, started: Instant, outputs: &[PathBuf], manifest_path: &Path) -> Result<()> {
    for p in outputs {
        run.output(p)?;
    }
    run.finish(started.elapsed());
    run.write(manifest_path)
}

// ---------------------------------------------------------------- stats

#[derive(Debug, Args, Serialize)]
pub struct StatsArgs {
    /// Corpus JSON-lines files (repeatable or comma separated).
    #[arg(long, value_delimiter = ',')]
    pub corpus: Vec<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// none, genre, source or generator.
    #[arg(long)]
    pub group_by: Option<String>,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, action = ArgAction::SetTrue)]
    pub skip_malformed: bool,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StatsConfig {
    pub corpus: Vec<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub group_by: Option<String>,
    pub out: Option<PathBuf>,
    pub skip_malformed: bool,
    pub vocab: Option<PathBuf>,
}

fn stats(ctx: &Ctx, cfg: StatsConfig) -> Result<()> {
    let group_by: GroupBy = cfg.group_by.as_deref().unwrap_or("none").parse().map_err(Error::Config)?;
    let (mut run, started) = ctx.manifest(&cfg);
    let vocab = load_or_default(cfg.vocab.as_deref())?;
    let (samples, report) = load_input_corpus(&cfg.corpus, &cfg.manifest, &vocab, cfg.skip_malformed, &mut run)?;
    let csv = stats_csv(&compute_stats(&samples, group_by));
    match &cfg.out {
        Some(out) => {
            write_text(out, &csv)?;
            finish(run, started, std::slice::from_ref(out), &manifest_path_for(out, false))?;
        }
        None => print!("{csv}"),
    }
    eprintln!("loaded {} samples ({} malformed skipped, {} duplicates dropped)", report.loaded, report.malformed, report.duplicates);
    Ok(())
}

// ---------------------------------------------------------------- synth

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    /// Output directory; one file per (source, genre) plus manifest.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub samples_per_stratum: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub generators: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    pub genres: Vec<String>,
    #[arg(long)]
    pub min_sentences: Option<usize>,
    #[arg(long)]
    pub max_sentences: Option<usize>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthCmdConfig {
    pub out: Option<PathBuf>,
    pub samples_per_stratum: usize,
    pub generators: Vec<String>,
    pub genres: Vec<String>,
    pub min_sentences: usize,
    pub max_sentences: usize,
    pub vocab: Option<PathBuf>,
}

impl Default for SynthCmdConfig {
    fn default() -> Self {
        let d = SynthConfig::default();
        Self {
            out: None,
            samples_per_stratum: d.samples_per_stratum,
            generators: d.generators,
            genres: d.genres,
            min_sentences: d.min_sentences,
            max_sentences: d.max_sentences,
            vocab: None,
        }
    }
}

fn synth(ctx: &Ctx, cfg: SynthCmdConfig) -> Result<()> {
    let out = cfg.out.clone().ok_or_else(|| Error::Config(String::from("--out is required")))?;
    let (run, started) = ctx.manifest(&cfg);
    let vocab = load_or_default(cfg.vocab.as_deref())?;
    let synth_cfg = SynthConfig {
        generators: cfg.generators,
        genres: cfg.genres,
        samples_per_stratum: cfg.samples_per_stratum,
        min_sentences: cfg.min_sentences,
        max_sentences: cfg.max_sentences,
        seed: derive_seed(ctx.seed, "synth"),
    };
    let samples = synth_corpus(&synth_cfg, &vocab);
    let manifest = write_corpus_dir(&out, &samples, &vocab)?;
    let mut outputs: Vec<PathBuf> = manifest.entries.iter().map(|e| out.join(&e.path)).collect();
    outputs.push(out.join("manifest.json"));
    finish(run, started, &outputs, &manifest_path_for(&out, true))?;
    println!("wrote {} samples, {} tokens to {}", samples.len(), manifest.total_tokens, out.display());
    Ok(())
}

// ---------------------------------------------------------------- train-vocab

#[derive(Debug, Args, Serialize)]
pub struct TrainVocabArgs {
    #[arg(long, value_delimiter = ',')]
    pub corpus: Vec<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub merges: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainVocabConfig {
    pub corpus: Vec<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub merges: usize,
    pub out: Option<PathBuf>,
}

impl Default for TrainVocabConfig {
    fn default() -> Self {
        Self { corpus: Vec::new(), manifest: None, merges: 1000, out: None }
    }
}

fn train_vocab(ctx: &Ctx, cfg: TrainVocabConfig) -> Result<()> {
    let out = cfg.out.clone().ok_or_else(|| Error::Config(String::from("--out is required")))?;
    let (mut run, started) = ctx.manifest(&cfg);
    let byte = Vocabulary::byte_level();
    let (samples, _) = load_input_corpus(&cfg.corpus, &cfg.manifest, &byte, false, &mut run)?;
    let vocab = train_merges(samples.iter().map(|s| s.text.as_str()), cfg.merges);
    write_vocabulary(&out, &vocab)?;
    finish(run, started, std::slice::from_ref(&out), &manifest_path_for(&out, false))?;
    println!("vocabulary {} with {} tokens", vocab.id(), vocab.len());
    Ok(())
}

// ---------------------------------------------------------------- tokenize

#[derive(Debug, Args, Serialize)]
pub struct TokenizeArgs {
    /// Text to tokenize; otherwise --input or stdin.
    #[arg(long)]
    pub text: Option<String>,
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Print only the number of tokens.
    #[arg(long, action = ArgAction::SetTrue)]
    pub count: bool,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizeConfig {
    pub text: Option<String>,
    pub input: Option<PathBuf>,
    pub count: bool,
    pub vocab: Option<PathBuf>,
}

fn tokenize(cfg: TokenizeConfig) -> Result<()> {
    let vocab = load_or_default(cfg.vocab.as_deref())?;
    let text = match (&cfg.text, &cfg.input) {
        (Some(t), _) => t.clone(),
        (None, Some(p)) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
        (None, None) => {
            let mut s = String::new();
            std::io::stdin().read_to_string(&mut s).map_err(|e| Error::io("<stdin>", e))?;
            s
        }
    };
    if cfg.count {
        println!("{}", vocab.count_tokens(&text));
    } else {
        let ids: Vec<String> = vocab.encode(&text).ids.iter().map(|i| i.to_string()).collect();
        println!("{}", ids.join(" "));
    }
    Ok(())
}

// ---------------------------------------------------------------- generate

#[derive(Debug, Args, Serialize)]
pub struct GenerateArgs {
    /// Built-in template name (blogs, essays, ...).
    #[arg(long)]
    pub template: Option<String>,
    /// JSON file with a custom template.
    #[arg(long)]
    pub template_file: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub corpus: Vec<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Base URL or full chat-completions URL. The bearer token is read from TOKDETECT_API_KEY.
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    /// Output corpus file (appended while running, rewritten in prompt order at the end).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub journal: Option<PathBuf>,
    #[arg(long)]
    pub max_prompt_tokens: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_tokens: Option<u32>,
    #[arg(long, value_delimiter = ',')]
    pub stop: Vec<String>,
    #[arg(long)]
    pub concurrency: Option<usize>,
    #[arg(long)]
    pub max_attempts: Option<u32>,
    #[arg(long)]
    pub backoff_ms: Option<u64>,
    #[arg(long)]
    pub subset: Option<usize>,
    #[arg(long)]
    pub timeout_secs: Option<u64>,
    #[arg(long, action = ArgAction::SetTrue)]
    pub skip_malformed: bool,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    pub template: Option<String>,
    pub template_file: Option<PathBuf>,
    pub corpus: Vec<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub out: Option<PathBuf>,
    pub journal: Option<PathBuf>,
    pub max_prompt_tokens: usize,
    pub batch_size: usize,
    pub max_tokens: Option<u32>,
    pub stop: Vec<String>,
    pub concurrency: usize,
    pub max_attempts: u32,
    pub backoff_ms: u64,
    pub subset: Option<usize>,
    pub timeout_secs: u64,
    pub skip_malformed: bool,
    pub vocab: Option<PathBuf>,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        let retry = RetryPolicy::default();
        Self {
            template: None,
            template_file: None,
            corpus: Vec::new(),
            manifest: None,
            endpoint: None,
            model: None,
            out: None,
            journal: None,
            max_prompt_tokens: crate::generate::DEFAULT_MAX_PROMPT_TOKENS,
            batch_size: 8,
            max_tokens: None,
            stop: Vec::new(),
            concurrency: 8,
            max_attempts: retry.max_attempts,
            backoff_ms: retry.base_delay_ms,
            subset: None,
            timeout_secs: 300,
            skip_malformed: false,
            vocab: None,
        }
    }
}

fn generate(ctx: &Ctx, cfg: GenerateConfig) -> Result<()> {
    let required = |v: &Option<String>, flag: &str| v.clone().ok_or_else(|| Error::Config(format!("--{flag} is required")));
    let endpoint = required(&cfg.endpoint, "endpoint")?;
    let model = required(&cfg.model, "model")?;
    let out = cfg.out.clone().ok_or_else(|| Error::Config(String::from("--out is required")))?;
    let template: PromptTemplate = match (&cfg.template, &cfg.template_file) {
        (_, Some(path)) => read_json(path)?,
        (Some(name), None) => builtin_template(name).map_err(|e| Error::Config(e.to_string()))?,
        (None, None) => return Err(Error::Config(String::from("--template or --template-file is required"))),
    };
    let (mut run, started) = ctx.manifest(&cfg);
    let vocab = load_or_default(cfg.vocab.as_deref())?;
    let (corpus, _) = load_input_corpus(&cfg.corpus, &cfg.manifest, &vocab, cfg.skip_malformed, &mut run)?;
    let mut job = GenerationJob::new(template, &model, &endpoint);
    job.max_prompt_tokens = cfg.max_prompt_tokens;
    job.batch_size = cfg.batch_size;
    job.seed = derive_seed(ctx.seed, "genpipe");
    job.max_tokens = cfg.max_tokens;
    job.stop = split_list(&cfg.stop);
    job.concurrency = cfg.concurrency;
    job.retry = RetryPolicy { max_attempts: cfg.max_attempts, base_delay_ms: cfg.backoff_ms, ..RetryPolicy::default() };
    job.subset = cfg.subset;
    job.validate()?;
    let journal = cfg.journal.clone().unwrap_or_else(|| journal_path_for(&out));
    let backend = HttpBackend::from_env(&endpoint, Duration::from_secs(cfg.timeout_secs));
    let report = run_generation(&job, &corpus, &vocab, &backend, &out, &journal)?;
    finish(run, started, &[out.clone(), journal], &manifest_path_for(&out, false))?;
    println!("{}", serde_json::to_string(&report).expect("report serializes"));
    Ok(())
}

// ---------------------------------------------------------------- build-dataset

#[derive(Debug, Args, Serialize)]
pub struct BuildDatasetArgs {
    #[arg(long, value_delimiter = ',')]
    pub corpus: Vec<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// master, detect-one, detect-self or detect-family.
    #[arg(long)]
    pub recipe: Option<String>,
    /// Detected model for detect-one and detect-self.
    #[arg(long)]
    pub target: Option<String>,
    /// Family name for detect-family.
    #[arg(long)]
    pub family: Option<String>,
    /// Family members for detect-family.
    #[arg(long, value_delimiter = ',')]
    pub members: Vec<String>,
    /// Generators to use; all generators in the corpus by default.
    #[arg(long, value_delimiter = ',')]
    pub generators: Vec<String>,
    /// Full dataset spec as JSON; replaces the recipe.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub budget: Option<u64>,
    #[arg(long)]
    pub val_fraction: Option<f64>,
    #[arg(long)]
    pub max_tokens_per_sample: Option<usize>,
    #[arg(long)]
    pub tolerance: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, action = ArgAction::SetTrue)]
    pub skip_malformed: bool,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BuildDatasetConfig {
    pub corpus: Vec<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub recipe: String,
    pub target: Option<String>,
    pub family: Option<String>,
    pub members: Vec<String>,
    pub generators: Vec<String>,
    pub spec: Option<PathBuf>,
    pub budget: Option<u64>,
    pub val_fraction: Option<f64>,
    pub max_tokens_per_sample: Option<usize>,
    pub tolerance: Option<f64>,
    pub out: Option<PathBuf>,
    pub skip_malformed: bool,
    pub vocab: Option<PathBuf>,
}

impl Default for BuildDatasetConfig {
    fn default() -> Self {
        Self {
            corpus: Vec::new(),
            manifest: None,
            recipe: String::from("master"),
            target: None,
            family: None,
            members: Vec::new(),
            generators: Vec::new(),
            spec: None,
            budget: None,
            val_fraction: None,
            max_tokens_per_sample: None,
            tolerance: None,
            out: None,
            skip_malformed: false,
            vocab: None,
        }
    }
}

fn dataset_spec(cfg: &BuildDatasetConfig, corpus: &[TextSample], seed: u64) -> Result<DatasetSpec> {
    let mut spec = match &cfg.spec {
        Some(path) => read_json::<DatasetSpec>(path)?,
        None => {
            let budget = cfg.budget.ok_or_else(|| Error::Config(String::from("--budget is required without --spec")))?;
            let mut generators = split_list(&cfg.generators);
            if generators.is_empty() {
                let found: std::collections::BTreeSet<String> =
                    corpus.iter().filter_map(|s| s.source.generator_name().map(str::to_string)).collect();
                generators = found.into_iter().collect();
            }
            let gens: Vec<&str> = generators.iter().map(String::as_str).collect();
            let target = || cfg.target.clone().ok_or_else(|| Error::Config(String::from("--target is required for this recipe")));
            match cfg.recipe.as_str() {
                "master" => DatasetSpec::master(&gens, budget, 0),
                "detect-one" => DatasetSpec::detect_one(&target()?, &gens, budget, 0),
                "detect-self" => DatasetSpec::detect_self(&target()?, &gens, budget, 0),
                "detect-family" => {
                    let family = cfg.family.clone().ok_or_else(|| Error::Config(String::from("--family is required")))?;
                    let members = split_list(&cfg.members);
                    let members: Vec<&str> = members.iter().map(String::as_str).collect();
                    DatasetSpec::detect_family(&family, &members, &gens, budget, 0)
                }
                other => return Err(Error::Config(format!("unknown recipe `{other}`"))),
            }
        }
    };
    if let Some(b) = cfg.budget {
        spec.train_token_budget = b;
    }
    if let Some(v) = cfg.val_fraction {
        spec.val_fraction = v;
    }
    if let Some(m) = cfg.max_tokens_per_sample {
        spec.max_tokens_per_sample = m;
    }
    if let Some(t) = cfg.tolerance {
        spec.tolerance = t;
    }
    spec.seed = derive_seed(seed, "sampler");
    spec.validate().map_err(|e| Error::Config(e.to_string()))?;
    Ok(spec)
}

fn build(ctx: &Ctx, cfg: BuildDatasetConfig) -> Result<()> {
    let out = cfg.out.clone().ok_or_else(|| Error::Config(String::from("--out is required")))?;
    let (mut run, started) = ctx.manifest(&cfg);
    let vocab = load_or_default(cfg.vocab.as_deref())?;
    let (corpus, _) = load_input_corpus(&cfg.corpus, &cfg.manifest, &vocab, cfg.skip_malformed, &mut run)?;
    let spec = dataset_spec(&cfg, &corpus, ctx.seed)?;
    let built = build_dataset(&corpus, &spec)?;
    let paths = [out.join("train.jsonl"), out.join("val.jsonl"), out.join("spec.json"), out.join("balance.json"), out.join("balance.txt")];
    write_split(&paths[0], &built.train)?;
    write_split(&paths[1], &built.val)?;
    write_json(&paths[2], &built.spec)?;
    write_json(&paths[3], &built.report)?;
    write_text(&paths[4], &built.report.to_table())?;
    finish(run, started, &paths, &manifest_path_for(&out, true))?;
    print!("{}", built.report.to_table());
    Ok(())
}

// ---------------------------------------------------------------- init-backbone

#[derive(Debug, Args, Serialize)]
pub struct InitBackboneArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub n_layers: Option<usize>,
    #[arg(long)]
    pub n_heads: Option<usize>,
    #[arg(long)]
    pub max_seq_len: Option<usize>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneShape {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
}

impl Default for BackboneShape {
    fn default() -> Self {
        let d = BackboneConfig::desk(259, 1024, 0);
        Self { d_model: d.d_model, n_layers: d.n_layers, n_heads: d.n_heads, max_seq_len: d.max_seq_len }
    }
}

impl BackboneShape {
    fn config(&self, vocab: &Vocabulary, seed: u64) -> BackboneConfig {
        BackboneConfig {
            vocab_size: vocab.len(),
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            max_seq_len: self.max_seq_len,
            seed: derive_seed(seed, "backbone"),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitBackboneConfig {
    pub out: Option<PathBuf>,
    #[serde(flatten)]
    pub shape: BackboneShape,
    pub vocab: Option<PathBuf>,
}

fn init_backbone(ctx: &Ctx, cfg: InitBackboneConfig) -> Result<()> {
    let out = cfg.out.clone().ok_or_else(|| Error::Config(String::from("--out is required")))?;
    let (run, started) = ctx.manifest(&cfg);
    let vocab = load_or_default(cfg.vocab.as_deref())?;
    let backbone = Backbone::new(cfg.shape.config(&vocab, ctx.seed)).map_err(|e| Error::Config(e.to_string()))?;
    save_backbone(&out, &backbone)?;
    finish(run, started, std::slice::from_ref(&out), &manifest_path_for(&out, false))?;
    println!("backbone {} ({} weights)", backbone.checksum(), backbone.weights().len());
    Ok(())
}

// ---------------------------------------------------------------- train

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    /// Dataset directory holding train.jsonl and val.jsonl.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Backbone weights file; a seeded backbone is built when absent.
    #[arg(long)]
    pub backbone: Option<PathBuf>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub n_layers: Option<usize>,
    #[arg(long)]
    pub n_heads: Option<usize>,
    #[arg(long)]
    pub max_seq_len: Option<usize>,
    #[arg(long)]
    pub min_lr: Option<f64>,
    #[arg(long)]
    pub max_lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub warmup_fraction: Option<f64>,
    #[arg(long)]
    pub detector_id: Option<String>,
    /// Checkpoint path; the log goes to `<out>.log.csv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainCmdConfig {
    pub dataset: Option<PathBuf>,
    pub backbone: Option<PathBuf>,
    #[serde(flatten)]
    pub shape: BackboneShape,
    pub min_lr: f64,
    pub max_lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_fraction: f64,
    pub detector_id: Option<String>,
    pub out: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
}

impl Default for TrainCmdConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            dataset: None,
            backbone: None,
            shape: BackboneShape::default(),
            min_lr: t.min_lr,
            max_lr: t.max_lr,
            batch_size: t.batch_size,
            epochs: t.epochs,
            warmup_fraction: t.warmup_fraction,
            detector_id: None,
            out: None,
            vocab: None,
        }
    }
}

fn train(ctx: &Ctx, cfg: TrainCmdConfig) -> Result<()> {
    let dataset = cfg.dataset.clone().ok_or_else(|| Error::Config(String::from("--dataset is required")))?;
    let out = cfg.out.clone().ok_or_else(|| Error::Config(String::from("--out is required")))?;
    let train_cfg = TrainConfig {
        epochs: cfg.epochs,
        min_lr: cfg.min_lr,
        max_lr: cfg.max_lr,
        batch_size: cfg.batch_size,
        warmup_fraction: cfg.warmup_fraction,
        seed: derive_seed(ctx.seed, "train"),
        ..TrainConfig::default()
    };
    train_cfg.validate().map_err(|e| Error::Config(e.to_string()))?;
    let (mut run, started) = ctx.manifest(&cfg);
    let vocab = load_or_default(cfg.vocab.as_deref())?;
    let (backbone, backbone_file) = match &cfg.backbone {
        Some(path) => {
            run.input(path)?;
            let relative = pathdiff(path, out.parent().unwrap_or(Path::new(".")));
            (crate::checkpoint::load_backbone(path)?, Some(relative))
        }
        None => (Backbone::new(cfg.shape.config(&vocab, ctx.seed)).map_err(|e| Error::Config(e.to_string()))?, None),
    };
    if backbone.config().vocab_size != vocab.len() {
        return Err(Error::Config(format!(
            "backbone expects {} token ids, vocabulary has {}",
            backbone.config().vocab_size,
            vocab.len()
        )));
    }
    let (train_path, val_path) = (dataset.join("train.jsonl"), dataset.join("val.jsonl"));
    run.input(&train_path)?;
    run.input(&val_path)?;
    let train_split = read_split(&train_path)?;
    let val_split = read_split(&val_path)?;
    let detector_id = cfg.detector_id.clone().unwrap_or_else(|| {
        out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| String::from("detector"))
    });
    let trained = train_detector(&detector_id, &train_split, &val_split, &vocab, &backbone, backbone_file, &train_cfg)?;
    let log_path = sibling(&out, ".log.csv");
    save_checkpoint(&out, &trained.checkpoint)?;
    write_text(&log_path, &training_log_csv(&trained.outcome))?;
    finish(run, started, &[out.clone(), log_path], &manifest_path_for(&out, false))?;
    for e in &trained.outcome.epochs {
        println!("epoch {} train_loss {:.6} val_loss {:.6} val_acc {:.6}", e.epoch, e.train_loss, e.val_loss, e.val_accuracy);
    }
    println!("best epoch {:?}, val_acc {:?}", trained.outcome.best_epoch, trained.outcome.best_val_accuracy);
    Ok(())
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    path.with_file_name(name)
}

/// `path` relative to `base` when it lies below it, else as given.
fn pathdiff(path: &Path, base: &Path) -> String {
    let abs = |p: &Path| std::fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf());
    let (p, b) = (abs(path), abs(base));
    p.strip_prefix(&b).map(|r| r.display().to_string()).unwrap_or_else(|_| p.display().to_string())
}

// ---------------------------------------------------------------- evaluate

#[derive(Debug, Args, Serialize)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Prediction file to score instead of running a checkpoint.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// Split file, or a dataset directory (its val.jsonl is used).
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub backbone: Option<PathBuf>,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Cut texts to this many tokens before scoring.
    #[arg(long)]
    pub context_limit: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    pub checkpoint: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub backbone: Option<PathBuf>,
    pub threshold: f64,
    pub context_limit: Option<usize>,
    pub out: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            checkpoint: None,
            predictions: None,
            dataset: None,
            backbone: None,
            threshold: DEFAULT_THRESHOLD,
            context_limit: None,
            out: None,
            vocab: None,
        }
    }
}

fn split_path(dataset: &Path) -> PathBuf {
    if dataset.is_dir() {
        dataset.join("val.jsonl")
    } else {
        dataset.to_path_buf()
    }
}

fn run_checkpoint(
    path: &Path,
    backbone_file: Option<&Path>,
    vocab: &Vocabulary,
    samples: &[LabeledSample],
    context_limit: Option<usize>,
    run: &mut RunManifest,
) -> Result<PredictionSet> {
    run.input(path)?;
    let ckpt = load_checkpoint(path)?;
    if ckpt.header.vocabulary_id != vocab.id() {
        return Err(Error::CheckpointMismatch {
            path: path.into(),
            reason: format!("trained with vocabulary `{}`, current is `{}`", ckpt.header.vocabulary_id, vocab.id()),
        });
    }
    let backbone = backbone_for(path, &ckpt.header, backbone_file)?;
    predict(&ckpt.header.detector_id, &backbone, &ckpt.head, vocab, samples, context_limit)
}

fn evaluate(ctx: &Ctx, cfg: EvaluateConfig) -> Result<()> {
    let out = cfg.out.clone().ok_or_else(|| Error::Config(String::from("--out is required")))?;
    let (mut run, started) = ctx.manifest(&cfg);
    let set = match (&cfg.checkpoint, &cfg.predictions) {
        (Some(ckpt), None) => {
            let dataset = cfg.dataset.as_ref().ok_or_else(|| Error::Config(String::from("--dataset is required")))?;
            let split = split_path(dataset);
            run.input(&split)?;
            let vocab = load_or_default(cfg.vocab.as_deref())?;
            let samples = read_split(&split)?;
            run_checkpoint(ckpt, cfg.backbone.as_deref(), &vocab, &samples, cfg.context_limit, &mut run)?
        }
        (None, Some(preds)) => {
            run.input(preds)?;
            let mut sets = read_predictions(preds)?;
            if sets.len() != 1 {
                return Err(Error::format(preds, format!("expected one detector, found {}", sets.len())));
            }
            sets.remove(0)
        }
        _ => return Err(Error::Config(String::from("give exactly one of --checkpoint and --predictions"))),
    };
    let report = evaluate_set(&set, cfg.threshold)?;
    let paths = [out.join("predictions.jsonl"), out.join("report.json"), out.join("report.csv")];
    write_predictions(&paths[0], &set)?;
    write_json(&paths[1], &report)?;
    let mut rows = Vec::new();
    if let Some(t) = &report.per_token {
        rows.push((report.detector_id.as_str(), t));
    }
    rows.push((report.detector_id.as_str(), &report.per_sample));
    write_text(&paths[2], &metrics_csv(rows))?;
    finish(run, started, &paths, &manifest_path_for(&out, true))?;
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    Ok(())
}

// ---------------------------------------------------------------- ensemble-eval

#[derive(Debug, Args, Serialize)]
pub struct EnsembleEvalArgs {
    /// Member checkpoints, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub members: Vec<PathBuf>,
    /// Prediction files (one or more detectors each) instead of checkpoints.
    #[arg(long, value_delimiter = ',')]
    pub predictions: Vec<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub context_limit: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleEvalConfig {
    pub members: Vec<PathBuf>,
    pub predictions: Vec<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub threshold: f64,
    pub context_limit: Option<usize>,
    pub out: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
}

impl Default for EnsembleEvalConfig {
    fn default() -> Self {
        Self {
            members: Vec::new(),
            predictions: Vec::new(),
            dataset: None,
            threshold: DEFAULT_THRESHOLD,
            context_limit: None,
            out: None,
            vocab: None,
        }
    }
}

#[derive(Serialize)]
struct EnsembleSummary<'a> {
    spec: &'a EnsembleSpec,
    report: &'a tokdetect_core::MetricsReport,
    members: &'a std::collections::BTreeMap<String, tokdetect_core::evalkit::MemberFireCounts>,
    member_reports: Vec<crate::detect::EvaluationReport>,
}

fn ensemble_eval(ctx: &Ctx, cfg: EnsembleEvalConfig) -> Result<()> {
    let out = cfg.out.clone().ok_or_else(|| Error::Config(String::from("--out is required")))?;
    if cfg.members.is_empty() == cfg.predictions.is_empty() {
        return Err(Error::Config(String::from("give exactly one of --members and --predictions")));
    }
    let (mut run, started) = ctx.manifest(&cfg);
    let mut sets = Vec::new();
    let mut checkpoints = Vec::new();
    if !cfg.members.is_empty() {
        let dataset = cfg.dataset.as_ref().ok_or_else(|| Error::Config(String::from("--dataset is required")))?;
        let split = split_path(dataset);
        run.input(&split)?;
        let vocab = load_or_default(cfg.vocab.as_deref())?;
        let samples = read_split(&split)?;
        for path in &cfg.members {
            sets.push(run_checkpoint(path, None, &vocab, &samples, cfg.context_limit, &mut run)?);
            checkpoints.push(path.display().to_string());
        }
    } else {
        for path in &cfg.predictions {
            run.input(path)?;
            for set in read_predictions(path)? {
                checkpoints.push(String::new());
                sets.push(set);
            }
        }
    }
    let mut ids = std::collections::BTreeSet::new();
    for s in &sets {
        if !ids.insert(s.detector_id.clone()) {
            return Err(Error::Config(format!("detector id `{}` appears twice", s.detector_id)));
        }
    }
    let spec = EnsembleSpec {
        members: sets
            .iter()
            .zip(checkpoints)
            .map(|(s, checkpoint)| EnsembleMember { detector_id: s.detector_id.clone(), checkpoint })
            .collect(),
        threshold: cfg.threshold,
    };
    let eval = ensemble_evaluate(&sets, &spec)?;
    let member_reports = sets.iter().map(|s| evaluate_set(s, cfg.threshold)).collect::<Result<Vec<_>>>()?;
    let paths = [out.join("predictions.jsonl"), out.join("ensemble.json"), out.join("attribution.csv"), out.join("report.csv")];
    let records: Vec<_> = sets.iter().flat_map(crate::detect::prediction_records).collect();
    crate::fsio::write_jsonl(&paths[0], &records)?;
    let summary = EnsembleSummary { spec: &spec, report: &eval.report, members: &eval.members, member_reports };
    write_json(&paths[1], &summary)?;
    write_text(&paths[2], &attribution_csv(&eval))?;
    let mut rows = vec![("ensemble", &eval.report)];
    rows.extend(summary.member_reports.iter().map(|r| (r.detector_id.as_str(), &r.per_sample)));
    write_text(&paths[3], &metrics_csv(rows))?;
    finish(run, started, &paths, &manifest_path_for(&out, true))?;
    println!("{}", serde_json::to_string_pretty(&eval.report).expect("report serializes"));
    Ok(())
}
