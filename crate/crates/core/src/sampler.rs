//! Token-budget dataset construction.
//!
//! A dataset has two classes. Positive is the "AI" side being detected
//! (all generators for the master recipe, one model, or one model family);
//! negative is human text plus, for the narrower recipes, every other
//! generator. Four balance constraints hold in token counts:
//!
//! * the two classes hold the same number of tokens;
//! * within each class, every source (human or a generator) holds the same
//!   number of tokens;
//! * each genre's share of tokens matches its share of the whole corpus;
//! * the validation split holds `val_fraction` of the training tokens.
//!
//! Selection is per stratum (class × source × genre): samples are ordered by
//! a seeded shuffle key, taken greedily until the next one would overshoot
//! the stratum target, and then the single remaining sample that lands
//! closest to the target is added if it improves the fit. The validation
//! split is carved the same way from what the training pass left over.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::corpus::{Source, TextSample};
use crate::seed::shuffle_key;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SamplerError {
    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),
    #[error("stratum {stratum} needs {needed:.0} tokens for {split} but only {available} are available")]
    InsufficientCorpus { stratum: String, split: &'static str, needed: f64, available: u64 },
    #[error("built dataset misses its balance tolerance ({worst}: deviation {deviation:.4})")]
    ToleranceExceeded { worst: String, deviation: f64, report: alloc::boxed::Box<BalanceReport> },
}

pub const NEGATIVE: u8 = 0;
pub const POSITIVE: u8 = 1;

/// A sample with its class label: 1 for the positive (detected) side.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledSample {
    #[serde(flatten)]
    pub sample: TextSample,
    pub label: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

/// Declarative description of one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub name: String,
    pub train_token_budget: u64,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens_per_sample: usize,
    /// Generator names on the detected side.
    pub positive_class: BTreeSet<String>,
    /// Sources on the other side.
    pub negative_class: BTreeSet<Source>,
    /// Target share of tokens per genre; derived from corpus totals when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub genre_weights: Option<BTreeMap<String, f64>>,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_val_fraction() -> f64 {
    0.30
}

fn default_max_tokens() -> usize {
    8192
}

fn default_tolerance() -> f64 {
    0.02
}

impl DatasetSpec {
    fn base(name: String, budget: u64, positive: BTreeSet<String>, negative: BTreeSet<Source>, seed: u64) -> Self {
        Self {
            name,
            train_token_budget: budget,
            val_fraction: default_val_fraction(),
            max_tokens_per_sample: default_max_tokens(),
            positive_class: positive,
            negative_class: negative,
            genre_weights: None,
            tolerance: default_tolerance(),
            seed,
        }
    }

    /// All generators against human text.
    pub fn master(generators: &[&str], budget: u64, seed: u64) -> Self {
        let positive = generators.iter().map(|g| g.to_string()).collect();
        let negative = BTreeSet::from([Source::Human]);
        Self::base(String::from("master"), budget, positive, negative, seed)
    }

    /// One generator against human text and every other generator.
    pub fn detect_one(target: &str, generators: &[&str], budget: u64, seed: u64) -> Self {
        Self::detect_group(format!("detect-{target}"), &[target], generators, budget, seed)
    }

    /// Same shape as [`DatasetSpec::detect_one`]; the detector backbone is
    /// the target model itself.
    pub fn detect_self(model: &str, generators: &[&str], budget: u64, seed: u64) -> Self {
        Self::detect_group(format!("detect-self-{model}"), &[model], generators, budget, seed)
    }

    /// A model family against human text and every generator outside it.
    pub fn detect_family(family: &str, members: &[&str], generators: &[&str], budget: u64, seed: u64) -> Self {
        Self::detect_group(format!("detect-{family}-family"), members, generators, budget, seed)
    }

    fn detect_group(name: String, targets: &[&str], generators: &[&str], budget: u64, seed: u64) -> Self {
        let positive: BTreeSet<String> = targets.iter().map(|g| g.to_string()).collect();
        let mut negative = BTreeSet::from([Source::Human]);
        negative.extend(generators.iter().filter(|g| !positive.contains(**g)).map(|g| Source::generator(g)));
        Self::base(name, budget, positive, negative, seed)
    }

    pub fn validate(&self) -> Result<(), SamplerError> {
        let invalid = |m: String| Err(SamplerError::InvalidSpec(m));
        if self.train_token_budget == 0 {
            return invalid("train_token_budget must be positive".into());
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return invalid(format!("val_fraction {} is not in (0, 1)", self.val_fraction));
        }
        if !(self.tolerance > 0.0 && self.tolerance < 1.0) {
            return invalid(format!("tolerance {} is not in (0, 1)", self.tolerance));
        }
        if self.max_tokens_per_sample == 0 {
            return invalid("max_tokens_per_sample must be positive".into());
        }
        if self.positive_class.is_empty() || self.negative_class.is_empty() {
            return invalid("both classes need at least one source".into());
        }
        for name in &self.positive_class {
            if self.negative_class.contains(&Source::Generator(name.clone())) {
                return invalid(format!("generator `{name}` is in both classes"));
            }
        }
        if let Some(weights) = &self.genre_weights {
            let sum: f64 = weights.values().sum();
            if weights.values().any(|w| !(*w >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
                return invalid(format!("genre weights must be non-negative and sum to 1 (sum {sum})"));
            }
        }
        Ok(())
    }

    /// Class label of a source, or `None` if the source is not in this dataset.
    pub fn label_of(&self, source: &Source) -> Option<u8> {
        match source {
            Source::Generator(name) if self.positive_class.contains(name) => Some(POSITIVE),
            other if self.negative_class.contains(other) => Some(NEGATIVE),
            _ => None,
        }
    }

    /// Sources of one class, as report keys.
    pub fn class_sources(&self, label: u8) -> BTreeSet<String> {
        if label == POSITIVE {
            self.positive_class.iter().map(|g| Source::Generator(g.clone()).to_string()).collect()
        } else {
            self.negative_class.iter().map(|s| s.to_string()).collect()
        }
    }

    /// Genre weights from token totals of the eligible samples.
    pub fn derive_genre_weights(&self, corpus: &[TextSample]) -> BTreeMap<String, f64> {
        let mut totals: BTreeMap<String, u64> = BTreeMap::new();
        for s in corpus {
            if self.label_of(&s.source).is_some() && s.token_count <= self.max_tokens_per_sample {
                *totals.entry(s.genre.clone()).or_default() += s.token_count as u64;
            }
        }
        let sum: u64 = totals.values().sum();
        totals
            .into_iter()
            .filter(|(_, t)| *t > 0)
            .map(|(g, t)| (g, t as f64 / sum as f64))
            .collect()
    }

    /// Copy with genre weights filled from `corpus` if they were absent.
    pub fn resolved(&self, corpus: &[TextSample]) -> DatasetSpec {
        let mut spec = self.clone();
        if spec.genre_weights.is_none() {
            spec.genre_weights = Some(self.derive_genre_weights(corpus));
        }
        spec
    }
}

fn class_name(label: u8) -> &'static str {
    if label == POSITIVE {
        "positive"
    } else {
        "negative"
    }
}

/// Token totals of one split, keyed by (label, source, genre).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SplitTotals {
    pub tokens: BTreeMap<(u8, String, String), u64>,
    pub samples: u64,
}

impl SplitTotals {
    pub fn add(&mut self, label: u8, source: &Source, genre: &str, tokens: u64) {
        *self.tokens.entry((label, source.to_string(), genre.to_string())).or_default() += tokens;
        self.samples += 1;
    }

    pub fn total_tokens(&self) -> u64 {
        self.tokens.values().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenreShare {
    pub observed: f64,
    pub target: f64,
}

/// Measured shares of one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitBalance {
    pub tokens: u64,
    pub samples: u64,
    /// Share of all tokens per class (`negative`, `positive`).
    pub class_token_share: BTreeMap<String, f64>,
    /// Share of class tokens per source, within each class.
    pub per_generator_token_share: BTreeMap<String, BTreeMap<String, f64>>,
    pub per_genre_token_share: BTreeMap<String, GenreShare>,
    pub max_deviation: f64,
    pub worst: String,
}

/// Balance measurements of a built dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceReport {
    pub dataset: String,
    pub train: SplitBalance,
    pub val: SplitBalance,
    pub val_to_train_token_ratio: f64,
    /// Largest deviation over both splits.
    pub max_deviation: f64,
    pub worst: String,
}

impl BalanceReport {
    pub fn from_totals(spec: &DatasetSpec, train: &SplitTotals, val: &SplitTotals) -> BalanceReport {
        let train_balance = split_balance(spec, train);
        let val_balance = split_balance(spec, val);
        let ratio = if train_balance.tokens == 0 {
            0.0
        } else {
            val_balance.tokens as f64 / train_balance.tokens as f64
        };
        let (max_deviation, worst) = if val_balance.max_deviation > train_balance.max_deviation {
            (val_balance.max_deviation, format!("val {}", val_balance.worst))
        } else {
            (train_balance.max_deviation, format!("train {}", train_balance.worst))
        };
        BalanceReport {
            dataset: spec.name.clone(),
            train: train_balance,
            val: val_balance,
            val_to_train_token_ratio: ratio,
            max_deviation,
            worst,
        }
    }

    /// Whether every deviation and the validation ratio are within tolerance.
    pub fn within(&self, spec: &DatasetSpec) -> bool {
        self.max_deviation <= spec.tolerance && self.ratio_ok(spec)
    }

    pub fn ratio_ok(&self, spec: &DatasetSpec) -> bool {
        (self.val_to_train_token_ratio - spec.val_fraction).abs() <= spec.tolerance
    }

    /// Plain-text table of the report.
    pub fn to_table(&self) -> String {
        let mut out = format!("dataset {}\n", self.dataset);
        for (name, split) in [("train", &self.train), ("val", &self.val)] {
            out.push_str(&format!("[{name}] tokens={} samples={}\n", split.tokens, split.samples));
            for (class, share) in &split.class_token_share {
                out.push_str(&format!("  class {class:<10} {share:.4}\n"));
            }
            for (class, sources) in &split.per_generator_token_share {
                for (source, share) in sources {
                    out.push_str(&format!("  {class:<8} {source:<28} {share:.4}\n"));
                }
            }
            for (genre, g) in &split.per_genre_token_share {
                out.push_str(&format!("  genre {genre:<20} {:.4} (target {:.4})\n", g.observed, g.target));
            }
            out.push_str(&format!("  max deviation {:.5} ({})\n", split.max_deviation, split.worst));
        }
        out.push_str(&format!(
            "val/train token ratio {:.4}\nmax deviation {:.5} ({})\n",
            self.val_to_train_token_ratio, self.max_deviation, self.worst
        ));
        out
    }
}

fn split_balance(spec: &DatasetSpec, totals: &SplitTotals) -> SplitBalance {
    let total = totals.total_tokens();
    let share = |part: u64, whole: u64| if whole == 0 { 0.0 } else { part as f64 / whole as f64 };

    let mut by_class: BTreeMap<u8, u64> = BTreeMap::new();
    let mut by_source: BTreeMap<u8, BTreeMap<String, u64>> = BTreeMap::new();
    let mut by_genre: BTreeMap<String, u64> = BTreeMap::new();
    for label in [NEGATIVE, POSITIVE] {
        by_class.insert(label, 0);
        let sources = by_source.entry(label).or_default();
        for s in spec.class_sources(label) {
            sources.insert(s, 0);
        }
    }
    for ((label, source, genre), &t) in &totals.tokens {
        *by_class.entry(*label).or_default() += t;
        *by_source.entry(*label).or_default().entry(source.clone()).or_default() += t;
        *by_genre.entry(genre.clone()).or_default() += t;
    }

    let mut max_deviation = 0.0f64;
    let mut worst = String::from("none");
    let mut track = |dev: f64, what: String| {
        if dev > max_deviation {
            max_deviation = dev;
            worst = what;
        }
    };

    let neg = by_class[&NEGATIVE];
    let pos = by_class[&POSITIVE];
    track(share(pos.abs_diff(neg), total), String::from("class difference"));
    let class_token_share = by_class.iter().map(|(l, t)| (class_name(*l).to_string(), share(*t, total))).collect();

    let mut per_generator_token_share = BTreeMap::new();
    for (label, sources) in &by_source {
        let class_total = by_class[label];
        let expected = 1.0 / sources.len() as f64;
        let mut shares = BTreeMap::new();
        for (source, t) in sources {
            let s = share(*t, class_total);
            track((s - expected).abs(), format!("{} source {source}", class_name(*label)));
            shares.insert(source.clone(), s);
        }
        per_generator_token_share.insert(class_name(*label).to_string(), shares);
    }

    let targets = spec.genre_weights.clone().unwrap_or_default();
    let genres: BTreeSet<&String> = targets.keys().chain(by_genre.keys()).collect();
    let mut per_genre_token_share = BTreeMap::new();
    for genre in genres {
        let observed = share(by_genre.get(genre).copied().unwrap_or(0), total);
        let target = targets.get(genre).copied().unwrap_or(0.0);
        track((observed - target).abs(), format!("genre {genre}"));
        per_genre_token_share.insert(genre.clone(), GenreShare { observed, target });
    }

    SplitBalance {
        tokens: total,
        samples: totals.samples,
        class_token_share,
        per_generator_token_share,
        per_genre_token_share,
        max_deviation,
        worst,
    }
}

/// Streaming recount of a dataset's balance from its samples.
#[derive(Debug, Clone)]
pub struct BalanceAccumulator {
    spec: DatasetSpec,
    train: SplitTotals,
    val: SplitTotals,
}

impl BalanceAccumulator {
    pub fn new(spec: &DatasetSpec) -> Self {
        Self { spec: spec.clone(), train: SplitTotals::default(), val: SplitTotals::default() }
    }

    pub fn add(&mut self, split: Split, sample: &LabeledSample) {
        let totals = match split {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
        };
        totals.add(sample.label, &sample.sample.source, &sample.sample.genre, sample.sample.token_count as u64);
    }

    pub fn finish(self) -> BalanceReport {
        BalanceReport::from_totals(&self.spec, &self.train, &self.val)
    }
}

/// Recomputes the report of a built dataset from its splits.
pub fn verify_balance<'a, T, V>(train: T, val: V, spec: &DatasetSpec) -> BalanceReport
where
    T: IntoIterator<Item = &'a LabeledSample>,
    V: IntoIterator<Item = &'a LabeledSample>,
{
    let mut acc = BalanceAccumulator::new(spec);
    for s in train {
        acc.add(Split::Train, s);
    }
    for s in val {
        acc.add(Split::Val, s);
    }
    acc.finish()
}

#[derive(Debug, Clone)]
pub struct BuiltDataset {
    /// The spec with genre weights resolved.
    pub spec: DatasetSpec,
    pub train: Vec<LabeledSample>,
    pub val: Vec<LabeledSample>,
    pub report: BalanceReport,
}

struct Stratum<'a> {
    label: u8,
    source: Source,
    genre: String,
    pool: Vec<&'a TextSample>,
}

impl Stratum<'_> {
    fn name(&self) -> String {
        format!("{}/{}/{}", class_name(self.label), self.source, self.genre)
    }
}

/// Takes samples from the front of `pool` until the next would overshoot,
/// then adds the best-fitting remaining sample if it reduces the error.
/// Taken samples are removed from `pool`.
fn take_greedy<'a>(pool: &mut Vec<&'a TextSample>, target: f64) -> (Vec<&'a TextSample>, u64) {
    let mut taken = 0;
    let mut sum = 0u64;
    while taken < pool.len() && (sum + pool[taken].token_count as u64) as f64 <= target {
        sum += pool[taken].token_count as u64;
        taken += 1;
    }
    let mut chosen: Vec<&TextSample> = pool.drain(..taken).collect();
    let deficit = target - sum as f64;
    if deficit > 0.0 {
        let best = pool
            .iter()
            .enumerate()
            .map(|(i, s)| (i, (s.token_count as f64 - deficit).abs()))
            .fold(None, |best: Option<(usize, f64)>, (i, err)| match best {
                Some((_, e)) if e <= err => best,
                _ => Some((i, err)),
            });
        if let Some((i, err)) = best {
            if err < deficit {
                let s = pool.remove(i);
                sum += s.token_count as u64;
                chosen.push(s);
            }
        }
    }
    (chosen, sum)
}

/// Builds train and validation splits under the balance constraints.
pub fn build_dataset(corpus: &[TextSample], spec: &DatasetSpec) -> Result<BuiltDataset, SamplerError> {
    spec.validate()?;
    let spec = spec.resolved(corpus);
    let weights = spec.genre_weights.clone().unwrap_or_default();
    if weights.is_empty() {
        return Err(SamplerError::InsufficientCorpus {
            stratum: String::from("*"),
            split: "train",
            needed: spec.train_token_budget as f64,
            available: 0,
        });
    }

    let mut strata: BTreeMap<(u8, Source, String), Stratum<'_>> = BTreeMap::new();
    for label in [NEGATIVE, POSITIVE] {
        let sources: Vec<Source> = if label == POSITIVE {
            spec.positive_class.iter().map(|g| Source::Generator(g.clone())).collect()
        } else {
            spec.negative_class.iter().cloned().collect()
        };
        for source in sources {
            for (genre, w) in &weights {
                if *w > 0.0 {
                    let key = (label, source.clone(), genre.clone());
                    strata.insert(key, Stratum { label, source: source.clone(), genre: genre.clone(), pool: Vec::new() });
                }
            }
        }
    }
    for s in corpus {
        if s.token_count == 0 || s.token_count > spec.max_tokens_per_sample {
            continue;
        }
        let Some(label) = spec.label_of(&s.source) else { continue };
        if let Some(stratum) = strata.get_mut(&(label, s.source.clone(), s.genre.clone())) {
            stratum.pool.push(s);
        }
    }

    let class_budget = spec.train_token_budget as f64 / 2.0;
    let n_sources = |label: u8| {
        if label == POSITIVE {
            spec.positive_class.len()
        } else {
            spec.negative_class.len()
        }
    };

    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut train_totals = SplitTotals::default();
    let mut val_totals = SplitTotals::default();
    for stratum in strata.values_mut() {
        let name = stratum.name();
        let mut keyed: Vec<(u64, &TextSample)> =
            stratum.pool.iter().map(|s| (shuffle_key(spec.seed, &name, &s.id), *s)).collect();
        keyed.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| a.1.id.cmp(&b.1.id)));
        stratum.pool = keyed.into_iter().map(|(_, s)| s).collect();
        let available: u64 = stratum.pool.iter().map(|s| s.token_count as u64).sum();

        let train_target = class_budget / n_sources(stratum.label) as f64 * weights[&stratum.genre];
        let val_target = train_target * spec.val_fraction;
        let (train_part, train_sum) = take_greedy(&mut stratum.pool, train_target);
        if (train_sum as f64) < train_target * (1.0 - spec.tolerance) && stratum.pool.is_empty() {
            return Err(SamplerError::InsufficientCorpus { stratum: name, split: "train", needed: train_target, available });
        }
        let (val_part, val_sum) = take_greedy(&mut stratum.pool, val_target);
        if (val_sum as f64) < val_target * (1.0 - spec.tolerance) && stratum.pool.is_empty() {
            return Err(SamplerError::InsufficientCorpus {
                stratum: name,
                split: "val",
                needed: val_target,
                available: available - train_sum,
            });
        }

        for (part, out, totals, sum) in [
            (train_part, &mut train, &mut train_totals, train_sum),
            (val_part, &mut val, &mut val_totals, val_sum),
        ] {
            let key = (stratum.label, stratum.source.to_string(), stratum.genre.clone());
            *totals.tokens.entry(key).or_default() += sum;
            totals.samples += part.len() as u64;
            out.extend(part.into_iter().map(|s| LabeledSample { sample: s.clone(), label: stratum.label }));
        }
    }

    let report = BalanceReport::from_totals(&spec, &train_totals, &val_totals);
    if !report.within(&spec) {
        let (worst, deviation) = if report.max_deviation > spec.tolerance {
            (report.worst.clone(), report.max_deviation)
        } else {
            (String::from("val/train token ratio"), (report.val_to_train_token_ratio - spec.val_fraction).abs())
        };
        return Err(SamplerError::ToleranceExceeded { worst, deviation, report: alloc::boxed::Box::new(report) });
    }
    Ok(BuiltDataset { spec, train, val, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::Vocabulary;
    use alloc::vec;

    fn corpus_of(specs: &[(Source, &str, usize, usize)]) -> Vec<TextSample> {
        let vocab = Vocabulary::byte_level();
        let mut out = Vec::new();
        for (source, genre, count, len) in specs {
            for i in 0..*count {
                let text = "x".repeat(*len);
                let mut s = TextSample::new(format!("{source}-{genre}-{i}"), &text, source.clone(), *genre, &vocab);
                s.text = format!("{}{}", i, &s.text[i.to_string().len()..]);
                out.push(s);
            }
        }
        out
    }

    fn symmetric() -> Vec<TextSample> {
        let mut parts = vec![];
        for src in [Source::Human, Source::generator("m1"), Source::generator("m2")] {
            for genre in ["blogs", "xsum"] {
                parts.push((src.clone(), genre, 40, 10));
            }
        }
        corpus_of(&parts)
    }

    #[test]
    fn symmetric_corpus_balances_exactly() {
        let corpus = symmetric();
        let spec = DatasetSpec::master(&["m1", "m2"], 800, 3);
        let built = build_dataset(&corpus, &spec).unwrap();
        assert_eq!(built.report.max_deviation, 0.0);
        assert_eq!(built.report.train.tokens, 800);
        assert_eq!(built.report.val.tokens, 240);
        assert_eq!(built.report.val_to_train_token_ratio, 0.3);
        assert_eq!(built.report.train.class_token_share["positive"], 0.5);
        assert_eq!(built.report.train.per_generator_token_share["positive"]["Generator:m1"], 0.5);
    }

    #[test]
    fn splits_are_disjoint_and_conserved() {
        let corpus = symmetric();
        let built = build_dataset(&corpus, &DatasetSpec::master(&["m1", "m2"], 800, 3)).unwrap();
        let train_ids: BTreeSet<_> = built.train.iter().map(|s| &s.sample.id).collect();
        assert!(built.val.iter().all(|s| !train_ids.contains(&s.sample.id)));
        for s in built.train.iter().chain(&built.val) {
            assert!(corpus.iter().any(|c| c == &s.sample));
            assert_eq!(s.label, if s.sample.source.is_human() { NEGATIVE } else { POSITIVE });
        }
    }

    #[test]
    fn family_recipe_splits_positive_side_evenly() {
        let mut parts = vec![];
        for src in ["m1", "m2", "m3"].map(Source::generator).into_iter().chain([Source::Human]) {
            parts.push((src, "blogs", 60, 10));
        }
        let corpus = corpus_of(&parts);
        let spec = DatasetSpec::detect_family("fam", &["m1", "m2"], &["m1", "m2", "m3"], 400, 1);
        let built = build_dataset(&corpus, &spec).unwrap();
        let pos = &built.report.train.per_generator_token_share["positive"];
        assert_eq!(pos["Generator:m1"], 0.5);
        assert_eq!(pos["Generator:m2"], 0.5);
        assert_eq!(built.report.train.class_token_share["positive"], 0.5);
        let neg = &built.report.train.per_generator_token_share["negative"];
        assert_eq!(neg.len(), 2);
    }

    #[test]
    fn selection_ignores_corpus_order() {
        let corpus = symmetric();
        let mut reversed = corpus.clone();
        reversed.reverse();
        let spec = DatasetSpec::master(&["m1", "m2"], 800, 9);
        let a = build_dataset(&corpus, &spec).unwrap();
        let b = build_dataset(&reversed, &spec).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.val, b.val);
        let c = build_dataset(&corpus, &DatasetSpec { seed: 10, ..spec }).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn missing_stratum_is_reported() {
        let corpus = corpus_of(&[
            (Source::Human, "blogs", 50, 10),
            (Source::Human, "xsum", 50, 10),
            (Source::generator("m1"), "blogs", 50, 10),
        ]);
        let err = build_dataset(&corpus, &DatasetSpec::master(&["m1"], 400, 0)).unwrap_err();
        match err {
            SamplerError::InsufficientCorpus { stratum, .. } => assert_eq!(stratum, "positive/Generator:m1/xsum"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn undersized_corpus_is_reported() {
        let corpus = corpus_of(&[(Source::Human, "g", 5, 10), (Source::generator("m"), "g", 5, 10)]);
        assert!(matches!(
            build_dataset(&corpus, &DatasetSpec::master(&["m"], 1000, 0)),
            Err(SamplerError::InsufficientCorpus { .. })
        ));
    }

    #[test]
    fn spec_validation() {
        let mut spec = DatasetSpec::master(&["m"], 100, 0);
        spec.negative_class.insert(Source::generator("m"));
        assert!(spec.validate().is_err());
        let spec = DatasetSpec { val_fraction: 1.0, ..DatasetSpec::master(&["m"], 100, 0) };
        assert!(spec.validate().is_err());
        let spec = DatasetSpec { train_token_budget: 0, ..DatasetSpec::master(&["m"], 100, 0) };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn greedy_adds_closest_final_sample() {
        let vocab = Vocabulary::byte_level();
        let mk = |id: &str, n: usize| TextSample::new(id, &"y".repeat(n), Source::Human, "g", &vocab);
        let (a, b, c, d) = (mk("a", 6), mk("b", 6), mk("c", 9), mk("d", 3));
        let mut pool = vec![&a, &b, &c, &d];
        let (chosen, sum) = take_greedy(&mut pool, 14.0);
        // a + b = 12, c overshoots; deficit 2 is closest to d (|3-2| = 1 < 2)
        assert_eq!(sum, 15);
        assert_eq!(chosen.iter().map(|s| s.id.as_str()).collect::<Vec<_>>(), ["a", "b", "d"]);
        assert_eq!(pool.len(), 1);
    }

    #[test]
    fn two_sample_report_arithmetic() {
        let vocab = Vocabulary::byte_level();
        let h = LabeledSample { sample: TextSample::new("h", &"a".repeat(10), Source::Human, "g", &vocab), label: 0 };
        let m = LabeledSample {
            sample: TextSample::new("m", &"b".repeat(30), Source::generator("m"), "g", &vocab),
            label: 1,
        };
        let spec = DatasetSpec::master(&["m"], 40, 0).resolved(&[h.sample.clone(), m.sample.clone()]);
        let report = verify_balance([&h, &m], [], &spec);
        assert_eq!(report.train.class_token_share["negative"], 0.25);
        assert_eq!(report.train.class_token_share["positive"], 0.75);
        assert_eq!(report.train.max_deviation, 0.5);
    }
}
