//! Core algorithms for token-level detection of machine-generated text.
//!
//! Everything in this crate is pure computation over in-memory values and
//! only needs `alloc`: the reference byte-level tokenizer, corpus statistics
//! and deduplication, prompt rendering and output cleanup for the generation
//! pipeline, the token-budget dataset sampler, the frozen-backbone detector
//! with its trainable head, and the evaluation metrics and ensemble rule.
//!
//! File formats, HTTP, and the command line live in the `tokdetect` crate.
#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod corpus;
pub mod detector;
pub mod evalkit;
pub mod genpipe;
pub mod sampler;
pub mod seed;
pub mod synth;
pub mod tokenizer;

pub use corpus::{CorpusStats, GroupBy, GroupedStats, Source, TextSample};
pub use detector::{Backbone, BackboneConfig, HeadParams, TokenBatch, TrainConfig};
pub use evalkit::{EnsembleSpec, MetricsReport, PredictionSet};
pub use genpipe::{PromptTemplate, SamplingPreset};
pub use sampler::{BalanceReport, DatasetSpec, LabeledSample};
pub use tokenizer::{TokenSeq, Vocabulary};
