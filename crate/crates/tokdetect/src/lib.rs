//! File formats, the generation client and the `tokdetect` command line.
//!
//! The numerical work lives in [`tokdetect_core`]; this crate reads and
//! writes corpora, splits, vocabularies, checkpoints and reports, talks to a
//! chat-completions endpoint, and wires everything behind one CLI.

pub mod checkpoint;
pub mod cli;
pub mod corpus_io;
pub mod detect;
pub mod error;
pub mod fsio;
pub mod generate;
pub mod manifest;
pub mod vocab_io;

pub use error::{Error, Result};
pub use tokdetect_core as core;
