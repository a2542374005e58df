//! Core building blocks for probing a chat model's knowledge of a word
//! list with yes/no questions.
//!
//! - [`lexicon`]: loading, normalizing and tokenizing word lists
//! - [`prompt`]: prompt batteries, rendering and answer classification
//! - [`aggregate`]: combination codes, histograms, rates and exports
//! - [`mock`]: a deterministic knowledge function for offline runs
//!
//! Nothing here performs I/O, so the crate also builds for `wasm32`.

pub mod aggregate;
pub mod lexicon;
pub mod mock;
pub mod prompt;
pub mod record;

pub use aggregate::{CombinationCode, CombinationHistogram, ExportFormat, WordOutcome};
pub use lexicon::{IngestOptions, NormalizationReport, TokenStats, Word, WordList, WordSource};
pub use prompt::{AnswerClass, Battery, ParseRuleSet, PromptTemplate};
pub use record::AnswerRecord;
