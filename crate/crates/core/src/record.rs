use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::lexicon::Word;
use crate::prompt::AnswerClass;

/// Outcome of one (word, prompt) probe.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerRecord {
    pub experiment_id: String,
    pub word: Word,
    pub prompt_id: String,
    /// Response text exactly as the provider returned it.
    pub raw_text: String,
    pub parsed: AnswerClass,
    /// Provider calls spent on this pair, including retries and re-asks.
    pub attempts: u32,
    pub completed_at: DateTime<Utc>,
    pub latency_ms: u64,
}

impl AnswerRecord {
    pub fn latency(&self) -> Duration {
        Duration::from_millis(self.latency_ms)
    }

    pub fn key(&self) -> (&Word, &str) {
        (&self.word, &self.prompt_id)
    }
}

/// Truncates a timestamp to whole milliseconds, the precision records are
/// persisted with.
pub fn millis_precision(t: DateTime<Utc>) -> DateTime<Utc> {
    DateTime::from_timestamp_millis(t.timestamp_millis()).unwrap_or(t)
}
