//! Reports over answer records: the per-word combination code, its
//! histogram, per-prompt positive rates and contradiction lists.
//!
//! A combination code is written most significant prompt first: for a
//! four-prompt battery the characters are `P4 P3 P2 P1`, so `0001` is a
//! word answered YES only by `P1`.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lexicon::Word;
use crate::prompt::{AnswerClass, Battery};
use crate::record::AnswerRecord;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AggregateError {
    #[error("outcome for {0} is missing at least one prompt")]
    IncompleteOutcome(Word),
    #[error("outcome for {0} has an unparseable answer")]
    UnparseableSlot(Word),
    #[error("histogram has no complete words")]
    EmptyHistogram,
    #[error("invalid combination code {0:?}")]
    InvalidCode(String),
    #[error("prompt index {index} out of range for k = {k}")]
    PromptIndex { index: usize, k: usize },
    #[error("malformed export: {0}")]
    Format(String),
}

/// All answers one word received, slot `i` for prompt `P(i+1)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WordOutcome {
    pub word: Word,
    pub bits: Vec<Option<AnswerClass>>,
}

impl WordOutcome {
    pub fn complete(&self) -> bool {
        self.bits.iter().all(Option::is_some)
    }

    pub fn has_unparseable(&self) -> bool {
        self.bits.contains(&Some(AnswerClass::Unparseable))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CombinationCode(String);

impl CombinationCode {
    /// `yes[i]` is the answer to `P(i+1)`.
    pub fn from_bits(yes: &[bool]) -> Self {
        Self(yes.iter().rev().map(|&b| if b { '1' } else { '0' }).collect())
    }

    pub fn parse(code: &str, k: usize) -> Result<Self, AggregateError> {
        if code.len() != k || !code.bytes().all(|b| b == b'0' || b == b'1') {
            return Err(AggregateError::InvalidCode(code.to_string()));
        }
        Ok(Self(code.to_string()))
    }

    pub fn k(&self) -> usize {
        self.0.len()
    }

    /// Whether prompt `P(index+1)` was answered YES.
    pub fn is_set(&self, index: usize) -> bool {
        let k = self.k();
        index < k && self.0.as_bytes()[k - 1 - index] == b'1'
    }

    pub fn bits(&self) -> Vec<bool> {
        (0..self.k()).map(|i| self.is_set(i)).collect()
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Every code of length `k` in ascending order.
    pub fn all(k: usize) -> impl Iterator<Item = CombinationCode> {
        assert!(k <= 24, "refusing to enumerate 2^{k} codes");
        (0u32..(1 << k)).map(move |n| Self(format!("{n:0k$b}")))
    }
}

impl fmt::Display for CombinationCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

pub fn encode(outcome: &WordOutcome) -> Result<CombinationCode, AggregateError> {
    let mut yes = Vec::with_capacity(outcome.bits.len());
    for slot in &outcome.bits {
        match slot {
            None => return Err(AggregateError::IncompleteOutcome(outcome.word.clone())),
            Some(AnswerClass::Unparseable) => {
                return Err(AggregateError::UnparseableSlot(outcome.word.clone()))
            }
            Some(class) => yes.push(*class == AnswerClass::Yes),
        }
    }
    Ok(CombinationCode::from_bits(&yes))
}

/// Groups records by word, in word order. Records for prompts outside the
/// battery are ignored; for a repeated (word, prompt) the first record wins.
pub fn outcomes(records: &[AnswerRecord], battery: &Battery) -> Vec<WordOutcome> {
    let k = battery.len();
    let mut by_word: BTreeMap<&Word, Vec<Option<AnswerClass>>> = BTreeMap::new();
    for r in records {
        let Some(i) = battery.index_of(&r.prompt_id) else {
            continue;
        };
        let bits = by_word.entry(&r.word).or_insert_with(|| vec![None; k]);
        bits[i].get_or_insert(r.parsed);
    }
    by_word
        .into_iter()
        .map(|(word, bits)| WordOutcome {
            word: word.clone(),
            bits,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CombinationHistogram {
    pub k: usize,
    /// Non-empty bins only.
    pub counts: BTreeMap<CombinationCode, u64>,
    pub total_complete: u64,
    pub total_excluded: u64,
    /// Complete words left out because some answer was unparseable.
    #[serde(default)]
    pub unparseable_words: Vec<Word>,
    /// Words still missing at least one prompt.
    #[serde(default)]
    pub incomplete_words: Vec<Word>,
}

impl CombinationHistogram {
    pub fn empty(k: usize) -> Self {
        Self {
            k,
            counts: BTreeMap::new(),
            total_complete: 0,
            total_excluded: 0,
            unparseable_words: Vec::new(),
            incomplete_words: Vec::new(),
        }
    }

    pub fn count(&self, code: &str) -> u64 {
        self.counts
            .iter()
            .find(|(c, _)| c.as_str() == code)
            .map_or(0, |(_, &n)| n)
    }

    /// Share of complete words in a bin, in percent.
    pub fn percent(&self, count: u64) -> f64 {
        if self.total_complete == 0 {
            0.0
        } else {
            count as f64 * 100.0 / self.total_complete as f64
        }
    }
}

pub fn histogram(records: &[AnswerRecord], battery: &Battery) -> CombinationHistogram {
    let mut hist = CombinationHistogram::empty(battery.len());
    for outcome in outcomes(records, battery) {
        match encode(&outcome) {
            Ok(code) => {
                *hist.counts.entry(code).or_insert(0) += 1;
                hist.total_complete += 1;
            }
            Err(AggregateError::UnparseableSlot(word)) if outcome.complete() => {
                hist.total_excluded += 1;
                hist.unparseable_words.push(word);
            }
            Err(_) => {
                hist.total_excluded += 1;
                hist.incomplete_words.push(outcome.word);
            }
        }
    }
    hist
}

/// Fraction of complete words answered YES by prompt `P(index+1)`.
pub fn positive_rate(hist: &CombinationHistogram, index: usize) -> Result<f64, AggregateError> {
    if index >= hist.k {
        return Err(AggregateError::PromptIndex { index, k: hist.k });
    }
    if hist.total_complete == 0 {
        return Err(AggregateError::EmptyHistogram);
    }
    let positive: u64 = hist
        .counts
        .iter()
        .filter(|(code, _)| code.is_set(index))
        .map(|(_, n)| n)
        .sum();
    Ok(positive as f64 / hist.total_complete as f64)
}

pub fn positive_rates(hist: &CombinationHistogram) -> Result<Vec<f64>, AggregateError> {
    (0..hist.k).map(|i| positive_rate(hist, i)).collect()
}

/// Words whose answers to the battery's contradiction pair disagree. Only
/// words with a full, parseable set of answers are considered.
pub fn contradictions(records: &[AnswerRecord], battery: &Battery) -> Vec<Word> {
    let Some((a, b)) = battery.contradiction_pair else {
        return Vec::new();
    };
    if a >= battery.len() || b >= battery.len() {
        return Vec::new();
    }
    outcomes(records, battery)
        .into_iter()
        .filter_map(|o| {
            let code = encode(&o).ok()?;
            (code.is_set(a) != code.is_set(b)).then_some(o.word)
        })
        .collect()
}

/// Records of the words whose combination code equals `code`.
pub fn filter_by_code(
    records: &[AnswerRecord],
    battery: &Battery,
    code: &CombinationCode,
) -> Vec<AnswerRecord> {
    let matching: std::collections::HashSet<Word> = outcomes(records, battery)
        .into_iter()
        .filter(|o| encode(o).ok().as_ref() == Some(code))
        .map(|o| o.word)
        .collect();
    records
        .iter()
        .filter(|r| matching.contains(&r.word) && battery.index_of(&r.prompt_id).is_some())
        .cloned()
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExportFormat {
    Csv,
    Json,
}

impl std::str::FromStr for ExportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(ExportFormat::Csv),
            "json" => Ok(ExportFormat::Json),
            other => Err(format!("unknown format {other:?} (expected csv or json)")),
        }
    }
}

/// One exported record row; column names are part of the file format.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordRow {
    pub word: String,
    pub prompt_id: String,
    pub parsed: AnswerClass,
    pub raw_text: String,
    pub attempts: u32,
    pub latency_ms: u64,
    pub completed_at: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramRow {
    pub code: CombinationCode,
    pub count: u64,
    pub percent: String,
}

fn record_rows(records: &[AnswerRecord]) -> Vec<RecordRow> {
    let mut sorted: Vec<&AnswerRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.word.cmp(&b.word).then_with(|| a.prompt_id.cmp(&b.prompt_id)));
    sorted
        .into_iter()
        .map(|r| RecordRow {
            word: r.word.to_string(),
            prompt_id: r.prompt_id.clone(),
            parsed: r.parsed,
            raw_text: r.raw_text.clone(),
            attempts: r.attempts,
            latency_ms: r.latency_ms,
            completed_at: r
                .completed_at
                .to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
        })
        .collect()
}

fn histogram_rows(hist: &CombinationHistogram) -> Vec<HistogramRow> {
    hist.counts
        .iter()
        .map(|(code, &count)| HistogramRow {
            code: code.clone(),
            count,
            percent: format!("{:.2}", hist.percent(count)),
        })
        .collect()
}

fn to_csv<T: Serialize>(rows: &[T], header: &[&str]) -> Vec<u8> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    if rows.is_empty() {
        writer.write_record(header).expect("in-memory write");
    }
    for row in rows {
        writer.serialize(row).expect("in-memory write");
    }
    writer.into_inner().expect("in-memory flush")
}

const RECORD_COLUMNS: &[&str] = &[
    "word",
    "prompt_id",
    "parsed",
    "raw_text",
    "attempts",
    "latency_ms",
    "completed_at",
];

/// Records sorted by word then prompt id.
pub fn export_records(records: &[AnswerRecord], format: ExportFormat) -> Vec<u8> {
    let rows = record_rows(records);
    match format {
        ExportFormat::Csv => to_csv(&rows, RECORD_COLUMNS),
        ExportFormat::Json => serde_json::to_vec_pretty(&rows).expect("rows serialize"),
    }
}

/// CSV is `code,count,percent` per non-empty bin in ascending code order.
/// JSON is the full histogram document.
pub fn export_histogram(hist: &CombinationHistogram, format: ExportFormat) -> Vec<u8> {
    match format {
        ExportFormat::Csv => to_csv(&histogram_rows(hist), &["code", "count", "percent"]),
        ExportFormat::Json => serde_json::to_vec_pretty(hist).expect("histogram serializes"),
    }
}

pub fn import_histogram(json: &[u8]) -> Result<CombinationHistogram, AggregateError> {
    let hist: CombinationHistogram =
        serde_json::from_slice(json).map_err(|e| AggregateError::Format(e.to_string()))?;
    for code in hist.counts.keys() {
        CombinationCode::parse(code.as_str(), hist.k)?;
    }
    Ok(hist)
}
