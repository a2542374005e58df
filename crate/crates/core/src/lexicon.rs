//! Word lists: loading lemma files, tokenizing running text, and counting
//! unique words.
//!
//! Every word that enters the system passes through [`normalize_word`]:
//! NFC composition, trimming and (by default) Unicode lowercase folding.
//! Diacritics are preserved, so `año` and `ano` stay distinct.

use std::collections::{HashMap, HashSet};
use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IngestError {
    #[error("input is not valid UTF-8 (first bad byte at offset {offset})")]
    Decode { offset: usize },
    #[error("no words survived normalization")]
    EmptyList,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WordError {
    #[error("word is empty")]
    Empty,
    #[error("word {0:?} contains whitespace")]
    Whitespace(String),
    #[error("word {0:?} contains a control character")]
    Control(String),
}

/// A single normalized word: NFC, non-empty, no whitespace or control
/// characters.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Word(String);

impl Word {
    /// Validates `text` as-is after trimming and NFC composition. No case
    /// folding is applied here.
    pub fn new(text: &str) -> Result<Self, WordError> {
        let text: String = text.trim().nfc().collect();
        if text.is_empty() {
            return Err(WordError::Empty);
        }
        if text.chars().any(char::is_whitespace) {
            return Err(WordError::Whitespace(text));
        }
        if text.chars().any(char::is_control) {
            return Err(WordError::Control(text));
        }
        Ok(Word(text))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn into_string(self) -> String {
        self.0
    }
}

impl fmt::Display for Word {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl TryFrom<String> for Word {
    type Error = WordError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        Word::new(&value)
    }
}

impl From<Word> for String {
    fn from(word: Word) -> Self {
        word.0
    }
}

impl AsRef<str> for Word {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestOptions {
    /// Lowercase every word before deduplication. Turn off for lists of
    /// proper nouns where case carries meaning.
    pub fold_case: bool,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self { fold_case: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WordSource {
    LemmaFile,
    TokenizedText,
    Manual,
}

impl WordSource {
    pub fn as_str(self) -> &'static str {
        match self {
            WordSource::LemmaFile => "lemma_file",
            WordSource::TokenizedText => "tokenized_text",
            WordSource::Manual => "manual",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "lemma_file" => Some(WordSource::LemmaFile),
            "tokenized_text" => Some(WordSource::TokenizedText),
            "manual" => Some(WordSource::Manual),
            _ => None,
        }
    }
}

/// Ordered, duplicate-free list of words. The id is derived from the
/// contents, so identical lists share an id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordList {
    pub id: String,
    pub name: String,
    pub words: Vec<Word>,
    pub source: WordSource,
    pub created_at: DateTime<Utc>,
}

impl WordList {
    /// Builds a list from already-normalized words, dropping later
    /// duplicates.
    pub fn from_words(
        name: impl Into<String>,
        source: WordSource,
        words: impl IntoIterator<Item = Word>,
    ) -> Self {
        let mut seen = HashSet::new();
        let words: Vec<Word> = words.into_iter().filter(|w| seen.insert(w.clone())).collect();
        Self {
            id: content_id(&words),
            name: name.into(),
            words,
            source,
            created_at: Utc::now(),
        }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Canonical export: one word per line, each line newline-terminated.
    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(self.words.iter().map(|w| w.0.len() + 1).sum());
        for w in &self.words {
            out.push_str(w.as_str());
            out.push('\n');
        }
        out
    }
}

fn content_id(words: &[Word]) -> String {
    use std::hash::Hasher;
    let mut hasher = fnv::FnvHasher::default();
    for w in words {
        hasher.write(w.as_str().as_bytes());
        hasher.write_u8(b'\n');
    }
    format!("wl-{:016x}", hasher.finish())
}

/// Counts from one ingest pass. `input == kept + dropped + rejected`; blank
/// and comment lines are counted in `skipped` and nowhere else.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormalizationReport {
    pub input: usize,
    pub kept: usize,
    pub dropped: usize,
    pub skipped: usize,
    pub rejected: usize,
    /// Kept words whose normalized form differs from the raw line.
    pub folded: usize,
}

/// Applies the ingest normalization to one raw token or line.
pub fn normalize_word(raw: &str, options: IngestOptions) -> Result<Word, WordError> {
    let word = Word::new(raw)?;
    if options.fold_case {
        let folded: String = word.0.to_lowercase().nfc().collect();
        Ok(Word(folded))
    } else {
        Ok(word)
    }
}

fn decode(bytes: &[u8]) -> Result<&str, IngestError> {
    std::str::from_utf8(bytes).map_err(|e| IngestError::Decode {
        offset: e.valid_up_to(),
    })
}

/// Parses a one-word-per-line file and reports what happened to every line.
/// Unlike [`load_word_list`] this does not fail on an empty result.
pub fn ingest(bytes: &[u8], options: IngestOptions) -> Result<(Vec<Word>, NormalizationReport), IngestError> {
    let text = decode(bytes)?;
    let text = text.strip_prefix('\u{feff}').unwrap_or(text);
    let mut report = NormalizationReport::default();
    let mut seen = HashSet::new();
    let mut words = Vec::new();
    for line in text.lines() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            report.skipped += 1;
            continue;
        }
        report.input += 1;
        match normalize_word(trimmed, options) {
            Ok(word) => {
                if seen.insert(word.clone()) {
                    if word.as_str() != trimmed {
                        report.folded += 1;
                    }
                    report.kept += 1;
                    words.push(word);
                } else {
                    report.dropped += 1;
                }
            }
            Err(_) => report.rejected += 1,
        }
    }
    Ok((words, report))
}

pub fn load_word_list(bytes: &[u8], options: IngestOptions) -> Result<WordList, IngestError> {
    let (words, _) = ingest(bytes, options)?;
    if words.is_empty() {
        return Err(IngestError::EmptyList);
    }
    Ok(WordList::from_words("", WordSource::LemmaFile, words))
}

pub fn normalization_report(
    bytes: &[u8],
    options: IngestOptions,
) -> Result<NormalizationReport, IngestError> {
    ingest(bytes, options).map(|(_, report)| report)
}

fn is_joiner(c: char) -> bool {
    matches!(c, '\'' | '\u{2019}' | '-' | '\u{2010}')
}

/// Splits running text into words. A token is a maximal run of letters,
/// where an apostrophe or hyphen is kept only when it sits between two
/// letters. Everything else separates tokens.
pub fn tokenize_text(bytes: &[u8]) -> Result<Vec<Word>, IngestError> {
    tokenize_text_with(bytes, IngestOptions::default())
}

pub fn tokenize_text_with(bytes: &[u8], options: IngestOptions) -> Result<Vec<Word>, IngestError> {
    let text: String = decode(bytes)?.nfc().collect();
    let chars: Vec<char> = text.chars().collect();
    let mut tokens = Vec::new();
    let mut current = String::new();
    for (i, &c) in chars.iter().enumerate() {
        let keep = c.is_alphabetic()
            || (is_joiner(c) && !current.is_empty() && chars.get(i + 1).is_some_and(|n| n.is_alphabetic()));
        if keep {
            current.push(c);
        } else if !current.is_empty() {
            tokens.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    Ok(tokens
        .iter()
        // letters-only tokens always validate
        .filter_map(|t| normalize_word(t, options).ok())
        .collect())
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TokenStats {
    pub total_tokens: usize,
    pub unique_words: usize,
    pub frequency: HashMap<Word, usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordCount {
    pub word: Word,
    pub count: usize,
}

/// JSON stats document written by `words stats`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatsDocument {
    pub total_tokens: usize,
    pub unique_words: usize,
    pub top_n_frequencies: Vec<WordCount>,
}

impl TokenStats {
    /// Most frequent words, ties broken by the word itself.
    pub fn top_n(&self, n: usize) -> Vec<WordCount> {
        let mut all: Vec<WordCount> = self
            .frequency
            .iter()
            .map(|(word, &count)| WordCount {
                word: word.clone(),
                count,
            })
            .collect();
        all.sort_by(|a, b| b.count.cmp(&a.count).then_with(|| a.word.cmp(&b.word)));
        all.truncate(n);
        all
    }

    pub fn document(&self, top: usize) -> StatsDocument {
        StatsDocument {
            total_tokens: self.total_tokens,
            unique_words: self.unique_words,
            top_n_frequencies: self.top_n(top),
        }
    }
}

pub fn unique_words(tokens: &[Word]) -> (WordList, TokenStats) {
    let mut frequency: HashMap<Word, usize> = HashMap::new();
    let mut order = Vec::new();
    for token in tokens {
        let count = frequency.entry(token.clone()).or_insert(0);
        if *count == 0 {
            order.push(token.clone());
        }
        *count += 1;
    }
    let stats = TokenStats {
        total_tokens: tokens.len(),
        unique_words: frequency.len(),
        frequency,
    };
    (WordList::from_words("", WordSource::TokenizedText, order), stats)
}
