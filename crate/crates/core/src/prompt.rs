//! Probe prompt batteries, rendering, and yes/no answer classification.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

use crate::lexicon::Word;

/// Literal token replaced by the probed word.
pub const PLACEHOLDER: &str = "{WORD}";

const BUILTIN_BATTERY: &str = include_str!("../data/battery.json");

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PromptError {
    #[error("template {id} must contain {PLACEHOLDER} exactly once (found {found})")]
    Placeholder { id: String, found: usize },
    #[error("invalid battery file: {0}")]
    Format(String),
    #[error("battery has no prompts")]
    Empty,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerContract {
    #[default]
    BooleanYesNo,
    /// Declared by batteries that expect prose. Such prompts cannot be
    /// classified and are flagged by [`lint_battery`].
    FreeText,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub id: String,
    pub text: String,
    #[serde(default)]
    pub language_hint: String,
    #[serde(default)]
    pub answer_contract: AnswerContract,
}

impl PromptTemplate {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            language_hint: String::new(),
            answer_contract: AnswerContract::BooleanYesNo,
        }
    }

    fn placeholder_count(&self) -> usize {
        self.text.matches(PLACEHOLDER).count()
    }

    /// Text before and after the placeholder.
    pub fn split(&self) -> Result<(&str, &str), PromptError> {
        match self.placeholder_count() {
            1 => Ok(self.text.split_once(PLACEHOLDER).expect("counted once")),
            found => Err(PromptError::Placeholder {
                id: self.id.clone(),
                found,
            }),
        }
    }
}

/// Ordered prompts applied to every word. Index `i` is prompt `P(i+1)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Battery {
    pub templates: Vec<PromptTemplate>,
    /// Two prompts that ask the same question in different words; words
    /// answered differently by them are reported as contradictions.
    #[serde(default)]
    pub contradiction_pair: Option<(usize, usize)>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum BatteryDoc {
    List(Vec<PromptTemplate>),
    Full(Battery),
}

impl Battery {
    /// Wraps templates, defaulting the contradiction pair to (P2, P3) when
    /// the battery has at least three prompts.
    pub fn new(templates: Vec<PromptTemplate>) -> Self {
        let contradiction_pair = (templates.len() >= 3).then_some((1, 2));
        Self {
            templates,
            contradiction_pair,
        }
    }

    /// Accepts either the plain array file format or a full battery object.
    pub fn from_json(text: &str) -> Result<Self, PromptError> {
        let doc: BatteryDoc = serde_json::from_str(text).map_err(|e| PromptError::Format(e.to_string()))?;
        let battery = match doc {
            BatteryDoc::List(templates) => Battery::new(templates),
            BatteryDoc::Full(b) => b,
        };
        if battery.templates.is_empty() {
            return Err(PromptError::Empty);
        }
        for t in &battery.templates {
            t.split()?;
        }
        Ok(battery)
    }

    /// Serializes in the plain array file format.
    pub fn to_file_json(&self) -> String {
        #[derive(Serialize)]
        struct Entry<'a> {
            id: &'a str,
            text: &'a str,
            language_hint: &'a str,
        }
        let entries: Vec<Entry> = self
            .templates
            .iter()
            .map(|t| Entry {
                id: &t.id,
                text: &t.text,
                language_hint: &t.language_hint,
            })
            .collect();
        serde_json::to_string_pretty(&entries).expect("plain strings serialize")
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn index_of(&self, prompt_id: &str) -> Option<usize> {
        self.templates.iter().position(|t| t.id == prompt_id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.templates.iter().map(|t| t.id.as_str())
    }
}

/// The four-prompt Spanish battery: meaning, correct, valid, in the RAE
/// dictionary.
pub fn builtin_battery() -> Battery {
    Battery::from_json(BUILTIN_BATTERY).expect("bundled battery is valid")
}

/// Raw JSON of the bundled battery file.
pub fn builtin_battery_json() -> &'static str {
    BUILTIN_BATTERY
}

/// Substitutes `word` verbatim for the placeholder.
pub fn render(template: &PromptTemplate, word: &Word) -> Result<String, PromptError> {
    let (head, tail) = template.split()?;
    let mut out = String::with_capacity(template.text.len() + word.as_str().len());
    out.push_str(head);
    out.push_str(word.as_str());
    out.push_str(tail);
    Ok(out)
}

/// Like [`render`], also reporting words that would confuse the quoted
/// prompt.
pub fn render_with_lint(
    template: &PromptTemplate,
    word: &Word,
) -> Result<(String, Vec<LintWarning>), PromptError> {
    let text = render(template, word)?;
    let mut warnings = Vec::new();
    if word
        .as_str()
        .chars()
        .any(|c| matches!(c, '"' | '\u{201c}' | '\u{201d}' | '«' | '»'))
    {
        warnings.push(LintWarning::QuoteInWord {
            prompt_id: template.id.clone(),
            word: word.to_string(),
        });
    }
    Ok((text, warnings))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LintWarning {
    EmptyBattery,
    DuplicateId { id: String },
    MissingPlaceholder { id: String },
    RepeatedPlaceholder { id: String, count: usize },
    NonBooleanContract { id: String },
    ContradictionPairOutOfRange { pair: (usize, usize) },
    QuoteInWord { prompt_id: String, word: String },
}

impl fmt::Display for LintWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LintWarning::EmptyBattery => write!(f, "battery has no prompts"),
            LintWarning::DuplicateId { id } => write!(f, "duplicate prompt id {id}"),
            LintWarning::MissingPlaceholder { id } => {
                write!(f, "prompt {id} has no {PLACEHOLDER} placeholder")
            }
            LintWarning::RepeatedPlaceholder { id, count } => {
                write!(f, "prompt {id} has {count} placeholders")
            }
            LintWarning::NonBooleanContract { id } => {
                write!(f, "prompt {id} does not ask for a yes/no answer")
            }
            LintWarning::ContradictionPairOutOfRange { pair } => {
                write!(f, "contradiction pair {pair:?} is outside the battery")
            }
            LintWarning::QuoteInWord { prompt_id, word } => {
                write!(f, "word {word:?} contains a quote character ({prompt_id})")
            }
        }
    }
}

pub fn lint_battery(templates: &[PromptTemplate]) -> Vec<LintWarning> {
    let mut warnings = Vec::new();
    if templates.is_empty() {
        warnings.push(LintWarning::EmptyBattery);
    }
    let mut seen = HashSet::new();
    for t in templates {
        if !seen.insert(t.id.as_str()) {
            warnings.push(LintWarning::DuplicateId { id: t.id.clone() });
        }
        match t.placeholder_count() {
            0 => warnings.push(LintWarning::MissingPlaceholder { id: t.id.clone() }),
            1 => {}
            count => warnings.push(LintWarning::RepeatedPlaceholder {
                id: t.id.clone(),
                count,
            }),
        }
        if t.answer_contract != AnswerContract::BooleanYesNo {
            warnings.push(LintWarning::NonBooleanContract { id: t.id.clone() });
        }
    }
    warnings
}

/// Battery-level lint: template checks plus the contradiction pair.
pub fn lint(battery: &Battery) -> Vec<LintWarning> {
    let mut warnings = lint_battery(&battery.templates);
    if let Some((a, b)) = battery.contradiction_pair {
        if a >= battery.len() || b >= battery.len() || a == b {
            warnings.push(LintWarning::ContradictionPairOutOfRange { pair: (a, b) });
        }
    }
    warnings
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AnswerClass {
    Yes,
    No,
    Unparseable,
}

impl AnswerClass {
    pub fn as_str(self) -> &'static str {
        match self {
            AnswerClass::Yes => "YES",
            AnswerClass::No => "NO",
            AnswerClass::Unparseable => "UNPARSEABLE",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "YES" => Some(AnswerClass::Yes),
            "NO" => Some(AnswerClass::No),
            "UNPARSEABLE" => Some(AnswerClass::Unparseable),
            _ => None,
        }
    }
}

impl fmt::Display for AnswerClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Marker words and punctuation used by [`parse_answer`]. Matching is always
/// case-insensitive.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseRuleSet {
    pub yes_markers: Vec<String>,
    pub no_markers: Vec<String>,
    pub strip_chars: String,
}

impl Default for ParseRuleSet {
    fn default() -> Self {
        Self {
            yes_markers: vec!["yes".into(), "sí".into(), "si".into()],
            no_markers: vec!["no".into()],
            strip_chars: ".,;:!?¡¿\"'`«»“”‘’()[]{}…-–—*_".into(),
        }
    }
}

/// Characters that end the opening clause of a response.
const CLAUSE_BREAKS: &[char] = &[',', '.', ';', ':', '!', '?', '\n', '(', ')', '—', '–'];

fn fold(s: &str) -> String {
    s.nfc().collect::<String>().to_lowercase()
}

impl ParseRuleSet {
    /// Fails when a marker belongs to both families.
    pub fn validate(&self) -> Result<(), String> {
        let yes: HashSet<String> = self.yes_markers.iter().map(|m| fold(m)).collect();
        match self.no_markers.iter().map(|m| fold(m)).find(|m| yes.contains(m)) {
            Some(m) => Err(format!("marker {m:?} is both a yes and a no marker")),
            None => Ok(()),
        }
    }

    fn family(&self, token: &str) -> Option<AnswerClass> {
        if self.yes_markers.iter().any(|m| fold(m) == token) {
            Some(AnswerClass::Yes)
        } else if self.no_markers.iter().any(|m| fold(m) == token) {
            Some(AnswerClass::No)
        } else {
            None
        }
    }
}

fn alpha_tokens(s: &str) -> impl Iterator<Item = &str> {
    s.split(|c: char| !c.is_alphabetic()).filter(|t| !t.is_empty())
}

/// Classifies a model response.
///
/// The opening word decides when it is a marker, unless the opening clause
/// also carries the opposite marker ("Yes and no"). Otherwise the whole
/// text is scanned and exactly one marker family must be present.
pub fn parse_answer(raw: &str, rules: &ParseRuleSet) -> AnswerClass {
    let folded = fold(raw);
    let text = folded.trim_matches(|c: char| c.is_whitespace() || rules.strip_chars.contains(c));

    let families = |s: &str| {
        let (mut yes, mut no) = (false, false);
        for token in alpha_tokens(s) {
            match rules.family(token) {
                Some(AnswerClass::Yes) => yes = true,
                Some(AnswerClass::No) => no = true,
                _ => {}
            }
        }
        (yes, no)
    };

    if let Some(first) = alpha_tokens(text).next() {
        if let Some(class) = rules.family(first) {
            let clause = text.split(CLAUSE_BREAKS).next().unwrap_or(text);
            return match (class, families(clause)) {
                (AnswerClass::Yes, (_, true)) | (AnswerClass::No, (true, _)) => AnswerClass::Unparseable,
                _ => class,
            };
        }
    }

    match families(text) {
        (true, false) => AnswerClass::Yes,
        (false, true) => AnswerClass::No,
        _ => AnswerClass::Unparseable,
    }
}
