//! Deterministic stand-in for a model's lexical knowledge.
//!
//! A word is "known" to prompt `P(i+1)` when `hash(word) mod 100` falls
//! below that prompt's threshold. With a single word hash the prompts are
//! nested: a word known at threshold 50 is known at every higher threshold.
//! `per_prompt` salts the hash with the prompt id instead, which makes the
//! prompts independent and produces contradictions.

use std::hash::Hasher;

use chrono::DateTime;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::lexicon::Word;
use crate::prompt::{parse_answer, render, AnswerClass, Battery, ParseRuleSet, PromptError};
use crate::record::AnswerRecord;

pub const YES_TEXT: &str = "Yes";
pub const NO_TEXT: &str = "No";
pub const GARBLED_TEXT: &str = "I cannot determine that.";

/// 64-bit FNV-1a over the UTF-8 bytes.
pub fn word_hash(text: &str) -> u64 {
    let mut hasher = fnv::FnvHasher::default();
    hasher.write(text.as_bytes());
    hasher.finish()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockKnowledge {
    /// Percent thresholds, one per prompt.
    pub thresholds: Vec<u8>,
    pub seed: u64,
    /// Probability that a single call returns an unparseable reply.
    #[serde(default)]
    pub unparseable_rate: f64,
    #[serde(default)]
    pub per_prompt: bool,
}

impl Default for MockKnowledge {
    fn default() -> Self {
        Self {
            thresholds: vec![80, 55, 50, 40],
            seed: 0,
            unparseable_rate: 0.0,
            per_prompt: false,
        }
    }
}

impl MockKnowledge {
    pub fn with_thresholds(thresholds: Vec<u8>) -> Self {
        Self {
            thresholds,
            ..Self::default()
        }
    }

    /// Threshold for `P(index+1)`; prompts past the end reuse the last one.
    pub fn threshold(&self, index: usize) -> u8 {
        self.thresholds
            .get(index)
            .or(self.thresholds.last())
            .copied()
            .unwrap_or(50)
    }

    pub fn bucket(&self, word: &Word, prompt_id: &str) -> u64 {
        let h = if self.per_prompt {
            word_hash(&format!("{}\u{0}{}", word.as_str(), prompt_id))
        } else {
            word_hash(word.as_str())
        };
        h % 100
    }

    pub fn knows(&self, word: &Word, index: usize, prompt_id: &str) -> bool {
        self.bucket(word, prompt_id) < u64::from(self.threshold(index))
    }

    /// Whether the `call`-th request (0-based) for this pair is garbled.
    /// Depends only on the seed, word, prompt and call number.
    pub fn garbled(&self, word: &Word, index: usize, call: u32) -> bool {
        if self.unparseable_rate <= 0.0 {
            return false;
        }
        let key =
            self.seed ^ word_hash(word.as_str()).rotate_left(17) ^ ((index as u64) << 40) ^ u64::from(call);
        ChaCha8Rng::seed_from_u64(key).random::<f64>() < self.unparseable_rate
    }

    pub fn respond(&self, word: &Word, index: usize, prompt_id: &str, call: u32) -> &'static str {
        if self.garbled(word, index, call) {
            GARBLED_TEXT
        } else if self.knows(word, index, prompt_id) {
            YES_TEXT
        } else {
            NO_TEXT
        }
    }
}

/// Recovers the probed word from a rendered prompt by matching the text
/// around each template's placeholder. Returns the prompt index and word.
pub fn identify_probe(battery: &Battery, message: &str) -> Option<(usize, Word)> {
    battery.templates.iter().enumerate().find_map(|(i, t)| {
        let (head, tail) = t.split().ok()?;
        let middle = message.strip_prefix(head)?.strip_suffix(tail)?;
        let word = Word::new(middle).ok()?;
        (word.as_str() == middle).then_some((i, word))
    })
}

/// Probes every word once per prompt without any dispatch machinery. Used
/// for previews and the browser demo.
pub fn simulate(
    experiment_id: &str,
    words: &[Word],
    battery: &Battery,
    knowledge: &MockKnowledge,
    rules: &ParseRuleSet,
) -> Result<Vec<AnswerRecord>, PromptError> {
    let epoch = DateTime::from_timestamp_millis(0).expect("epoch");
    let mut records = Vec::with_capacity(words.len() * battery.len());
    for word in words {
        for (i, t) in battery.templates.iter().enumerate() {
            render(t, word)?;
            let raw = knowledge.respond(word, i, &t.id, 0);
            records.push(AnswerRecord {
                experiment_id: experiment_id.to_string(),
                word: word.clone(),
                prompt_id: t.id.clone(),
                raw_text: raw.to_string(),
                parsed: parse_answer(raw, rules),
                attempts: 1,
                completed_at: epoch,
                latency_ms: 0,
            });
        }
    }
    Ok(records)
}

/// Expected answer class for a pair when nothing is garbled.
pub fn expected_class(knowledge: &MockKnowledge, word: &Word, index: usize, prompt_id: &str) -> AnswerClass {
    if knowledge.knows(word, index, prompt_id) {
        AnswerClass::Yes
    } else {
        AnswerClass::No
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::builtin_battery;

    fn w(s: &str) -> Word {
        Word::new(s).unwrap()
    }

    #[test]
    fn fnv_reference_values() {
        // published FNV-1a 64 test vectors
        assert_eq!(word_hash(""), 0xcbf29ce484222325);
        assert_eq!(word_hash("a"), 0xaf63dc4c8601ec8c);
        assert_eq!(word_hash("foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn thresholds_are_nested_without_salt() {
        let k = MockKnowledge::default();
        for i in 0..200 {
            let word = w(&format!("palabra{i}"));
            let yes: Vec<bool> = (0..4).map(|p| k.knows(&word, p, "")).collect();
            // 80 > 55 > 50 > 40
            for p in 1..4 {
                assert!(!yes[p] || yes[p - 1]);
            }
        }
    }

    #[test]
    fn garbling_is_seeded() {
        let k = MockKnowledge {
            unparseable_rate: 0.5,
            seed: 7,
            ..MockKnowledge::default()
        };
        let word = w("casa");
        let a: Vec<bool> = (0..32).map(|c| k.garbled(&word, 0, c)).collect();
        let b: Vec<bool> = (0..32).map(|c| k.garbled(&word, 0, c)).collect();
        assert_eq!(a, b);
        assert!(a.contains(&true) && a.contains(&false));
        let other = MockKnowledge { seed: 8, ..k.clone() };
        let c: Vec<bool> = (0..32).map(|c| other.garbled(&word, 0, c)).collect();
        assert_ne!(a, c);
    }

    #[test]
    fn identifies_rendered_prompts() {
        let b = builtin_battery();
        for (i, t) in b.templates.iter().enumerate() {
            let text = render(t, &w("ñandú")).unwrap();
            assert_eq!(identify_probe(&b, &text), Some((i, w("ñandú"))));
        }
        assert_eq!(identify_probe(&b, "hello"), None);
    }

    #[test]
    fn simulation_covers_every_pair() {
        let b = builtin_battery();
        let words: Vec<Word> = ["sol", "luna", "estrella"].iter().map(|s| w(s)).collect();
        let records = simulate(
            "sim",
            &words,
            &b,
            &MockKnowledge::default(),
            &ParseRuleSet::default(),
        )
        .unwrap();
        assert_eq!(records.len(), 12);
        for r in &records {
            let i = b.index_of(&r.prompt_id).unwrap();
            assert_eq!(
                r.parsed,
                expected_class(&MockKnowledge::default(), &r.word, i, &r.prompt_id)
            );
        }
    }
}
