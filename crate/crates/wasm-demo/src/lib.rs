//! Browser bindings over `lexprobe-core`. Every export takes and returns
//! plain strings (JSON for structured results) so the page needs no
//! generated TypeScript types.

use lexprobe_core::aggregate::{contradictions, histogram, positive_rates};
use lexprobe_core::lexicon::{ingest, normalize_word, tokenize_text, unique_words};
use lexprobe_core::mock::{simulate as simulate_records, MockKnowledge};
use lexprobe_core::prompt::{builtin_battery, parse_answer, render};
use lexprobe_core::{CombinationCode, IngestOptions, ParseRuleSet};
use serde::Serialize;
use serde_json::json;
use wasm_bindgen::prelude::*;

fn to_js(r: Result<String, String>) -> Result<String, JsError> {
    r.map_err(|e| JsError::new(&e))
}

/// `YES`, `NO` or `UNPARSEABLE`.
#[wasm_bindgen]
pub fn classify_answer(raw: &str) -> String {
    parse_answer(raw, &ParseRuleSet::default()).as_str().to_string()
}

#[derive(Serialize)]
struct Rendered {
    id: String,
    text: String,
}

pub fn render_battery_json(word: &str) -> Result<String, String> {
    let word = normalize_word(word, IngestOptions::default()).map_err(|e| e.to_string())?;
    let prompts = builtin_battery()
        .templates
        .iter()
        .map(|t| {
            render(t, &word).map(|text| Rendered {
                id: t.id.clone(),
                text,
            })
        })
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    serde_json::to_string(&prompts).map_err(|e| e.to_string())
}

/// The built-in prompts filled in with `word`, as a JSON array of
/// `{id, text}`.
#[wasm_bindgen]
pub fn render_battery(word: &str) -> Result<String, JsError> {
    to_js(render_battery_json(word))
}

pub fn text_stats_json(text: &str, top: usize) -> Result<String, String> {
    let tokens = tokenize_text(text.as_bytes()).map_err(|e| e.to_string())?;
    let (_, stats) = unique_words(&tokens);
    serde_json::to_string(&stats.document(top)).map_err(|e| e.to_string())
}

/// Token and distinct-word counts plus the `top` most frequent words.
#[wasm_bindgen]
pub fn text_stats(text: &str, top: usize) -> Result<String, JsError> {
    to_js(text_stats_json(text, top))
}

pub fn simulate_json(
    words: &str,
    thresholds: &str,
    unparseable_rate: f64,
    seed: u64,
    per_prompt: bool,
) -> Result<String, String> {
    let thresholds = thresholds
        .split(',')
        .map(|t| t.trim().parse::<u8>().ok().filter(|t| *t <= 100))
        .collect::<Option<Vec<u8>>>()
        .ok_or("thresholds must be comma-separated percentages")?;
    let battery = builtin_battery();
    if thresholds.len() != battery.len() {
        return Err(format!("expected {} thresholds", battery.len()));
    }
    if !(0.0..=1.0).contains(&unparseable_rate) {
        return Err("unparseable rate must be within [0, 1]".into());
    }
    let (list, report) = ingest(words.as_bytes(), IngestOptions::default()).map_err(|e| e.to_string())?;
    let knowledge = MockKnowledge {
        thresholds,
        seed,
        unparseable_rate,
        per_prompt,
    };
    let records = simulate_records("demo", &list, &battery, &knowledge, &ParseRuleSet::default())
        .map_err(|e| e.to_string())?;
    let hist = histogram(&records, &battery);
    let bins: Vec<_> = CombinationCode::all(hist.k)
        .map(|c| {
            let n = hist.count(c.as_str());
            json!({"code": c.as_str(), "count": n, "percent": hist.percent(n)})
        })
        .collect();
    let contradicting: Vec<String> = contradictions(&records, &battery)
        .into_iter()
        .map(|w| w.into_string())
        .collect();
    let doc = json!({
        "words": list.len(),
        "ingest": report,
        "bins": bins,
        "complete": hist.total_complete,
        "excluded": hist.total_excluded,
        "positive_rates": positive_rates(&hist).ok(),
        "contradictions": contradicting,
    });
    Ok(doc.to_string())
}

/// Runs the mock provider over a newline-separated word list and returns
/// the combination histogram, per-prompt YES rates and contradictions.
#[wasm_bindgen]
pub fn simulate(
    words: &str,
    thresholds: &str,
    unparseable_rate: f64,
    seed: u64,
    per_prompt: bool,
) -> Result<String, JsError> {
    to_js(simulate_json(
        words,
        thresholds,
        unparseable_rate,
        seed,
        per_prompt,
    ))
}
