use std::fmt::Write as _;
use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::Args;
use lexprobe_core::aggregate::{
    contradictions, encode, export_histogram, histogram, outcomes, positive_rates, ExportFormat,
};
use lexprobe_core::{AnswerRecord, Battery, CombinationCode, CombinationHistogram};
use lexprobe_engine::Store;
use serde_json::json;

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    store: PathBuf,
    #[arg(long)]
    experiment: String,
    /// Combination-code histogram (the default).
    #[arg(long, group = "kind")]
    histogram: bool,
    /// Words whose answers to the two equivalent prompts disagree.
    #[arg(long, group = "kind")]
    contradictions: bool,
    /// Share of complete words answered YES, per prompt.
    #[arg(long, group = "kind")]
    rates: bool,
    /// Also write the report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
    /// Also write the report as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

/// All 2^k bins, zero counts included, in ascending code order.
pub fn histogram_table(hist: &CombinationHistogram) -> String {
    let mut out = format!("{:<8}{:>8}{:>10}\n", "code", "count", "percent");
    for code in CombinationCode::all(hist.k) {
        let n = hist.count(code.as_str());
        let _ = writeln!(out, "{:<8}{:>8}{:>10.2}", code.as_str(), n, hist.percent(n));
    }
    let _ = writeln!(
        out,
        "complete {}, excluded {} (unparseable {}, incomplete {})",
        hist.total_complete,
        hist.total_excluded,
        hist.unparseable_words.len(),
        hist.incomplete_words.len()
    );
    out
}

pub fn rates_table(battery: &Battery, rates: &[f64]) -> String {
    let mut out = format!("{:<8}{:>10}\n", "prompt", "yes_rate");
    for (id, r) in battery.ids().zip(rates) {
        let _ = writeln!(out, "{:<8}{:>10.2}", id, r * 100.0);
    }
    out
}

fn contradiction_rows(records: &[AnswerRecord], battery: &Battery) -> Vec<(String, String)> {
    let words = contradictions(records, battery);
    let codes: std::collections::HashMap<_, _> = outcomes(records, battery)
        .into_iter()
        .filter_map(|o| encode(&o).ok().map(|c| (o.word, c)))
        .collect();
    let mut rows: Vec<(String, String)> = words
        .into_iter()
        .map(|w| {
            let code = codes[&w].as_str().to_string();
            (w.into_string(), code)
        })
        .collect();
    rows.sort();
    rows
}

pub fn contradictions_table(battery: &Battery, rows: &[(String, String)]) -> String {
    let width = rows
        .iter()
        .map(|(w, _)| w.chars().count())
        .max()
        .unwrap_or(0)
        .max(4)
        + 2;
    let mut out = format!("{:<width$}{}\n", "word", "code");
    for (w, c) in rows {
        let _ = writeln!(out, "{w:<width$}{c}");
    }
    let pair = battery
        .contradiction_pair
        .map(|(a, b)| {
            format!(
                " between {} and {}",
                battery.templates[a].id, battery.templates[b].id
            )
        })
        .unwrap_or_default();
    let _ = writeln!(out, "{} contradiction(s){pair}", rows.len());
    out
}

fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> anyhow::Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    Ok(w.into_inner()?)
}

pub fn main(args: ReportArgs) -> anyhow::Result<()> {
    if !args.store.exists() {
        bail!("store {} does not exist", args.store.display());
    }
    let store =
        Store::open(&args.store).with_context(|| format!("cannot open store {}", args.store.display()))?;
    let spec = store.experiment(&args.experiment)?;
    let battery = store.battery(&spec.battery_id)?;
    let records = store.records(&spec.id)?;
    let hist = histogram(&records, &battery);

    let (table, json_doc, csv_doc) = if args.rates {
        let rates = positive_rates(&hist).context("no complete words to compute rates from")?;
        let doc = json!(battery
            .ids()
            .zip(&rates)
            .map(|(id, r)| json!({"prompt": id, "positive_rate": r}))
            .collect::<Vec<_>>());
        let csv = csv_bytes(
            &["prompt", "positive_rate"],
            battery
                .ids()
                .zip(&rates)
                .map(|(id, r)| vec![id.to_string(), format!("{r:.6}")]),
        )?;
        (
            rates_table(&battery, &rates),
            serde_json::to_vec_pretty(&doc)?,
            csv,
        )
    } else if args.contradictions {
        let rows = contradiction_rows(&records, &battery);
        let doc = json!(rows
            .iter()
            .map(|(w, c)| json!({"word": w, "code": c}))
            .collect::<Vec<_>>());
        let csv = csv_bytes(
            &["word", "code"],
            rows.iter().map(|(w, c)| vec![w.clone(), c.clone()]),
        )?;
        (
            contradictions_table(&battery, &rows),
            serde_json::to_vec_pretty(&doc)?,
            csv,
        )
    } else {
        (
            histogram_table(&hist),
            export_histogram(&hist, ExportFormat::Json),
            export_histogram(&hist, ExportFormat::Csv),
        )
    };

    print!("{table}");
    if let Some(path) = &args.json {
        std::fs::write(path, json_doc).with_context(|| format!("cannot write {}", path.display()))?;
    }
    if let Some(path) = &args.csv {
        std::fs::write(path, csv_doc).with_context(|| format!("cannot write {}", path.display()))?;
    }
    Ok(())
}
