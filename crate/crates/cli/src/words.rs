use std::fmt::Write as _;
use std::path::PathBuf;

use anyhow::Context;
use clap::Subcommand;
use lexprobe_core::lexicon::{ingest, load_word_list, tokenize_text_with, unique_words, IngestOptions};

#[derive(Debug, Subcommand)]
pub enum WordsCommand {
    /// Count tokens and distinct words in running text.
    Stats {
        #[arg(long)]
        text: PathBuf,
        /// Number of most frequent words to list.
        #[arg(long, default_value_t = 10)]
        top: usize,
        /// Also write the counts as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
        /// Write the distinct words, in first-seen order, one per line.
        #[arg(long)]
        list: Option<PathBuf>,
        #[arg(long)]
        keep_case: bool,
    },
    /// Clean a word list: trim, lowercase, NFC-normalize and deduplicate.
    Normalize {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        keep_case: bool,
    },
}

fn read(path: &std::path::Path) -> anyhow::Result<Vec<u8>> {
    std::fs::read(path).with_context(|| format!("cannot read {}", path.display()))
}

pub fn main(command: WordsCommand) -> anyhow::Result<()> {
    match command {
        WordsCommand::Stats {
            text,
            top,
            json,
            list,
            keep_case,
        } => {
            let tokens = tokenize_text_with(
                &read(&text)?,
                IngestOptions {
                    fold_case: !keep_case,
                },
            )?;
            let (words, stats) = unique_words(&tokens);
            let doc = stats.document(top);
            let mut out = format!(
                "total_tokens  {}\nunique_words  {}\n",
                doc.total_tokens, doc.unique_words
            );
            if !doc.top_n_frequencies.is_empty() {
                let width = doc
                    .top_n_frequencies
                    .iter()
                    .map(|w| w.word.as_str().chars().count())
                    .max()
                    .unwrap_or(0)
                    .max(4)
                    + 2;
                let _ = writeln!(out, "\n{:<width$}{:>8}", "word", "count");
                for wc in &doc.top_n_frequencies {
                    let _ = writeln!(out, "{:<width$}{:>8}", wc.word.as_str(), wc.count);
                }
            }
            print!("{out}");
            if let Some(path) = json {
                let mut text = serde_json::to_string_pretty(&doc)?;
                text.push('\n');
                std::fs::write(&path, text).with_context(|| format!("cannot write {}", path.display()))?;
            }
            if let Some(path) = list {
                std::fs::write(&path, words.to_text())
                    .with_context(|| format!("cannot write {}", path.display()))?;
            }
        }
        WordsCommand::Normalize {
            input,
            out,
            keep_case,
        } => {
            let options = IngestOptions {
                fold_case: !keep_case,
            };
            let bytes = read(&input)?;
            let (_, report) = ingest(&bytes, options)?;
            let list = load_word_list(&bytes, options)
                .with_context(|| format!("no usable words in {}", input.display()))?;
            std::fs::write(&out, list.to_text())
                .with_context(|| format!("cannot write {}", out.display()))?;
            eprintln!(
                "{} kept, {} duplicates dropped, {} rejected, {} blank or comment lines, {} changed by normalization",
                report.kept, report.dropped, report.rejected, report.skipped, report.folded
            );
        }
    }
    Ok(())
}
