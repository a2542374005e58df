use std::hash::Hasher;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Args, ValueEnum};
use lexprobe_core::aggregate::{export_histogram, export_records, histogram, positive_rates, ExportFormat};
use lexprobe_core::lexicon::{load_word_list, IngestOptions};
use lexprobe_core::prompt::{builtin_battery, lint};
use lexprobe_core::{Battery, WordList};
use lexprobe_engine::experiment::builtin_templates;
use lexprobe_engine::provider::API_KEY_ENV;
use lexprobe_engine::{
    run_experiment, Clock, ControlHandle, DispatchError, DispatchPolicy, ExperimentRun, ExperimentSpec,
    ExperimentState, FixedClock, HttpChatProvider, MockProvider, NewExperiment, Provider, ProviderKind,
    RunOutcome, RunSummary, Store, SystemClock, BUILTIN_BATTERY_ID,
};
use serde_json::{json, Map, Value};

use crate::MockArgs;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProviderArg {
    Mock,
    Http,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Word list, one word per line.
    #[arg(long)]
    words: PathBuf,
    /// Prompt battery JSON file, or `builtin`.
    #[arg(long, default_value = "builtin")]
    battery: String,
    #[arg(long, value_enum, default_value_t = ProviderArg::Mock)]
    provider: ProviderArg,
    /// Model name sent to the provider [default: gpt-3.5-turbo].
    #[arg(long)]
    model: Option<String>,
    /// Sampling temperature in [0, 1] [default: 0].
    #[arg(long)]
    temperature: Option<f64>,
    /// Upper bound on answer length [default: 10].
    #[arg(long)]
    max_tokens: Option<u32>,
    /// Requests per second.
    #[arg(long, default_value_t = 20.0)]
    rate: f64,
    /// Maximum concurrent provider calls.
    #[arg(long, default_value_t = 8)]
    in_flight: usize,
    #[arg(long, default_value_t = 4)]
    max_attempts: u32,
    /// Output prefix: writes PREFIX.records.csv, PREFIX.histogram.json and
    /// PREFIX.summary.json.
    #[arg(long)]
    out: PathBuf,
    /// SQLite store [default: PREFIX.sqlite].
    #[arg(long)]
    store: Option<PathBuf>,
    /// Experiment id [default: derived from words, battery and model
    /// settings, so rerunning the same command resumes].
    #[arg(long)]
    experiment: Option<String>,
    /// Dispatch at most this many pending pairs in this invocation.
    #[arg(long)]
    limit: Option<usize>,
    /// Filled-in experiment form (JSON) supplying model, temperature and
    /// max_tokens; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Keep the case of the word list instead of lowercasing it.
    #[arg(long)]
    keep_case: bool,
    /// Base URL of a chat-completions compatible API.
    #[arg(long)]
    api_base: Option<String>,
    #[command(flatten)]
    mock: MockArgs,
}

fn read(path: &Path) -> anyhow::Result<Vec<u8>> {
    std::fs::read(path).with_context(|| format!("cannot read {}", path.display()))
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Resolves model parameters from flags, then the config file, then
/// defaults, validated through the experiment form.
fn form_values(args: &RunArgs) -> anyhow::Result<(Map<String, Value>, &'static str)> {
    const TEMPLATE: &str = "Lexical probe";
    let mut values = Map::new();
    if let Some(path) = &args.config {
        let doc: Value = serde_json::from_slice(&read(path)?)
            .with_context(|| format!("{} is not JSON", path.display()))?;
        let obj = doc.as_object().context("config must be a JSON object")?;
        let inner = match obj.get("values") {
            Some(Value::Object(v)) => v,
            Some(_) => bail!("config `values` must be an object"),
            None => obj,
        };
        if let Some(t) = obj.get("template").and_then(Value::as_str) {
            if t != TEMPLATE {
                bail!("config is for template {t:?}; the CLI accepts {TEMPLATE:?} documents");
            }
        }
        values.extend(
            inner
                .iter()
                .filter(|(k, _)| !matches!(k.as_str(), "template" | "name"))
                .map(|(k, v)| (k.clone(), v.clone())),
        );
    }
    if let Some(m) = &args.model {
        values.insert("model".into(), json!(m));
    }
    if let Some(t) = args.temperature {
        values.insert("temperature".into(), json!(t));
    }
    if let Some(n) = args.max_tokens {
        values.insert("max_tokens".into(), json!(n));
    }
    Ok((values, TEMPLATE))
}

fn new_experiment(args: &RunArgs, list: &WordList, battery_id: &str) -> anyhow::Result<NewExperiment> {
    let (values, template) = form_values(args)?;
    let schema = builtin_templates()
        .into_iter()
        .find(|t| t.name == template)
        .expect("bundled template");
    // the form restricts models to its select options, which is right for
    // the console but too strict for a shell user
    let mut loose = schema.clone();
    if let Some(lexprobe_engine::experiment::FieldDescriptor::Select(model)) =
        loose.configuration.get_mut("model")
    {
        if let Some(Value::String(m)) = values.get("model") {
            if !model.options.iter().any(|o| &o.value == m) {
                model.options.push(lexprobe_engine::experiment::SelectOption {
                    label: m.clone(),
                    value: m.clone(),
                });
            }
        }
    }
    let mut new = NewExperiment::from_form(&loose, "cli run", &values)?;
    new.provider_kind = match args.provider {
        ProviderArg::Mock => ProviderKind::Mock,
        ProviderArg::Http => ProviderKind::HttpChat,
    };
    if new.provider_kind == ProviderKind::Mock {
        new.config
            .insert("mock".into(), serde_json::to_value(args.mock.knowledge()?)?);
    }
    new.wordlist_id = Some(list.id.clone());
    new.battery_id = battery_id.to_string();
    new.dispatch = policy(args);
    Ok(new)
}

fn policy(args: &RunArgs) -> DispatchPolicy {
    DispatchPolicy {
        max_requests_per_second: args.rate,
        max_in_flight: args.in_flight,
        max_attempts: args.max_attempts,
        ..DispatchPolicy::default()
    }
}

/// Stable id over everything that changes the answers, so the same
/// command line maps to the same experiment.
fn derived_id(new: &NewExperiment) -> String {
    let key = json!({
        "words": new.wordlist_id,
        "battery": new.battery_id,
        "provider": new.provider_kind.as_str(),
        "config": new.config,
    });
    let mut h = fnv::FnvHasher::default();
    h.write(key.to_string().as_bytes());
    format!("run-{:016x}", h.finish())
}

fn load_battery(store: &Store, arg: &str) -> anyhow::Result<(String, Battery)> {
    if arg == "builtin" {
        return Ok((BUILTIN_BATTERY_ID.to_string(), builtin_battery()));
    }
    let path = Path::new(arg);
    let text = String::from_utf8(read(path)?).context("battery file is not UTF-8")?;
    let battery = Battery::from_json(&text).with_context(|| format!("invalid battery {}", path.display()))?;
    for warning in lint(&battery) {
        eprintln!("warning: {warning}");
    }
    let mut h = fnv::FnvHasher::default();
    h.write(battery.to_file_json().as_bytes());
    let id = format!("file-{:016x}", h.finish());
    store.put_battery(&id, &battery)?;
    Ok((id, battery))
}

/// Finds or creates the experiment and checks that an existing one was
/// created from the same inputs.
fn resolve(store: &Store, new: NewExperiment) -> anyhow::Result<ExperimentSpec> {
    let id = new.id.clone().expect("id assigned");
    match store.experiment(&id) {
        Ok(existing) => {
            let same = existing.wordlist_id == new.wordlist_id
                && existing.battery_id == new.battery_id
                && existing.provider_kind == new.provider_kind
                && existing.config == new.config;
            if !same {
                bail!("experiment {id} already exists with different words, battery or model settings");
            }
            Ok(existing)
        }
        Err(lexprobe_engine::StoreError::UnknownExperiment(_)) => Ok(store.create_experiment(new)?),
        Err(e) => Err(e.into()),
    }
}

fn provider(args: &RunArgs, spec: &ExperimentSpec, battery: &Battery) -> anyhow::Result<Arc<dyn Provider>> {
    Ok(match spec.provider_kind {
        ProviderKind::Mock => Arc::new(MockProvider::new(battery.clone(), args.mock.knowledge()?)),
        ProviderKind::HttpChat => Arc::new(
            HttpChatProvider::from_env(args.api_base.as_deref())
                .with_context(|| format!("the http provider reads its key from {API_KEY_ENV}"))?,
        ),
    })
}

fn write_outputs(
    store: &Store,
    spec: &ExperimentSpec,
    battery: &Battery,
    prefix: &Path,
    store_path: &Path,
    summary: &RunSummary,
) -> anyhow::Result<()> {
    let records = store.records(&spec.id)?;
    let hist = histogram(&records, battery);
    let progress = store.progress(&spec.id)?;
    let write = |suffix: &str, bytes: &[u8]| -> anyhow::Result<()> {
        let path = with_suffix(prefix, suffix);
        std::fs::write(&path, bytes).with_context(|| format!("cannot write {}", path.display()))
    };
    write(".records.csv", &export_records(&records, ExportFormat::Csv))?;
    write(".histogram.json", &export_histogram(&hist, ExportFormat::Json))?;
    let rates: Option<Value> = positive_rates(&hist).ok().map(|rates| {
        battery
            .ids()
            .zip(rates)
            .map(|(id, r)| (id.to_string(), json!(r)))
            .collect::<Map<_, _>>()
            .into()
    });
    let doc = json!({
        "experiment_id": spec.id,
        "store": store_path.display().to_string(),
        "state": progress.state,
        "model": spec.model,
        "temperature": spec.temperature,
        "total_pairs": progress.total,
        "answered": progress.answered,
        "yes": progress.yes,
        "no": progress.no,
        "unparseable": progress.unparseable,
        "complete_words": hist.total_complete,
        "excluded_words": hist.total_excluded,
        "positive_rates": rates,
        "this_run": summary,
    });
    let mut text = serde_json::to_string_pretty(&doc)?;
    text.push('\n');
    write(".summary.json", text.as_bytes())
}

pub fn main(args: RunArgs) -> anyhow::Result<ExitCode> {
    let options = IngestOptions {
        fold_case: !args.keep_case,
    };
    let mut list = load_word_list(&read(&args.words)?, options)
        .with_context(|| format!("cannot load words from {}", args.words.display()))?;
    list.name = args.words.display().to_string();

    let store_path = args
        .store
        .clone()
        .unwrap_or_else(|| crate::default_store(&args.out));
    let store =
        Store::open(&store_path).with_context(|| format!("cannot open store {}", store_path.display()))?;
    store.put_word_list(&list)?;
    let (battery_id, battery) = load_battery(&store, &args.battery)?;

    let mut new = new_experiment(&args, &list, &battery_id)?;
    new.id = Some(args.experiment.clone().unwrap_or_else(|| derived_id(&new)));
    let spec = resolve(&store, new)?;
    let provider = provider(&args, &spec, &battery)?;

    match spec.state {
        ExperimentState::Complete => {}
        ExperimentState::Running | ExperimentState::Paused => {
            // left behind by a process that died mid-run
            store.transition(&spec.id, ExperimentState::Stopped)?;
            store.transition(&spec.id, ExperimentState::Running)?;
        }
        _ => {
            store.transition(&spec.id, ExperimentState::Running)?;
        }
    }

    let mut run = ExperimentRun::from_spec(&spec, battery.clone());
    run.policy = policy(&args);
    run.limit = args.limit;
    let clock: Arc<dyn Clock> = match spec.provider_kind {
        // fixed timestamps keep mock output byte-identical across runs
        ProviderKind::Mock => Arc::new(FixedClock(chrono::DateTime::UNIX_EPOCH)),
        ProviderKind::HttpChat => Arc::new(SystemClock),
    };

    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    let control = ControlHandle::new();
    let result = rt.block_on(async {
        let on_interrupt = control.clone();
        tokio::spawn(async move {
            if tokio::signal::ctrl_c().await.is_ok() {
                eprintln!("interrupted: letting calls in flight finish");
                on_interrupt.stop();
            }
        });
        if spec.state == ExperimentState::Complete {
            return Ok(RunSummary {
                experiment_id: spec.id.clone(),
                outcome: Some(RunOutcome::Complete),
                ..RunSummary::default()
            });
        }
        run_experiment(&run, provider, Arc::new(store.clone()), control.clone(), clock).await
    });

    let (summary, fatal) = match result {
        Ok(summary) => (summary, None),
        Err(DispatchError::Fatal { error, summary }) => (*summary, Some(error.to_string())),
        Err(e) => {
            store.transition(&spec.id, ExperimentState::Stopped).ok();
            return Err(e.into());
        }
    };
    let current = store.experiment(&spec.id)?.state;
    if current == ExperimentState::Running {
        let next = if summary.outcome == Some(RunOutcome::Complete) {
            ExperimentState::Complete
        } else {
            ExperimentState::Stopped
        };
        store.transition(&spec.id, next)?;
    }
    write_outputs(&store, &spec, &battery, &args.out, &store_path, &summary)?;

    let progress = store.progress(&spec.id)?;
    eprintln!(
        "{}: {}/{} answered ({} yes, {} no, {} unparseable), {} provider calls this run",
        spec.id,
        progress.answered,
        progress.total,
        progress.yes,
        progress.no,
        progress.unparseable,
        summary.provider_calls
    );
    if let Some(error) = fatal {
        eprintln!("error: run aborted: {error}");
        return Ok(ExitCode::from(1));
    }
    Ok(match summary.outcome {
        Some(RunOutcome::Complete) => ExitCode::SUCCESS,
        _ => {
            eprintln!("run incomplete: rerun the same command to resume");
            ExitCode::from(2)
        }
    })
}
