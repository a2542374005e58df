//! Fan-out of (word, prompt) probes to a provider.
//!
//! Each pending pair is one task. Tasks run under three bounds: the rate
//! limiter, at most `max_in_flight` outstanding calls, and the retry
//! budget. Results flow back to a single consumer that writes them to the
//! [`RecordSink`], so the sink never sees concurrent writes from one run.

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use chrono::{DateTime, Utc};
use futures::stream::{self, StreamExt};
use lexprobe_core::prompt::{parse_answer, render, PromptError};
use lexprobe_core::record::millis_precision;
use lexprobe_core::{AnswerClass, AnswerRecord, Battery, ParseRuleSet, Word};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::watch;

use crate::experiment::ExperimentSpec;
use crate::provider::{Provider, ProviderError, ProviderRequest};
use crate::ratelimit::RateLimiter;
use crate::retry::{retrying_complete, Completion, RetryError};

pub const MAX_ATTEMPTS_LIMIT: u32 = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DispatchPolicy {
    pub max_requests_per_second: f64,
    pub max_in_flight: usize,
    /// Provider calls allowed per pair, counting retries and the re-ask of
    /// an unparseable answer.
    pub max_attempts: u32,
    pub backoff_base_ms: u64,
    pub backoff_factor: f64,
}

impl Default for DispatchPolicy {
    fn default() -> Self {
        Self {
            max_requests_per_second: 20.0,
            max_in_flight: 8,
            max_attempts: 4,
            backoff_base_ms: 500,
            backoff_factor: 2.0,
        }
    }
}

impl DispatchPolicy {
    pub fn backoff_base(&self) -> Duration {
        Duration::from_millis(self.backoff_base_ms)
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.max_requests_per_second.is_finite() && self.max_requests_per_second > 0.0) {
            return Err("max_requests_per_second must be positive".into());
        }
        if self.max_in_flight == 0 {
            return Err("max_in_flight must be at least 1".into());
        }
        if !(1..=MAX_ATTEMPTS_LIMIT).contains(&self.max_attempts) {
            return Err(format!("max_attempts must be in 1..={MAX_ATTEMPTS_LIMIT}"));
        }
        if self.backoff_base_ms == 0 {
            return Err("backoff_base_ms must be positive".into());
        }
        if !(self.backoff_factor.is_finite() && self.backoff_factor >= 1.0) {
            return Err("backoff_factor must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("record sink: {0}")]
pub struct SinkError(pub String);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SaveOutcome {
    Inserted,
    /// The key already held a record; the stored one was kept.
    Duplicate,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PendingSet {
    /// Size of the full word × prompt product.
    pub total: usize,
    /// Pairs without a stored record, words in list order and prompts in
    /// battery order.
    pub pairs: Vec<(Word, String)>,
}

pub trait RecordSink: Send + Sync {
    fn pending(&self, experiment_id: &str) -> Result<PendingSet, SinkError>;
    fn save(&self, record: &AnswerRecord) -> Result<SaveOutcome, SinkError>;
}

pub trait Clock: Send + Sync {
    fn now(&self) -> DateTime<Utc>;
}

pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }
}

/// Stamps every record with the same instant; keeps offline runs
/// byte-reproducible.
pub struct FixedClock(pub DateTime<Utc>);

impl Clock for FixedClock {
    fn now(&self) -> DateTime<Utc> {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Signal {
    Run,
    Pause,
    Stop,
}

/// Pause/resume/stop switch for a running experiment. Cloning shares the
/// switch. Stop is final for the run it is attached to.
#[derive(Debug, Clone)]
pub struct ControlHandle {
    tx: Arc<watch::Sender<Signal>>,
}

impl Default for ControlHandle {
    fn default() -> Self {
        Self::new()
    }
}

impl ControlHandle {
    pub fn new() -> Self {
        Self {
            tx: Arc::new(watch::Sender::new(Signal::Run)),
        }
    }

    pub fn pause(&self) {
        self.tx.send_if_modified(|s| {
            let changed = *s == Signal::Run;
            if changed {
                *s = Signal::Pause;
            }
            changed
        });
    }

    pub fn resume(&self) {
        self.tx.send_if_modified(|s| {
            let changed = *s == Signal::Pause;
            if changed {
                *s = Signal::Run;
            }
            changed
        });
    }

    pub fn stop(&self) {
        self.tx.send_replace(Signal::Stop);
    }

    pub fn is_stopped(&self) -> bool {
        *self.tx.borrow() == Signal::Stop
    }

    pub fn is_paused(&self) -> bool {
        *self.tx.borrow() == Signal::Pause
    }

    /// Waits while paused. Returns false once stopped.
    async fn runnable(&self) -> bool {
        let mut rx = self.tx.subscribe();
        loop {
            let signal = *rx.borrow_and_update();
            match signal {
                Signal::Run => return true,
                Signal::Stop => return false,
                Signal::Pause => {
                    if rx.changed().await.is_err() {
                        return false;
                    }
                }
            }
        }
    }
}

/// Static parameters of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentRun {
    pub experiment_id: String,
    pub battery: Battery,
    pub model: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub system_message: Option<String>,
    pub policy: DispatchPolicy,
    pub rules: ParseRuleSet,
    /// Dispatch at most this many pending pairs.
    pub limit: Option<usize>,
}

impl ExperimentRun {
    pub fn from_spec(spec: &ExperimentSpec, battery: Battery) -> Self {
        Self {
            experiment_id: spec.id.clone(),
            battery,
            model: spec.model.clone(),
            temperature: spec.temperature,
            max_output_tokens: spec.max_output_tokens,
            system_message: None,
            policy: spec.dispatch.clone(),
            rules: ParseRuleSet::default(),
            limit: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunOutcome {
    /// Every pair of the experiment has a record.
    Complete,
    /// Halted through the control handle.
    Stopped,
    /// Ended with pairs still pending (failures or a dispatch limit).
    Partial,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSummary {
    pub experiment_id: String,
    pub total_pairs: usize,
    pub skipped_existing: usize,
    pub answered: usize,
    pub yes: usize,
    pub no: usize,
    pub unparseable: usize,
    pub failed: usize,
    pub duplicates: usize,
    pub provider_calls: u64,
    pub remaining: usize,
    pub outcome: Option<RunOutcome>,
}

#[derive(Debug, Error)]
pub enum DispatchError {
    #[error("invalid dispatch policy: {0}")]
    Policy(String),
    #[error("invalid request parameters: {0}")]
    Request(ProviderError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Sink(#[from] SinkError),
    #[error("run aborted: {error}")]
    Fatal {
        error: ProviderError,
        summary: Box<RunSummary>,
    },
}

enum ProbeOutcome {
    Skipped,
    Answered(AnswerRecord),
    Failed(RetryError),
    Fatal(ProviderError),
}

struct Probe<'a> {
    run: &'a ExperimentRun,
    provider: &'a dyn Provider,
    limiter: &'a RateLimiter,
    clock: &'a dyn Clock,
    calls: &'a AtomicU64,
}

impl Probe<'_> {
    async fn call(&self, request: &ProviderRequest, budget: u32) -> Result<Completion, RetryError> {
        let result = retrying_complete(
            self.provider,
            request,
            &self.run.policy,
            Some(self.limiter),
            budget,
        )
        .await;
        let attempts = match &result {
            Ok(c) => c.attempts,
            Err(e) => e.attempts(),
        };
        self.calls.fetch_add(u64::from(attempts), Ordering::SeqCst);
        result
    }

    async fn run(&self, word: Word, prompt_id: String, text: String) -> ProbeOutcome {
        let max = self.run.policy.max_attempts;
        let request = ProviderRequest {
            model: self.run.model.clone(),
            temperature: self.run.temperature,
            max_output_tokens: self.run.max_output_tokens,
            system_message: self.run.system_message.clone(),
            user_message: text,
        };
        let mut completion = match self.call(&request, max).await {
            Ok(c) => c,
            Err(RetryError::Fatal { error, .. }) => return ProbeOutcome::Fatal(error),
            Err(e) => return ProbeOutcome::Failed(e),
        };
        let mut attempts = completion.attempts;
        let mut parsed = parse_answer(&completion.response.text, &self.run.rules);
        // one re-ask for an unparseable answer, within the attempt budget
        if parsed == AnswerClass::Unparseable && attempts < max {
            match self.call(&request, max - attempts).await {
                Ok(again) => {
                    attempts += again.attempts;
                    parsed = parse_answer(&again.response.text, &self.run.rules);
                    completion = again;
                }
                Err(RetryError::Fatal { error, .. }) => return ProbeOutcome::Fatal(error),
                Err(e) => attempts += e.attempts(),
            }
        }
        ProbeOutcome::Answered(AnswerRecord {
            experiment_id: self.run.experiment_id.clone(),
            word,
            prompt_id,
            raw_text: completion.response.text,
            parsed,
            attempts,
            completed_at: millis_precision(self.clock.now()),
            latency_ms: completion.response.latency.as_millis() as u64,
        })
    }
}

/// Probes every pending pair of `run.experiment_id` once.
///
/// Stopping through `control` lets calls already in flight finish and
/// persist, then returns a summary with [`RunOutcome::Stopped`]. A fatal
/// provider error does the same but returns [`DispatchError::Fatal`].
pub async fn run_experiment(
    run: &ExperimentRun,
    provider: Arc<dyn Provider>,
    sink: Arc<dyn RecordSink>,
    control: ControlHandle,
    clock: Arc<dyn Clock>,
) -> Result<RunSummary, DispatchError> {
    run.policy.validate().map_err(DispatchError::Policy)?;
    ProviderRequest {
        model: run.model.clone(),
        temperature: run.temperature,
        max_output_tokens: run.max_output_tokens,
        system_message: None,
        user_message: "-".into(),
    }
    .validate()
    .map_err(DispatchError::Request)?;

    let pending = sink.pending(&run.experiment_id)?;
    let mut summary = RunSummary {
        experiment_id: run.experiment_id.clone(),
        total_pairs: pending.total,
        skipped_existing: pending.total - pending.pairs.len(),
        ..RunSummary::default()
    };

    let mut tasks = Vec::with_capacity(pending.pairs.len());
    for (word, prompt_id) in pending.pairs {
        let Some(index) = run.battery.index_of(&prompt_id) else {
            continue;
        };
        let text = render(&run.battery.templates[index], &word)?;
        tasks.push((word, prompt_id, text));
    }
    let queued = tasks.len();
    if let Some(limit) = run.limit {
        tasks.truncate(limit);
    }

    let limiter = RateLimiter::new(run.policy.max_requests_per_second);
    let calls = AtomicU64::new(0);
    let aborted = AtomicBool::new(false);
    let probe = Probe {
        run,
        provider: provider.as_ref(),
        limiter: &limiter,
        clock: clock.as_ref(),
        calls: &calls,
    };
    let (probe, control_ref, aborted_ref) = (&probe, &control, &aborted);

    let mut results = stream::iter(tasks)
        .map(|(word, prompt_id, text)| async move {
            if aborted_ref.load(Ordering::SeqCst) || !control_ref.runnable().await {
                return ProbeOutcome::Skipped;
            }
            if aborted_ref.load(Ordering::SeqCst) {
                return ProbeOutcome::Skipped;
            }
            probe.run(word, prompt_id, text).await
        })
        .buffer_unordered(run.policy.max_in_flight);

    let mut fatal = None;
    let mut sink_error = None;
    while let Some(outcome) = results.next().await {
        match outcome {
            ProbeOutcome::Skipped => {}
            ProbeOutcome::Answered(record) => {
                if sink_error.is_some() {
                    continue;
                }
                match sink.save(&record) {
                    Ok(SaveOutcome::Inserted) => {
                        summary.answered += 1;
                        match record.parsed {
                            AnswerClass::Yes => summary.yes += 1,
                            AnswerClass::No => summary.no += 1,
                            AnswerClass::Unparseable => summary.unparseable += 1,
                        }
                    }
                    Ok(SaveOutcome::Duplicate) => summary.duplicates += 1,
                    Err(e) => {
                        aborted.store(true, Ordering::SeqCst);
                        sink_error = Some(e);
                    }
                }
            }
            ProbeOutcome::Failed(e) => {
                tracing::warn!(error = %e, "probe failed");
                summary.failed += 1;
            }
            ProbeOutcome::Fatal(e) => {
                aborted.store(true, Ordering::SeqCst);
                fatal.get_or_insert(e);
            }
        }
    }
    drop(results);

    summary.provider_calls = calls.load(Ordering::SeqCst);
    summary.remaining = queued - summary.answered - summary.duplicates;
    if let Some(e) = sink_error {
        return Err(DispatchError::Sink(e));
    }
    summary.outcome = Some(if summary.remaining == 0 {
        RunOutcome::Complete
    } else if control.is_stopped() {
        RunOutcome::Stopped
    } else {
        RunOutcome::Partial
    });
    if let Some(error) = fatal {
        return Err(DispatchError::Fatal {
            error,
            summary: Box::new(summary),
        });
    }
    Ok(summary)
}

/// In-memory sink over a fixed word list, mainly for tests and previews.
pub struct MemorySink {
    words: Vec<Word>,
    prompt_ids: Vec<String>,
    records: std::sync::Mutex<indexmap::IndexMap<(Word, String), AnswerRecord>>,
}

impl MemorySink {
    pub fn new(words: Vec<Word>, battery: &Battery) -> Self {
        Self {
            words,
            prompt_ids: battery.ids().map(str::to_string).collect(),
            records: Default::default(),
        }
    }

    pub fn records(&self) -> Vec<AnswerRecord> {
        self.records
            .lock()
            .expect("sink lock")
            .values()
            .cloned()
            .collect()
    }
}

impl RecordSink for MemorySink {
    fn pending(&self, _experiment_id: &str) -> Result<PendingSet, SinkError> {
        let records = self.records.lock().expect("sink lock");
        let mut pairs = Vec::new();
        for w in &self.words {
            for p in &self.prompt_ids {
                if !records.contains_key(&(w.clone(), p.clone())) {
                    pairs.push((w.clone(), p.clone()));
                }
            }
        }
        Ok(PendingSet {
            total: self.words.len() * self.prompt_ids.len(),
            pairs,
        })
    }

    fn save(&self, record: &AnswerRecord) -> Result<SaveOutcome, SinkError> {
        let mut records = self.records.lock().expect("sink lock");
        let key = (record.word.clone(), record.prompt_id.clone());
        if records.contains_key(&key) {
            return Ok(SaveOutcome::Duplicate);
        }
        records.insert(key, record.clone());
        Ok(SaveOutcome::Inserted)
    }
}
