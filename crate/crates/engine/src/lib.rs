//! Experiment execution for lexical probing: providers, rate-limited
//! dispatch, SQLite persistence and the HTTP service.

pub mod dispatch;
pub mod experiment;
pub mod provider;
pub mod ratelimit;
pub mod retry;
pub mod service;
pub mod store;

pub use dispatch::{
    run_experiment, Clock, ControlHandle, DispatchError, DispatchPolicy, ExperimentRun, FixedClock,
    MemorySink, RecordSink, RunOutcome, RunSummary, SystemClock,
};
pub use experiment::{ExperimentConfigSchema, ExperimentSpec, ExperimentState, NewExperiment, ProviderKind};
pub use provider::{
    HttpChatProvider, MockProvider, Provider, ProviderError, ProviderRequest, ProviderResponse,
};
pub use ratelimit::RateLimiter;
pub use service::{router, serve, AppState, DefaultProviders, ProgressEvent, ProviderFactory};
pub use store::{Snapshot, Store, StoreError, BUILTIN_BATTERY_ID};
