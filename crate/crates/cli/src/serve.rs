use std::path::PathBuf;
use std::sync::Arc;

use anyhow::Context;
use clap::Args;
use lexprobe_engine::{serve, AppState, DefaultProviders, Store};

use crate::MockArgs;

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "lexprobe.sqlite")]
    store: PathBuf,
    /// There is no authentication, so keep this on loopback unless the
    /// network is trusted.
    #[arg(long, default_value = "127.0.0.1:8080")]
    bind: String,
    /// Base URL of a chat-completions compatible API for http experiments.
    #[arg(long)]
    api_base: Option<String>,
    #[command(flatten)]
    mock: MockArgs,
}

pub fn main(args: ServeArgs) -> anyhow::Result<()> {
    let store =
        Store::open(&args.store).with_context(|| format!("cannot open store {}", args.store.display()))?;
    let providers = DefaultProviders {
        knowledge: args.mock.knowledge()?,
        api_base: args.api_base,
        ..DefaultProviders::default()
    };
    let state = AppState::new(store, Arc::new(providers))?;
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(&args.bind)
            .await
            .with_context(|| format!("cannot bind {}", args.bind))?;
        eprintln!("listening on http://{}", listener.local_addr()?);
        serve(listener, state, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
        Ok(())
    })
}
