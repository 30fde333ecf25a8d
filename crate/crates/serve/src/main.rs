use std::net::SocketAddr;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Parser;
use tower_http::services::ServeDir;

use cocoba::corpus::load_dataset;
use cocoba::embeddings::load_snapshot;
use cocoba::engine::EngineConfig;
use cocoba::strategy::Strategy;
use cocoba_serve::{router, AppState, ServiceConfig};

#[derive(Parser)]
#[command(name = "al-serve", version, about = "HTTP annotation service for active learning sessions")]
struct Cli {
    #[arg(long)]
    dataset: PathBuf,
    /// Dataset metadata; defaults to the dataset path with `.meta.json`.
    #[arg(long)]
    meta: Option<PathBuf>,
    #[arg(long)]
    snapshot: PathBuf,
    /// Default strategy for new sessions.
    #[arg(long, default_value = "cocoba")]
    strategy: Strategy,
    #[arg(long, default_value_t = 50)]
    cold_start: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "state")]
    state_dir: PathBuf,
    /// Static annotation UI assets, served at `/`.
    #[arg(long)]
    ui_dir: Option<PathBuf>,
    #[arg(long, env = "AL_BIND", default_value = "127.0.0.1")]
    bind: String,
    #[arg(long, env = "AL_PORT", default_value_t = 8080)]
    port: u16,
}

#[tokio::main]
async fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .init();
    let cli = Cli::parse();
    let meta = cli.meta.clone().unwrap_or_else(|| cli.dataset.with_extension("meta.json"));
    let dataset = load_dataset(&cli.dataset, &meta).with_context(|| format!("loading {}", cli.dataset.display()))?;
    let snapshot = load_snapshot(&cli.snapshot).with_context(|| format!("loading {}", cli.snapshot.display()))?;
    snapshot.check_coverage(dataset.postings().map(|p| p.id()))?;
    let engine = EngineConfig { strategy: cli.strategy, rng_seed: cli.seed, ..EngineConfig::default() };
    engine.validate()?;
    let config = ServiceConfig { engine, cold_start: cli.cold_start, state_dir: cli.state_dir };
    let state = tokio::task::spawn_blocking(move || AppState::new(dataset, snapshot, config)).await??;
    tracing::info!("{} sessions restored", state.session_ids().len());

    let mut app = router(state);
    if let Some(dir) = cli.ui_dir {
        app = app.fallback_service(ServeDir::new(dir));
    }
    let addr: SocketAddr = format!("{}:{}", cli.bind, cli.port).parse().context("bad bind address")?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!("listening on {addr}");
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
