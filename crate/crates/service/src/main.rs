use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::{Parser, ValueEnum};
use lams_core::gateway::{BackendConfig, Gateway};
use lams_service::{recover_logs, router, Registry, ServiceConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Backend {
    /// no model; only grouped and heuristic sessions
    None,
    Mock,
    Real,
}

#[derive(Parser)]
#[command(name = "lams-server", about = "Serve teleoperation sessions over HTTP")]
struct Args {
    #[arg(long, default_value = "127.0.0.1:8080")]
    bind: SocketAddr,
    #[arg(long, default_value = "lams-data")]
    data_dir: PathBuf,
    #[arg(long, value_enum, default_value = "none")]
    backend: Backend,
    #[arg(long)]
    mock_script: Option<PathBuf>,
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    model: Option<String>,
    /// environment variable holding the API token
    #[arg(long)]
    auth_env: Option<String>,
    #[arg(long, default_value_t = 30.0)]
    timeout_secs: f64,
}

fn gateway(args: &Args) -> Result<Option<Arc<dyn Gateway>>> {
    let cfg = match args.backend {
        Backend::None => return Ok(None),
        Backend::Mock => BackendConfig::mock(args.mock_script.clone().context("--backend mock needs --mock-script")?),
        Backend::Real => {
            let mut c = BackendConfig::real(
                args.endpoint.clone().context("--backend real needs --endpoint")?,
                args.model.clone().context("--backend real needs --model")?,
                args.auth_env.clone(),
            );
            c.timeout_secs = args.timeout_secs;
            c
        }
    };
    Ok(Some(cfg.build()?))
}

#[tokio::main]
async fn main() -> Result<()> {
    tracing_subscriber::fmt().with_target(false).init();
    let args = Args::parse();
    let config = ServiceConfig::new(&args.data_dir, gateway(&args)?);
    for p in recover_logs(&config.logs_dir())? {
        tracing::warn!(log = %p.display(), "marked an unfinished trial as aborted");
    }
    let registry = Registry::new(config).context("creating data directories")?;
    let listener = tokio::net::TcpListener::bind(args.bind).await?;
    tracing::info!(addr = %args.bind, "listening");
    axum::serve(listener, router(registry)).await?;
    Ok(())
}
