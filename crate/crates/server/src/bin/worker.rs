use anyhow::bail;
use clap::Parser;
use geoloop_core::jobs::JobKind;
use geoloop_server::remote_worker::{self, Chaos, RemoteOptions};
use tracing_subscriber::EnvFilter;

/// Reference worker: connects to the service and executes jobs.
#[derive(Parser)]
#[command(version)]
struct Cli {
    /// Service address, e.g. ws://127.0.0.1:8080.
    #[arg(long)]
    server: String,
    /// Comma-separated job kinds: tile_pyramid, infer, adapt, evaluate.
    #[arg(long, value_delimiter = ',', default_value = "tile_pyramid,infer,adapt,evaluate")]
    capabilities: Vec<String>,
    /// Bearer token; falls back to GEOLOOP_TOKEN.
    #[arg(long, env = "GEOLOOP_TOKEN")]
    token: String,
    /// Worker id; defaults to worker-<pid>.
    #[arg(long)]
    id: Option<String>,
    #[arg(long, hide = true, default_value_t = 0.0)]
    crash_probability: f64,
    #[arg(long, hide = true, default_value_t = 0)]
    seed: u64,
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .init();
    let cli = Cli::parse();
    let mut capabilities = Vec::new();
    for c in &cli.capabilities {
        match JobKind::ALL.iter().find(|k| k.as_str() == c.trim()) {
            Some(k) => capabilities.push(*k),
            None => bail!("unknown capability {c:?}"),
        }
    }
    if capabilities.is_empty() {
        bail!("at least one capability is required");
    }
    let opts = RemoteOptions {
        server: cli.server,
        token: cli.token,
        worker_id: cli.id.unwrap_or_else(|| format!("worker-{}", std::process::id())),
        capabilities,
        chaos: (cli.crash_probability > 0.0).then_some(Chaos {
            crash_probability: cli.crash_probability,
            seed: cli.seed,
        }),
    };
    tokio::select! {
        r = remote_worker::run(opts) => r,
        _ = tokio::signal::ctrl_c() => Ok(()),
    }
}
