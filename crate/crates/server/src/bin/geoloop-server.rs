use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::PathBuf;

use anyhow::Context;
use clap::{Parser, Subcommand};
use geoloop_server::Config;
use geoloop_store::{Store, StoreOptions};
use tracing_subscriber::EnvFilter;

/// Geospatial human-in-the-loop detection service.
#[derive(Parser)]
#[command(version)]
struct Cli {
    /// TOML or JSON configuration file.
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the HTTP/WebSocket service (default).
    Serve,
    /// Archive or restore the data directory. Stop the service first.
    Snapshot {
        #[command(subcommand)]
        action: SnapshotAction,
    },
}

#[derive(Subcommand)]
enum SnapshotAction {
    /// Write a tar archive of the data directory.
    Export { file: PathBuf },
    /// Replace the data directory with an archive's contents.
    Import { file: PathBuf },
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .init();
    let cli = Cli::parse();
    let mut config = Config::load(cli.config.as_deref())?;
    config.apply_env(|k| std::env::var(k).ok())?;
    match cli.command.unwrap_or(Command::Serve) {
        Command::Serve => {
            let server = geoloop_server::start(config).await?;
            tokio::select! {
                r = server.wait() => r?,
                _ = tokio::signal::ctrl_c() => tracing::info!("shutting down"),
            }
        }
        Command::Snapshot { action } => {
            let store = Store::open_with(
                &config.data_dir,
                StoreOptions {
                    sync: true,
                    ..StoreOptions::default()
                },
            )?;
            match action {
                SnapshotAction::Export { file } => {
                    let f = File::create(&file).with_context(|| format!("creating {}", file.display()))?;
                    store.export_snapshot(BufWriter::new(f))?;
                    println!("exported commit {} to {}", store.commit_seq(), file.display());
                }
                SnapshotAction::Import { file } => {
                    let f = File::open(&file).with_context(|| format!("opening {}", file.display()))?;
                    store.import_snapshot(BufReader::new(f))?;
                    println!("imported {} at commit {}", file.display(), store.commit_seq());
                }
            }
        }
    }
    Ok(())
}
