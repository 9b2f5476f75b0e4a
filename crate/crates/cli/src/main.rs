use std::collections::BTreeMap;
use std::io::{self, Write};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand};
use pailine::binding::parse_exclusion;
use pailine_cli::commands::{self, CliError};
use pailine_cli::server::{self, ServiceConfig};

#[derive(Parser)]
#[command(name = "pailine", version, about = "Derive and run process product-line products")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a feature model and check its structure.
    ValidateModel { model: PathBuf },
    /// Check a configuration against a feature model (exit 1 if invalid).
    ValidateConfig { model: PathBuf, config: PathBuf },
    /// List valid configurations, one per line.
    Enumerate {
        model: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        limit: usize,
    },
    /// Pairwise covering sample of valid configurations, one per line.
    SamplePairwise { model: PathBuf },
    /// Compose the feature folders selected by a configuration into a product.
    Derive {
        model: PathBuf,
        config: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve a derived product over HTTP.
    Serve {
        #[arg(long)]
        product: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        listen: SocketAddr,
        #[arg(long)]
        journal_dir: Option<PathBuf>,
        /// Withhold a plugin from a variation point, as `<vp>=<plugin_id>`.
        #[arg(long = "exclude", value_parser = parse_exclusion)]
        exclusions: Vec<(String, String)>,
        #[arg(long)]
        retry_attempts: Option<u32>,
        #[arg(long)]
        retry_backoff_ms: Option<u64>,
        /// JSON object of register number to company name for the stub register.
        #[arg(long)]
        register: Option<PathBuf>,
    },
    /// Rebuild instance states from a journal directory.
    Replay { journal_dir: PathBuf },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let stdout = io::stdout();
    let mut out = stdout.lock();
    match cli.command {
        Command::ValidateModel { model } => commands::validate_model(&model, &mut out),
        Command::ValidateConfig { model, config } => commands::validate_config(&model, &config, &mut out),
        Command::Enumerate { model, limit } => commands::enumerate(&model, limit, &mut out),
        Command::SamplePairwise { model } => commands::pairwise(&model, &mut out),
        Command::Derive {
            model,
            config,
            features,
            out: dir,
        } => commands::derive(&model, &config, &features, &dir, &mut out),
        Command::Replay { journal_dir } => commands::replay(&journal_dir, &mut out),
        Command::Serve {
            product,
            listen,
            journal_dir,
            exclusions,
            retry_attempts,
            retry_backoff_ms,
            register,
        } => {
            let mut cfg = ServiceConfig::new(product);
            cfg.listen = listen;
            cfg.journal_dir = journal_dir;
            cfg.exclusions = exclusions;
            cfg.retry_attempts = retry_attempts;
            cfg.retry_backoff = retry_backoff_ms.map(Duration::from_millis);
            if let Some(path) = register {
                let text = std::fs::read_to_string(&path)
                    .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
                cfg.register = serde_json::from_str::<BTreeMap<String, String>>(&text)
                    .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            }
            let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Usage(e.to_string()))?;
            rt.block_on(server::serve(cfg))
                .map_err(|e| CliError::Rejected(e.to_string()))
        }
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(io::stderr)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let _ = io::stdout().flush();
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
