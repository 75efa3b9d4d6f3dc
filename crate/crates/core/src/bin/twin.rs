use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};

use twin_core::backbone::Store;
use twin_core::service::{self, read_journal_file, read_registry_file, AppState, ReplayError};

const EXIT_FAILURE: u8 = 1;
const EXIT_INVALID: u8 = 2;
const EXIT_CONFLICT: u8 = 3;

#[derive(Parser)]
#[command(name = "twin", version, about = "Patient digital twin orchestration engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a registry file and print every problem found.
    Validate { registry: PathBuf },
    /// Ingest a journal into a fresh store and write the final snapshot and run reports.
    Replay {
        #[arg(long)]
        registry: PathBuf,
        #[arg(long)]
        journal: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long)]
        registry: PathBuf,
        #[arg(long)]
        store: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Require `Authorization: Bearer <token>` on every request.
        #[arg(long, env = "TWIN_TOKEN")]
        token: Option<String>,
    },
    /// Retrain fusion weights from the store's cohort into a new registry version.
    Retrain {
        #[arg(long)]
        store: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    ExitCode::from(match cli.command {
        Command::Validate { registry } => validate(registry),
        Command::Replay { registry, journal, out } => replay(registry, journal, out),
        Command::Serve { registry, store, port, host, token } => serve(registry, store, &host, port, token),
        Command::Retrain { store } => retrain(store),
    })
}

fn validate(path: PathBuf) -> u8 {
    match read_registry_file(&path) {
        Ok(r) => {
            println!("OK ({} attributes, {} models, version {})", r.attributes().len(), r.models().len(), r.version());
            0
        }
        Err(ReplayError::Registry(errors)) => {
            for e in &errors.0 {
                println!("error: {e}");
            }
            EXIT_INVALID
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_INVALID
        }
    }
}

fn replay(registry: PathBuf, journal: PathBuf, out: PathBuf) -> u8 {
    let run = || -> Result<bool, ReplayError> {
        let registry = read_registry_file(&registry)?;
        let journal = read_journal_file(&journal)?;
        std::fs::create_dir_all(&out).map_err(ReplayError::Write)?;
        let outcome = service::replay_to_dir(registry, &journal, &out)?;
        println!("replayed {} event(s) for {}", outcome.reports.len(), journal.patient);
        for r in &outcome.reports {
            for c in &r.conflicts {
                println!("conflict in run {} on {}: {}", r.event_seq, c.attribute, c.detail);
            }
        }
        Ok(outcome.survival_conflict())
    };
    match run() {
        Ok(false) => 0,
        Ok(true) => EXIT_CONFLICT,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() { EXIT_INVALID } else { EXIT_FAILURE }
        }
    }
}

fn serve(registry: PathBuf, store: PathBuf, host: &str, port: u16, token: Option<String>) -> u8 {
    let registry = match read_registry_file(&registry) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_INVALID;
        }
    };
    let state = match AppState::new(store, Some(&registry), token) {
        Ok(s) => Arc::new(s),
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_FAILURE;
        }
    };
    let rt = match tokio::runtime::Runtime::new() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("error: cannot start runtime: {e}");
            return EXIT_FAILURE;
        }
    };
    match rt.block_on(service::serve(state, host, port)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_FAILURE
        }
    }
}

fn retrain(store: PathBuf) -> u8 {
    let result = Store::open(store).and_then(|s| s.retrain());
    match result {
        Ok(outcome) => {
            println!("registry version {}", outcome.registry.version());
            for d in &outcome.weight_diffs {
                let old = d.old.map(|o| format!("{o:.6}")).unwrap_or_else(|| "-".into());
                println!("  {}.{}: {} -> {:.6}", d.attribute, d.parameter, old, d.new);
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_FAILURE
        }
    }
}
