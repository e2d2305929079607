//! Thin command-line front end over the library: run the server, deploy a
//! version directory, publish and query events, and report dispatch
//! latency.

use std::path::PathBuf;
use std::sync::Arc;

use clap::{Parser, Subcommand};

use mip::engine::unique_ts;
use mip::events::{Event, Kind};
use mip::service::{bench_latency, serve_on, Platform, ServerConfig};
use mip::store::EventPattern;
use mip::value::Value;

#[derive(Parser)]
#[command(
    name = "mip",
    version,
    about = "Event-sourced managed-information platform"
)]
struct Cli {
    /// JSON config file (port, data_dir, shards, workers, window_ms,
    /// default_version, default_identity).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Durable state directory; overrides the config file.
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the TCP server.
    Serve {
        /// Listen port; 0 picks an ephemeral one.
        #[arg(long)]
        port: Option<u16>,
    },
    /// Publish a version directory (src/ modules plus resources/public)
    /// and run its migration to completion.
    Deploy { version: String, dir: PathBuf },
    /// Publish one event from a JSON file ("-" reads stdin). A missing ts
    /// is stamped with a fresh unique one.
    Publish { event: PathBuf },
    /// Print accumulated events matching kind, name and key. The key is
    /// parsed as JSON when possible; a bare string also matches compound
    /// keys whose first element equals it.
    Query {
        kind: String,
        name: String,
        key: String,
    },
    /// Measure 1-link vs 2-link dispatch latency on this host.
    Bench {
        #[arg(long, default_value_t = 50)]
        runs: usize,
    },
}

fn load_config(cli: &Cli) -> Result<ServerConfig, String> {
    let mut config: ServerConfig = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
            serde_json::from_str(&text).map_err(|e| format!("bad config: {e}"))?
        }
        None => ServerConfig::default(),
    };
    if cli.data_dir.is_some() {
        config.platform.data_dir = cli.data_dir.clone();
    }
    Ok(config)
}

fn open_platform(config: &ServerConfig) -> Result<Arc<Platform>, String> {
    Platform::new(config.platform.clone()).map_err(|e| e.to_string())
}

fn parse_key(raw: &str) -> Value {
    match serde_json::from_str::<serde_json::Value>(raw) {
        Ok(json) => Value::from_json(&json).unwrap_or_else(|_| Value::from(raw)),
        Err(_) => Value::from(raw),
    }
}

fn run(cli: Cli) -> Result<(), String> {
    let config = load_config(&cli)?;
    match cli.command {
        Command::Serve { port } => {
            let platform = open_platform(&config)?;
            let server =
                serve_on(platform, port.unwrap_or(config.port)).map_err(|e| e.to_string())?;
            println!("listening on {}", server.addr());
            loop {
                std::thread::sleep(std::time::Duration::from_secs(3600));
            }
        }
        Command::Deploy { version, dir } => {
            let platform = open_platform(&config)?;
            let outcome = platform.deploy(&version, &dir).map_err(|e| e.to_string())?;
            for fault in platform.take_faults() {
                eprintln!("fault: {fault}");
            }
            println!("deployed {version}:");
            for (module, r) in &outcome.code_map {
                println!("  {module} -> {r}");
            }
            for (path, r) in &outcome.static_map {
                println!("  {path} -> {r}");
            }
            platform.store().snapshot().map_err(|e| e.to_string())?;
            Ok(())
        }
        Command::Publish { event } => {
            let text = if event.as_os_str() == "-" {
                std::io::read_to_string(std::io::stdin()).map_err(|e| e.to_string())?
            } else {
                std::fs::read_to_string(&event)
                    .map_err(|e| format!("cannot read {}: {e}", event.display()))?
            };
            let mut parsed = Event::from_wire(text.trim()).map_err(|e| e.to_string())?;
            if parsed.ts == 0 {
                parsed.ts = unique_ts();
            }
            let platform = open_platform(&config)?;
            platform.publish(parsed);
            platform.drain();
            for fault in platform.take_faults() {
                eprintln!("fault: {fault}");
            }
            platform.store().snapshot().map_err(|e| e.to_string())?;
            Ok(())
        }
        Command::Query { kind, name, key } => {
            let kind = Kind::parse(&kind).ok_or_else(|| format!("unknown kind {kind:?}"))?;
            let key = parse_key(&key);
            let platform = open_platform(&config)?;
            let mut rows = platform.accumulated(&EventPattern::new(kind, &name, key.clone()));
            // a scalar key also selects compound keys it prefixes, so
            // per-day partitions of one user's data list together
            if kind == Kind::Fact && !matches!(key, Value::List(_)) {
                let mut acc = mip::events::Accumulator::new();
                platform.store().scan(&name, 0, 1, |e| {
                    if matches!(e.key.as_list(), Some(items) if items.first() == Some(&key)) {
                        acc.accumulate(&e);
                    }
                });
                rows.extend(acc.accumulated_events());
            }
            for row in &rows {
                println!("{}", row.to_wire());
            }
            eprintln!("{} rows", rows.len());
            Ok(())
        }
        Command::Bench { runs } => {
            let report = bench_latency(runs).map_err(|e| e.to_string())?;
            println!("{report}");
            Ok(())
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(message) = run(cli) {
        eprintln!("error: {message}");
        std::process::exit(1);
    }
}
