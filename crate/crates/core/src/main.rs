use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use tracing_subscriber::EnvFilter;

use transit_idle::audit::DurationOptions;
use transit_idle::clock::{Clock, ScaledClock, SystemClock};
use transit_idle::pipeline::{self, PipelineConfig};
use transit_idle::sim::{serve_script, FleetScript};
use transit_idle::store::ExportRange;

#[derive(Parser)]
#[command(version, about = "Detect idling buses from GTFS Realtime feeds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ParamFlags {
    /// Poll interval in seconds.
    #[arg(long)]
    r: Option<u32>,
    /// Buffer lag in polls.
    #[arg(long)]
    h: Option<u32>,
    /// Misses tolerated before a candidate is dropped.
    #[arg(long)]
    m: Option<u32>,
}

#[derive(Subcommand)]
enum Command {
    /// Poll, detect, stream and store until interrupted.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        params: ParamFlags,
    },
    /// Write stored events to CSV.
    Export {
        #[arg(long)]
        config: PathBuf,
        /// Inclusive epoch-second range, `start..end`. Everything when omitted.
        #[arg(long)]
        range: Option<ExportRange>,
        #[arg(long, default_value = "events.csv")]
        out: PathBuf,
    },
    /// Run the validation battery over an export.
    Audit {
        /// Export CSV to audit.
        export: PathBuf,
        /// Static GTFS bundle for a city, as `IATA=path`. Repeatable.
        #[arg(long = "gtfs", value_parser = parse_gtfs)]
        gtfs: Vec<(String, PathBuf)>,
        /// Spatial threshold in meters.
        #[arg(long, default_value_t = 25.0)]
        dm: f64,
        /// Also sweep the threshold over 0..=100 m.
        #[arg(long)]
        sweep: bool,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
        #[command(flatten)]
        params: ParamFlags,
    },
    /// Serve a fleet script as a GTFS Realtime feed.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8000")]
        bind: SocketAddr,
        /// Simulated seconds per real second; the clock starts at the script epoch.
        #[arg(long)]
        speedup: Option<f64>,
        /// Also write route shapes for the script as a static GTFS zip.
        #[arg(long)]
        gtfs_out: Option<PathBuf>,
    },
}

fn parse_gtfs(s: &str) -> Result<(String, PathBuf), String> {
    let (iata, path) = s.split_once('=').ok_or("expected IATA=path")?;
    Ok((iata.to_string(), PathBuf::from(path)))
}

async fn shutdown_signal() {
    #[cfg(unix)]
    {
        use tokio::signal::unix::{signal, SignalKind};
        let mut term = signal(SignalKind::terminate()).expect("install SIGTERM handler");
        tokio::select! {
            _ = tokio::signal::ctrl_c() => {}
            _ = term.recv() => {}
        }
    }
    #[cfg(not(unix))]
    let _ = tokio::signal::ctrl_c().await;
}

async fn dispatch(cmd: Command) -> Result<(), Box<dyn std::error::Error>> {
    match cmd {
        Command::Run { config, params } => {
            let cfg = PipelineConfig::load(&config)?.with_overrides(params.r, params.h, params.m)?;
            let counts = pipeline::run_until(&cfg, shutdown_signal()).await?;
            for (region, c) in counts {
                println!(
                    "{region}: {} snapshots, {} events, {} stored",
                    c.snapshots, c.events, c.stored
                );
            }
        }
        Command::Export { config, range, out } => {
            let cfg = PipelineConfig::load(&config)?;
            let n = pipeline::export(&cfg, range.unwrap_or_else(ExportRange::all), &out)?;
            println!("wrote {n} rows to {}", out.display());
        }
        Command::Audit {
            export,
            gtfs,
            dm,
            sweep,
            out_dir,
            params,
        } => {
            let r = i64::from(params.r.unwrap_or(30));
            let h = i64::from(params.h.unwrap_or(1));
            let duration = DurationOptions {
                unadjusted_min_secs: (h + 1) * r,
                ..Default::default()
            };
            let report = pipeline::audit_file(&export, &gtfs, dm, duration, sweep)?;
            std::fs::create_dir_all(&out_dir)?;
            std::fs::write(out_dir.join("audit_report.json"), report.to_json())?;
            std::fs::write(out_dir.join("audit_report.txt"), report.to_string())?;
            print!("{report}");
        }
        Command::Simulate {
            config,
            bind,
            speedup,
            gtfs_out,
        } => {
            let script = Arc::new(FleetScript::load(&config)?);
            if let Some(path) = gtfs_out {
                script.static_gtfs(1e-4).write_zip(&path)?;
                println!("wrote route shapes to {}", path.display());
            }
            let clock: Arc<dyn Clock> = match speedup {
                Some(s) => Arc::new(ScaledClock::new(script.epoch(), s)),
                None => Arc::new(SystemClock),
            };
            let server = serve_script(script, clock, bind).await?;
            println!("serving {}", server.url());
            shutdown_signal().await;
            server.shutdown().await;
        }
    }
    Ok(())
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match dispatch(cli.command).await {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
