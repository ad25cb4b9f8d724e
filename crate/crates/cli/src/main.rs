use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::Result;
use clap::{Parser, Subcommand};
use stablelabel::service::SystemClock;
use stablelabel_cli::commands;
use stablelabel_cli::server::{self, AppState};

#[derive(Parser)]
#[command(name = "stablelabel", version, about = "Semi-automated annotation of discrete-state frame sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic record stream with ground truth.
    Simulate {
        /// JSON simulator config; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the pipeline against ground truth and report effort and accuracy.
    Replay {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        params: Option<PathBuf>,
        /// JSON model. Without it the leading frames seed one.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 20_000)]
        seed_frames: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a parameter grid and write the tradeoff table as CSV.
    Sweep {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Locate the pupil in a PGM eye crop.
    PupilDetect {
        image: PathBuf,
        /// Text file of "x,y" polygon vertices.
        #[arg(long)]
        polygon: PathBuf,
    },
    /// Serve the annotation queue over HTTP.
    Serve {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        /// Append-only event log; an existing log is resumed.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: std::net::IpAddr,
        /// Directory of `<frame_index>.<png|jpg|pgm>` images.
        #[arg(long)]
        images: Option<PathBuf>,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Simulate { config, out } => {
            let stream = commands::simulate(config.as_deref(), &out)?;
            let present = stream.records.iter().filter(|r| r.object_present).count();
            eprintln!("wrote {} frames ({present} present) to {}", stream.records.len(), out.display());
        }
        Command::Replay {
            records,
            params,
            model,
            seed_frames,
            out,
        } => {
            let point = commands::replay(&records, params.as_deref(), model.as_deref(), seed_frames, out.as_deref())?;
            if out.is_none() {
                println!("{}", serde_json::to_string_pretty(&point)?);
            } else {
                eprintln!(
                    "reduction {:.2}x, accuracy {:.4} over {} frames",
                    point.reduction_factor, point.accuracy, point.total_frames
                );
            }
        }
        Command::Sweep { spec, out } => {
            let result = commands::sweep(spec.as_deref(), &out)?;
            for row in &result.rows {
                if let Err(e) = &row.result {
                    eprintln!("delta_min={} failed: {e}", row.params.delta_min);
                }
            }
            for p in result.frontier() {
                eprintln!(
                    "frontier: delta_min={} c_min={} v_u_min={} reduction {:.2}x accuracy {:.4}",
                    p.params.delta_min, p.params.c_min, p.params.v_u_min, p.reduction_factor, p.accuracy
                );
            }
        }
        Command::PupilDetect { image, polygon } => {
            println!("{}", commands::pupil_detect(&image, &polygon)?);
        }
        Command::Serve {
            records,
            params,
            model,
            log,
            port,
            host,
            images,
        } => {
            let log = log.unwrap_or_else(|| {
                let mut p = records.clone().into_os_string();
                p.push(".log");
                p.into()
            });
            let service = commands::open_service(&records, params.as_deref(), model.as_deref(), &log, Box::new(SystemClock))?;
            let state = AppState {
                service: Arc::new(service),
                images,
            };
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(server::serve(state, SocketAddr::new(host, port)))?;
        }
    }
    Ok(())
}
