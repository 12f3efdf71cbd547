use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use covr_forge_annotate::{run, ServiceConfig};

/// Serve an annotation pool over HTTP.
#[derive(Debug, Parser)]
#[command(name = "covr-forge-annotate", version)]
struct Args {
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value_t = covr_forge::annotate::DEFAULT_LEASE_SECONDS)]
    lease_seconds: i64,
    /// Candidate pool (JSONL of annotation candidates).
    #[arg(long)]
    pool: PathBuf,
    /// Append-only decision log; replayed on start.
    #[arg(long)]
    log: PathBuf,
    /// Directory with `<video_id>/<frame_index>.jpg` frame images.
    #[arg(long)]
    frames_dir: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    let cfg = ServiceConfig { pool: args.pool, log: args.log, lease_seconds: args.lease_seconds, frames_dir: args.frames_dir };
    match run(&cfg, args.port) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(4)
        }
    }
}
