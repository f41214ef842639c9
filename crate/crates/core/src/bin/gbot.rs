use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};

use gbot::api::{PoseHub, PoseServer};
use gbot::bench::{
    build_table, generate_dataset, read_summaries, render_csv, render_markdown, track_dataset,
    BenchError, Method, TrackOptions,
};
use gbot::detector::Condition;
use gbot::scene::ScriptOptions;

#[derive(Parser)]
#[command(
    name = "gbot",
    version,
    about = "Graph-based multi-object pose tracking benchmark"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate an assembly sequence into a dataset directory.
    Generate {
        #[arg(long)]
        asset: String,
        #[arg(long, default_value = "normal")]
        condition: Condition,
        #[arg(long, default_value_t = 300)]
        frames: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Exact keypoints, no dropouts.
        #[arg(long)]
        noiseless: bool,
        /// Hide every part for a stretch after the last assembly step.
        #[arg(long)]
        full_occlusion: bool,
    },
    /// Track a dataset directory and score it.
    Track {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "gbot")]
        method: Method,
        #[arg(long)]
        out: PathBuf,
        /// Publish poses over HTTP while tracking, e.g. 127.0.0.1:8080.
        #[arg(long, value_name = "ADDR:PORT")]
        serve: Option<SocketAddr>,
        /// Replay frames at this rate instead of as fast as possible.
        #[arg(long)]
        fps: Option<f64>,
        /// Keep serving this many seconds after the last frame.
        #[arg(long, default_value_t = 0.0)]
        hold: f64,
        /// Leave runtimes out of the outputs so they are byte-reproducible.
        #[arg(long)]
        no_timing: bool,
    },
    /// Tabulate run summaries (files or run directories).
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Markdown)]
        format: Format,
        /// Write the table here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    #[value(name = "md")]
    Markdown,
    Csv,
}

fn run(command: Command) -> Result<(), BenchError> {
    match command {
        Command::Generate {
            asset,
            condition,
            frames,
            seed,
            out,
            noiseless,
            full_occlusion,
        } => {
            let opts = ScriptOptions {
                n_frames: frames,
                condition,
                seed,
                noiseless,
                full_occlusion,
            };
            generate_dataset(&asset, &opts, &out)?;
            log::info!(
                "wrote {asset} ({condition}, {frames} frames, seed {seed}) to {}",
                out.display()
            );
        }
        Command::Track {
            data,
            method,
            out,
            serve,
            fps,
            hold,
            no_timing,
        } => {
            let hub = Arc::new(PoseHub::new());
            let server = serve
                .map(|addr| PoseServer::start(addr, hub.clone()))
                .transpose()?;
            let opts = TrackOptions {
                method,
                timing: !no_timing,
                hub: server.as_ref().map(|_| hub.as_ref()),
                fps,
            };
            let record = track_dataset(&data, &out, &opts)?;
            println!(
                "{}",
                serde_json::to_string(&record).map_err(std::io::Error::from)?
            );
            if let Some(server) = server {
                std::thread::sleep(Duration::from_secs_f64(hold.max(0.0)));
                server.shutdown()?;
            }
        }
        Command::Report { runs, format, out } => {
            let rows = build_table(&read_summaries(&runs)?)?;
            let text = match format {
                Format::Markdown => render_markdown(&rows),
                Format::Csv => render_csv(&rows),
            };
            match out {
                Some(path) => std::fs::write(path, text)?,
                None => print!("{text}"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("GBOT_LOG", "warn")).init();
    // clap exits with status 2 on bad arguments
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 1 })
        }
    }
}
