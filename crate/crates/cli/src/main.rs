use clap::{Parser, Subcommand};
use splatslam::config::RunConfig;
use std::path::PathBuf;
use std::process::ExitCode;

mod commands;

#[derive(Parser, Debug)]
#[command(name = "splatslam", version, about = "LiDAR-visual Gaussian-splatting SLAM", after_help = config_help())]
struct Cli {
    /// Run configuration file (`key = value` lines, `#` comments).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed of the config or scene file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 1 runs everything sequentially.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset from a scene file or a bundled scene name.
    Simulate {
        /// Scene file, or `plane-corridor` for the bundled corridor.
        spec: String,
        /// Overrides the LiDAR range noise (m).
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Run the full pipeline on a dataset directory.
    #[command(after_help = config_help())]
    Slam {
        dataset: PathBuf,
    },
    /// Render color and depth images of a map at every pose of a TUM file.
    Render {
        map: PathBuf,
        poses: PathBuf,
        /// Dataset directory or calib.txt providing the camera.
        #[arg(long)]
        calib: PathBuf,
        /// Image size as WIDTHxHEIGHT; defaults to the dataset images or
        /// twice the principal point.
        #[arg(long)]
        size: Option<String>,
    },
    /// Compare two TUM trajectories, or two directories of PPM images.
    Eval {
        estimate: PathBuf,
        reference: PathBuf,
    },
}

fn config_help() -> String {
    format!("Configuration keys (defaults shown):\n{}", RunConfig::help_text())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = commands::load_config(cli.config.as_deref(), cli.seed, cli.threads).and_then(|cfg| match cli.command {
        Command::Simulate { spec, noise } => commands::simulate(&spec, noise, cli.seed, &cli.out),
        Command::Slam { dataset } => commands::slam(&dataset, &cfg, &cli.out),
        Command::Render { map, poses, calib, size } => commands::render(&map, &poses, &calib, size.as_deref(), &cli.out),
        Command::Eval { estimate, reference } => commands::eval(&estimate, &reference, &cli.out),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
