#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use wgeo::app::{self, Direction, GlobalOpts, OracleKind};
use wgeo::Result;

#[derive(Parser)]
#[command(name = "wgeo", version, about = "Wasserstein geodesics from sampled distributions")]
struct Cli {
    /// Override the RNG seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads used during training.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Force bit-reproducible training.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a TOML config and write a checkpoint.
    Train {
        config: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Print transport estimates in both directions.
    Distance {
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 2000)]
        samples: usize,
    },
    /// Write geodesic snapshots as CSV files.
    Geodesic {
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 2000)]
        samples: usize,
        #[arg(long, default_value_t = 11)]
        steps: usize,
        #[arg(long, default_value = "ab")]
        direction: Direction,
        #[arg(long)]
        out_dir: PathBuf,
        /// Start from these points instead of sampling.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Apply the transport map to the rows of a CSV file.
    Map {
        checkpoint: PathBuf,
        input: PathBuf,
        #[arg(long, default_value = "ab")]
        direction: Direction,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Recolor a PPM image with a 3-d checkpoint.
    Transfer {
        checkpoint: PathBuf,
        image: PathBuf,
        #[arg(long, default_value = "ab")]
        direction: Direction,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Compare a checkpoint against an exact oracle.
    Eval {
        checkpoint: PathBuf,
        #[arg(long)]
        oracle: OracleKind,
        #[arg(long, default_value_t = 64)]
        samples: usize,
        #[arg(long, requires = "target_csv")]
        source_csv: Option<PathBuf>,
        #[arg(long, requires = "source_csv")]
        target_csv: Option<PathBuf>,
    },
    /// Exact discrete transport between two equal-size CSV clouds.
    OracleOt {
        a: PathBuf,
        b: PathBuf,
        #[arg(long, default_value_t = 2.0)]
        alpha: f64,
        #[arg(long, default_value_t = 1.0)]
        beta: f64,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Rasterize a 2-d CSV cloud to a 512x512 PPM.
    PlotScatter {
        input: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    let opts = GlobalOpts {
        seed: cli.seed,
        workers: cli.workers,
        deterministic: cli.deterministic,
    };
    match cli.command {
        Command::Train { config, out } => app::cmd_train(&config, &out, opts).map(drop),
        Command::Distance { checkpoint, samples } => app::cmd_distance(&checkpoint, samples, opts).map(drop),
        Command::Geodesic {
            checkpoint,
            samples,
            steps,
            direction,
            out_dir,
            input,
        } => app::cmd_geodesic(&checkpoint, samples, steps, direction, &out_dir, input.as_deref(), opts).map(drop),
        Command::Map {
            checkpoint,
            input,
            direction,
            out,
        } => app::cmd_map(&checkpoint, &input, direction, &out),
        Command::Transfer {
            checkpoint,
            image,
            direction,
            out,
        } => app::cmd_transfer(&checkpoint, &image, direction, &out),
        Command::Eval {
            checkpoint,
            oracle,
            samples,
            source_csv,
            target_csv,
        } => {
            let clouds = source_csv.as_deref().zip(target_csv.as_deref());
            app::cmd_eval(&checkpoint, oracle, samples, clouds, opts).map(drop)
        }
        Command::OracleOt { a, b, alpha, beta, out } => app::cmd_oracle_ot(&a, &b, alpha, beta, &out).map(drop),
        Command::PlotScatter { input, out } => app::cmd_plot_scatter(&input, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("WGEO_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("wgeo: {e}");
            ExitCode::from(app::exit_code(&e) as u8)
        }
    }
}
