use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gta_seg::harness;
use gta_seg::Error;

#[derive(Parser)]
#[command(name = "gtaseg", version, about = "Gentle-teaching-assistant semi-supervised segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the config's training seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run a grid of configurations over several seeds.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// A preset name or `key=v1,v2;key2=v3`.
        #[arg(long)]
        axes: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// Worker threads; 1 runs sequentially.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Score a checkpoint on a dataset file's held-out split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Write the dataset a config describes.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the config's data seed.
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Run { config, out, seed } => {
            let m = harness::cli_run(&config, &out, seed)?;
            println!("final mIoU {:.4}", m.summary.final_miou);
            for p in m.artifacts() {
                println!("wrote {}", p.display());
            }
        }
        Command::Ablate {
            config,
            axes,
            out,
            seeds,
            jobs,
        } => {
            let (m, results) = harness::cli_ablate(&config, &axes, &out, &seeds, jobs)?;
            println!("{:<4} {:<60} {:>8}", "row", "configuration", "mIoU");
            for (i, r) in results.iter().enumerate() {
                println!("{i:<4} {:<60} {:>8.4}", r.row.label, r.mean_final());
            }
            println!("wrote {}", m.summary_csv.display());
        }
        Command::Eval { checkpoint, data } => {
            let report = harness::cli_eval(&checkpoint, &data)?;
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
        }
        Command::GenData { config, out, seed } => {
            let split = harness::cli_gen_data(&config, &out, seed)?;
            println!(
                "wrote {} ({} labeled, {} unlabeled, {} held-out)",
                out.display(),
                split.labeled.len(),
                split.unlabeled.len(),
                split.heldout.len()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
