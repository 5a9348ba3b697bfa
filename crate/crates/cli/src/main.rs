use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use vqprompt_cli::commands::{report_csv, report_table};
use vqprompt_cli::{cmd_generate, cmd_pretrain, cmd_report, cmd_run, cmd_sweep, ExperimentConfig, RunMode};

/// Class-incremental experiments with vector-quantized prompts.
#[derive(Parser)]
#[command(name = "vqprompt", version)]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,

    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self, mode: Option<RunMode>) -> Result<ExperimentConfig> {
        let mut config = ExperimentConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(mode) = mode {
            config.train.mode = mode;
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic benchmark to a directory.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain and freeze a backbone on the benchmark's pretraining split.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Benchmark directory written by `generate`.
        #[arg(long)]
        data: PathBuf,
        /// Output checkpoint file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on the task sequence and write a run directory.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        mode: Option<RunMode>,
        #[arg(long)]
        data: PathBuf,
        /// Frozen backbone checkpoint written by `pretrain`.
        #[arg(long)]
        backbone: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregate run directories into mean ± std per mode.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Also write the table as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Walk the `[ablation]` grids.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        mode: Option<RunMode>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        backbone: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn write_out(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { common, out } => cmd_generate(&common.load(None)?, &out),
        Command::Pretrain { common, data, out } => {
            let report = cmd_pretrain(&common.load(None)?, &data, &out)?;
            println!(
                "pretrained: train accuracy {:.4}, test accuracy {:.4}",
                report.train_accuracy,
                report.test_accuracy.unwrap_or(f64::NAN)
            );
            Ok(())
        }
        Command::Run {
            common,
            mode,
            data,
            backbone,
            out,
        } => {
            let config = common.load(mode)?;
            let summary = cmd_run(&config, &data, &backbone, &out)?;
            println!("{}: faa {:.4} caa {:.4}", config.train.mode, summary.faa, summary.caa);
            Ok(())
        }
        Command::Report { runs, out } => {
            let rows = cmd_report(&runs)?;
            print!("{}", report_table(&rows));
            if let Some(out) = out {
                write_out(&out, &report_csv(&rows))?;
            }
            Ok(())
        }
        Command::Sweep {
            common,
            mode,
            data,
            backbone,
            out,
        } => {
            print!("{}", cmd_sweep(&common.load(mode)?, &data, &backbone, &out)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
