use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use pdsa_cli::commands::{cmd_ablate, cmd_eval, cmd_inspect, cmd_train, std_dev};
use pdsa_cli::config::{keys_help, RunConfig};

/// Point-cloud classification with descriptor-corrected set abstraction.
#[derive(Parser)]
#[command(name = "pdsa", version, after_help = keys_help())]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Config file of `section.key = value` lines.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a config key (repeatable), e.g. `--set train.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory (same as `io.out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (same as `train.threads`).
    #[arg(long)]
    threads: Option<usize>,
    /// Checkpoint path (same as `io.checkpoint`).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut set = self.set.clone();
        if let Some(o) = &self.out {
            set.push(format!("io.out_dir={}", o.display()));
        }
        if let Some(t) = self.threads {
            set.push(format!("train.threads={t}"));
        }
        if let Some(c) = &self.checkpoint {
            set.push(format!("io.checkpoint={}", c.display()));
        }
        RunConfig::load(self.config.as_deref(), &set)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a classifier; writes checkpoints and train_log.csv.
    #[command(after_help = keys_help())]
    Train(Common),
    /// Score a checkpoint on the test split; prints per-class metrics CSV.
    #[command(after_help = keys_help())]
    Eval(Common),
    /// Train the correction ladder or the a_dim sweep; writes ablation.csv.
    #[command(after_help = keys_help())]
    Ablate(Common),
    /// Export the attention heat and key points of one PLY cloud.
    #[command(after_help = keys_help())]
    Inspect {
        #[command(flatten)]
        common: Common,
        /// Input PLY cloud.
        input: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(c) => {
            let cfg = c.load()?;
            let out = cmd_train(&cfg)?;
            match out.logs.last() {
                Some(l) => println!(
                    "epoch {} loss {:.6} train_acc {:.4} test_acc {:.4}",
                    l.epoch, l.loss, l.train_acc, l.test_acc
                ),
                None => println!("no epochs run"),
            }
            println!("checkpoint {}", out.final_checkpoint.display());
        }
        Command::Eval(c) => {
            let cfg = c.load()?;
            let report = cmd_eval(&cfg)?;
            print!("{}", report.to_csv());
            eprintln!(
                "oa {:.4} miou {:.4} macc {:.4}",
                report.oa, report.miou, report.macc
            );
        }
        Command::Ablate(c) => {
            let cfg = c.load()?;
            let rows = cmd_ablate(&cfg)?;
            println!("{}", pdsa_cli::commands::ABLATION_HEADER);
            for r in rows {
                println!("{},{},{},{}", r.variant, r.seed, r.test_oa, r.mean_nbr_var);
            }
        }
        Command::Inspect { common, input } => {
            let cfg = common.load()?;
            let ins = cmd_inspect(&cfg, &input)?;
            println!(
                "predicted {} heat_std {:.6} key_points {}",
                ins.predicted,
                std_dev(&ins.heat),
                ins.key_points.len()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
