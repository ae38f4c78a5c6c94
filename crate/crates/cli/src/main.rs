use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use oat_cli::commands::{
    cmd_saliency, cmd_stats_export, cmd_sweep, cmd_train, config_spec, eval_attack, flops_table,
    parse_values, SweepArgs,
};
use oat_cli::config::parse_number;
use oat_cli::{Checkpoint, CliError, Result, RunConfig};

#[derive(Parser)]
#[command(name = "oat", version, about = "Once-for-all adversarial training lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint plus a per-epoch log.
    Train {
        /// key = value config file; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Extra `key=value` settings applied after the file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Evaluate SA/RA of a checkpoint over λ and width; writes a CSV.
    Sweep {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma list, e.g. 0,0.1,0.2
        #[arg(long, default_value = "0,0.1,0.2,0.3,0.4,1")]
        lambdas: String,
        /// Comma list; all trained widths when omitted.
        #[arg(long)]
        widths: Option<String>,
        /// pgd20, pgd7, pgd, fgsm or mifgsm.
        #[arg(long, default_value = "pgd20")]
        attack: String,
        #[arg(long, default_value = "8/255")]
        epsilon: String,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value = "2/255")]
        step_size: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Evaluate only the first N test images.
        #[arg(long)]
        count: Option<usize>,
        #[arg(long, default_value = "sweep.csv")]
        out: PathBuf,
    },
    /// Write input-gradient saliency maps as PGM images.
    Saliency {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "0,0.1,0.2,0.3,0.4,1")]
        lambdas: String,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 1.0)]
        width: f64,
        #[arg(long, default_value = "saliency")]
        out_dir: PathBuf,
    },
    /// Dump batch-norm running statistics per branch and width.
    StatsExport {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "stats.csv")]
        out: PathBuf,
    },
    /// Print multiply-adds per width for a checkpoint or a config.
    Flops {
        #[arg(long, conflicts_with = "config")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn number(s: &str) -> Result<f64> {
    parse_number(s).map_err(CliError::Usage)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, set } => {
            let base = match config {
                Some(p) => RunConfig::load(&p)?,
                None => RunConfig::default(),
            };
            let cfg = base.with_overrides(&set)?;
            let out = cmd_train(&cfg)?;
            println!("trained {} steps", out.steps);
            println!("checkpoint {}", out.checkpoint.display());
            println!("log {}", out.log.display());
        }
        Command::Sweep {
            checkpoint,
            lambdas,
            widths,
            attack,
            epsilon,
            steps,
            step_size,
            seed,
            count,
            out,
        } => {
            let args = SweepArgs {
                lambdas: parse_values(&lambdas)?,
                widths: widths
                    .as_deref()
                    .map(parse_values)
                    .transpose()?
                    .unwrap_or_default(),
                attack: eval_attack(&attack, number(&epsilon)?, steps, number(&step_size)?)?,
                seed,
                count,
            };
            let points = cmd_sweep(&checkpoint, &args, &out)?;
            println!("{} points written to {}", points.len(), out.display());
        }
        Command::Saliency {
            checkpoint,
            lambdas,
            count,
            width,
            out_dir,
        } => {
            let res = cmd_saliency(
                &checkpoint,
                &parse_values(&lambdas)?,
                count,
                width,
                &out_dir,
            )?;
            println!(
                "{} images written to {}",
                res.files.len(),
                out_dir.display()
            );
            for (l, a) in res.alignment {
                println!("lambda {l}: mean alignment {a:.4}");
            }
        }
        Command::StatsExport { checkpoint, out } => {
            for s in cmd_stats_export(&checkpoint, &out)? {
                println!(
                    "layer {} width {}: |mean_c - mean_a| = {:.6}",
                    s.layer, s.width, s.distance
                );
            }
            println!("statistics written to {}", out.display());
        }
        Command::Flops { checkpoint, config } => {
            let spec = match (checkpoint, config) {
                (Some(p), _) => Checkpoint::<f32>::load(&p)?.model.spec().clone(),
                (None, Some(p)) => config_spec(&RunConfig::load(&p)?)?,
                (None, None) => config_spec(&RunConfig::default())?,
            };
            print!("{}", flops_table(&spec)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.kind());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
