use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fracdil_cli::ablation::{ablation, SUMMARY_HEADER};
use fracdil_cli::commands::{export_csv, gen_data, gradcheck, gradcheck_csv, write};
use fracdil_cli::train::{eval_checkpoint, train, TrainOptions, METRICS_HEADER};
use fracdil_cli::{CliError, CliResult, RunConfig};

#[derive(Parser)]
#[command(name = "fracdil", version, about = "Learnable fractional dilated convolutions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (dataset directory for gen-data).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides train.seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    deterministic: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic dataset as FDSEG1 files plus split manifests.
    GenData(Common),
    /// Train a network; writes metrics.csv, dilation_trace.csv and a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from this checkpoint, appending to the existing CSVs.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop and checkpoint after this many completed iterations.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Evaluate a checkpoint on a split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// train, val or test; overrides eval_split.
        #[arg(long)]
        split: Option<String>,
    },
    /// Compare analytic gradients against central finite differences.
    Gradcheck(Common),
    /// Write the learned dilations of a checkpoint as CSV.
    ExportDilations {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train fixed and learned dilation variants for every ablation seed.
    Ablation(Common),
}

fn load(common: &Common) -> CliResult<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    cfg.deterministic |= common.deterministic;
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenData(common) => {
            let mut cfg = load(&common)?;
            if let Some(out) = common.out {
                cfg.data.dir = out;
            }
            let n = gen_data(&cfg)?;
            println!("wrote {n} scenes to {}", cfg.data.dir.display());
        }
        Command::Train {
            common,
            resume,
            stop_after,
        } => {
            let cfg = load(&common)?;
            let out = train(&cfg, &TrainOptions { resume, stop_after, quiet: false })?;
            println!("trained {} iterations; checkpoint {}", out.iter, out.checkpoint.display());
        }
        Command::Eval {
            common,
            checkpoint,
            split,
        } => {
            let mut cfg = load(&common)?;
            if let Some(split) = split {
                cfg.eval_split = split;
                cfg.validate()?;
            }
            let (_, row) = eval_checkpoint(&cfg, &checkpoint)?;
            let text = format!("{METRICS_HEADER}\n{row}\n");
            print!("{text}");
            if common.out.is_some() {
                write(&cfg.out_dir.join(format!("eval_{}.csv", cfg.eval_split)), &text)?;
            }
        }
        Command::Gradcheck(common) => {
            let cfg = load(&common)?;
            let reports = gradcheck(&cfg)?;
            for (name, r) in &reports {
                println!("== {name}\n{r}");
            }
            write(&cfg.out_dir.join("gradcheck.csv"), &gradcheck_csv(&reports))?;
            let failed = reports.iter().filter(|(_, r)| !r.pass).count();
            if failed > 0 {
                return Err(CliError::Runtime(format!(
                    "{failed} of {} configurations exceed tolerance {}",
                    reports.len(),
                    cfg.gradcheck.tolerance
                )));
            }
        }
        Command::ExportDilations { common, checkpoint } => {
            let text = export_csv(&checkpoint)?;
            match &common.out {
                Some(dir) => write(&dir.join("dilations.csv"), &text)?,
                None => print!("{text}"),
            }
        }
        Command::Ablation(common) => {
            let cfg = load(&common)?;
            let rows = ablation(&cfg, false)?;
            println!("{SUMMARY_HEADER}");
            for r in rows {
                println!("{}", r.csv());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
