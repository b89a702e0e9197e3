use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use faar_core::backbone::load_or_build;
use faar_core::bench::{delta_m, export_dataset, Dataset, SceneConfig};
use faar_core::error::{Error, Result};
use faar_core::harness::{self, load_checkpoint, RunConfig, Switch, Trainer};

#[derive(Parser)]
#[command(name = "faar", version, about = "Multi-task low-rank fine-tuning with rank shrinking")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train from a TOML run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint on its eval split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Summaries and plots from run logs.
    Report {
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long)]
        svg: bool,
    },
    /// Run the on/off matrix of the given switches.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated subset of pdrs,dora,tspd,xtcons.
        #[arg(long, default_value = "")]
        switches: String,
    },
    /// Write generated scenes as raw arrays.
    ExportData {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Train { config, out, resume } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(out) = out {
                cfg.out_dir = out;
            }
            let rec = harness::train(&cfg, resume)?;
            if let Some(last) = rec.last() {
                println!(
                    "epoch {} metrics {:?} trainable_params {} delta_m {}",
                    last.epoch,
                    last.metrics,
                    last.trainable_params,
                    last.delta_m.map(|v| format!("{v:.4}")).unwrap_or_else(|| "n/a".into())
                );
            }
        }
        Cmd::Eval { checkpoint } => {
            if !checkpoint.exists() {
                return Err(Error::MissingArtifacts(vec![checkpoint.display().to_string()]));
            }
            let ck = load_checkpoint(&checkpoint)?;
            let cfg = ck.config.clone();
            let dir = checkpoint.parent().map(PathBuf::from).unwrap_or_default();
            let bb = load_or_build(&cfg.backbone, &dir.join(harness::TRUNK_FILE))?;
            let trainer = Trainer::from_checkpoint(&cfg, bb, ck)?;
            let metrics = trainer.evaluate()?;
            for (t, m) in cfg.tasks.iter().zip(&metrics) {
                println!("{}\t{m}", t.name);
            }
            println!("trainable_params\t{}", trainer.model.trainable_params());
            if let Some(r) = &cfg.reference {
                println!("delta_m\t{}", delta_m(&metrics, r, &cfg.lower_is_better())?);
            }
        }
        Cmd::Report { run_dir, svg } => {
            let art = harness::report(&run_dir, svg)?;
            for f in &art.files {
                println!("{}", f.display());
            }
        }
        Cmd::Ablate { config, switches } => {
            let cfg = RunConfig::load(&config)?;
            let sw = Switch::parse_list(&switches)?;
            for row in harness::ablate(&cfg, &sw)? {
                println!(
                    "{}\t{}\t{}\t{}",
                    row.label,
                    &row.hash[..12],
                    row.trainable_params,
                    row.delta_m.map(|v| format!("{v:.4}")).unwrap_or_else(|| "n/a".into())
                );
            }
        }
        Cmd::ExportData { seed, count, out, size } => {
            let cfg = SceneConfig {
                height: size,
                width: size,
                ..SceneConfig::default()
            };
            cfg.validate()?;
            let ds = Dataset::generate(seed, 0, count, &cfg);
            for f in export_dataset(&ds, &out)? {
                println!("{}", f.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
