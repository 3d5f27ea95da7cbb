//! Command-line entry points.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::checkpoint::Checkpoint;
use crate::config::{SynthConfig, TrainConfig};
use crate::data::load_manifest;
use crate::error::{Error, Result};
use crate::synth::make_synthetic_dataset;
use crate::train::{evaluate_checkpoint, export_queries, predict, train};

#[derive(Debug, Parser)]
#[command(name = "mifag", version, about = "Multi-image guided 3D affordance grounding")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a procedural dataset.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model and write checkpoints and logs.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint; writes JSON plus `.txt` table and `.csv` siblings.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Write the PLY and CSV heatmap of one sample.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        sample: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dump per-layer query tokens as CSV.
    ExportQueries {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::Synth { config, out, seed } => {
            let cfg = SynthConfig::from_file(&config)?;
            let m = make_synthetic_dataset(&cfg, seed, &out)?;
            println!("wrote {} samples to {}", m.len(), out.display());
        }
        Command::Train { config, data, out } => {
            let cfg = TrainConfig::from_file(&config)?;
            let manifest = load_manifest(&data)?;
            let outcome = train(&cfg, &manifest, &out)?;
            println!(
                "trained {} steps, final loss {}",
                outcome.checkpoint.step,
                outcome.final_loss().map_or_else(|| "n/a".into(), |l| l.to_string())
            );
            if let Some(r) = &outcome.report {
                print!("{}", r.to_table());
            }
        }
        Command::Eval { checkpoint, data, report } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let manifest = load_manifest(&data)?;
            let r = evaluate_checkpoint(&ck, &manifest)?;
            write(&report, &r.to_json())?;
            write(&report.with_extension("txt"), &r.to_table())?;
            write(&report.with_extension("csv"), &r.to_csv())?;
            print!("{}", r.to_table());
        }
        Command::Predict {
            checkpoint,
            sample,
            data,
            out,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let manifest = load_manifest(&data)?;
            let (ply, csv) = predict(&ck, &manifest, &sample, &out)?;
            println!("wrote {} and {}", ply.display(), csv.display());
        }
        Command::ExportQueries { checkpoint, data, out } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let manifest = load_manifest(&data)?;
            let rows = export_queries(&ck, &manifest, &out)?;
            println!("wrote {rows} query rows to {}", out.display());
        }
    }
    Ok(())
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
