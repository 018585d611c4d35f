//! `dfbpath`: tissue masks, DfB maps, patch manifests, training and
//! evaluation from the command line.
//!
//! Exit codes: 0 success, 1 other failure (including a locked work
//! directory), 2 missing input, 3 invalid configuration, 4 invariant
//! violation inside a pipeline stage.

mod commands;
mod config;
mod workdir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dfbpath::model::FusionMode;

use crate::config::RunConfig;
use crate::workdir::{Failure, Workdir};

#[derive(Parser, Debug)]
#[command(name = "dfbpath", version, about = "Distance-from-boundary priors for patch-based pathology segmentation")]
struct Cli {
    /// Work directory for all inputs and outputs.
    #[arg(long, global = true, env = "DFBPATH_WORKDIR", default_value = ".")]
    workdir: PathBuf,
    /// Flat JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Segment tissue on every slide of the manifest.
    Mask,
    /// Distance transform of every tissue mask.
    Dfb,
    /// Cut labelled slides into single-class patches and assign folds.
    Tile,
    /// Generate a synthetic slide set.
    Synth,
    /// Train one fold of one fusion mode.
    Train {
        #[arg(long)]
        mode: Option<FusionMode>,
        /// Baseline checkpoint to start a DfB model from.
        #[arg(long)]
        transfer_from: Option<PathBuf>,
        #[arg(long)]
        fold: Option<usize>,
    },
    /// Score prediction files.
    Eval {
        #[arg(long, required = true, num_args = 1..)]
        predictions: Vec<PathBuf>,
        /// Patch manifest whose labels the predictions must agree with.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Output directory (default `<workdir>/eval`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Stitch per-patch predictions into slide-level label maps.
    Predmap {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Only this slide.
        #[arg(long)]
        slide: Option<String>,
    },
    /// DfB histograms, recall-by-distance curves and normalised confusion.
    Analyze {
        #[arg(long)]
        predictions: PathBuf,
        /// Curve to subtract from the recall curve of `predictions`.
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
}

impl Cmd {
    fn name(&self) -> &'static str {
        match self {
            Cmd::Mask => "mask",
            Cmd::Dfb => "dfb",
            Cmd::Tile => "tile",
            Cmd::Synth => "synth",
            Cmd::Train { .. } => "train",
            Cmd::Eval { .. } => "eval",
            Cmd::Predmap { .. } => "predmap",
            Cmd::Analyze { .. } => "analyze",
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = std::fs::read(p).map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => Failure::missing(format!("config {} not found", p.display())),
                _ => Failure::config(format!("{}: {e}", p.display())),
            })?;
            serde_json::from_slice(&text).map_err(|e| Failure::config(format!("{}: {e}", p.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Cmd::Train { mode, fold, .. } = &cli.cmd {
        if let Some(m) = mode {
            cfg.mode = *m;
        }
        if let Some(f) = fold {
            cfg.fold = *f;
        }
    }
    cfg.validate().map_err(Failure::config)?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = load_config(&cli)?;
    let wd = Workdir::open(&cli.workdir)?;
    let _lock = wd.lock()?;
    let mut extra = serde_json::Map::new();
    match &cli.cmd {
        Cmd::Mask => commands::mask(&wd, &cfg)?,
        Cmd::Dfb => commands::dfb(&wd, &cfg)?,
        Cmd::Tile => commands::tile(&wd, &cfg)?,
        Cmd::Synth => commands::synth(&wd, &cfg)?,
        Cmd::Train { transfer_from, .. } => {
            if let Some(p) = transfer_from {
                extra.insert("transfer_from_sha256".into(), workdir::file_digest(p)?.into());
            }
            commands::train(&wd, &cfg, transfer_from.as_deref())?
        }
        Cmd::Eval { predictions, manifest, out } => {
            commands::eval(&wd, predictions, manifest.as_deref(), out.as_deref())?
        }
        Cmd::Predmap { checkpoint, slide } => {
            extra.insert("checkpoint_sha256".into(), workdir::file_digest(checkpoint)?.into());
            commands::predmap(&wd, &cfg, checkpoint, slide.as_deref())?
        }
        Cmd::Analyze { predictions, baseline } => commands::analyze(&wd, &cfg, predictions, baseline.as_deref())?,
    }
    wd.write_provenance(cli.cmd.name(), &cfg, extra)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("dfbpath: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
