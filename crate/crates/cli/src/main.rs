use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use despeckle_cli::{
    cmd_cross_probe, cmd_despeckle, cmd_evaluate, cmd_simulate, cmd_train, cmd_uncertainty, cross_probe_csv,
    write_metrics, EvalOptions, Inputs, TrainOptions,
};
use despeckle_core::denoiser::TrainConfig;
use despeckle_core::kv::KvDoc;
use despeckle_core::metrics::RoiOptions;
use despeckle_core::sde::Schedule;
use despeckle_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "despeckle",
    version,
    about = "Simulate, train, despeckle and evaluate ultrasound images"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Root seed for every random draw.
    #[arg(long)]
    seed: Option<u64>,
    /// `key=value` configuration file; flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (or CSV file for `evaluate`).
    #[arg(long)]
    out: PathBuf,
}

impl Common {
    fn doc(&self) -> Result<KvDoc> {
        let mut doc = match &self.config {
            Some(path) => KvDoc::load(path)?,
            None => KvDoc::new(),
        };
        if let Some(seed) = self.seed {
            doc.set("seed", seed);
        }
        Ok(doc)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a paired HQ/LQ dataset.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        size: Option<usize>,
        /// Probe preset (L11-5v, L12-3v, C5-2v, P4-2v).
        #[arg(long)]
        probe: Option<String>,
        /// Comma-separated phantom kinds.
        #[arg(long)]
        phantoms: Option<String>,
        /// Comma-separated augmentations applied to every target.
        #[arg(long)]
        augment: Option<String>,
    },
    /// Train the noise predictor on a dataset.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        iterations: Option<usize>,
        /// l1 or l2.
        #[arg(long)]
        loss: Option<String>,
        /// Train one model per cross-validation fold.
        #[arg(long)]
        folds: Option<usize>,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Restore images with one checkpoint or the mean of several.
    Despeckle {
        #[command(flatten)]
        common: Common,
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        /// Dataset whose LQ images are restored.
        #[arg(long, conflicts_with = "inputs")]
        manifest: Option<PathBuf>,
        /// Tensor files to restore.
        inputs: Vec<PathBuf>,
        /// Reverse steps (defaults to the schedule length).
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Score restored images against their targets.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long = "manifest", required = true)]
        manifests: Vec<PathBuf>,
        /// Directory of `<id>.irsd` outputs; omit to score the LQ inputs.
        #[arg(long)]
        outputs: Option<PathBuf>,
        /// Skip the reference-less metrics.
        #[arg(long)]
        no_foreground: bool,
        /// Despeckle every manifest with the checkpoints and write one
        /// summary row per probe.
        #[arg(long, requires = "checkpoints")]
        cross_probe: bool,
        #[arg(long = "checkpoint")]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Ensemble variance maps and the variance-error correlation.
    Uncertainty {
        #[command(flatten)]
        common: Common,
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        /// Average variance over the target's foreground only.
        #[arg(long)]
        foreground_only: bool,
    },
}

fn set_opt(doc: &mut KvDoc, key: &str, value: Option<impl ToString>) {
    if let Some(v) = value {
        doc.set(key, v);
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn eval_options(doc: &KvDoc, no_foreground: bool) -> Result<EvalOptions> {
    let d = RoiOptions::default();
    Ok(EvalOptions {
        foreground: !no_foreground,
        roi: RoiOptions {
            patch_size: doc.parsed_or("patch_size", d.patch_size)?,
            count: doc.parsed_or("patch_count", d.count)?,
            alpha: doc.parsed_or("alpha", d.alpha)?,
            margin: doc.parsed_or("margin", d.margin)?,
        },
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate {
            common,
            count,
            size,
            probe,
            phantoms,
            augment,
        } => {
            let mut doc = common.doc()?;
            set_opt(&mut doc, "count", count);
            set_opt(&mut doc, "size", size);
            set_opt(&mut doc, "preset", probe);
            set_opt(&mut doc, "phantoms", phantoms);
            set_opt(&mut doc, "augment", augment);
            let m = cmd_simulate(&doc, &common.out)?;
            println!("wrote {} pairs to {}", m.entries.len(), common.out.display());
        }
        Command::Train {
            common,
            manifest,
            iterations,
            loss,
            folds,
            resume,
        } => {
            let mut doc = common.doc()?;
            set_opt(&mut doc, "iterations", iterations);
            set_opt(&mut doc, "loss", loss);
            let config = TrainConfig::from_kv(&doc)?;
            let sched = Schedule::from_kv(&doc)?;
            let dirs = cmd_train(&manifest, config, &sched, &common.out, &TrainOptions { folds, resume })?;
            for d in dirs {
                println!("checkpoint {}", d.display());
            }
        }
        Command::Despeckle {
            common,
            checkpoints,
            manifest,
            inputs,
            steps,
        } => {
            let doc = common.doc()?;
            let steps = steps.or(doc.parsed("steps")?);
            let inputs = match manifest {
                Some(m) => Inputs::Manifest(m),
                None if !inputs.is_empty() => Inputs::Files(inputs),
                None => return Err(Error::invalid("give --manifest or input tensor files")),
            };
            let seed = doc.parsed_or("seed", 0)?;
            let t = cmd_despeckle(&checkpoints, &inputs, steps, seed, &common.out)?;
            println!("restored {} images into {}", t.len(), common.out.display());
        }
        Command::Evaluate {
            common,
            manifests,
            outputs,
            no_foreground,
            cross_probe,
            checkpoints,
            steps,
        } => {
            let doc = common.doc()?;
            let opts = eval_options(&doc, no_foreground)?;
            if cross_probe {
                let seed = doc.parsed_or("seed", 0)?;
                let steps = steps.or(doc.parsed("steps")?);
                let rows = cmd_cross_probe(&checkpoints, &manifests, steps, seed, &opts)?;
                write_file(&common.out, &cross_probe_csv(&rows))?;
            } else {
                if manifests.len() != 1 {
                    return Err(Error::invalid(
                        "evaluate takes one --manifest unless --cross-probe is set",
                    ));
                }
                let rows = cmd_evaluate(&manifests[0], outputs.as_deref(), &opts)?;
                write_metrics(&common.out, &rows)?;
            }
            println!("wrote {}", common.out.display());
        }
        Command::Uncertainty {
            common,
            checkpoints,
            manifest,
            steps,
            foreground_only,
        } => {
            let doc = common.doc()?;
            let seed = doc.parsed_or("seed", 0)?;
            let steps = steps.or(doc.parsed("steps")?);
            let report = cmd_uncertainty(&checkpoints, &manifest, steps, seed, foreground_only, &common.out)?;
            println!("r={}, slope={}, intercept={}", report.r, report.slope, report.intercept);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
