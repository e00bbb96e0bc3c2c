//! Subcommand implementations behind the `despeckle` binary.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use despeckle_core::dataset::{DatasetManifest, DatasetSpec, MANIFEST_FILE};
use despeckle_core::denoiser::{load_checkpoint, load_model, Denoiser, TrainConfig, Trainer};
use despeckle_core::kv::KvDoc;
use despeckle_core::metrics::{
    csv_field, evaluate_image, foreground_from_target, metrics_csv, summarize, ImageMetrics, RoiOptions,
};
use despeckle_core::pgm::write_pgm;
use despeckle_core::rng::{derive_seed, label_hash};
use despeckle_core::sde::Schedule;
use despeckle_core::simulator::SimConfig;
use despeckle_core::uncertainty::{
    ensemble_outputs, ensemble_stats, fold_members, kfold_split, EnsembleReport, EnsembleSeeds, ImageRecord,
};
use despeckle_core::{read_tensor, write_tensor, Error, ImageGrid, Result};

fn manifest_dir(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.to_path_buf()
    } else {
        path.parent().map(Path::to_path_buf).unwrap_or_default()
    }
}

/// Generates phantoms, augments them, simulates their B-mode
/// observations and writes tensors plus `manifest.txt` into `out`.
/// `config` holds simulator and dataset keys.
pub fn cmd_simulate(config: &KvDoc, out: &Path) -> Result<DatasetManifest> {
    let cfg = SimConfig::from_kv(config)?;
    let spec = DatasetSpec::from_kv(config)?;
    let samples = spec.generate(&cfg)?;
    let named: Vec<_> = samples
        .into_iter()
        .enumerate()
        .map(|(i, s)| (spec.sample_id(i), s))
        .collect();
    let mut echo = cfg.to_kv();
    spec.write_kv(&mut echo);
    DatasetManifest::write(out, echo, &named)
}

/// Options for [`cmd_train`] beyond the config file.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Train one model per fold on the other folds, into `fold<k>/`.
    pub folds: Option<usize>,
    /// Continue from a checkpoint already in the output directory.
    pub resume: bool,
}

/// Trains on every pair of the manifest (or fold-wise) and writes
/// checkpoints. Returns the checkpoint directories.
pub fn cmd_train(
    manifest: &Path,
    config: TrainConfig,
    sched: &Schedule,
    out: &Path,
    opts: &TrainOptions,
) -> Result<Vec<PathBuf>> {
    let m = DatasetManifest::load(manifest)?;
    let pairs = m.read_pairs(&manifest_dir(manifest))?;
    let data: Vec<(ImageGrid, ImageGrid)> = pairs.iter().map(|(_, h, l)| (h.clone(), l.clone())).collect();
    match opts.folds {
        None => {
            train_into(&data, config, sched, out, opts.resume)?;
            Ok(vec![out.to_path_buf()])
        }
        Some(k) => {
            let assignment = kfold_split(data.len(), k, config.seed)?;
            std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
            let mut folds_csv = String::from("id,fold\n");
            for ((id, _, _), f) in pairs.iter().zip(&assignment) {
                writeln!(folds_csv, "{},{f}", csv_field(id)).unwrap();
            }
            write_text(&out.join("folds.csv"), &folds_csv)?;
            let mut dirs = Vec::with_capacity(k);
            for f in 0..k {
                let (_, train_idx) = fold_members(&assignment, f);
                let subset: Vec<_> = train_idx.iter().map(|&i| data[i].clone()).collect();
                let dir = out.join(format!("fold{f}"));
                let cfg = TrainConfig {
                    seed: derive_seed(config.seed, f as u64),
                    ..config
                };
                train_into(&subset, cfg, sched, &dir, opts.resume)?;
                dirs.push(dir);
            }
            Ok(dirs)
        }
    }
}

fn train_into(
    data: &[(ImageGrid, ImageGrid)],
    config: TrainConfig,
    sched: &Schedule,
    dir: &Path,
    resume: bool,
) -> Result<Trainer> {
    let mut trainer = if resume && dir.join("manifest.txt").exists() {
        let mut t = load_checkpoint(dir)?;
        if t.sched != *sched {
            return Err(Error::Config(format!(
                "{}: checkpoint schedule differs from the requested one",
                dir.display()
            )));
        }
        t.config.iterations = config.iterations;
        t
    } else {
        Trainer::new(config, sched.clone())?
    };
    trainer.run(data, Some(dir))?;
    Ok(trainer)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Where [`cmd_despeckle`] reads observations from.
#[derive(Debug, Clone)]
pub enum Inputs {
    /// The LQ image of every manifest entry, keyed by sample id.
    Manifest(PathBuf),
    /// Tensor files keyed by file stem.
    Files(Vec<PathBuf>),
}

impl Inputs {
    pub fn load(&self) -> Result<Vec<(String, ImageGrid)>> {
        match self {
            Inputs::Manifest(path) => {
                let m = DatasetManifest::load(path)?;
                let base = manifest_dir(path);
                m.entries
                    .iter()
                    .map(|e| Ok((e.id.clone(), read_tensor(base.join(&e.lq))?)))
                    .collect()
            }
            Inputs::Files(files) => {
                let mut seen = HashSet::new();
                files
                    .iter()
                    .map(|f| {
                        let id = f
                            .file_stem()
                            .map(|s| s.to_string_lossy().into_owned())
                            .ok_or_else(|| Error::invalid(format!("{}: no file name", f.display())))?;
                        if !seen.insert(id.clone()) {
                            return Err(Error::invalid(format!("duplicate input id `{id}`")));
                        }
                        Ok((id, read_tensor(f)?))
                    })
                    .collect()
            }
        }
    }
}

pub fn load_models(checkpoints: &[PathBuf]) -> Result<Vec<Denoiser>> {
    if checkpoints.is_empty() {
        return Err(Error::invalid("at least one checkpoint is required"));
    }
    let models = checkpoints.iter().map(|c| load_model(c)).collect::<Result<Vec<_>>>()?;
    if models.iter().any(|m| m.sched != models[0].sched) {
        return Err(Error::Config(
            "checkpoints were trained with different schedules".into(),
        ));
    }
    Ok(models)
}

/// Sampling seed base for one image: independent of processing order.
pub fn image_seed(seed: u64, id: &str) -> u64 {
    derive_seed(seed, label_hash(id))
}

/// One timing row of [`cmd_despeckle`].
#[derive(Debug, Clone, PartialEq)]
pub struct Timing {
    pub id: String,
    pub steps: usize,
    pub seconds: f64,
}

/// Restores every input with the (ensemble-mean of the) checkpoints and
/// writes `<id>.irsd`, `<id>.pgm` and `timing.csv` into `out`.
pub fn cmd_despeckle(
    checkpoints: &[PathBuf],
    inputs: &Inputs,
    steps: Option<usize>,
    seed: u64,
    out: &Path,
) -> Result<Vec<Timing>> {
    let models = load_models(checkpoints)?;
    let sched = models[0].sched.clone();
    let steps = steps.unwrap_or(sched.steps());
    let images = inputs.load()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut timings = Vec::with_capacity(images.len());
    for (id, lq) in &images {
        let start = Instant::now();
        let outputs = ensemble_outputs(
            lq,
            &models,
            &sched,
            steps,
            EnsembleSeeds::Independent(image_seed(seed, id)),
        )?;
        let (mean, _) = ensemble_stats(&outputs)?;
        let seconds = start.elapsed().as_secs_f64();
        write_tensor(out.join(format!("{id}.irsd")), &mean)?;
        write_pgm(out.join(format!("{id}.pgm")), &mean)?;
        timings.push(Timing {
            id: id.clone(),
            steps,
            seconds,
        });
    }
    let mut csv = String::from("id,steps,seconds\n");
    for t in &timings {
        writeln!(csv, "{},{},{}", csv_field(&t.id), t.steps, t.seconds).unwrap();
    }
    write_text(&out.join("timing.csv"), &csv)?;
    Ok(timings)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    /// Derive a foreground mask from each HQ target and report the
    /// reference-less metrics.
    pub foreground: bool,
    pub roi: RoiOptions,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            foreground: true,
            roi: RoiOptions::default(),
        }
    }
}

fn evaluate_pairs(pairs: &[(String, ImageGrid, ImageGrid)], opts: &EvalOptions) -> Result<Vec<ImageMetrics>> {
    pairs
        .iter()
        .map(|(id, out, hq)| {
            let fg = if opts.foreground {
                foreground_from_target(hq)
            } else {
                None
            };
            evaluate_image(id, out, hq, fg.as_ref(), &opts.roi)
        })
        .collect()
}

/// Scores `<outputs>/<id>.irsd` against each manifest entry's HQ target.
/// With `outputs = None` the manifest's own LQ images are scored.
pub fn cmd_evaluate(manifest: &Path, outputs: Option<&Path>, opts: &EvalOptions) -> Result<Vec<ImageMetrics>> {
    let m = DatasetManifest::load(manifest)?;
    let base = manifest_dir(manifest);
    let missing: Vec<&str> = match outputs {
        Some(dir) => m
            .entries
            .iter()
            .filter(|e| !dir.join(format!("{}.irsd", e.id)).exists())
            .map(|e| e.id.as_str())
            .collect(),
        None => Vec::new(),
    };
    if !missing.is_empty() {
        return Err(Error::invalid(format!("no output for ids: {}", missing.join(" "))));
    }
    let pairs = m
        .entries
        .iter()
        .map(|e| {
            let out = match outputs {
                Some(dir) => read_tensor(dir.join(format!("{}.irsd", e.id)))?,
                None => read_tensor(base.join(&e.lq))?,
            };
            Ok((e.id.clone(), out, read_tensor(base.join(&e.hq))?))
        })
        .collect::<Result<Vec<_>>>()?;
    evaluate_pairs(&pairs, opts)
}

/// Mean and standard deviation of every metric over one probe's test set.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSummary {
    pub probe: String,
    pub count: usize,
    pub mean: [f64; 7],
    pub std: [f64; 7],
}

/// Despeckles each manifest's LQ images with the checkpoints and
/// summarizes the metrics per probe, one row per manifest.
pub fn cmd_cross_probe(
    checkpoints: &[PathBuf],
    manifests: &[PathBuf],
    steps: Option<usize>,
    seed: u64,
    opts: &EvalOptions,
) -> Result<Vec<ProbeSummary>> {
    let models = load_models(checkpoints)?;
    let sched = models[0].sched.clone();
    let steps = steps.unwrap_or(sched.steps());
    manifests
        .iter()
        .map(|path| {
            let m = DatasetManifest::load(path)?;
            let pairs = m.read_pairs(&manifest_dir(path))?;
            let restored = pairs
                .iter()
                .map(|(id, hq, lq)| {
                    let outs = ensemble_outputs(
                        lq,
                        &models,
                        &sched,
                        steps,
                        EnsembleSeeds::Independent(image_seed(seed, id)),
                    )?;
                    Ok((id.clone(), ensemble_stats(&outs)?.0, hq.clone()))
                })
                .collect::<Result<Vec<_>>>()?;
            let rows = evaluate_pairs(&restored, opts)?;
            let (mean, std) = summarize(&rows);
            let mut probes: Vec<&str> = m.entries.iter().map(|e| e.probe.as_str()).collect();
            probes.dedup();
            Ok(ProbeSummary {
                probe: probes.join("+"),
                count: rows.len(),
                mean,
                std,
            })
        })
        .collect()
}

pub fn cross_probe_csv(rows: &[ProbeSummary]) -> String {
    let names = ["psnr", "ssim", "mse", "cnr", "cnr_db", "enl", "snr_db"];
    let mut header = vec!["probe".to_string(), "n".to_string()];
    for n in names {
        header.push(format!("{n}_mean"));
        header.push(format!("{n}_std"));
    }
    let mut out = header.join(",") + "\n";
    for r in rows {
        let mut cols = vec![csv_field(&r.probe), r.count.to_string()];
        for k in 0..7 {
            cols.push(r.mean[k].to_string());
            cols.push(r.std[k].to_string());
        }
        writeln!(out, "{}", cols.join(",")).unwrap();
    }
    out
}

/// Ensemble mean and variance for every manifest entry, the
/// variance-versus-error analysis, and its files in `out`.
pub fn cmd_uncertainty(
    checkpoints: &[PathBuf],
    manifest: &Path,
    steps: Option<usize>,
    seed: u64,
    foreground_only: bool,
    out: &Path,
) -> Result<EnsembleReport> {
    if checkpoints.len() < 2 {
        return Err(Error::invalid(format!(
            "uncertainty needs at least 2 checkpoints, got {}",
            checkpoints.len()
        )));
    }
    let models = load_models(checkpoints)?;
    let sched = models[0].sched.clone();
    let steps = steps.unwrap_or(sched.steps());
    let m = DatasetManifest::load(manifest)?;
    let pairs = m.read_pairs(&manifest_dir(manifest))?;
    let records = pairs
        .iter()
        .map(|(id, hq, lq)| {
            let outs = ensemble_outputs(
                lq,
                &models,
                &sched,
                steps,
                EnsembleSeeds::Independent(image_seed(seed, id)),
            )?;
            let (mean, var) = ensemble_stats(&outs)?;
            let fg = if foreground_only {
                foreground_from_target(hq)
            } else {
                None
            };
            ImageRecord::new(id, mean, var, hq, fg.as_ref())
        })
        .collect::<Result<Vec<_>>>()?;
    let report = EnsembleReport::from_records(records)?;
    report.write(out)?;
    Ok(report)
}

/// Writes the per-image metrics table.
pub fn write_metrics(path: &Path, rows: &[ImageMetrics]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_text(path, &metrics_csv(rows))
}

/// Manifest path inside a dataset directory.
pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join(MANIFEST_FILE)
}
