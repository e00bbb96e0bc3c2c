//! Checkpoint directories: `manifest.txt` (configs plus one record per
//! parameter block), flat tensor files for parameters and Adam moments, and
//! `loss.csv`.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::kv::{record_get, KvDoc};
use crate::sde::Schedule;
use crate::tensor::Tensor;

use super::{Adam, Denoiser, Model, TrainConfig, Trainer};

pub type Checkpoint = Trainer;

const MANIFEST: &str = "manifest.txt";
const PARAMS: &str = "params.irsd";
const ADAM_M: &str = "adam_m.irsd";
const ADAM_V: &str = "adam_v.irsd";
const LOSS: &str = "loss.csv";

fn shape_text(shape: &[usize]) -> String {
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

pub fn save_checkpoint(dir: &Path, trainer: &Trainer) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut doc = trainer.sched.to_kv();
    doc.set("iteration", trainer.iteration);
    doc.set("adam_step", trainer.adam.step);
    trainer.config.write_kv(&mut doc);
    doc.set("num_params", trainer.model.num_params());
    for spec in trainer.model.param_specs() {
        doc.records.push(vec![
            ("param".into(), spec.name.clone()),
            ("shape".into(), shape_text(&spec.shape)),
            ("offset".into(), spec.offset.to_string()),
        ]);
    }
    doc.save(dir.join(MANIFEST))?;
    let n = trainer.model.num_params();
    Tensor::new(vec![n], trainer.model.params.clone())?.write(dir.join(PARAMS))?;
    Tensor::new(vec![n], trainer.adam.m.clone())?.write(dir.join(ADAM_M))?;
    Tensor::new(vec![n], trainer.adam.v.clone())?.write(dir.join(ADAM_V))?;
    write_loss_csv(&dir.join(LOSS), &trainer.losses)
}

pub fn write_loss_csv(path: &Path, losses: &[f64]) -> Result<()> {
    let mut text = String::from("iteration,loss\n");
    for (i, l) in losses.iter().enumerate() {
        writeln!(text, "{},{}", i + 1, l).expect("write to string");
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_loss_csv(path: &Path) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split(',')
                .nth(1)
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| Error::Config(format!("{}: bad loss row `{l}`", path.display())))
        })
        .collect()
}

fn read_flat(path: &Path, n: usize) -> Result<Vec<f32>> {
    let t = Tensor::read(path)?;
    if t.dims != [n] {
        return Err(Error::Config(format!(
            "{}: expected {n} values, found dims {:?}",
            path.display(),
            t.dims
        )));
    }
    Ok(t.data)
}

fn model_from(doc: &KvDoc, dir: &Path, config: &TrainConfig) -> Result<Model> {
    let mut model = Model::new(config.network, &mut crate::rng::Rng::new(0))?;
    let n = model.num_params();
    let declared: usize = doc.parsed_or("num_params", n)?;
    if declared != n {
        return Err(Error::Config(format!(
            "checkpoint declares {declared} parameters, architecture has {n}"
        )));
    }
    for (rec, spec) in doc.records.iter().zip(model.param_specs()) {
        if record_get(rec, "param") != Some(spec.name.as_str())
            || record_get(rec, "shape") != Some(shape_text(&spec.shape).as_str())
        {
            return Err(Error::Config(format!(
                "checkpoint parameter table does not match `{}`",
                spec.name
            )));
        }
    }
    model.set_params(read_flat(&dir.join(PARAMS), n)?)?;
    Ok(model)
}

/// Restores the full training state for resumption.
pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let doc = KvDoc::load(dir.join(MANIFEST))?;
    let config = TrainConfig::from_kv(&doc)?;
    let sched = Schedule::from_kv(&doc)?;
    let model = model_from(&doc, dir, &config)?;
    let n = model.num_params();
    let adam = Adam {
        config: config.adam,
        step: doc.parsed_or("adam_step", 0)?,
        m: read_flat(&dir.join(ADAM_M), n)?,
        v: read_flat(&dir.join(ADAM_V), n)?,
    };
    let iteration: usize = doc.parsed_or("iteration", 0)?;
    let losses = read_loss_csv(&dir.join(LOSS))?;
    if losses.len() != iteration {
        return Err(Error::Config(format!(
            "loss curve has {} rows but checkpoint is at iteration {iteration}",
            losses.len()
        )));
    }
    Ok(Trainer {
        config,
        sched,
        model,
        adam,
        iteration,
        losses,
    })
}

/// The trained network for inference.
pub fn load_model(dir: &Path) -> Result<Denoiser> {
    let doc = KvDoc::load(dir.join(MANIFEST))?;
    let config = TrainConfig::from_kv(&doc)?;
    Ok(Denoiser {
        net: model_from(&doc, dir, &config)?,
        sched: Schedule::from_kv(&doc)?,
        parameterization: config.parameterization,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::UNetConfig;
    use crate::grid::ImageGrid;

    #[test]
    fn resume_matches_uninterrupted_run() {
        let sched = Schedule::with_default_theta(20, 0.5).unwrap();
        let cfg = TrainConfig {
            iterations: 4,
            batch_size: 1,
            network: UNetConfig {
                base_channels: 8,
                time_dim: 8,
                emb_dim: 8,
            },
            seed: 9,
            checkpoint_every: 2,
            ..Default::default()
        };
        let hq = ImageGrid::from_fn(8, 8, |r, _| r as f32 / 8.0);
        let lq = hq.map(|v| 0.5 * v + 0.2);
        let data = vec![(hq, lq)];

        let full = crate::denoiser::train(&data, &sched, cfg, None).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let mut half = Trainer::new(TrainConfig { iterations: 2, ..cfg }, sched.clone()).unwrap();
        half.run(&data, Some(dir.path())).unwrap();
        let mut resumed = load_checkpoint(dir.path()).unwrap();
        assert_eq!(resumed.iteration, 2);
        resumed.config.iterations = 4;
        resumed.run(&data, None).unwrap();
        assert_eq!(resumed.losses, full.losses);
        assert_eq!(resumed.model.params, full.model.params);

        let d = load_model(dir.path()).unwrap();
        assert_eq!(d.sched, sched);
        assert_eq!(d.parameterization, cfg.parameterization);
        assert_eq!(d.net.params, half.model.params);
    }
}
