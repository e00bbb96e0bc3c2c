//! Time-conditioned noise predictor, its optimizer and training loop, and
//! sampling-based despeckling.

pub mod adam;
pub mod checkpoint;
pub mod layers;
pub mod scalar;
pub mod unet;

use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::grid::ImageGrid;
use crate::kv::KvDoc;
use crate::norm::{denormalize, normalize_pair, NormRecord};
use crate::rng::{derive_seed, Rng};
use crate::sde::{
    forward_sample_with_noise, reverse_sample, score_from_noise, terminal_sample, NoisePredictor, Schedule,
};

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{load_checkpoint, load_model, save_checkpoint, Checkpoint};
pub use layers::Act;
pub use scalar::Scalar;
pub use unet::{sinusoidal_embedding, UNet, UNetConfig};

/// The model used for training and inference.
pub type Model = UNet<f32>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    L1,
    L2,
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(LossKind::L1),
            "l2" => Ok(LossKind::L2),
            other => Err(Error::Config(format!("unknown loss `{other}` (expected l1 or l2)"))),
        }
    }
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::L1 => "l1",
            LossKind::L2 => "l2",
        }
    }
}

/// Mean absolute or squared error between true and predicted noise.
pub fn loss(eps: &ImageGrid, pred: &ImageGrid, kind: LossKind) -> Result<f64> {
    eps.ensure_same_shape(pred)?;
    Ok(loss_and_grad(eps.data(), pred.data(), kind).0)
}

/// Loss over all elements and its gradient with respect to `pred`.
pub fn loss_and_grad<S: Scalar, T: Scalar>(eps: &[T], pred: &[S], kind: LossKind) -> (f64, Vec<S>) {
    let n = pred.len() as f64;
    let mut total = 0.0;
    let grad = eps
        .iter()
        .zip(pred)
        .map(|(&e, &p)| {
            let d = p.f64() - e.f64();
            match kind {
                LossKind::L1 => {
                    total += d.abs();
                    S::of(if d > 0.0 {
                        1.0 / n
                    } else if d < 0.0 {
                        -1.0 / n
                    } else {
                        0.0
                    })
                }
                LossKind::L2 => {
                    total += d * d;
                    S::of(2.0 * d / n)
                }
            }
        })
        .collect();
    (total / n, grad)
}

/// How the network output becomes a noise estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parameterization {
    /// The network output is `ε̂` itself.
    Noise,
    /// `ε̂ = ((x_t − μ) − e^{−θ̄_t} f) / √v_t`: the network output `f`
    /// estimates `x_0 − μ` and the exact dependence of the noise on `x_t`
    /// is supplied analytically.
    Skip,
}

impl FromStr for Parameterization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noise" => Ok(Parameterization::Noise),
            "skip" => Ok(Parameterization::Skip),
            other => Err(Error::Config(format!(
                "unknown parameterization `{other}` (expected noise or skip)"
            ))),
        }
    }
}

impl Parameterization {
    pub fn name(self) -> &'static str {
        match self {
            Parameterization::Noise => "noise",
            Parameterization::Skip => "skip",
        }
    }

    /// `(a, b)` with `ε̂ = a (x_t − μ) + b f`.
    pub fn coefficients(self, sched: &Schedule, t: usize) -> (f64, f64) {
        match self {
            Parameterization::Noise => (0.0, 1.0),
            Parameterization::Skip => {
                let (decay, var) = sched.marginal_coefficients(t);
                let sd = var.sqrt();
                (1.0 / sd, -decay / sd)
            }
        }
    }
}

/// Composes raw outputs `f` (one plane per sample) into noise estimates,
/// evaluates the loss against `target`, and returns its gradient with
/// respect to `f`.
#[allow(clippy::too_many_arguments)]
pub fn skip_loss_and_grad(
    param: Parameterization,
    sched: &Schedule,
    ts: &[usize],
    xs: &[ImageGrid],
    mus: &[ImageGrid],
    f: &[f32],
    target: &[f32],
    kind: LossKind,
) -> (f64, Vec<f32>) {
    let plane = f.len() / ts.len();
    let coeffs: Vec<(f64, f64)> = ts.iter().map(|&t| param.coefficients(sched, t)).collect();
    let mut pred = f.to_vec();
    for (k, chunk) in pred.chunks_mut(plane).enumerate() {
        let (a, b) = coeffs[k];
        for ((p, &xv), &mv) in chunk.iter_mut().zip(xs[k].data()).zip(mus[k].data()) {
            *p = (a * (xv as f64 - mv as f64) + b * *p as f64) as f32;
        }
    }
    let (value, mut grad) = loss_and_grad(target, &pred, kind);
    for (k, chunk) in grad.chunks_mut(plane).enumerate() {
        let b = coeffs[k].1 as f32;
        chunk.iter_mut().for_each(|g| *g *= b);
    }
    (value, grad)
}

/// A network together with the schedule and parameterization it was
/// trained under.
#[derive(Debug, Clone)]
pub struct Denoiser {
    pub net: Model,
    pub sched: Schedule,
    pub parameterization: Parameterization,
}

impl NoisePredictor for Denoiser {
    fn predict(&self, x: &ImageGrid, mu: &ImageGrid, t: usize) -> Result<ImageGrid> {
        let f = self.net.predict(x, mu, t)?;
        if self.parameterization == Parameterization::Noise {
            return Ok(f);
        }
        let (a, b) = self.parameterization.coefficients(&self.sched, t);
        let mut out = f;
        for ((o, &xv), &mv) in out.data_mut().iter_mut().zip(x.data()).zip(mu.data()) {
            *o = (a * (xv as f64 - mv as f64) + b * *o as f64) as f32;
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Multiply the learning rate by `factor` every `every` iterations.
    pub lr_decay: Option<(usize, f64)>,
    pub loss: LossKind,
    pub parameterization: Parameterization,
    pub network: UNetConfig,
    /// Seed for initialization and every per-iteration draw.
    pub seed: u64,
    /// Checkpoint interval in iterations; 0 writes only the final state.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            batch_size: 4,
            adam: AdamConfig::default(),
            lr_decay: None,
            loss: LossKind::L1,
            parameterization: Parameterization::Skip,
            network: UNetConfig::default(),
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn lr_at(&self, iteration: usize) -> f64 {
        match self.lr_decay {
            Some((every, factor)) if every > 0 => self.adam.lr * factor.powi((iteration / every) as i32),
            _ => self.adam.lr,
        }
    }

    pub fn write_kv(&self, doc: &mut KvDoc) {
        doc.set("iterations", self.iterations);
        doc.set("batch_size", self.batch_size);
        doc.set("lr", self.adam.lr);
        doc.set("beta1", self.adam.beta1);
        doc.set("beta2", self.adam.beta2);
        doc.set("adam_eps", self.adam.eps);
        doc.set("weight_decay", self.adam.weight_decay);
        if let Some((every, factor)) = self.lr_decay {
            doc.set("lr_decay_every", every);
            doc.set("lr_decay_factor", factor);
        }
        doc.set("loss", self.loss.name());
        doc.set("parameterization", self.parameterization.name());
        doc.set("seed", self.seed);
        doc.set("checkpoint_every", self.checkpoint_every);
        self.network.write_kv(doc);
    }

    pub fn from_kv(doc: &KvDoc) -> Result<Self> {
        let d = Self::default();
        let adam = AdamConfig {
            lr: doc.parsed_or("lr", d.adam.lr)?,
            beta1: doc.parsed_or("beta1", d.adam.beta1)?,
            beta2: doc.parsed_or("beta2", d.adam.beta2)?,
            eps: doc.parsed_or("adam_eps", d.adam.eps)?,
            weight_decay: doc.parsed_or("weight_decay", d.adam.weight_decay)?,
        };
        let lr_decay = match (
            doc.parsed::<usize>("lr_decay_every")?,
            doc.parsed::<f64>("lr_decay_factor")?,
        ) {
            (Some(e), Some(f)) => Some((e, f)),
            (None, None) => None,
            _ => return Err(Error::Config("lr_decay_every and lr_decay_factor go together".into())),
        };
        let cfg = Self {
            iterations: doc.parsed_or("iterations", d.iterations)?,
            batch_size: doc.parsed_or("batch_size", d.batch_size)?,
            adam,
            lr_decay,
            loss: doc.parsed_or("loss", d.loss)?,
            parameterization: doc.parsed_or("parameterization", d.parameterization)?,
            network: UNetConfig::from_kv(doc)?,
            seed: doc.parsed_or("seed", d.seed)?,
            checkpoint_every: doc.parsed_or("checkpoint_every", d.checkpoint_every)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.adam.lr >= 0.0) || !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return Err(Error::Config("invalid Adam hyperparameters".into()));
        }
        self.network.validate()
    }
}

/// Training state that can be checkpointed and resumed.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub sched: Schedule,
    pub model: Model,
    pub adam: Adam<f32>,
    /// Iterations completed.
    pub iteration: usize,
    /// Loss of every completed iteration.
    pub losses: Vec<f64>,
}

impl Trainer {
    pub fn new(config: TrainConfig, sched: Schedule) -> Result<Self> {
        config.validate()?;
        let model = Model::new(config.network, &mut Rng::new(derive_seed(config.seed, u64::MAX)))?;
        let adam = Adam::new(config.adam, model.num_params());
        Ok(Self {
            config,
            sched,
            model,
            adam,
            iteration: 0,
            losses: Vec::new(),
        })
    }

    /// One pass of: draw a minibatch, normalize each pair with the
    /// observation's statistics, draw `t ~ U{1..T}` and `ε`, perturb in
    /// closed form, predict, and take an Adam step on the loss.
    pub fn step(&mut self, data: &[(ImageGrid, ImageGrid)]) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::invalid("training set is empty"));
        }
        let mut rng = Rng::new(derive_seed(self.config.seed, self.iteration as u64));
        let mut xs = Vec::with_capacity(self.config.batch_size);
        let mut mus = Vec::with_capacity(self.config.batch_size);
        let mut epss = Vec::with_capacity(self.config.batch_size);
        let mut ts = Vec::with_capacity(self.config.batch_size);
        for _ in 0..self.config.batch_size {
            let (hq, lq) = &data[rng.below(data.len() as u64) as usize];
            let (x0n, mun, _) = normalize_pair(hq, lq)?;
            let t = 1 + rng.below(self.sched.steps() as u64) as usize;
            let (eps, xt) = forward_sample_with_noise(&x0n, &mun, &self.sched, t, &mut rng)?;
            xs.push(xt);
            mus.push(mun);
            epss.push(eps);
            ts.push(t);
        }
        let pairs: Vec<(&ImageGrid, &ImageGrid)> = xs.iter().zip(&mus).collect();
        let input = Model::pack(&pairs)?;
        let (out, cache) = self.model.forward(&input, &ts)?;
        let target: Vec<f32> = epss.iter().flat_map(|e| e.data().iter().copied()).collect();
        let (value, grad) = skip_loss_and_grad(
            self.config.parameterization,
            &self.sched,
            &ts,
            &xs,
            &mus,
            &out.data,
            &target,
            self.config.loss,
        );
        if !value.is_finite() {
            return Err(Error::Diverged {
                iteration: self.iteration,
            });
        }
        let dout = Act { data: grad, ..out };
        let grads = self.model.backward(&cache, &dout);
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged {
                iteration: self.iteration,
            });
        }
        let lr = self.config.lr_at(self.iteration);
        self.adam.update(&mut self.model.params, &grads, lr);
        self.iteration += 1;
        self.losses.push(value);
        Ok(value)
    }

    /// The current network packaged for inference.
    pub fn denoiser(&self) -> Denoiser {
        Denoiser {
            net: self.model.clone(),
            sched: self.sched.clone(),
            parameterization: self.config.parameterization,
        }
    }

    /// Runs until `config.iterations`, writing checkpoints to `dir` if given.
    pub fn run(&mut self, data: &[(ImageGrid, ImageGrid)], dir: Option<&Path>) -> Result<()> {
        while self.iteration < self.config.iterations {
            self.step(data)?;
            let every = self.config.checkpoint_every;
            if let Some(dir) = dir {
                if every > 0 && self.iteration.is_multiple_of(every) && self.iteration < self.config.iterations {
                    save_checkpoint(dir, self)?;
                }
            }
        }
        if let Some(dir) = dir {
            save_checkpoint(dir, self)?;
        }
        Ok(())
    }
}

/// Trains from scratch on `(hq, lq)` pairs.
pub fn train(
    data: &[(ImageGrid, ImageGrid)],
    sched: &Schedule,
    config: TrainConfig,
    dir: Option<&Path>,
) -> Result<Trainer> {
    let mut trainer = Trainer::new(config, sched.clone())?;
    trainer.run(data, dir)?;
    Ok(trainer)
}

/// Restores an observation: normalize with its own statistics, start from
/// `x_T ~ N(μ̃, λ²)`, integrate the reverse SDE with the learned score,
/// map back to intensities and clamp to [0, 1].
pub fn despeckle<P: NoisePredictor + ?Sized>(
    mu: &ImageGrid,
    model: &P,
    sched: &Schedule,
    steps_used: usize,
    rng: &mut Rng,
) -> Result<ImageGrid> {
    let rec = NormRecord::of(mu);
    let mun = rec.apply(mu);
    let x_t = terminal_sample(&mun, sched, rng);
    let score = score_from_noise(model, sched);
    let x0 = reverse_sample(&x_t, &mun, sched, &score, rng, steps_used)?;
    Ok(denormalize(&x0, rec).clamp(0.0, 1.0))
}
