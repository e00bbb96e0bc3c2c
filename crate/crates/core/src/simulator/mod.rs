//! Paired clean/speckled data: phantoms, augmentation and a plane-wave
//! ultrasound acquisition model.

pub mod acoustic;
pub mod augment;
pub mod phantom;
pub mod probe;
pub mod scatter;

use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::ImageGrid;
use crate::kv::KvDoc;
use crate::rng::Rng;

pub use acoustic::{
    compound, compound_and_compress, compound_and_compress_pooled, das_beamform, log_compress, pool_envelope,
    simulate_channels, simulate_channels_multi, ChannelData, ChannelLayout, DasPlan, IqImage,
};
pub use augment::{augment, largest_component, largest_inscribed_square, AugmentOp};
pub use phantom::{make_phantom, PhantomKind, MIN_PHANTOM_SIZE};
pub use probe::{default_angles, uniform_angles, Geometry, ProbeConfig, PRESET_NAMES};
pub use scatter::{build_scatterers, FieldOfView, PixelGrid, ScatterParams, ScattererField};

/// Acquisition settings around a probe.
#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub probe: ProbeConfig,
    /// Output pixel pitch (m), equal laterally and axially.
    pub pixel_size: f64,
    /// Depth of the top image row (m).
    pub depth_start: f64,
    /// Beamforming lattice is `oversample` times finer than the output;
    /// envelopes are block-averaged back to the output grid.
    pub oversample: usize,
    pub scatter: ScatterParams,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self::for_probe(ProbeConfig::l11_5v())
    }
}

impl SimConfig {
    /// Defaults scaled to the probe's wavelength.
    pub fn for_probe(probe: ProbeConfig) -> Self {
        let lambda = probe.wavelength();
        Self {
            pixel_size: 1.5 * lambda,
            depth_start: 50.0 * lambda,
            oversample: 2,
            scatter: ScatterParams::default(),
            probe,
        }
    }

    pub fn field_of_view(&self, rows: usize, cols: usize) -> FieldOfView {
        FieldOfView {
            width: cols as f64 * self.pixel_size,
            depth_start: self.depth_start,
            depth: rows as f64 * self.pixel_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.probe.validate()?;
        if !(self.pixel_size > 0.0) || !(self.depth_start > 0.0) {
            return Err(Error::Config("pixel_size and depth_start must be positive".into()));
        }
        if self.oversample == 0 {
            return Err(Error::Config("oversample must be at least 1".into()));
        }
        Ok(())
    }

    /// Probe keys as in [`ProbeConfig::from_kv`], plus `pixel_size`,
    /// `depth_start`, `oversample`, `density`, `k_refl`, `floor_frac` and
    /// `d_min`.
    pub fn from_kv(doc: &KvDoc) -> Result<Self> {
        let mut cfg = Self::for_probe(ProbeConfig::from_kv(doc)?);
        cfg.pixel_size = doc.parsed_or("pixel_size", cfg.pixel_size)?;
        cfg.depth_start = doc.parsed_or("depth_start", cfg.depth_start)?;
        cfg.oversample = doc.parsed_or("oversample", cfg.oversample)?;
        cfg.scatter.density = doc.parsed_or("density", cfg.scatter.density)?;
        cfg.scatter.k_refl = doc.parsed_or("k_refl", cfg.scatter.k_refl)?;
        cfg.scatter.floor_frac = doc.parsed_or("floor_frac", cfg.scatter.floor_frac)?;
        cfg.scatter.d_min = doc.parsed("d_min")?.or(cfg.scatter.d_min);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_kv(&KvDoc::load(path)?)
    }

    pub fn to_kv(&self) -> KvDoc {
        let mut doc = self.probe.to_kv();
        doc.set("pixel_size", self.pixel_size);
        doc.set("depth_start", self.depth_start);
        doc.set("oversample", self.oversample);
        doc.set("density", self.scatter.density);
        doc.set("k_refl", self.scatter.k_refl);
        doc.set("floor_frac", self.scatter.floor_frac);
        if let Some(d) = self.scatter.d_min {
            doc.set("d_min", d);
        }
        doc
    }
}

/// Per-angle beamformed IQ of one medium on the fine lattice.
#[derive(Debug, Clone)]
pub struct Acquisition {
    pub angles: Vec<f64>,
    pub iq: Vec<IqImage>,
    pub oversample: usize,
}

impl Acquisition {
    /// B-mode from the listed angle indices.
    pub fn bmode(&self, indices: &[usize], dynamic_range: f64) -> Result<ImageGrid> {
        let chosen: Vec<IqImage> = indices
            .iter()
            .map(|&i| {
                self.iq
                    .get(i)
                    .cloned()
                    .ok_or_else(|| Error::invalid(format!("angle index {i} out of range")))
            })
            .collect::<Result<_>>()?;
        compound_and_compress_pooled(&chosen, dynamic_range, self.oversample)
    }

    pub fn bmode_all(&self, dynamic_range: f64) -> Result<ImageGrid> {
        compound_and_compress_pooled(&self.iq, dynamic_range, self.oversample)
    }

    /// Index of the steering angle closest to broadside.
    pub fn broadside(&self) -> usize {
        (0..self.angles.len())
            .min_by(|&a, &b| self.angles[a].abs().total_cmp(&self.angles[b].abs()))
            .unwrap_or(0)
    }
}

/// Scatterers from `hq`, channel synthesis and beamforming for every
/// steering angle of the probe.
pub fn acquire(hq: &ImageGrid, cfg: &SimConfig, rng: &mut Rng) -> Result<Acquisition> {
    cfg.validate()?;
    let (rows, cols) = hq.shape();
    let fov = cfg.field_of_view(rows, cols);
    let field = build_scatterers(hq, &fov, &cfg.probe, &cfg.scatter, rng)?;
    let fine = PixelGrid::covering(&fov, rows * cfg.oversample, cols * cfg.oversample);
    let layout = ChannelLayout::for_grid(&cfg.probe, &fine);
    let angles = cfg.probe.steer_angles.clone();
    let channels = simulate_channels_multi(&field, &cfg.probe, &angles, &layout);
    let plan = DasPlan::new(&cfg.probe, &fine);
    let iq: Vec<IqImage> = channels
        .iter()
        .zip(&angles)
        .map(|(ch, &a)| plan.beamform(ch, a))
        .collect();
    if let Some(step) = iq.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { step });
    }
    Ok(Acquisition {
        angles,
        iq,
        oversample: cfg.oversample,
    })
}

/// A clean target and its simulated B-mode observation, same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub hq: ImageGrid,
    pub lq: ImageGrid,
    pub probe: String,
    pub seed: u64,
}

/// Simulates the compounded B-mode of `hq`. The medium draw comes from
/// `rng`; the recorded seed is the generator's seed.
pub fn simulate_pair(hq: &ImageGrid, cfg: &SimConfig, rng: &mut Rng) -> Result<PairedSample> {
    let seed = rng.seed();
    let acq = acquire(hq, cfg, rng)?;
    Ok(PairedSample {
        hq: hq.clone(),
        lq: acq.bmode_all(cfg.probe.dynamic_range)?,
        probe: cfg.probe.name.clone(),
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> SimConfig {
        let mut cfg = SimConfig::default();
        cfg.probe.steer_angles = uniform_angles(3, 0.2);
        cfg
    }

    #[test]
    fn pair_shape_range_and_determinism() {
        let hq = make_phantom(PhantomKind::Inclusion, 32, &mut Rng::new(3)).unwrap();
        let cfg = small_cfg();
        let a = simulate_pair(&hq, &cfg, &mut Rng::new(11)).unwrap();
        let b = simulate_pair(&hq, &cfg, &mut Rng::new(11)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.lq.shape(), (32, 32));
        let (lo, hi) = a.lq.min_max();
        assert!(lo >= 0.0 && hi == 1.0);
        assert_eq!(a.seed, 11);
        let c = simulate_pair(&hq, &cfg, &mut Rng::new(12)).unwrap();
        assert_ne!(a.lq, c.lq);
    }

    #[test]
    fn config_kv_roundtrip() {
        let mut cfg = SimConfig::for_probe(ProbeConfig::c5_2v());
        cfg.oversample = 3;
        cfg.scatter.d_min = Some(1e-5);
        let back = SimConfig::from_kv(&KvDoc::parse(&cfg.to_kv().to_text()).unwrap()).unwrap();
        assert_eq!(back.oversample, 3);
        assert_eq!(back.scatter.d_min, Some(1e-5));
        assert_eq!(back.probe.geometry, cfg.probe.geometry);
        assert_eq!(back.probe.steer_angles, cfg.probe.steer_angles);
        assert_eq!(back.pixel_size, cfg.pixel_size);
    }
}
