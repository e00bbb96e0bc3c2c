//! Transducer descriptions and the built-in presets.

use std::f64::consts::PI;
use std::path::Path;

use crate::error::{Error, Result};
use crate::kv::KvDoc;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Geometry {
    Linear,
    /// Elements on an arc of the given radius (m), apex at the origin.
    Convex {
        radius: f64,
    },
    /// Small-pitch array; `sector` (rad) is the steering span.
    Phased {
        sector: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub name: String,
    pub num_elements: usize,
    /// m
    pub pitch: f64,
    /// Hz
    pub center_freq: f64,
    /// Fractional -6 dB bandwidth.
    pub frac_bandwidth: f64,
    /// m/s
    pub sound_speed: f64,
    pub geometry: Geometry,
    /// Transmit steering angles (rad).
    pub steer_angles: Vec<f64>,
    /// Hz
    pub sample_rate: f64,
    /// dB
    pub dynamic_range: f64,
    pub f_number: f64,
}

pub const PRESET_NAMES: [&str; 4] = ["L11-5v", "L12-3v", "C5-2v", "P4-2v"];

/// `n` angles uniformly spaced over `[-max, max]`.
pub fn uniform_angles(n: usize, max: f64) -> Vec<f64> {
    if n == 1 {
        return vec![0.0];
    }
    (0..n).map(|i| -max + 2.0 * max * i as f64 / (n - 1) as f64).collect()
}

/// The default plane-wave angle set: 15 angles over [-7π/32, 7π/32].
pub fn default_angles() -> Vec<f64> {
    uniform_angles(15, 7.0 * PI / 32.0)
}

impl ProbeConfig {
    pub fn l11_5v() -> Self {
        Self {
            name: "L11-5v".into(),
            num_elements: 128,
            pitch: 0.3e-3,
            center_freq: 7.6e6,
            frac_bandwidth: 0.77,
            sound_speed: 1540.0,
            geometry: Geometry::Linear,
            steer_angles: default_angles(),
            sample_rate: 4.0 * 7.6e6,
            dynamic_range: 40.0,
            f_number: 1.5,
        }
    }

    pub fn l12_3v() -> Self {
        Self {
            name: "L12-3v".into(),
            num_elements: 192,
            pitch: 0.2e-3,
            center_freq: 7.5e6,
            frac_bandwidth: 0.93,
            sample_rate: 4.0 * 7.5e6,
            ..Self::l11_5v()
        }
    }

    pub fn c5_2v() -> Self {
        Self {
            name: "C5-2v".into(),
            num_elements: 128,
            pitch: 0.508e-3,
            center_freq: 3.5e6,
            frac_bandwidth: 0.79,
            geometry: Geometry::Convex { radius: 49.6e-3 },
            sample_rate: 4.0 * 3.5e6,
            ..Self::l11_5v()
        }
    }

    pub fn p4_2v() -> Self {
        let sector = PI / 3.0;
        Self {
            name: "P4-2v".into(),
            num_elements: 64,
            pitch: 0.3e-3,
            center_freq: 3.0e6,
            frac_bandwidth: 0.74,
            geometry: Geometry::Phased { sector },
            steer_angles: uniform_angles(15, sector / 2.0),
            sample_rate: 4.0 * 3.0e6,
            ..Self::l11_5v()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "L11-5v" => Ok(Self::l11_5v()),
            "L12-3v" => Ok(Self::l12_3v()),
            "C5-2v" => Ok(Self::c5_2v()),
            "P4-2v" => Ok(Self::p4_2v()),
            other => Err(Error::Config(format!(
                "unknown probe preset `{other}` (known: {})",
                PRESET_NAMES.join(", ")
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(format!("probe {}: {msg}", self.name)));
        if !(self.center_freq > 0.0) {
            return fail("center frequency must be positive".into());
        }
        if !(self.frac_bandwidth > 0.0 && self.frac_bandwidth < 2.0) {
            return fail(format!("fractional bandwidth {} outside (0, 2)", self.frac_bandwidth));
        }
        if !(self.sound_speed > 0.0) || !(self.pitch > 0.0) {
            return fail("sound speed and pitch must be positive".into());
        }
        if self.num_elements < 2 {
            return fail("need at least two elements".into());
        }
        if self.steer_angles.is_empty() {
            return fail("steering angle list is empty".into());
        }
        if let Some(a) = self.steer_angles.iter().find(|a| !(a.abs() < PI / 2.0)) {
            return fail(format!("steering angle {a} not inside (-π/2, π/2)"));
        }
        if self.sample_rate < 4.0 * self.center_freq {
            return fail(format!("sample rate {} below 4 x center frequency", self.sample_rate));
        }
        if !(self.dynamic_range > 0.0) || !(self.f_number > 0.0) {
            return fail("dynamic range and f-number must be positive".into());
        }
        match self.geometry {
            Geometry::Convex { radius } if !(radius > 0.0) => fail("convex radius must be positive".into()),
            Geometry::Phased { sector } if !(sector > 0.0 && sector < PI) => {
                fail("phased sector must lie in (0, π)".into())
            }
            _ => Ok(()),
        }
    }

    /// Standard deviation (s) of the Gaussian pulse envelope for the −6 dB
    /// fractional bandwidth.
    pub fn pulse_sigma(&self) -> f64 {
        (2.0 * 2f64.ln()).sqrt() / (PI * self.frac_bandwidth * self.center_freq)
    }

    pub fn wavelength(&self) -> f64 {
        self.sound_speed / self.center_freq
    }

    /// Element centre positions `(x, z)` in metres. The array is centred on
    /// `x = 0`; convex elements curve back to `z < 0`.
    pub fn element_positions(&self) -> Vec<(f64, f64)> {
        let mid = (self.num_elements - 1) as f64 / 2.0;
        (0..self.num_elements)
            .map(|e| {
                let offset = (e as f64 - mid) * self.pitch;
                match self.geometry {
                    Geometry::Convex { radius } => {
                        let phi = offset / radius;
                        (radius * phi.sin(), radius * (phi.cos() - 1.0))
                    }
                    Geometry::Linear | Geometry::Phased { .. } => (offset, 0.0),
                }
            })
            .collect()
    }

    /// Builds a probe from `key=value` text. `preset=<name>` selects the
    /// starting point (default L11-5v); other keys override fields.
    pub fn from_kv(doc: &KvDoc) -> Result<Self> {
        let mut p = Self::preset(doc.get("preset").unwrap_or("L11-5v"))?;
        if let Some(v) = doc.get("name") {
            p.name = v.to_string();
        }
        p.num_elements = doc.parsed_or("num_elements", p.num_elements)?;
        p.pitch = doc.parsed_or("pitch", p.pitch)?;
        p.center_freq = doc.parsed_or("center_freq", p.center_freq)?;
        p.frac_bandwidth = doc.parsed_or("frac_bandwidth", p.frac_bandwidth)?;
        p.sound_speed = doc.parsed_or("sound_speed", p.sound_speed)?;
        p.sample_rate = doc.parsed_or("sample_rate", p.sample_rate)?;
        p.dynamic_range = doc.parsed_or("dynamic_range", p.dynamic_range)?;
        p.f_number = doc.parsed_or("f_number", p.f_number)?;
        if let Some(g) = doc.get("geometry") {
            p.geometry = match g {
                "linear" => Geometry::Linear,
                "convex" => Geometry::Convex {
                    radius: doc
                        .parsed("radius")?
                        .ok_or_else(|| Error::Config("convex geometry needs `radius`".into()))?,
                },
                "phased" => Geometry::Phased {
                    sector: doc
                        .parsed("sector")?
                        .ok_or_else(|| Error::Config("phased geometry needs `sector`".into()))?,
                },
                other => return Err(Error::Config(format!("unknown geometry `{other}`"))),
            };
        }
        if let Some(list) = doc.get("steer_angles") {
            p.steer_angles = list
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::Config(format!("bad steering angle `{s}`")))
                })
                .collect::<Result<_>>()?;
        } else if let Some(n) = doc.parsed::<usize>("num_angles")? {
            let max = doc.parsed_or("max_angle", 7.0 * PI / 32.0)?;
            p.steer_angles = uniform_angles(n, max);
        }
        p.validate()?;
        Ok(p)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_kv(&KvDoc::load(path)?)
    }

    pub fn to_kv(&self) -> KvDoc {
        let mut doc = KvDoc::new();
        doc.set("name", &self.name);
        doc.set("num_elements", self.num_elements);
        doc.set("pitch", self.pitch);
        doc.set("center_freq", self.center_freq);
        doc.set("frac_bandwidth", self.frac_bandwidth);
        doc.set("sound_speed", self.sound_speed);
        match self.geometry {
            Geometry::Linear => doc.set("geometry", "linear"),
            Geometry::Convex { radius } => {
                doc.set("geometry", "convex");
                doc.set("radius", radius);
            }
            Geometry::Phased { sector } => {
                doc.set("geometry", "phased");
                doc.set("sector", sector);
            }
        }
        let angles: Vec<String> = self.steer_angles.iter().map(|a| a.to_string()).collect();
        doc.set("steer_angles", angles.join(","));
        doc.set("sample_rate", self.sample_rate);
        doc.set("dynamic_range", self.dynamic_range);
        doc.set("f_number", self.f_number);
        doc
    }
}
