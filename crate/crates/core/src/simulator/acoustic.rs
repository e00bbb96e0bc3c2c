//! Plane-wave acquisition in complex baseband: channel synthesis,
//! delay-and-sum beamforming, coherent compounding and log compression.
//!
//! A scatterer at `(x, z)` with amplitude `a` seen by element `e` under
//! steering angle `α` contributes
//!
//! ```text
//! a · g(t − τ) · exp(−i 2π f_c τ),   τ = (z cos α + x sin α)/c + |p − p_e|/c
//! ```
//!
//! to the demodulated channel, where `g(t) = exp(−t² / 2σ_p²)`. This is the
//! analytic signal of a Gaussian-modulated cosine mixed down by `f_c`.

use std::f64::consts::PI;
use std::ops::Range;

use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::ImageGrid;

use super::probe::ProbeConfig;
use super::scatter::{PixelGrid, ScattererField};

/// Pulse support in units of `σ_p` on each side.
const PULSE_HALF_WIDTH: f64 = 4.0;

/// Time axis and element subset shared by all channel buffers of one
/// acquisition.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelLayout {
    /// Time of sample 0 (s).
    pub t0: f64,
    pub n_samples: usize,
    /// Elements that are synthesized; the rest stay zero.
    pub elements: Range<usize>,
    /// Apply `1/sqrt(d)` receive spreading (d in mm).
    pub spreading: bool,
}

impl ChannelLayout {
    /// Covers every round-trip delay between `grid` pixels and the elements
    /// the beamformer will read, for every steering angle of `probe`.
    pub fn for_grid(probe: &ProbeConfig, grid: &PixelGrid) -> Self {
        let elems = probe.element_positions();
        let c = probe.sound_speed;
        let half_aperture = |z: f64| z / (2.0 * probe.f_number);
        let (x_lo, x_hi) = (grid.x(0), grid.x(grid.cols - 1));
        let (z_lo, z_hi) = (grid.z(0), grid.z(grid.rows - 1));
        let reach = half_aperture(z_hi - elems.iter().map(|e| e.1).fold(0.0, f64::min));
        let mut first = elems.len();
        let mut last = 0;
        for (e, &(xe, _)) in elems.iter().enumerate() {
            if xe >= x_lo - reach - probe.pitch && xe <= x_hi + reach + probe.pitch {
                first = first.min(e);
                last = last.max(e);
            }
        }
        // Nearest elements are always part of the aperture.
        let nearest = |x: f64| {
            (0..elems.len())
                .min_by(|&a, &b| (elems[a].0 - x).abs().total_cmp(&(elems[b].0 - x).abs()))
                .unwrap_or(0)
        };
        first = first.min(nearest(x_lo)).min(nearest(x_hi));
        last = last.max(nearest(x_lo)).max(nearest(x_hi));
        let elements = first..last + 1;

        let corners = [(x_lo, z_lo), (x_lo, z_hi), (x_hi, z_lo), (x_hi, z_hi)];
        let mut t_min = f64::INFINITY;
        let mut t_max = f64::NEG_INFINITY;
        for &alpha in &probe.steer_angles {
            for &(x, z) in &corners {
                let tx = (z * alpha.cos() + x * alpha.sin()) / c;
                for &(xe, ze) in &elems[elements.clone()] {
                    let rx = (x - xe).hypot(z - ze) / c;
                    t_min = t_min.min(tx + rx);
                    t_max = t_max.max(tx + rx);
                }
            }
            // The receive delay is smallest straight above an element.
            for &(xe, ze) in &elems[elements.clone()] {
                let xc = xe.clamp(x_lo, x_hi);
                for z in [z_lo, z_hi] {
                    let tx = (z * alpha.cos() + xc * alpha.sin()) / c;
                    t_min = t_min.min(tx + (xc - xe).hypot(z - ze) / c);
                }
            }
        }
        // Half a pixel of slack for scatterers at the field edge.
        let slack = PULSE_HALF_WIDTH * probe.pulse_sigma() + (grid.dx.hypot(grid.dz)) / c;
        let t0 = t_min - slack;
        let n_samples = (((t_max + slack) - t0) * probe.sample_rate).ceil() as usize + 2;
        Self {
            t0,
            n_samples,
            elements,
            spreading: false,
        }
    }
}

/// Demodulated channel data for one transmit, `[element][sample]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelData {
    pub t0: f64,
    pub sample_rate: f64,
    pub n_samples: usize,
    pub num_elements: usize,
    pub data: Vec<Complex64>,
}

impl ChannelData {
    pub fn zeros(layout: &ChannelLayout, probe: &ProbeConfig) -> Self {
        Self {
            t0: layout.t0,
            sample_rate: probe.sample_rate,
            n_samples: layout.n_samples,
            num_elements: probe.num_elements,
            data: vec![Complex64::new(0.0, 0.0); probe.num_elements * layout.n_samples],
        }
    }

    pub fn element(&self, e: usize) -> &[Complex64] {
        &self.data[e * self.n_samples..(e + 1) * self.n_samples]
    }

    pub fn scale(&self, k: f64) -> Self {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v *= k);
        out
    }

    /// Linearly interpolated sample at time `t`; zero outside the record.
    #[inline]
    pub fn sample_at(&self, e: usize, t: f64) -> Complex64 {
        let pos = (t - self.t0) * self.sample_rate;
        if !(pos >= 0.0) {
            return Complex64::new(0.0, 0.0);
        }
        let i = pos as usize;
        if i + 1 >= self.n_samples {
            return Complex64::new(0.0, 0.0);
        }
        let f = pos - i as f64;
        let row = self.element(e);
        row[i] * (1.0 - f) + row[i + 1] * f
    }
}

/// Synthesizes one channel buffer per steering angle in a single pass over
/// (element, scatterer) pairs.
pub fn simulate_channels_multi(
    field: &ScattererField,
    probe: &ProbeConfig,
    angles: &[f64],
    layout: &ChannelLayout,
) -> Vec<ChannelData> {
    let elems = probe.element_positions();
    let c = probe.sound_speed;
    let fs = probe.sample_rate;
    let dt = 1.0 / fs;
    let sigma = probe.pulse_sigma();
    let a = 1.0 / (2.0 * sigma * sigma);
    let q = (-2.0 * a * dt * dt).exp();
    let half = PULSE_HALF_WIDTH * sigma;
    let omega = 2.0 * PI * probe.center_freq;
    let ns = layout.n_samples;

    // Transmit delay and phasor per (angle, scatterer).
    let tx: Vec<Vec<(f64, Complex64)>> = angles
        .iter()
        .map(|&alpha| {
            let (sa, ca) = alpha.sin_cos();
            field
                .x
                .iter()
                .zip(&field.z)
                .map(|(&x, &z)| {
                    let t = (z * ca + x * sa) / c;
                    (t, Complex64::from_polar(1.0, -omega * t))
                })
                .collect()
        })
        .collect();

    // One row per (element, angle); rows are independent so elements run in parallel.
    let rows: Vec<Vec<Vec<Complex64>>> = layout
        .elements
        .clone()
        .into_par_iter()
        .map(|e| {
            let (xe, ze) = elems[e];
            let mut out = vec![vec![Complex64::new(0.0, 0.0); ns]; angles.len()];
            for s in 0..field.len() {
                let amp = field.amplitude[s];
                if amp == 0.0 {
                    continue;
                }
                let dist = (field.x[s] - xe).hypot(field.z[s] - ze);
                let rx = dist / c;
                let gain = if layout.spreading {
                    amp / (dist * 1e3).sqrt()
                } else {
                    amp
                };
                let rx_phase = Complex64::from_polar(gain, -omega * rx);
                for (k, row) in out.iter_mut().enumerate() {
                    let (t_tx, tx_phase) = tx[k][s];
                    let tau = t_tx + rx;
                    let lo = (((tau - half) - layout.t0) * fs).ceil().max(0.0) as usize;
                    let hi = ((((tau + half) - layout.t0) * fs).floor() as usize).min(ns - 1);
                    if lo > hi {
                        continue;
                    }
                    let phasor = tx_phase * rx_phase;
                    // g(t_k - τ) by recurrence: g_{k+1} = g_k r_k, r_{k+1} = r_k q.
                    let u = layout.t0 + lo as f64 * dt - tau;
                    let mut g = (-a * u * u).exp();
                    let mut r = (-a * (2.0 * u * dt + dt * dt)).exp();
                    for v in &mut row[lo..=hi] {
                        *v += phasor * g;
                        g *= r;
                        r *= q;
                    }
                }
            }
            out
        })
        .collect();

    let mut result: Vec<ChannelData> = angles.iter().map(|_| ChannelData::zeros(layout, probe)).collect();
    for (e, per_angle) in layout.elements.clone().zip(rows) {
        for (k, row) in per_angle.into_iter().enumerate() {
            result[k].data[e * ns..(e + 1) * ns].copy_from_slice(&row);
        }
    }
    result
}

/// Channel data for one steering angle, which must belong to the probe's
/// angle list.
pub fn simulate_channels(
    field: &ScattererField,
    probe: &ProbeConfig,
    angle: f64,
    layout: &ChannelLayout,
) -> Result<ChannelData> {
    if !probe.steer_angles.contains(&angle) {
        return Err(Error::invalid(format!(
            "angle {angle} is not one of the probe's steering angles"
        )));
    }
    Ok(simulate_channels_multi(field, probe, &[angle], layout).remove(0))
}

/// Complex beamformed image on a pixel lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct IqImage {
    pub grid: PixelGrid,
    pub data: Vec<Complex64>,
}

impl IqImage {
    pub fn zeros(grid: PixelGrid) -> Self {
        Self {
            grid,
            data: vec![Complex64::new(0.0, 0.0); grid.len()],
        }
    }

    pub fn envelope(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.norm()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.re.is_finite() && v.im.is_finite())
    }
}

/// Per-pixel receive geometry, reusable across steering angles.
#[derive(Debug, Clone)]
pub struct DasPlan {
    grid: PixelGrid,
    /// Pixel `p` reads `taps[offsets[p]..offsets[p + 1]]`.
    offsets: Vec<usize>,
    taps: Vec<Tap>,
    omega: f64,
    sound_speed: f64,
}

#[derive(Debug, Clone, Copy)]
struct Tap {
    element: u32,
    rx_delay: f64,
    rx_phase: Complex64,
}

impl DasPlan {
    /// Rectangular receive aperture: elements with
    /// `|x_e − x_p| ≤ (z_p − z_e) / (2 F#)`, plus the nearest element.
    pub fn new(probe: &ProbeConfig, grid: &PixelGrid) -> Self {
        let elems = probe.element_positions();
        let c = probe.sound_speed;
        let omega = 2.0 * PI * probe.center_freq;
        let mut offsets = Vec::with_capacity(grid.len() + 1);
        let mut taps = Vec::new();
        offsets.push(0);
        for r in 0..grid.rows {
            let z = grid.z(r);
            for col in 0..grid.cols {
                let x = grid.x(col);
                let nearest = (0..elems.len())
                    .min_by(|&a, &b| (elems[a].0 - x).abs().total_cmp(&(elems[b].0 - x).abs()))
                    .unwrap_or(0);
                for (e, &(xe, ze)) in elems.iter().enumerate() {
                    let inside = (x - xe).abs() <= (z - ze) / (2.0 * probe.f_number);
                    if inside || e == nearest {
                        let rx = (x - xe).hypot(z - ze) / c;
                        taps.push(Tap {
                            element: e as u32,
                            rx_delay: rx,
                            rx_phase: Complex64::from_polar(1.0, omega * rx),
                        });
                    }
                }
                offsets.push(taps.len());
            }
        }
        Self {
            grid: *grid,
            offsets,
            taps,
            omega,
            sound_speed: c,
        }
    }

    pub fn grid(&self) -> &PixelGrid {
        &self.grid
    }

    /// Delay-and-sum with phase rotation `exp(+i 2π f_c τ)` per tap.
    pub fn beamform(&self, channels: &ChannelData, angle: f64) -> IqImage {
        let (sa, ca) = angle.sin_cos();
        let g = self.grid;
        let data: Vec<Complex64> = (0..g.len())
            .into_par_iter()
            .map(|p| {
                let (r, col) = (p / g.cols, p % g.cols);
                let t_tx = (g.z(r) * ca + g.x(col) * sa) / self.sound_speed;
                let tx_phase = Complex64::from_polar(1.0, self.omega * t_tx);
                let mut acc = Complex64::new(0.0, 0.0);
                for tap in &self.taps[self.offsets[p]..self.offsets[p + 1]] {
                    acc += channels.sample_at(tap.element as usize, t_tx + tap.rx_delay) * tap.rx_phase;
                }
                acc * tx_phase
            })
            .collect();
        IqImage { grid: g, data }
    }
}

pub fn das_beamform(channels: &ChannelData, probe: &ProbeConfig, angle: f64, grid: &PixelGrid) -> IqImage {
    DasPlan::new(probe, grid).beamform(channels, angle)
}

/// Coherent sum of per-angle IQ images.
pub fn compound(iq_list: &[IqImage]) -> Result<IqImage> {
    let first = iq_list
        .first()
        .ok_or_else(|| Error::invalid("no IQ images to compound"))?;
    let mut sum = IqImage::zeros(first.grid);
    for iq in iq_list {
        if iq.grid.rows != first.grid.rows || iq.grid.cols != first.grid.cols {
            return Err(Error::ShapeMismatch {
                expected: (first.grid.rows, first.grid.cols),
                got: (iq.grid.rows, iq.grid.cols),
            });
        }
        for (s, v) in sum.data.iter_mut().zip(&iq.data) {
            *s += v;
        }
    }
    Ok(sum)
}

/// Mean of `factor x factor` blocks of a `rows x cols` envelope.
pub fn pool_envelope(env: &[f64], rows: usize, cols: usize, factor: usize) -> Result<Vec<f64>> {
    if factor == 0 || !rows.is_multiple_of(factor) || !cols.is_multiple_of(factor) || env.len() != rows * cols {
        return Err(Error::invalid(format!(
            "cannot pool {rows}x{cols} envelope by {factor}"
        )));
    }
    let (pr, pc) = (rows / factor, cols / factor);
    let mut out = vec![0.0; pr * pc];
    for r in 0..rows {
        for c in 0..cols {
            out[(r / factor) * pc + c / factor] += env[r * cols + c];
        }
    }
    let inv = 1.0 / (factor * factor) as f64;
    out.iter_mut().for_each(|v| *v *= inv);
    Ok(out)
}

/// `clamp(20 log10(E / max E), −DR, 0) / DR + 1`. An identically zero
/// envelope maps to an all-zero image.
pub fn log_compress(env: &[f64], rows: usize, cols: usize, dynamic_range: f64) -> Result<ImageGrid> {
    if !(dynamic_range > 0.0) {
        return Err(Error::invalid(format!(
            "dynamic range {dynamic_range} must be positive"
        )));
    }
    let max = env.iter().cloned().fold(0.0, f64::max);
    if max <= 0.0 {
        return Ok(ImageGrid::zeros(rows, cols));
    }
    let values: Vec<f32> = env
        .iter()
        .map(|&e| {
            let db = if e > 0.0 {
                20.0 * (e / max).log10()
            } else {
                -dynamic_range
            };
            (db.clamp(-dynamic_range, 0.0) / dynamic_range + 1.0) as f32
        })
        .collect();
    ImageGrid::new(rows, cols, values)
}

/// Coherent compounding, envelope detection and log compression.
pub fn compound_and_compress(iq_list: &[IqImage], dynamic_range: f64) -> Result<ImageGrid> {
    compound_and_compress_pooled(iq_list, dynamic_range, 1)
}

/// As [`compound_and_compress`], averaging the envelope over
/// `factor x factor` blocks before compression.
pub fn compound_and_compress_pooled(iq_list: &[IqImage], dynamic_range: f64, factor: usize) -> Result<ImageGrid> {
    let sum = compound(iq_list)?;
    let (rows, cols) = (sum.grid.rows, sum.grid.cols);
    let env = pool_envelope(&sum.envelope(), rows, cols, factor)?;
    log_compress(&env, rows / factor, cols / factor, dynamic_range)
}
