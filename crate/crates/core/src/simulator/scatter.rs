//! Point-scatterer media built from an intensity map.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::grid::ImageGrid;
use crate::rng::Rng;

use super::probe::ProbeConfig;

/// Imaged region: `x` spans `[-width/2, width/2]`, `z` spans
/// `[depth_start, depth_start + depth]` (m).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldOfView {
    pub width: f64,
    pub depth_start: f64,
    pub depth: f64,
}

impl FieldOfView {
    pub fn x_min(&self) -> f64 {
        -self.width / 2.0
    }

    pub fn x_max(&self) -> f64 {
        self.width / 2.0
    }

    pub fn z_min(&self) -> f64 {
        self.depth_start
    }

    pub fn z_max(&self) -> f64 {
        self.depth_start + self.depth
    }

    pub fn area_mm2(&self) -> f64 {
        self.width * self.depth * 1e6
    }

    pub fn contains(&self, x: f64, z: f64) -> bool {
        x >= self.x_min() && x <= self.x_max() && z >= self.z_min() && z <= self.z_max()
    }
}

/// Regular lattice of pixel centres covering a field of view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelGrid {
    pub rows: usize,
    pub cols: usize,
    /// Lateral and axial spacing (m).
    pub dx: f64,
    pub dz: f64,
    /// Centre of pixel (0, 0).
    pub x0: f64,
    pub z0: f64,
}

impl PixelGrid {
    /// `rows x cols` cells tiling `fov`, sampled at cell centres.
    pub fn covering(fov: &FieldOfView, rows: usize, cols: usize) -> Self {
        let dx = fov.width / cols as f64;
        let dz = fov.depth / rows as f64;
        Self {
            rows,
            cols,
            dx,
            dz,
            x0: fov.x_min() + dx / 2.0,
            z0: fov.z_min() + dz / 2.0,
        }
    }

    #[inline]
    pub fn x(&self, col: usize) -> f64 {
        self.x0 + col as f64 * self.dx
    }

    #[inline]
    pub fn z(&self, row: usize) -> f64 {
        self.z0 + row as f64 * self.dz
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Position to continuous pixel coordinates (row, col).
    pub fn to_pixel(&self, x: f64, z: f64) -> (f64, f64) {
        ((z - self.z0) / self.dz, (x - self.x0) / self.dx)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScatterParams {
    /// Scatterers per mm² before pruning.
    pub density: f64,
    /// Rayleigh scale per unit target intensity.
    pub k_refl: f64,
    /// Rayleigh scale floor as a fraction of `k_refl`.
    pub floor_frac: f64,
    /// Minimum spacing (m); `None` derives it from the pulse length.
    pub d_min: Option<f64>,
}

impl Default for ScatterParams {
    fn default() -> Self {
        Self {
            density: DEFAULT_DENSITY,
            k_refl: 1.0,
            floor_frac: 0.01,
            d_min: None,
        }
    }
}

/// Scatterers per mm², calibrated so a homogeneous medium yields fully
/// developed speckle for the L11-5v preset.
pub const DEFAULT_DENSITY: f64 = 250.0;

impl ScatterParams {
    /// Explicit `d_min`, or one eighth of the pulse's spatial FWHM.
    pub fn min_spacing(&self, probe: &ProbeConfig) -> f64 {
        self.d_min.unwrap_or_else(|| {
            let fwhm = 2.0 * (2.0 * 2f64.ln()).sqrt() * probe.pulse_sigma() * probe.sound_speed;
            fwhm / 8.0
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScattererField {
    pub fov: FieldOfView,
    pub x: Vec<f64>,
    pub z: Vec<f64>,
    pub amplitude: Vec<f64>,
}

impl ScattererField {
    pub fn empty(fov: FieldOfView) -> Self {
        Self {
            fov,
            x: Vec::new(),
            z: Vec::new(),
            amplitude: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn push(&mut self, x: f64, z: f64, amplitude: f64) {
        self.x.push(x);
        self.z.push(z);
        self.amplitude.push(amplitude);
    }

    /// Smallest pairwise distance, `None` with fewer than two scatterers.
    /// Quadratic; meant for tests.
    pub fn min_pair_distance(&self) -> Option<f64> {
        let mut best: Option<f64> = None;
        for i in 0..self.len() {
            for j in i + 1..self.len() {
                let d = (self.x[i] - self.x[j]).hypot(self.z[i] - self.z[j]);
                best = Some(best.map_or(d, |b| b.min(d)));
            }
        }
        best
    }
}

/// Draws a scatterer medium whose Rayleigh scale follows `hq` mapped onto
/// `fov`: `scale = k_refl * bilinear(hq) + floor_frac * k_refl`.
///
/// Candidates are drawn uniformly over the field, then thinned greedily in
/// draw order so that no two kept scatterers are closer than `d_min`.
pub fn build_scatterers(
    hq: &ImageGrid,
    fov: &FieldOfView,
    probe: &ProbeConfig,
    params: &ScatterParams,
    rng: &mut Rng,
) -> Result<ScattererField> {
    if !(params.density > 0.0) {
        return Err(Error::invalid(format!(
            "scatterer density {} must be positive",
            params.density
        )));
    }
    if !(fov.width > 0.0 && fov.depth > 0.0) {
        return Err(Error::invalid("field of view has zero area"));
    }
    let grid = PixelGrid::covering(fov, hq.height(), hq.width());
    let n = (params.density * fov.area_mm2()).round() as usize;
    let floor = params.floor_frac * params.k_refl;
    let d_min = params.min_spacing(probe);

    let mut field = ScattererField::empty(*fov);
    let mut buckets: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    let cell = d_min.max(f64::MIN_POSITIVE);
    for _ in 0..n {
        let x = rng.uniform_range(fov.x_min(), fov.x_max());
        let z = rng.uniform_range(fov.z_min(), fov.z_max());
        let u = rng.uniform();

        if d_min > 0.0 {
            let key = ((x / cell).floor() as i64, (z / cell).floor() as i64);
            let crowded = (-1..=1).any(|di| {
                (-1..=1).any(|dj| {
                    buckets
                        .get(&(key.0 + di, key.1 + dj))
                        .is_some_and(|ids| ids.iter().any(|&i| (field.x[i] - x).hypot(field.z[i] - z) < d_min))
                })
            });
            if crowded {
                continue;
            }
            buckets.entry(key).or_default().push(field.len());
        }

        let (row, col) = grid.to_pixel(x, z);
        let scale = params.k_refl * hq.bilinear(row, col) + floor;
        field.push(x, z, scale * (-2.0 * u.ln()).sqrt());
    }
    Ok(field)
}
