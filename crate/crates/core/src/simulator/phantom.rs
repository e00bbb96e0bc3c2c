//! Synthetic speckle-free targets: piecewise-constant intensity maps with
//! sharp boundaries.

use std::str::FromStr;

use crate::error::{Error, Result};
use crate::grid::ImageGrid;
use crate::rng::Rng;

pub const MIN_PHANTOM_SIZE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PhantomKind {
    Disks,
    Layers,
    Inclusion,
    Checkerboard,
}

impl PhantomKind {
    pub const ALL: [PhantomKind; 4] = [
        PhantomKind::Disks,
        PhantomKind::Layers,
        PhantomKind::Inclusion,
        PhantomKind::Checkerboard,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PhantomKind::Disks => "disks",
            PhantomKind::Layers => "layers",
            PhantomKind::Inclusion => "inclusion",
            PhantomKind::Checkerboard => "checkerboard",
        }
    }
}

impl FromStr for PhantomKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "disks" => Ok(PhantomKind::Disks),
            "layers" => Ok(PhantomKind::Layers),
            "inclusion" => Ok(PhantomKind::Inclusion),
            "checkerboard" | "checkboard" => Ok(PhantomKind::Checkerboard),
            other => Err(Error::invalid(format!("unknown phantom kind `{other}`"))),
        }
    }
}

/// Picks an intensity at least `gap` away from `base`, inside [0, 1].
fn contrasting(base: f64, gap: f64, rng: &mut Rng) -> f64 {
    let up = base + gap <= 1.0;
    let down = base - gap >= 0.0;
    let go_up = match (up, down) {
        (true, true) => rng.uniform() < 0.5,
        (u, _) => u,
    };
    if go_up {
        rng.uniform_range(base + gap, 1.0)
    } else {
        rng.uniform_range(0.0, base - gap)
    }
}

pub fn make_phantom(kind: PhantomKind, size: usize, rng: &mut Rng) -> Result<ImageGrid> {
    if size < MIN_PHANTOM_SIZE {
        return Err(Error::invalid(format!(
            "phantom size {size} below minimum {MIN_PHANTOM_SIZE}"
        )));
    }
    let n = size as f64;
    let img = match kind {
        PhantomKind::Disks => {
            let bg = rng.uniform_range(0.2, 0.6);
            let count = 1 + rng.below(4) as usize;
            let disks: Vec<(f64, f64, f64, f64)> = (0..count)
                .map(|_| {
                    let r = rng.uniform_range(0.1, 0.25) * n;
                    let cy = rng.uniform_range(r, n - r);
                    let cx = rng.uniform_range(r, n - r);
                    (cy, cx, r, contrasting(bg, 0.3, rng))
                })
                .collect();
            ImageGrid::from_fn(size, size, |row, col| {
                let (y, x) = (row as f64 + 0.5, col as f64 + 0.5);
                // Later disks paint over earlier ones.
                disks
                    .iter()
                    .rev()
                    .find(|(cy, cx, r, _)| (y - cy).powi(2) + (x - cx).powi(2) <= r * r)
                    .map_or(bg, |d| d.3) as f32
            })
        }
        PhantomKind::Layers => {
            let bands = 3 + rng.below(3) as usize;
            let mut cuts: Vec<f64> = (0..bands - 1).map(|_| rng.uniform_range(0.15, 0.85) * n).collect();
            cuts.sort_by(f64::total_cmp);
            // Monotone in depth with at least 0.15 between neighbouring bands.
            let step = rng.uniform_range(0.15, 0.8 / (bands - 1) as f64);
            let start = rng.uniform_range(0.05, 1.0 - 0.05 - step * (bands - 1) as f64);
            let rising = rng.uniform() < 0.5;
            let levels: Vec<f64> = (0..bands)
                .map(|i| {
                    let k = if rising { i } else { bands - 1 - i };
                    start + step * k as f64
                })
                .collect();
            ImageGrid::from_fn(size, size, |row, _| {
                let y = row as f64 + 0.5;
                levels[cuts.iter().filter(|&&c| y >= c).count()] as f32
            })
        }
        PhantomKind::Inclusion => {
            let bg = rng.uniform_range(0.2, 0.8);
            let fg = contrasting(bg, 0.3, rng);
            let ry = rng.uniform_range(0.15, 0.3) * n;
            let rx = rng.uniform_range(0.15, 0.3) * n;
            let cy = rng.uniform_range(ry, n - ry);
            let cx = rng.uniform_range(rx, n - rx);
            ImageGrid::from_fn(size, size, |row, col| {
                let dy = (row as f64 + 0.5 - cy) / ry;
                let dx = (col as f64 + 0.5 - cx) / rx;
                if dy * dy + dx * dx <= 1.0 {
                    fg as f32
                } else {
                    bg as f32
                }
            })
        }
        PhantomKind::Checkerboard => {
            let lo = rng.uniform_range(0.05, 0.45);
            let hi = contrasting(lo, 0.3, rng).max(lo + 0.3);
            let cell = size / (4 + rng.below(5) as usize);
            ImageGrid::from_fn(size, size, |row, col| {
                if (row / cell + col / cell).is_multiple_of(2) {
                    lo as f32
                } else {
                    hi as f32
                }
            })
        }
    };
    Ok(img)
}
