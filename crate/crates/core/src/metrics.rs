//! Full-reference (MSE, PSNR, SSIM) and reference-less (CNR, ENL, speckle
//! SNR) image quality metrics, background ROI selection, and batch
//! evaluation tables.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::grid::{ImageGrid, Mask};
use crate::simulator::largest_component;

/// Stabilizer in the reference-less metrics.
pub const EPS_STAB: f64 = 1e-12;
/// PSNR reported when the MSE falls below `1e-10 · L²`.
pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;

pub fn mse(a: &ImageGrid, b: &ImageGrid) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum();
    Ok(sum / a.len() as f64)
}

/// `10 log10(L² / MSE)`, capped at [`PSNR_CAP`].
pub fn psnr(a: &ImageGrid, b: &ImageGrid, peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(Error::invalid(format!("PSNR peak must be positive, got {peak}")));
    }
    Ok(psnr_from_mse(mse(a, b)?, peak))
}

pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse < 1e-10 * peak * peak {
        PSNR_CAP
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

fn gaussian_kernel() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let k: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering with the SSIM window.
fn filter_valid(img: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ho, wo) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * wo];
    for r in 0..h {
        for c in 0..wo {
            rows[r * wo + c] = (0..n).map(|i| k[i] * img[r * w + c + i]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for r in 0..ho {
        for c in 0..wo {
            out[r * wo + c] = (0..n).map(|i| k[i] * rows[(r + i) * wo + c]).sum();
        }
    }
    out
}

/// Mean structural similarity over the valid region, 11x11 Gaussian
/// window (σ = 1.5), constants for unit dynamic range.
pub fn ssim(a: &ImageGrid, b: &ImageGrid) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let (h, w) = a.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let k = gaussian_kernel();
    let x = a.to_f64();
    let y = b.to_f64();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
    let mx = filter_valid(&x, h, w, &k);
    let my = filter_valid(&y, h, w, &k);
    let sxx = filter_valid(&xx, h, w, &k);
    let syy = filter_valid(&yy, h, w, &k);
    let sxy = filter_valid(&xy, h, w, &k);
    let n = mx.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (mu_x, mu_y) = (mx[i], my[i]);
            let vx = sxx[i] - mu_x * mu_x;
            let vy = syy[i] - mu_y * mu_y;
            let cov = sxy[i] - mu_x * mu_y;
            ((2.0 * mu_x * mu_y + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((mu_x * mu_x + mu_y * mu_y + SSIM_C1) * (vx + vy + SSIM_C2))
        })
        .sum();
    Ok(total / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoiStats {
    pub mu_fg: f64,
    pub sigma_fg: f64,
    pub mu_bg: f64,
    pub sigma_bg: f64,
    pub eps: f64,
}

fn region_stats(img: &ImageGrid, mask: &Mask, what: &str) -> Result<(f64, f64)> {
    let v = mask.select(img)?;
    if v.is_empty() {
        return Err(Error::invalid(format!("{what} mask is empty")));
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

impl RoiStats {
    pub fn measure(img: &ImageGrid, fg: &Mask, bg: &Mask, eps: f64) -> Result<Self> {
        if !fg.is_disjoint(bg) {
            return Err(Error::invalid("foreground and background masks overlap"));
        }
        let (mu_fg, sigma_fg) = region_stats(img, fg, "foreground")?;
        let (mu_bg, sigma_bg) = region_stats(img, bg, "background")?;
        Ok(Self {
            mu_fg,
            sigma_fg,
            mu_bg,
            sigma_bg,
            eps,
        })
    }

    pub fn cnr(&self) -> f64 {
        (self.mu_fg - self.mu_bg).abs() / (self.sigma_fg.powi(2) + self.sigma_bg.powi(2) + self.eps).sqrt()
    }
}

pub fn cnr(img: &ImageGrid, fg: &Mask, bg: &Mask, eps: f64) -> Result<f64> {
    Ok(RoiStats::measure(img, fg, bg, eps)?.cnr())
}

pub fn cnr_db(cnr: f64) -> f64 {
    20.0 * cnr.log10()
}

/// `μ² / (σ² + ε)` over the background mask.
pub fn enl(img: &ImageGrid, bg: &Mask, eps: f64) -> Result<f64> {
    let (m, s) = region_stats(img, bg, "background")?;
    Ok(m * m / (s * s + eps))
}

/// `20 log10(μ / (σ + ε))` over the background mask.
pub fn speckle_snr_db(img: &ImageGrid, bg: &Mask, eps: f64) -> Result<f64> {
    let (m, s) = region_stats(img, bg, "background")?;
    Ok(20.0 * (m / (s + eps)).log10())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Patch {
    pub row: usize,
    pub col: usize,
    pub size: usize,
    /// Homogeneity score; lower is more homogeneous.
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoiSelection {
    pub foreground: Mask,
    pub patches: Vec<Patch>,
    /// Union of the selected patches.
    pub background: Mask,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoiOptions {
    pub patch_size: usize,
    pub count: usize,
    /// Weight of the gradient term in the homogeneity score.
    pub alpha: f64,
    /// Rows added above and below the foreground's row span.
    pub margin: usize,
}

impl Default for RoiOptions {
    fn default() -> Self {
        Self {
            patch_size: 16,
            count: 5,
            alpha: 1.0,
            margin: 0,
        }
    }
}

/// Squared 3x3 Sobel gradient magnitude with replicated borders.
pub fn sobel_energy(img: &ImageGrid) -> Vec<f64> {
    let (h, w) = img.shape();
    let at =
        |r: isize, c: isize| img.get(r.clamp(0, h as isize - 1) as usize, c.clamp(0, w as isize - 1) as usize) as f64;
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h as isize {
        for c in 0..w as isize {
            let gx = (at(r - 1, c + 1) + 2.0 * at(r, c + 1) + at(r + 1, c + 1))
                - (at(r - 1, c - 1) + 2.0 * at(r, c - 1) + at(r + 1, c - 1));
            let gy = (at(r + 1, c - 1) + 2.0 * at(r + 1, c) + at(r + 1, c + 1))
                - (at(r - 1, c - 1) + 2.0 * at(r - 1, c) + at(r - 1, c + 1));
            out.push(gx * gx + gy * gy);
        }
    }
    out
}

/// Tiles the foreground's depth band into non-overlapping patches that
/// avoid the foreground and keeps the `count` most homogeneous, scored by
/// `σ_patch + α √(mean Sobel energy)`; ties go to the top-left patch.
///
/// A band shorter than one patch is widened symmetrically (within the
/// image) to the patch height.
pub fn select_background_roi(img: &ImageGrid, fg: &Mask, opts: &RoiOptions) -> Result<RoiSelection> {
    if fg.shape() != img.shape() {
        return Err(Error::ShapeMismatch {
            expected: img.shape(),
            got: fg.shape(),
        });
    }
    if opts.patch_size < 4 {
        return Err(Error::invalid(format!("patch size {} below 4", opts.patch_size)));
    }
    let (top, bottom) = fg
        .row_span()
        .ok_or_else(|| Error::invalid("foreground mask is empty"))?;
    let (h, w) = img.shape();
    let ps = opts.patch_size;
    let mut lo = top.saturating_sub(opts.margin);
    let mut hi = (bottom + opts.margin).min(h - 1);
    if hi + 1 - lo < ps && ps <= h {
        let missing = ps - (hi + 1 - lo);
        lo = lo.saturating_sub(missing / 2 + missing % 2);
        hi = (lo + ps - 1).min(h - 1);
        lo = hi + 1 - ps;
    }
    let energy = sobel_energy(img);
    let mut candidates = Vec::new();
    let mut r = lo;
    while r + ps <= hi + 1 {
        let mut c = 0;
        while c + ps <= w {
            let inside_fg = (r..r + ps).any(|i| (c..c + ps).any(|j| fg.get(i, j)));
            if !inside_fg {
                let mut vals = Vec::with_capacity(ps * ps);
                let mut e = 0.0;
                for i in r..r + ps {
                    for j in c..c + ps {
                        vals.push(img.get(i, j) as f64);
                        e += energy[i * w + j];
                    }
                }
                let n = vals.len() as f64;
                let mean = vals.iter().sum::<f64>() / n;
                let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
                candidates.push(Patch {
                    row: r,
                    col: c,
                    size: ps,
                    score: sd + opts.alpha * (e / n).sqrt(),
                });
            }
            c += ps;
        }
        r += ps;
    }
    if candidates.is_empty() {
        return Err(Error::invalid(
            "no background patch fits in the foreground's depth band",
        ));
    }
    candidates.sort_by(|a, b| a.score.total_cmp(&b.score).then((a.row, a.col).cmp(&(b.row, b.col))));
    candidates.truncate(opts.count);
    let mut background = Mask::empty(h, w);
    for p in &candidates {
        background = background.union(&Mask::square(&background, p.row, p.col, p.size));
    }
    Ok(RoiSelection {
        foreground: fg.clone(),
        patches: candidates,
        background,
    })
}

/// Foreground for a piecewise-constant target: the largest connected
/// region brighter than the midpoint of its intensity range.
pub fn foreground_from_target(hq: &ImageGrid) -> Option<Mask> {
    let (lo, hi) = hq.min_max();
    if hi - lo < 1e-6 {
        return None;
    }
    let bright = Mask::from_grid(hq, (lo + hi) / 2.0);
    let dark = Mask::from_fn(hq.height(), hq.width(), |r, c| !bright.get(r, c));
    // The smaller class is the structure of interest.
    let m = if bright.count() <= dark.count() { bright } else { dark };
    let comp = largest_component(&m);
    (comp.count() > 0).then_some(comp)
}

/// One row of an evaluation table.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageMetrics {
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
    pub mse: f64,
    pub cnr: f64,
    pub cnr_db: f64,
    pub enl: f64,
    pub snr_db: f64,
}

impl ImageMetrics {
    pub const HEADER: &'static str = "id,psnr,ssim,mse,cnr,cnr_db,enl,snr_db";

    fn values(&self) -> [f64; 7] {
        [
            self.psnr,
            self.ssim,
            self.mse,
            self.cnr,
            self.cnr_db,
            self.enl,
            self.snr_db,
        ]
    }
}

/// Full-reference metrics against `hq`; reference-less metrics when a
/// foreground mask is given (NaN otherwise, or when no background patch
/// fits).
pub fn evaluate_image(
    id: &str,
    output: &ImageGrid,
    hq: &ImageGrid,
    fg: Option<&Mask>,
    roi: &RoiOptions,
) -> Result<ImageMetrics> {
    let m = mse(output, hq)?;
    let mut row = ImageMetrics {
        id: id.to_string(),
        psnr: psnr_from_mse(m, 1.0),
        ssim: ssim(output, hq)?,
        mse: m,
        cnr: f64::NAN,
        cnr_db: f64::NAN,
        enl: f64::NAN,
        snr_db: f64::NAN,
    };
    if let Some(fg) = fg {
        if let Ok(sel) = select_background_roi(output, fg, roi) {
            let c = cnr(output, fg, &sel.background, EPS_STAB)?;
            row.cnr = c;
            row.cnr_db = cnr_db(c);
            row.enl = enl(output, &sel.background, EPS_STAB)?;
            row.snr_db = speckle_snr_db(output, &sel.background, EPS_STAB)?;
        }
    }
    Ok(row)
}

/// Column means and population standard deviations, ignoring NaN entries.
pub fn summarize(rows: &[ImageMetrics]) -> ([f64; 7], [f64; 7]) {
    let mut mean = [f64::NAN; 7];
    let mut std = [f64::NAN; 7];
    for k in 0..7 {
        let vals: Vec<f64> = rows.iter().map(|r| r.values()[k]).filter(|v| !v.is_nan()).collect();
        if vals.is_empty() {
            continue;
        }
        let n = vals.len() as f64;
        let m = vals.iter().sum::<f64>() / n;
        mean[k] = m;
        std[k] = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
    }
    (mean, std)
}

/// Metrics CSV with a header, one row per image, then `mean` and `std`
/// summary rows.
pub fn metrics_csv(rows: &[ImageMetrics]) -> String {
    let mut out = String::new();
    writeln!(out, "{}", ImageMetrics::HEADER).unwrap();
    let fmt_row = |id: &str, vals: [f64; 7]| {
        let cols: Vec<String> = vals.iter().map(|v| v.to_string()).collect();
        format!("{},{}", csv_field(id), cols.join(","))
    };
    for r in rows {
        writeln!(out, "{}", fmt_row(&r.id, r.values())).unwrap();
    }
    let (mean, std) = summarize(rows);
    writeln!(out, "{}", fmt_row("mean", mean)).unwrap();
    writeln!(out, "{}", fmt_row("std", std)).unwrap();
    out
}

/// Quotes a CSV field when needed.
pub fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
