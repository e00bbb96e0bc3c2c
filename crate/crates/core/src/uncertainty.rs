//! Cross-model ensembles: mean prediction, per-pixel variance, and the
//! per-image variance-versus-error correlation.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::denoiser::despeckle;
use crate::error::{Error, Result};
use crate::grid::{ImageGrid, Mask};
use crate::metrics::{csv_field, mse};
use crate::pgm::write_heatmap_pgm;
use crate::rng::{derive_seed, Rng};
use crate::sde::{NoisePredictor, Schedule};
use crate::tensor::write_tensor;

/// How ensemble members draw their sampling noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnsembleSeeds {
    /// Member `k` samples with `derive_seed(base, k)`.
    Independent(u64),
    /// Every member samples with the same seed.
    Shared(u64),
}

impl EnsembleSeeds {
    pub fn member(self, k: usize) -> u64 {
        match self {
            Self::Independent(base) => derive_seed(base, k as u64),
            Self::Shared(seed) => seed,
        }
    }
}

/// Pixelwise mean and population variance across outputs.
pub fn ensemble_stats(outputs: &[ImageGrid]) -> Result<(ImageGrid, ImageGrid)> {
    let first = outputs
        .first()
        .ok_or_else(|| Error::invalid("ensemble needs at least one output"))?;
    for o in &outputs[1..] {
        first.ensure_same_shape(o)?;
    }
    let (h, w) = first.shape();
    let k = outputs.len() as f64;
    let mut mean = vec![0.0f64; h * w];
    for o in outputs {
        for (m, &v) in mean.iter_mut().zip(o.data()) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= k);
    let mut var = vec![0.0f64; h * w];
    for o in outputs {
        for ((s, &v), m) in var.iter_mut().zip(o.data()).zip(&mean) {
            *s += (v as f64 - m).powi(2);
        }
    }
    var.iter_mut().for_each(|s| *s /= k);
    Ok((ImageGrid::from_f64(h, w, &mean)?, ImageGrid::from_f64(h, w, &var)?))
}

/// Runs every member's despeckling chain independently and returns the
/// outputs' pixelwise mean and population variance.
pub fn ensemble_predict<P: NoisePredictor>(
    mu: &ImageGrid,
    models: &[P],
    sched: &Schedule,
    steps_used: usize,
    seeds: EnsembleSeeds,
) -> Result<(ImageGrid, ImageGrid)> {
    if models.len() < 2 {
        return Err(Error::invalid(format!(
            "ensemble needs at least 2 models, got {}",
            models.len()
        )));
    }
    let outputs = ensemble_outputs(mu, models, sched, steps_used, seeds)?;
    ensemble_stats(&outputs)
}

/// The individual member outputs behind [`ensemble_predict`].
pub fn ensemble_outputs<P: NoisePredictor>(
    mu: &ImageGrid,
    models: &[P],
    sched: &Schedule,
    steps_used: usize,
    seeds: EnsembleSeeds,
) -> Result<Vec<ImageGrid>> {
    models
        .par_iter()
        .enumerate()
        .map(|(k, m)| despeckle(mu, m, sched, steps_used, &mut Rng::new(seeds.member(k))))
        .collect()
}

/// Seeded partition of `0..n` into `k` folds whose sizes differ by at most
/// one. Returns the fold index of every item.
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(Error::invalid(format!("need at least 2 folds, got {k}")));
    }
    if n < k {
        return Err(Error::invalid(format!("cannot split {n} items into {k} folds")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    Rng::new(seed).shuffle(&mut order);
    let mut fold = vec![0; n];
    for (pos, &item) in order.iter().enumerate() {
        fold[item] = pos % k;
    }
    Ok(fold)
}

/// Items in fold `f` (held out) and the rest (training).
pub fn fold_members(assignment: &[usize], f: usize) -> (Vec<usize>, Vec<usize>) {
    (0..assignment.len()).partition(|&i| assignment[i] == f)
}

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::invalid(format!("length mismatch: {} vs {}", x.len(), y.len())));
    }
    if x.len() < 3 {
        return Err(Error::invalid(format!("need at least 3 points, got {}", x.len())));
    }
    Ok(())
}

fn centered(v: &[f64]) -> Vec<f64> {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| x - m).collect()
}

/// Pearson product-moment correlation.
pub fn pearson_r(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    let (dx, dy) = (centered(x), centered(y));
    let sxx: f64 = dx.iter().map(|v| v * v).sum();
    let syy: f64 = dy.iter().map(|v| v * v).sum();
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::invalid("correlation undefined for constant input"));
    }
    let sxy: f64 = dx.iter().zip(&dy).map(|(a, b)| a * b).sum();
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Ordinary least squares `y ≈ slope·x + intercept`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    check_pair(x, y)?;
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::invalid("linear fit undefined for constant x"));
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    Ok((slope, my - slope * mx))
}

/// Correlation of `x` against `rounds` seeded shuffles of `y`.
pub fn permutation_null(x: &[f64], y: &[f64], rounds: usize, seed: u64) -> Result<Vec<f64>> {
    check_pair(x, y)?;
    let mut rng = Rng::new(seed);
    let mut shuffled = y.to_vec();
    (0..rounds)
        .map(|_| {
            rng.shuffle(&mut shuffled);
            pearson_r(x, &shuffled)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    pub mean_prediction: ImageGrid,
    pub variance_map: ImageGrid,
    pub mean_variance: f64,
    pub mse_vs_hq: f64,
}

impl ImageRecord {
    /// `mean_variance` averages the variance map over `region`, or over all
    /// pixels when `region` is `None`.
    pub fn new(id: &str, mean: ImageGrid, var: ImageGrid, hq: &ImageGrid, region: Option<&Mask>) -> Result<Self> {
        let mean_variance = match region {
            None => var.mean(),
            Some(m) => {
                let v = m.select(&var)?;
                if v.is_empty() {
                    return Err(Error::invalid("variance region is empty"));
                }
                v.iter().sum::<f64>() / v.len() as f64
            }
        };
        Ok(Self {
            id: id.to_string(),
            mse_vs_hq: mse(&mean, hq)?,
            mean_prediction: mean,
            variance_map: var,
            mean_variance,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleReport {
    pub records: Vec<ImageRecord>,
    pub r: f64,
    pub slope: f64,
    pub intercept: f64,
}

/// Pearson r and the least-squares fit of per-image MSE on per-image mean
/// variance.
pub fn variance_error_analysis(records: &[ImageRecord]) -> Result<(f64, f64, f64)> {
    let var: Vec<f64> = records.iter().map(|r| r.mean_variance).collect();
    let err: Vec<f64> = records.iter().map(|r| r.mse_vs_hq).collect();
    let r = pearson_r(&var, &err)?;
    let (slope, intercept) = linear_fit(&var, &err)?;
    Ok((r, slope, intercept))
}

impl EnsembleReport {
    pub fn from_records(records: Vec<ImageRecord>) -> Result<Self> {
        let (r, slope, intercept) = variance_error_analysis(&records)?;
        Ok(Self {
            records,
            r,
            slope,
            intercept,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("image_id,mean_variance,mse\n");
        for rec in &self.records {
            writeln!(out, "{},{},{}", csv_field(&rec.id), rec.mean_variance, rec.mse_vs_hq).unwrap();
        }
        writeln!(out, "r={}, slope={}, intercept={}", self.r, self.slope, self.intercept).unwrap();
        out
    }

    /// Writes `report.csv` plus `<id>_var.irsd` / `<id>_var.pgm` per image.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join("report.csv");
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        for rec in &self.records {
            write_tensor(dir.join(format!("{}_var.irsd", rec.id)), &rec.variance_map)?;
            write_heatmap_pgm(dir.join(format!("{}_var.pgm", rec.id)), &rec.variance_map)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    struct Constant(f32);

    impl NoisePredictor for Constant {
        fn predict(&self, x: &ImageGrid, _mu: &ImageGrid, _t: usize) -> Result<ImageGrid> {
            Ok(ImageGrid::filled(x.height(), x.width(), self.0))
        }
    }

    fn mu() -> ImageGrid {
        ImageGrid::from_fn(8, 8, |r, c| 0.2 + 0.05 * ((r * 3 + c) % 7) as f32)
    }

    #[test]
    fn stats_of_zero_and_one() {
        let (m, v) = ensemble_stats(&[ImageGrid::zeros(3, 4), ImageGrid::filled(3, 4, 1.0)]).unwrap();
        assert!(m.data().iter().all(|&x| x == 0.5));
        assert!(v.data().iter().all(|&x| x == 0.25));
    }

    #[test]
    fn shared_seed_duplicates_have_zero_variance() {
        let sched = Schedule::with_default_theta(20, 0.5).unwrap();
        let models = [Constant(0.1), Constant(0.1), Constant(0.1)];
        let (_, v) = ensemble_predict(&mu(), &models, &sched, 20, EnsembleSeeds::Shared(4)).unwrap();
        assert!(v.data().iter().all(|&x| x == 0.0));
        let (_, v) = ensemble_predict(&mu(), &models, &sched, 20, EnsembleSeeds::Independent(4)).unwrap();
        assert!(v.mean() > 0.0);
        assert!(ensemble_predict(&mu(), &models[..1], &sched, 20, EnsembleSeeds::Shared(4)).is_err());
    }

    #[test]
    fn mean_is_average_and_beats_members() {
        let sched = Schedule::with_default_theta(20, 0.5).unwrap();
        let models = [Constant(0.0), Constant(0.3), Constant(-0.2)];
        let seeds = EnsembleSeeds::Independent(11);
        let outs = ensemble_outputs(&mu(), &models, &sched, 20, seeds).unwrap();
        let (m, v) = ensemble_predict(&mu(), &models, &sched, 20, seeds).unwrap();
        for i in 0..m.len() {
            let avg = outs.iter().map(|o| o.data()[i] as f64).sum::<f64>() / 3.0;
            assert!((m.data()[i] as f64 - avg).abs() < 1e-6);
            assert!(v.data()[i] >= 0.0);
        }
        let hq = ImageGrid::filled(8, 8, 0.4);
        let member_mse = outs.iter().map(|o| mse(o, &hq).unwrap()).sum::<f64>() / 3.0;
        assert!(mse(&m, &hq).unwrap() <= member_mse + 1e-9);
    }

    #[test]
    fn kfold_examples() {
        let sizes = |n, k| {
            let a = kfold_split(n, k, 3).unwrap();
            let mut s: Vec<usize> = (0..k).map(|f| a.iter().filter(|&&x| x == f).count()).collect();
            s.sort_unstable();
            s
        };
        assert_eq!(sizes(10, 5), vec![2; 5]);
        assert_eq!(sizes(11, 5), vec![2, 2, 2, 2, 3]);
        assert_eq!(kfold_split(11, 5, 3).unwrap(), kfold_split(11, 5, 3).unwrap());
        assert!(kfold_split(4, 5, 3).is_err());
        assert!(kfold_split(4, 1, 3).is_err());
        let (held, train) = fold_members(&kfold_split(10, 5, 3).unwrap(), 2);
        assert_eq!(held.len(), 2);
        assert_eq!(train.len(), 8);
    }

    #[test]
    fn pearson_examples() {
        let x = [1.0, 2.0, 3.0, 4.0, 7.0];
        assert!((pearson_r(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let y: Vec<f64> = x.iter().map(|v| -2.0 * v + 3.0).collect();
        assert!((pearson_r(&x, &y).unwrap() + 1.0).abs() < 1e-12);
        assert!((pearson_r(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0]).unwrap() - 0.9819).abs() < 1e-3);
        assert!(pearson_r(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
        assert!(pearson_r(&[1.0, 2.0], &[1.0, 2.0]).is_err());
    }

    fn record(id: &str, var: f64, err: f64) -> ImageRecord {
        ImageRecord {
            id: id.into(),
            mean_prediction: ImageGrid::zeros(1, 1),
            variance_map: ImageGrid::filled(1, 1, var as f32),
            mean_variance: var,
            mse_vs_hq: err,
        }
    }

    #[test]
    fn exact_linear_relation() {
        let recs: Vec<ImageRecord> = [0.1, 0.4, 0.2, 0.9]
            .iter()
            .enumerate()
            .map(|(i, &v)| record(&i.to_string(), v, 2.0 * v))
            .collect();
        let (r, slope, intercept) = variance_error_analysis(&recs).unwrap();
        assert!((r - 1.0).abs() < 1e-12);
        assert!((slope - 2.0).abs() < 1e-12);
        assert!(intercept.abs() < 1e-12);
        let report = EnsembleReport::from_records(recs).unwrap();
        let csv = report.to_csv();
        assert!(csv.starts_with("image_id,mean_variance,mse\n0,0.1,0.2\n"));
        assert!(csv
            .trim_end()
            .lines()
            .last()
            .unwrap()
            .starts_with("r=1, slope=2, intercept="));
        let dir = tempfile::tempdir().unwrap();
        report.write(dir.path()).unwrap();
        assert!(dir.path().join("3_var.pgm").exists());
        assert!(dir.path().join("3_var.irsd").exists());
    }

    #[test]
    fn null_correlations_are_small() {
        let mut rng = Rng::new(8);
        let x: Vec<f64> = (0..96).map(|_| rng.normal()).collect();
        let y: Vec<f64> = x.iter().map(|v| v + 0.3 * rng.normal()).collect();
        let null = permutation_null(&x, &y, 100, 1).unwrap();
        assert!(null.iter().filter(|r| r.abs() < 0.3).count() >= 95);
        assert!(pearson_r(&x, &y).unwrap() > 0.9);
    }

    #[test]
    fn region_restricted_variance() {
        let var = ImageGrid::from_fn(2, 2, |r, _| r as f32);
        let hq = ImageGrid::zeros(2, 2);
        let top = Mask::from_fn(2, 2, |r, _| r == 0);
        assert_eq!(
            ImageRecord::new("a", hq.clone(), var.clone(), &hq, None)
                .unwrap()
                .mean_variance,
            0.5
        );
        assert_eq!(
            ImageRecord::new("a", hq.clone(), var.clone(), &hq, Some(&top))
                .unwrap()
                .mean_variance,
            0.0
        );
        assert!(ImageRecord::new("a", hq.clone(), var, &hq, Some(&Mask::empty(2, 2))).is_err());
    }

    proptest! {
        #[test]
        fn pearson_is_affine_invariant(
            pts in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 3..30),
            a in prop_oneof![-5.0f64..-0.1, 0.1f64..5.0],
            b in -5.0f64..5.0,
        ) {
            let x: Vec<f64> = pts.iter().map(|p| p.0).collect();
            let y: Vec<f64> = pts.iter().map(|p| p.1).collect();
            if let Ok(r) = pearson_r(&x, &y) {
                prop_assert!((-1.0..=1.0).contains(&r));
                let xt: Vec<f64> = x.iter().map(|v| a * v + b).collect();
                let rt = pearson_r(&xt, &y).unwrap();
                prop_assert!((rt - a.signum() * r).abs() < 1e-9);
            }
        }

        #[test]
        fn variance_is_nonnegative(vals in prop::collection::vec(0.0f32..1.0, 12)) {
            let outs: Vec<ImageGrid> = vals.chunks(4).map(|c| ImageGrid::new(2, 2, c.to_vec()).unwrap()).collect();
            let (_, v) = ensemble_stats(&outs).unwrap();
            prop_assert!(v.data().iter().all(|&x| x >= 0.0));
        }
    }
}
