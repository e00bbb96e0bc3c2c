//! Mean-reverting SDE `dx = θ_t (μ − x) dt + σ_t dw` with `σ_t² = 2 λ² θ_t`.
//!
//! Steps have unit width, so `θ̄_i = Σ_{j ≤ i} θ_j` and the marginal of
//! `x_i` given `x_0` is `N(μ + (x_0 − μ) e^{−θ̄_i}, λ² (1 − e^{−2 θ̄_i}))`.

use crate::error::{Error, Result};
use crate::grid::ImageGrid;
use crate::kv::KvDoc;
use crate::rng::Rng;

/// Largest admissible `e^{−θ̄_T}`.
pub const TERMINAL_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThetaProfile {
    Constant(f64),
    /// Linear ramp from `lo` at step 1 to `hi` at step T.
    Linear {
        lo: f64,
        hi: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    steps: usize,
    profile: ThetaProfile,
    lambda: f64,
    /// `theta[i - 1]` is θ_i.
    theta: Vec<f64>,
    sigma: Vec<f64>,
    /// `theta_bar[i]`, with `theta_bar[0] = 0`.
    theta_bar: Vec<f64>,
}

impl Schedule {
    pub fn new(steps: usize, profile: ThetaProfile, lambda: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::invalid(format!("lambda must be positive, got {lambda}")));
        }
        let theta: Vec<f64> = (1..=steps)
            .map(|i| match profile {
                ThetaProfile::Constant(v) => v,
                ThetaProfile::Linear { lo, hi } if steps == 1 => (lo + hi) / 2.0,
                ThetaProfile::Linear { lo, hi } => lo + (hi - lo) * (i - 1) as f64 / (steps - 1) as f64,
            })
            .collect();
        if let Some(bad) = theta.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
            return Err(Error::invalid(format!("theta values must be positive, got {bad}")));
        }
        let sigma = theta.iter().map(|t| (2.0 * lambda * lambda * t).sqrt()).collect();
        let mut theta_bar = Vec::with_capacity(steps + 1);
        theta_bar.push(0.0);
        for t in &theta {
            theta_bar.push(theta_bar.last().unwrap() + t);
        }
        let residual = (-theta_bar[steps]).exp();
        if residual > TERMINAL_TOLERANCE {
            return Err(Error::invalid(format!(
                "exp(-theta_bar_T) = {residual:.3e} exceeds {TERMINAL_TOLERANCE:e}; increase theta or T"
            )));
        }
        Ok(Self {
            steps,
            profile,
            lambda,
            theta,
            sigma,
            theta_bar,
        })
    }

    /// Constant `θ = 8 / T`, so `θ̄_T = 8`.
    pub fn with_default_theta(steps: usize, lambda: f64) -> Result<Self> {
        Self::new(steps, ThetaProfile::Constant(8.0 / steps as f64), lambda)
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn profile(&self) -> ThetaProfile {
        self.profile
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// θ_i for `1 ≤ i ≤ T`.
    pub fn theta(&self, i: usize) -> f64 {
        self.theta[i - 1]
    }

    pub fn sigma(&self, i: usize) -> f64 {
        self.sigma[i - 1]
    }

    pub fn theta_bar(&self, i: usize) -> f64 {
        self.theta_bar[i]
    }

    /// Closed-form `(e^{−θ̄_t}, v_t)`.
    pub fn marginal_coefficients(&self, t: usize) -> (f64, f64) {
        let tb = self.theta_bar[t];
        ((-tb).exp(), self.lambda * self.lambda * -(-2.0 * tb).exp_m1())
    }

    /// Whether some explicit forward step overshoots the mean (θ_i ≥ 1).
    pub fn overshoots(&self) -> bool {
        self.theta.iter().any(|&t| t >= 1.0)
    }

    /// Evenly spaced step indices `0 = i_0 < … < i_n = T` for an `n`-step
    /// reverse pass.
    pub fn step_indices(&self, steps_used: usize) -> Result<Vec<usize>> {
        if steps_used == 0 || steps_used > self.steps {
            return Err(Error::invalid(format!(
                "steps_used must be in 1..={}, got {steps_used}",
                self.steps
            )));
        }
        Ok((0..=steps_used)
            .map(|k| ((k * self.steps) as f64 / steps_used as f64).round() as usize)
            .collect())
    }

    pub fn from_kv(doc: &KvDoc) -> Result<Self> {
        let steps: usize = doc.parsed_or("T", 100)?;
        let lambda: f64 = doc.parsed_or("lambda", 0.5)?;
        let profile = match doc.get("profile").unwrap_or("constant") {
            "constant" => ThetaProfile::Constant(doc.parsed_or("theta", 8.0 / steps.max(1) as f64)?),
            "linear" => ThetaProfile::Linear {
                lo: doc
                    .parsed("theta_lo")?
                    .ok_or_else(|| Error::Config("linear profile needs `theta_lo`".into()))?,
                hi: doc
                    .parsed("theta_hi")?
                    .ok_or_else(|| Error::Config("linear profile needs `theta_hi`".into()))?,
            },
            other => return Err(Error::Config(format!("unknown theta profile `{other}`"))),
        };
        Self::new(steps, profile, lambda)
    }

    pub fn to_kv(&self) -> KvDoc {
        let mut doc = KvDoc::new();
        doc.set("T", self.steps);
        doc.set("lambda", self.lambda);
        match self.profile {
            ThetaProfile::Constant(t) => {
                doc.set("profile", "constant");
                doc.set("theta", t);
            }
            ThetaProfile::Linear { lo, hi } => {
                doc.set("profile", "linear");
                doc.set("theta_lo", lo);
                doc.set("theta_hi", hi);
            }
        }
        doc
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionState {
    pub x: ImageGrid,
    pub t: usize,
}

fn check_step(sched: &Schedule, t: usize) -> Result<()> {
    if t > sched.steps() {
        return Err(Error::invalid(format!("step {t} outside 0..={}", sched.steps())));
    }
    Ok(())
}

/// Mean image and shared scalar variance of `x_t | x_0`.
pub fn forward_marginal(x0: &ImageGrid, mu: &ImageGrid, sched: &Schedule, t: usize) -> Result<(ImageGrid, f64)> {
    x0.ensure_same_shape(mu)?;
    check_step(sched, t)?;
    let (decay, var) = sched.marginal_coefficients(t);
    let m = mu.zip_map(x0, |m, x| (m as f64 + (x as f64 - m as f64) * decay) as f32)?;
    Ok((m, var))
}

/// `x_t = m_t + √v_t ε`, one standard normal per pixel.
pub fn forward_sample(
    x0: &ImageGrid,
    mu: &ImageGrid,
    sched: &Schedule,
    t: usize,
    rng: &mut Rng,
) -> Result<DiffusionState> {
    let (_, x) = forward_sample_with_noise(x0, mu, sched, t, rng)?;
    Ok(DiffusionState { x, t })
}

/// As [`forward_sample`], returning `(ε, x_t)`.
pub fn forward_sample_with_noise(
    x0: &ImageGrid,
    mu: &ImageGrid,
    sched: &Schedule,
    t: usize,
    rng: &mut Rng,
) -> Result<(ImageGrid, ImageGrid)> {
    let (m, v) = forward_marginal(x0, mu, sched, t)?;
    let mut eps = ImageGrid::zeros(m.height(), m.width());
    rng.fill_normal(eps.data_mut());
    if t == 0 {
        return Ok((eps, x0.clone()));
    }
    let sd = v.sqrt();
    let x = m.zip_map(&eps, |m, e| (m as f64 + sd * e as f64) as f32)?;
    Ok((eps, x))
}

/// Euler–Maruyama trajectory `x_0, x_1, …, x_T` with unit steps.
pub fn forward_em(x0: &ImageGrid, mu: &ImageGrid, sched: &Schedule, rng: &mut Rng) -> Result<Vec<DiffusionState>> {
    x0.ensure_same_shape(mu)?;
    if let Some(i) = (1..=sched.steps()).find(|&i| sched.theta(i) >= 2.0) {
        return Err(Error::invalid(format!(
            "theta_{i} = {} >= 2 makes the explicit step unstable",
            sched.theta(i)
        )));
    }
    let mut traj = Vec::with_capacity(sched.steps() + 1);
    let mut x: Vec<f64> = x0.to_f64();
    let m: Vec<f64> = mu.to_f64();
    traj.push(DiffusionState { x: x0.clone(), t: 0 });
    for i in 1..=sched.steps() {
        let (th, sg) = (sched.theta(i), sched.sigma(i));
        for (xv, mv) in x.iter_mut().zip(&m) {
            *xv += th * (mv - *xv) + sg * rng.normal();
        }
        let state = ImageGrid::from_f64(x0.height(), x0.width(), &x)?;
        if !state.is_finite() {
            return Err(Error::NonFinite { step: i });
        }
        traj.push(DiffusionState { x: state, t: i });
    }
    Ok(traj)
}

/// Estimate of `∇_x log p_t(x)` for the current state.
pub trait ScoreFn: Sync {
    fn score(&self, x: &ImageGrid, mu: &ImageGrid, t: usize) -> Result<ImageGrid>;
}

/// Predicts the standard-normal noise that produced `x_t`.
pub trait NoisePredictor: Sync {
    fn predict(&self, x: &ImageGrid, mu: &ImageGrid, t: usize) -> Result<ImageGrid>;
}

/// Conditional Gaussian score `−(x − m_t(x_0)) / v_t` for a known clean
/// image.
pub struct AnalyticScore<'a> {
    pub x0: &'a ImageGrid,
    pub sched: &'a Schedule,
}

pub fn analytic_score<'a>(x0: &'a ImageGrid, sched: &'a Schedule) -> AnalyticScore<'a> {
    AnalyticScore { x0, sched }
}

impl ScoreFn for AnalyticScore<'_> {
    fn score(&self, x: &ImageGrid, mu: &ImageGrid, t: usize) -> Result<ImageGrid> {
        if t == 0 {
            return Err(Error::invalid("score undefined at t = 0 (zero variance)"));
        }
        let (m, v) = forward_marginal(self.x0, mu, self.sched, t)?;
        x.zip_map(&m, |x, m| (-(x as f64 - m as f64) / v) as f32)
    }
}

/// `s = −ε̂ / √v_t` around a noise predictor.
pub struct NoiseScore<'a, P: ?Sized> {
    pub predictor: &'a P,
    pub sched: &'a Schedule,
}

pub fn score_from_noise<'a, P: NoisePredictor + ?Sized>(predictor: &'a P, sched: &'a Schedule) -> NoiseScore<'a, P> {
    NoiseScore { predictor, sched }
}

impl<P: NoisePredictor + ?Sized> ScoreFn for NoiseScore<'_, P> {
    fn score(&self, x: &ImageGrid, mu: &ImageGrid, t: usize) -> Result<ImageGrid> {
        if t == 0 {
            return Err(Error::invalid("score undefined at t = 0 (zero variance)"));
        }
        let eps = self.predictor.predict(x, mu, t)?;
        x.ensure_same_shape(&eps)?;
        let scale = 1.0 / self.sched.marginal_coefficients(t).1.sqrt();
        Ok(eps.map(|e| (-(e as f64) * scale) as f32))
    }
}

/// Zero score everywhere.
pub struct ZeroScore;

impl ScoreFn for ZeroScore {
    fn score(&self, x: &ImageGrid, _mu: &ImageGrid, _t: usize) -> Result<ImageGrid> {
        Ok(ImageGrid::zeros(x.height(), x.width()))
    }
}

/// Reverse-time Euler–Maruyama from `x_T` to `t = 0` over `steps_used`
/// evenly spaced steps.
///
/// A jump from `i` to `j < i` uses `Δθ̄ = θ̄_i − θ̄_j` in place of `θ Δ`, so
/// the update is `x ← x − Δθ̄ (μ − x) + 2 λ² Δθ̄ s + λ √(2 Δθ̄) z`. The final
/// jump adds no noise.
pub fn reverse_sample(
    x_t: &ImageGrid,
    mu: &ImageGrid,
    sched: &Schedule,
    score: &dyn ScoreFn,
    rng: &mut Rng,
    steps_used: usize,
) -> Result<ImageGrid> {
    x_t.ensure_same_shape(mu)?;
    if !x_t.is_finite() {
        return Err(Error::NonFinite { step: sched.steps() });
    }
    let idx = sched.step_indices(steps_used)?;
    let lam2 = sched.lambda() * sched.lambda();
    let m: Vec<f64> = mu.to_f64();
    let mut x = x_t.clone();
    let mut z = vec![0f32; x.len()];
    for k in (1..idx.len()).rev() {
        let (i, j) = (idx[k], idx[k - 1]);
        let d = sched.theta_bar(i) - sched.theta_bar(j);
        let s = score.score(&x, mu, i)?;
        let last = j == 0;
        if !last {
            rng.fill_normal(&mut z);
        }
        let noise_sd = (2.0 * lam2 * d).sqrt();
        let next: Vec<f32> = x
            .data()
            .iter()
            .zip(s.data())
            .zip(&m)
            .zip(&z)
            .map(|(((&xv, &sv), &mv), &zv)| {
                let xv = xv as f64;
                let mut out = xv - d * (mv - xv) + 2.0 * lam2 * d * sv as f64;
                if !last {
                    out += noise_sd * zv as f64;
                }
                out as f32
            })
            .collect();
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { step: j });
        }
        x = ImageGrid::new(x.height(), x.width(), next)?;
    }
    Ok(x)
}

/// Terminal state `x_T ~ N(μ, λ²)`.
pub fn terminal_sample(mu: &ImageGrid, sched: &Schedule, rng: &mut Rng) -> ImageGrid {
    let mut noise = vec![0f32; mu.len()];
    rng.fill_normal(&mut noise);
    let lam = sched.lambda();
    let data = mu
        .data()
        .iter()
        .zip(&noise)
        .map(|(&m, &n)| (m as f64 + lam * n as f64) as f32)
        .collect();
    ImageGrid::new(mu.height(), mu.width(), data).expect("same shape as mu")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant(h: usize, w: usize, v: f32) -> ImageGrid {
        ImageGrid::filled(h, w, v)
    }

    #[test]
    fn schedule_examples() {
        let s = Schedule::new(100, ThetaProfile::Constant(0.08), 0.5).unwrap();
        assert!((s.theta_bar(100) - 8.0).abs() < 1e-12);
        for i in 1..=100 {
            assert!((s.sigma(i).powi(2) / 0.04 - 1.0).abs() < 1e-12);
        }
        let s = Schedule::new(1, ThetaProfile::Constant(10.0), 1.0).unwrap();
        assert_eq!(s.theta_bar(1), 10.0);
        assert!((s.sigma(1).powi(2) - 20.0).abs() < 1e-12);
        assert!(Schedule::new(100, ThetaProfile::Constant(0.08), 0.0).is_err());
        assert!(Schedule::new(100, ThetaProfile::Constant(0.01), 0.5).is_err());
        assert!(Schedule::new(0, ThetaProfile::Constant(1.0), 0.5).is_err());
        assert!(Schedule::new(10, ThetaProfile::Constant(-1.0), 0.5).is_err());
    }

    #[test]
    fn linear_profile_and_invariants() {
        let s = Schedule::new(50, ThetaProfile::Linear { lo: 0.05, hi: 0.3 }, 0.7).unwrap();
        assert!((s.theta(1) - 0.05).abs() < 1e-15 && (s.theta(50) - 0.3).abs() < 1e-15);
        for i in 1..=50 {
            let ratio = s.sigma(i).powi(2) / (2.0 * 0.49 * s.theta(i));
            assert!((ratio - 1.0).abs() < 1e-12);
            assert!(s.theta_bar(i) > s.theta_bar(i - 1));
        }
        let back = Schedule::from_kv(&KvDoc::parse(&s.to_kv().to_text()).unwrap()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn step_indices_are_even() {
        let s = Schedule::with_default_theta(100, 0.5).unwrap();
        assert_eq!(s.step_indices(100).unwrap(), (0..=100).collect::<Vec<_>>());
        assert_eq!(s.step_indices(4).unwrap(), vec![0, 25, 50, 75, 100]);
        assert_eq!(s.step_indices(1).unwrap(), vec![0, 100]);
        assert!(s.step_indices(0).is_err());
        assert!(s.step_indices(101).is_err());
    }

    #[test]
    fn marginal_examples() {
        let s = Schedule::with_default_theta(100, 0.5).unwrap();
        let x0 = ImageGrid::from_fn(3, 3, |r, c| (r * 3 + c) as f32 / 9.0);
        let mu = constant(3, 3, 0.2);
        let (m, v) = forward_marginal(&x0, &mu, &s, 0).unwrap();
        assert_eq!(m, x0);
        assert_eq!(v, 0.0);

        // θ̄_t = ln 2, λ = 1, x0 = 1, μ = 0.
        let s = Schedule::new(1, ThetaProfile::Constant(2f64.ln()), 1.0);
        assert!(s.is_err(), "a single ln 2 step cannot reach the terminal tolerance");
        let s = Schedule::new(100, ThetaProfile::Constant(2f64.ln() / 10.0), 1.0).unwrap();
        let (m, v) = forward_marginal(&constant(2, 2, 1.0), &constant(2, 2, 0.0), &s, 10).unwrap();
        assert!(m.data().iter().all(|&x| (x - 0.5).abs() < 1e-6));
        assert!((v - 0.75).abs() < 1e-12);

        let (m, v) = forward_marginal(&constant(2, 2, 1.0), &constant(2, 2, 0.0), &s, 100).unwrap();
        assert!(m.data().iter().all(|&x| x.abs() < 1e-3));
        assert!((v - 1.0).abs() < 1e-5);
    }

    #[test]
    fn sample_at_zero_is_exact() {
        let s = Schedule::with_default_theta(10, 0.5).unwrap();
        let x0 = ImageGrid::from_fn(4, 4, |r, c| (r + c) as f32);
        let st = forward_sample(&x0, &constant(4, 4, 0.0), &s, 0, &mut Rng::new(3)).unwrap();
        assert_eq!(st.x, x0);
        assert!(forward_sample(&x0, &constant(4, 4, 0.0), &s, 11, &mut Rng::new(3)).is_err());
    }

    #[test]
    fn em_without_noise_contracts() {
        // Huge λ would add noise; instead compare a noiseless recursion via
        // the fixed point and a separate scalar contraction.
        let s = Schedule::new(20, ThetaProfile::Constant(0.5), 1e-12).unwrap();
        let mu = constant(2, 2, 0.3);
        let traj = forward_em(&mu, &mu, &s, &mut Rng::new(0)).unwrap();
        assert!(traj
            .iter()
            .all(|st| st.x.data().iter().all(|&v| (v - 0.3).abs() < 1e-6)));

        let x0 = constant(1, 1, 1.0);
        let zero = constant(1, 1, 0.0);
        let traj = forward_em(&x0, &zero, &s, &mut Rng::new(0)).unwrap();
        for (i, st) in traj.iter().enumerate() {
            let expected = 0.5f64.powi(i as i32);
            assert!((st.x.get(0, 0) as f64 - expected).abs() < 1e-6 * (1.0 + expected));
        }

        let unstable = Schedule::new(5, ThetaProfile::Constant(2.5), 0.5).unwrap();
        assert!(forward_em(&x0, &zero, &unstable, &mut Rng::new(0)).is_err());
        assert!(unstable.overshoots());
    }

    #[test]
    fn analytic_score_examples() {
        let s = Schedule::with_default_theta(100, 0.5).unwrap();
        let x0 = constant(2, 2, 0.8);
        let mu = constant(2, 2, -0.1);
        let score = analytic_score(&x0, &s);
        let (m, v) = forward_marginal(&x0, &mu, &s, 30).unwrap();
        let at_mode = score.score(&m, &mu, 30).unwrap();
        assert!(at_mode.data().iter().all(|&v| v.abs() < 1e-6));
        let shifted = m.map(|x| (x as f64 + v.sqrt()) as f32);
        let sc = score.score(&shifted, &mu, 30).unwrap();
        assert!(sc.data().iter().all(|&g| (g as f64 + 1.0 / v.sqrt()).abs() < 1e-4));
        assert!(score.score(&m, &mu, 0).is_err());
    }

    struct Oracle<'a> {
        eps: &'a ImageGrid,
    }

    impl NoisePredictor for Oracle<'_> {
        fn predict(&self, _x: &ImageGrid, _mu: &ImageGrid, _t: usize) -> Result<ImageGrid> {
            Ok(self.eps.clone())
        }
    }

    struct Zero;

    impl NoisePredictor for Zero {
        fn predict(&self, x: &ImageGrid, _mu: &ImageGrid, _t: usize) -> Result<ImageGrid> {
            Ok(ImageGrid::zeros(x.height(), x.width()))
        }
    }

    #[test]
    fn true_noise_reproduces_analytic_score() {
        let s = Schedule::with_default_theta(100, 0.5).unwrap();
        let x0 = ImageGrid::from_fn(5, 5, |r, c| ((r * 5 + c) as f32 * 0.37).sin());
        let mu = constant(5, 5, 0.1);
        let (eps, x) = forward_sample_with_noise(&x0, &mu, &s, 40, &mut Rng::new(8)).unwrap();
        let a = analytic_score(&x0, &s).score(&x, &mu, 40).unwrap();
        let b = score_from_noise(&Oracle { eps: &eps }, &s).score(&x, &mu, 40).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() <= 1e-4 * (1.0 + p.abs()));
        }
        let z = score_from_noise(&Zero, &s).score(&x, &mu, 40).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reverse_fixed_point_at_mu() {
        let s = Schedule::new(10, ThetaProfile::Constant(0.8), 1e-12).unwrap();
        let mu = ImageGrid::from_fn(3, 3, |r, c| (r as f32 - c as f32) * 0.1);
        let out = reverse_sample(&mu, &mu, &s, &ZeroScore, &mut Rng::new(1), 10).unwrap();
        for (a, b) in out.data().iter().zip(mu.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn reverse_reports_divergence() {
        struct Huge;
        impl ScoreFn for Huge {
            fn score(&self, x: &ImageGrid, _mu: &ImageGrid, _t: usize) -> Result<ImageGrid> {
                Ok(x.map(|_| f32::MAX))
            }
        }
        let s = Schedule::with_default_theta(10, 0.5).unwrap();
        let mu = constant(2, 2, 0.0);
        let err = reverse_sample(&mu, &mu, &s, &Huge, &mut Rng::new(1), 10).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }

    #[test]
    fn oracle_reverse_recovers_x0() {
        let s = Schedule::with_default_theta(100, 0.5).unwrap();
        let x0 = ImageGrid::from_fn(8, 8, |r, c| 1.0 + 0.5 * ((r + 2 * c) as f32 * 0.3).sin());
        let mu = x0.map(|v| v * 0.6 + 0.1);
        let mut rng = Rng::new(21);
        let xt = forward_sample(&x0, &mu, &s, 100, &mut rng).unwrap().x;
        let out = reverse_sample(&xt, &mu, &s, &analytic_score(&x0, &s), &mut rng, 100).unwrap();
        let err: f64 = out
            .data()
            .iter()
            .zip(x0.data())
            .map(|(a, b)| ((a - b) as f64).powi(2))
            .sum();
        let norm: f64 = x0.data().iter().map(|v| (*v as f64).powi(2)).sum();
        assert!((err / norm).sqrt() < 0.05);
    }
}
