//! Counter-based random numbers.
//!
//! The stream is SplitMix64 evaluated at successive counters: draw `k`
//! (starting at 1) is `mix64(key + k * 0x9E3779B97F4A7C15)` with wrapping
//! arithmetic, where `mix64` is the Stafford variant-13 finalizer. The key is
//! the seed itself. Any implementation of these two lines reproduces the
//! stream bit for bit.
//!
//! * uniforms: `((u >> 11) + 0.5) * 2^-53`, always inside the open interval (0, 1)
//! * normals: Box–Muller on two uniforms; the sine branch is cached
//! * Rayleigh(σ): `σ * sqrt(-2 ln U)`
//!
//! Child streams come from [`derive_seed`]: `seed ^ mix64(stream + GOLDEN)`.
//! Parallel work takes one child stream per task instead of sharing a state.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for child stream `stream` of `seed`.
#[inline]
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    seed ^ mix64(stream.wrapping_add(GOLDEN))
}

/// Stable 64-bit hash of a label, for deriving named child streams.
pub fn label_hash(label: &str) -> u64 {
    // FNV-1a, then finalized.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    mix64(h)
}

#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    counter: u64,
    spare_normal: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            counter: 0,
            spare_normal: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of 64-bit words drawn so far.
    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// Independent generator for sub-task `stream`.
    pub fn child(&self, stream: u64) -> Rng {
        Rng::new(derive_seed(self.seed, stream))
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.seed.wrapping_add(self.counter.wrapping_mul(GOLDEN)))
    }

    /// Uniform in the open interval (0, 1).
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n`. `n` must be positive.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0);
        // Lemire's multiply-shift; the bias is below 2^-64 * n, irrelevant here.
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (2.0 * std::f64::consts::PI * u2).sin_cos();
        self.spare_normal = Some(r * s);
        r * c
    }

    pub fn rayleigh(&mut self, scale: f64) -> f64 {
        scale * (-2.0 * self.uniform().ln()).sqrt()
    }

    pub fn fill_normal(&mut self, out: &mut [f32]) {
        for v in out {
            *v = self.normal() as f32;
        }
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}
