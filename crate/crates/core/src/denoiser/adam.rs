use super::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam with bias correction and decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<S> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<S>,
    pub v: Vec<S>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(config: AdamConfig, num_params: usize) -> Self {
        Self {
            config,
            step: 0,
            m: vec![S::zero(); num_params],
            v: vec![S::zero(); num_params],
        }
    }

    /// One update with learning rate `lr` (which may differ from the
    /// configured base rate under a decay schedule).
    pub fn update(&mut self, params: &mut [S], grads: &[S], lr: f64) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powf(self.step as f64);
        let bc2 = 1.0 - c.beta2.powf(self.step as f64);
        let (b1, b2) = (S::of(c.beta1), S::of(c.beta2));
        let (ob1, ob2) = (S::of(1.0 - c.beta1), S::of(1.0 - c.beta2));
        let step_size = S::of(lr / bc1);
        let inv_bc2 = S::of(1.0 / bc2);
        let eps = S::of(c.eps);
        let decay = S::of(lr * c.weight_decay);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + ob1 * g;
            self.v[i] = b2 * self.v[i] + ob2 * g * g;
            let denom = (self.v[i] * inv_bc2).sqrt() + eps;
            params[i] = params[i] - step_size * self.m[i] / denom - decay * params[i];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_is_normalized_gradient() {
        let cfg = AdamConfig {
            lr: 0.01,
            ..Default::default()
        };
        let mut adam: Adam<f64> = Adam::new(cfg, 3);
        let mut p = vec![1.0, -2.0, 0.5];
        let g = [0.3, -4.0, 1e-3];
        adam.update(&mut p, &g, cfg.lr);
        let start = [1.0, -2.0, 0.5];
        for i in 0..3 {
            let expected = start[i] - cfg.lr * g[i] / (g[i].abs() + cfg.eps);
            assert!((p[i] - expected).abs() < 1e-12, "{} vs {expected}", p[i]);
        }
    }

    #[test]
    fn zero_rate_keeps_parameters() {
        let mut adam: Adam<f32> = Adam::new(
            AdamConfig {
                lr: 0.0,
                ..Default::default()
            },
            2,
        );
        let mut p = vec![0.25f32, 3.0];
        for _ in 0..5 {
            adam.update(&mut p, &[1.0, -1.0], 0.0);
        }
        assert_eq!(p, vec![0.25, 3.0]);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut adam: Adam<f64> = Adam::new(
            AdamConfig {
                lr: 0.05,
                ..Default::default()
            },
            2,
        );
        let mut p = vec![3.0, -2.0];
        for _ in 0..2000 {
            let g = [2.0 * (p[0] - 1.0), 2.0 * (p[1] + 0.5)];
            adam.update(&mut p, &g, 0.05);
        }
        assert!((p[0] - 1.0).abs() < 1e-3 && (p[1] + 0.5).abs() < 1e-3);
    }
}
