//! Two-level time-conditioned encoder–decoder noise predictor.
//!
//! ```text
//! [x_t | μ] ─ conv_in ─ res1 ──────────────────────── concat ─ res3 ─ out
//!                         └─ down ─ res2 ─ mid ─ up ─────┘
//! ```
//!
//! Every residual block adds a per-channel projection of the time
//! embedding after its first convolution.

use crate::error::{Error, Result};
use crate::grid::ImageGrid;
use crate::kv::KvDoc;
use crate::rng::Rng;
use crate::sde::NoisePredictor;

use super::layers::*;
use super::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UNetConfig {
    /// Channels at full resolution; doubled at the coarse level.
    pub base_channels: usize,
    /// Sinusoidal embedding width (even).
    pub time_dim: usize,
    /// Width of the embedding MLP.
    pub emb_dim: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            base_channels: 16,
            time_dim: 32,
            emb_dim: 64,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.time_dim == 0 || !self.time_dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "time_dim must be even and positive, got {}",
                self.time_dim
            )));
        }
        let groups = self.base_channels.min(8);
        if self.base_channels == 0 || !self.base_channels.is_multiple_of(groups) || self.emb_dim == 0 {
            return Err(Error::Config(format!(
                "base_channels {} must be a positive multiple of 8 (or below 8)",
                self.base_channels
            )));
        }
        Ok(())
    }

    pub fn write_kv(&self, doc: &mut KvDoc) {
        doc.set("base_channels", self.base_channels);
        doc.set("time_dim", self.time_dim);
        doc.set("emb_dim", self.emb_dim);
    }

    pub fn from_kv(doc: &KvDoc) -> Result<Self> {
        let d = Self::default();
        let cfg = Self {
            base_channels: doc.parsed_or("base_channels", d.base_channels)?,
            time_dim: doc.parsed_or("time_dim", d.time_dim)?,
            emb_dim: doc.parsed_or("emb_dim", d.emb_dim)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// `[sin(t ω_k), cos(t ω_k)]` with `ω_k = 10000^{−2k/d}`, one row per `t`.
pub fn sinusoidal_embedding(ts: &[usize], dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        let t = t as f64;
        for k in 0..half {
            out.push((t * 10000f64.powf(-2.0 * k as f64 / dim as f64)).sin());
        }
        for k in 0..half {
            out.push((t * 10000f64.powf(-2.0 * k as f64 / dim as f64)).cos());
        }
    }
    out
}

#[derive(Debug, Clone)]
struct ResBlock {
    gn1: GroupNorm,
    conv1: Conv2d,
    emb: Linear,
    gn2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

struct ResCache<S> {
    gn1: GnCache<S>,
    g1: Act<S>,
    conv1: ConvCache<S>,
    gn2: GnCache<S>,
    g2: Act<S>,
    conv2: ConvCache<S>,
    skip: Option<ConvCache<S>>,
}

impl ResBlock {
    fn new(layout: &mut ParamLayout, name: &str, cin: usize, cout: usize, emb_dim: usize) -> Self {
        Self {
            gn1: GroupNorm::new(layout, &format!("{name}.norm1"), cin),
            conv1: Conv2d::new(layout, &format!("{name}.conv1"), cin, cout, 3, 1),
            emb: Linear::new(layout, &format!("{name}.emb"), emb_dim, cout),
            gn2: GroupNorm::new(layout, &format!("{name}.norm2"), cout),
            conv2: Conv2d::new(layout, &format!("{name}.conv2"), cout, cout, 3, 1),
            skip: (cin != cout).then(|| Conv2d::new(layout, &format!("{name}.skip"), cin, cout, 1, 1)),
        }
    }

    fn inits(&self) -> Vec<(usize, usize, Init)> {
        let mut v = Vec::new();
        v.extend(self.gn1.inits());
        v.extend(self.conv1.inits(false));
        v.extend(self.emb.inits());
        v.extend(self.gn2.inits());
        v.extend(self.conv2.inits(false));
        if let Some(s) = &self.skip {
            v.extend(s.inits(false));
        }
        v
    }

    fn forward<S: Scalar>(&self, p: &[S], x: &Act<S>, emb: &[S]) -> (Act<S>, ResCache<S>) {
        let (g1, gn1) = self.gn1.forward(p, x);
        let (mut h, conv1) = self.conv1.forward(p, &silu_act(&g1));
        let e = self.emb.forward(p, emb, x.n);
        let hw = h.plane();
        for b in 0..h.n {
            for c in 0..h.c {
                let bias = e[b * h.c + c];
                let lo = (b * h.c + c) * hw;
                h.data[lo..lo + hw].iter_mut().for_each(|v| *v = *v + bias);
            }
        }
        let (g2, gn2) = self.gn2.forward(p, &h);
        let (mut out, conv2) = self.conv2.forward(p, &silu_act(&g2));
        let skip = match &self.skip {
            Some(conv) => {
                let (s, c) = conv.forward(p, x);
                out.add_assign(&s);
                Some(c)
            }
            None => {
                out.add_assign(x);
                None
            }
        };
        (
            out,
            ResCache {
                gn1,
                g1,
                conv1,
                gn2,
                g2,
                conv2,
                skip,
            },
        )
    }

    /// Returns the input gradient; accumulates into `demb`.
    fn backward<S: Scalar>(
        &self,
        p: &[S],
        g: &mut [S],
        cache: &ResCache<S>,
        emb: &[S],
        dy: &Act<S>,
        demb: &mut [S],
    ) -> Act<S> {
        let da2 = self.conv2.backward(p, g, &cache.conv2, dy, true).expect("dx requested");
        let dg2 = silu_act_backward(&cache.g2, &da2);
        let dh = self.gn2.backward(p, g, &cache.gn2, &dg2);
        let hw = dh.plane();
        let de: Vec<S> = (0..dh.n * dh.c)
            .map(|i| dh.data[i * hw..(i + 1) * hw].iter().fold(S::zero(), |a, &v| a + v))
            .collect();
        let d_emb = self.emb.backward(p, g, emb, &de, dh.n);
        for (a, b) in demb.iter_mut().zip(&d_emb) {
            *a = *a + *b;
        }
        let da1 = self
            .conv1
            .backward(p, g, &cache.conv1, &dh, true)
            .expect("dx requested");
        let dg1 = silu_act_backward(&cache.g1, &da1);
        let mut dx = self.gn1.backward(p, g, &cache.gn1, &dg1);
        match (&self.skip, &cache.skip) {
            (Some(conv), Some(c)) => dx.add_assign(&conv.backward(p, g, c, dy, true).expect("dx requested")),
            _ => dx.add_assign(dy),
        }
        dx
    }
}

#[derive(Debug, Clone)]
struct Arch {
    temb1: Linear,
    temb2: Linear,
    conv_in: Conv2d,
    res1: ResBlock,
    down: Conv2d,
    res2: ResBlock,
    mid: ResBlock,
    up: Conv2d,
    res3: ResBlock,
    gn_out: GroupNorm,
    conv_out: Conv2d,
}

/// Everything the backward pass needs from a forward pass.
pub struct ForwardCache<S> {
    ts: Vec<usize>,
    e1: Vec<S>,
    a1: Vec<S>,
    e2: Vec<S>,
    emb: Vec<S>,
    conv_in: ConvCache<S>,
    res1: ResCache<S>,
    down: ConvCache<S>,
    res2: ResCache<S>,
    mid: ResCache<S>,
    up: ConvCache<S>,
    res3: ResCache<S>,
    gn_out: GnCache<S>,
    g_out: Act<S>,
    conv_out: ConvCache<S>,
}

#[derive(Debug, Clone)]
pub struct UNet<S> {
    config: UNetConfig,
    arch: Arch,
    specs: Vec<ParamSpec>,
    pub params: Vec<S>,
}

impl<S: Scalar> UNet<S> {
    /// Kaiming-initialized network with a zero output layer, so the
    /// untrained model predicts zero noise.
    pub fn new(config: UNetConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let c = config.base_channels;
        let mut layout = ParamLayout::default();
        let arch = Arch {
            temb1: Linear::new(&mut layout, "time.fc1", config.time_dim, config.emb_dim),
            temb2: Linear::new(&mut layout, "time.fc2", config.emb_dim, config.emb_dim),
            conv_in: Conv2d::new(&mut layout, "conv_in", 2, c, 3, 1),
            res1: ResBlock::new(&mut layout, "enc1", c, c, config.emb_dim),
            down: Conv2d::new(&mut layout, "down", c, c, 3, 2),
            res2: ResBlock::new(&mut layout, "enc2", c, 2 * c, config.emb_dim),
            mid: ResBlock::new(&mut layout, "mid", 2 * c, 2 * c, config.emb_dim),
            up: Conv2d::new(&mut layout, "up", 2 * c, c, 3, 1),
            res3: ResBlock::new(&mut layout, "dec1", 2 * c, c, config.emb_dim),
            gn_out: GroupNorm::new(&mut layout, "norm_out", c),
            conv_out: Conv2d::new(&mut layout, "conv_out", c, 1, 3, 1),
        };
        let mut inits = Vec::new();
        inits.extend(arch.temb1.inits());
        inits.extend(arch.temb2.inits());
        inits.extend(arch.conv_in.inits(false));
        inits.extend(arch.res1.inits());
        inits.extend(arch.down.inits(false));
        inits.extend(arch.res2.inits());
        inits.extend(arch.mid.inits());
        inits.extend(arch.up.inits(false));
        inits.extend(arch.res3.inits());
        inits.extend(arch.gn_out.inits());
        inits.extend(arch.conv_out.inits(true));
        let mut params = vec![S::zero(); layout.total];
        initialize(&mut params, &inits, rng);
        Ok(Self {
            config,
            arch,
            specs: layout.specs,
            params,
        })
    }

    pub fn config(&self) -> UNetConfig {
        self.config
    }

    pub fn param_specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Same network with parameters converted to another precision.
    pub fn cast<T: Scalar>(&self) -> UNet<T> {
        UNet {
            config: self.config,
            arch: self.arch.clone(),
            specs: self.specs.clone(),
            params: self.params.iter().map(|v| T::of(v.f64())).collect(),
        }
    }

    pub fn set_params(&mut self, params: Vec<S>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::invalid(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                params.len()
            )));
        }
        self.params = params;
        Ok(())
    }

    /// Noise prediction for `[n, 2, h, w]` inputs (`x_t` then `μ`) at
    /// per-sample steps `ts`. `h` and `w` must be even.
    pub fn forward(&self, input: &Act<S>, ts: &[usize]) -> Result<(Act<S>, ForwardCache<S>)> {
        if input.c != 2 || ts.len() != input.n {
            return Err(Error::invalid(
                "network input must be [n, 2, h, w] with one step per sample",
            ));
        }
        if !input.h.is_multiple_of(2) || !input.w.is_multiple_of(2) || input.h < 2 || input.w < 2 {
            return Err(Error::invalid(format!(
                "image sides must be even, got {}x{}",
                input.h, input.w
            )));
        }
        let a = &self.arch;
        let p = &self.params;
        let n = input.n;
        let sin: Vec<S> = sinusoidal_embedding(ts, self.config.time_dim)
            .into_iter()
            .map(S::of)
            .collect();
        let e1 = a.temb1.forward(p, &sin, n);
        let a1 = silu(&e1);
        let e2 = a.temb2.forward(p, &a1, n);
        let emb = silu(&e2);

        let (h0, conv_in) = a.conv_in.forward(p, input);
        let (h1, res1) = a.res1.forward(p, &h0, &emb);
        let (d, down) = a.down.forward(p, &h1);
        let (h2, res2) = a.res2.forward(p, &d, &emb);
        let (h3, mid) = a.mid.forward(p, &h2, &emb);
        let (u, up) = a.up.forward(p, &upsample2(&h3));
        let (h4, res3) = a.res3.forward(p, &u.concat(&h1), &emb);
        let (g_out, gn_out) = a.gn_out.forward(p, &h4);
        let (out, conv_out) = a.conv_out.forward(p, &silu_act(&g_out));
        Ok((
            out,
            ForwardCache {
                ts: ts.to_vec(),
                e1,
                a1,
                e2,
                emb,
                conv_in,
                res1,
                down,
                res2,
                mid,
                up,
                res3,
                gn_out,
                g_out,
                conv_out,
            },
        ))
    }

    /// Parameter gradient of `Σ dout · output`.
    pub fn backward(&self, cache: &ForwardCache<S>, dout: &Act<S>) -> Vec<S> {
        let a = &self.arch;
        let p = &self.params;
        let mut g = vec![S::zero(); p.len()];
        let n = dout.n;
        let emb = &cache.emb;
        let mut demb = vec![S::zero(); emb.len()];

        let da = a
            .conv_out
            .backward(p, &mut g, &cache.conv_out, dout, true)
            .expect("dx requested");
        let dg = silu_act_backward(&cache.g_out, &da);
        let dh4 = a.gn_out.backward(p, &mut g, &cache.gn_out, &dg);
        let dc = a.res3.backward(p, &mut g, &cache.res3, emb, &dh4, &mut demb);
        let (du, mut dh1) = dc.split(self.config.base_channels);
        let dup = a.up.backward(p, &mut g, &cache.up, &du, true).expect("dx requested");
        let dh3 = upsample2_backward(&dup);
        let dh2 = a.mid.backward(p, &mut g, &cache.mid, emb, &dh3, &mut demb);
        let dd = a.res2.backward(p, &mut g, &cache.res2, emb, &dh2, &mut demb);
        dh1.add_assign(
            &a.down
                .backward(p, &mut g, &cache.down, &dd, true)
                .expect("dx requested"),
        );
        let dh0 = a.res1.backward(p, &mut g, &cache.res1, emb, &dh1, &mut demb);
        a.conv_in.backward(p, &mut g, &cache.conv_in, &dh0, false);

        let de2 = silu_backward(&cache.e2, &demb);
        let da1 = a.temb2.backward(p, &mut g, &cache.a1, &de2, n);
        let de1 = silu_backward(&cache.e1, &da1);
        let sin: Vec<S> = sinusoidal_embedding(&cache.ts, self.config.time_dim)
            .into_iter()
            .map(S::of)
            .collect();
        a.temb1.backward(p, &mut g, &sin, &de1, n);
        g
    }

    /// Packs `(x_t, μ)` image pairs into a network input.
    pub fn pack(pairs: &[(&ImageGrid, &ImageGrid)]) -> Result<Act<S>> {
        let (h, w) = pairs
            .first()
            .map(|(x, _)| x.shape())
            .ok_or_else(|| Error::invalid("empty batch"))?;
        let mut act = Act::zeros(pairs.len(), 2, h, w);
        for (b, (x, mu)) in pairs.iter().enumerate() {
            x.ensure_same_shape(mu)?;
            if x.shape() != (h, w) {
                return Err(Error::ShapeMismatch {
                    expected: (h, w),
                    got: x.shape(),
                });
            }
            let dst = act.sample_mut(b);
            for (d, &v) in dst[..h * w].iter_mut().zip(x.data()) {
                *d = S::of(v as f64);
            }
            for (d, &v) in dst[h * w..].iter_mut().zip(mu.data()) {
                *d = S::of(v as f64);
            }
        }
        Ok(act)
    }
}

impl<S: Scalar> NoisePredictor for UNet<S> {
    fn predict(&self, x: &ImageGrid, mu: &ImageGrid, t: usize) -> Result<ImageGrid> {
        x.ensure_same_shape(mu)?;
        let input = Self::pack(&[(x, mu)])?;
        let (out, _) = self.forward(&input, &[t])?;
        let data: Vec<f32> = out.data.iter().map(|v| v.f64() as f32).collect();
        ImageGrid::new(x.height(), x.width(), data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> UNetConfig {
        UNetConfig {
            base_channels: 8,
            time_dim: 8,
            emb_dim: 8,
        }
    }

    #[test]
    fn embedding_distinguishes_steps() {
        let e = sinusoidal_embedding(&[5, 5, 6], 16);
        assert_eq!(e[..16], e[16..32]);
        assert_ne!(e[..16], e[32..]);
        assert_eq!(e[0], 5f64.sin());
        assert_eq!(e[8], 5f64.cos());
    }

    #[test]
    fn untrained_model_predicts_zero() {
        let net: UNet<f32> = UNet::new(UNetConfig::default(), &mut Rng::new(0)).unwrap();
        let x = ImageGrid::from_fn(8, 8, |r, c| (r as f32 - c as f32) * 0.1);
        let eps = net.predict(&x, &x, 10).unwrap();
        assert!(eps.data().iter().all(|&v| v == 0.0));
        assert_eq!(eps.shape(), (8, 8));
    }

    #[test]
    fn parameter_count_is_deterministic() {
        let a: UNet<f32> = UNet::new(UNetConfig::default(), &mut Rng::new(0)).unwrap();
        let b: UNet<f32> = UNet::new(UNetConfig::default(), &mut Rng::new(1)).unwrap();
        assert_eq!(a.num_params(), b.num_params());
        let sum: usize = a.param_specs().iter().map(|s| s.len()).sum();
        assert_eq!(sum, a.num_params());
        assert_ne!(a.params, b.params);
    }

    #[test]
    fn rejects_bad_inputs() {
        let net: UNet<f32> = UNet::new(small(), &mut Rng::new(0)).unwrap();
        let odd = ImageGrid::zeros(7, 8);
        assert!(net.predict(&odd, &odd, 1).is_err());
        assert!(net
            .predict(&ImageGrid::zeros(8, 8), &ImageGrid::zeros(4, 8), 1)
            .is_err());
        let bad = UNetConfig { time_dim: 7, ..small() };
        assert!(UNet::<f32>::new(bad, &mut Rng::new(0)).is_err());
    }

    fn randomized(seed: u64) -> UNet<f64> {
        let mut net: UNet<f64> = UNet::new(small(), &mut Rng::new(seed)).unwrap();
        // Break the zero output layer and unit norms so every path carries gradient.
        let mut rng = Rng::new(seed ^ 77);
        for v in net.params.iter_mut() {
            *v += 0.1 * rng.normal();
        }
        net
    }

    fn loss(net: &UNet<f64>, input: &Act<f64>, ts: &[usize], weights: &[f64]) -> f64 {
        let (out, _) = net.forward(input, ts).unwrap();
        out.data.iter().zip(weights).map(|(o, w)| o * w + 0.5 * o * o).sum()
    }

    #[test]
    fn gradients_match_finite_differences() {
        let net = randomized(3);
        let mut rng = Rng::new(5);
        let (n, h, w) = (2, 6, 8);
        let mut input = Act::zeros(n, 2, h, w);
        input.data.iter_mut().for_each(|v| *v = rng.normal());
        let ts = [3, 40];
        let weights: Vec<f64> = (0..n * h * w).map(|_| rng.normal()).collect();
        let (out, cache) = net.forward(&input, &ts).unwrap();
        let mut dout = out.clone();
        for (d, (o, w)) in dout.data.iter_mut().zip(out.data.iter().zip(&weights)) {
            *d = w + o;
        }
        let grad = net.backward(&cache, &dout);
        let step = 1e-4;
        for _ in 0..60 {
            let i = rng.below(net.num_params() as u64) as usize;
            let mut plus = net.clone();
            plus.params[i] += step;
            let mut minus = net.clone();
            minus.params[i] -= step;
            let fd = (loss(&plus, &input, &ts, &weights) - loss(&minus, &input, &ts, &weights)) / (2.0 * step);
            let err = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-6);
            assert!(err < 1e-4, "param {i}: fd {fd} vs {}", grad[i]);
        }
    }
}
