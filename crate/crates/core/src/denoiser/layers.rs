//! Layers with explicit forward caches and backward passes over a flat
//! parameter vector.

use crate::rng::Rng;

use super::scalar::Scalar;

/// Activations in `[n, c, h, w]` order.
#[derive(Debug, Clone, PartialEq)]
pub struct Act<S> {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<S>,
}

impl<S: Scalar> Act<S> {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            n,
            c,
            h,
            w,
            data: vec![S::zero(); n * c * h * w],
        }
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn sample(&self, b: usize) -> &[S] {
        let len = self.c * self.plane();
        &self.data[b * len..(b + 1) * len]
    }

    pub fn sample_mut(&mut self, b: usize) -> &mut [S] {
        let len = self.c * self.plane();
        &mut self.data[b * len..(b + 1) * len]
    }

    pub fn add_assign(&mut self, other: &Act<S>) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + *b;
        }
    }

    /// Channel concatenation `[self | other]`.
    pub fn concat(&self, other: &Act<S>) -> Act<S> {
        let mut out = Act::zeros(self.n, self.c + other.c, self.h, self.w);
        let (la, lb) = (self.c * self.plane(), other.c * other.plane());
        for b in 0..self.n {
            let dst = out.sample_mut(b);
            dst[..la].copy_from_slice(self.sample(b));
            dst[la..la + lb].copy_from_slice(other.sample(b));
        }
        out
    }

    /// Inverse of [`Act::concat`] for gradients.
    pub fn split(&self, c_first: usize) -> (Act<S>, Act<S>) {
        let mut a = Act::zeros(self.n, c_first, self.h, self.w);
        let mut b = Act::zeros(self.n, self.c - c_first, self.h, self.w);
        let la = c_first * self.plane();
        for i in 0..self.n {
            let src = self.sample(i);
            a.sample_mut(i).copy_from_slice(&src[..la]);
            b.sample_mut(i).copy_from_slice(&src[la..]);
        }
        (a, b)
    }
}

/// Named slice of the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Allocates parameter slots while a network is being built.
#[derive(Debug, Default)]
pub struct ParamLayout {
    pub specs: Vec<ParamSpec>,
    pub total: usize,
}

impl ParamLayout {
    pub fn add(&mut self, name: String, shape: Vec<usize>) -> usize {
        let spec = ParamSpec {
            name,
            shape,
            offset: self.total,
        };
        self.total += spec.len();
        let off = spec.offset;
        self.specs.push(spec);
        off
    }
}

/// How a parameter block is initialized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Normal with std `sqrt(2 / fan_in)`.
    Kaiming {
        fan_in: usize,
    },
    Zeros,
    Ones,
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub w: usize,
    pub b: usize,
}

#[derive(Debug, Clone)]
pub struct ConvCache<S> {
    cols: Vec<Vec<S>>,
    in_shape: (usize, usize, usize, usize),
}

impl Conv2d {
    pub fn new(layout: &mut ParamLayout, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        let w = layout.add(format!("{name}.weight"), vec![cout, cin, k, k]);
        let b = layout.add(format!("{name}.bias"), vec![cout]);
        Self {
            cin,
            cout,
            k,
            stride,
            pad: k / 2,
            w,
            b,
        }
    }

    pub fn inits(&self, zero: bool) -> [(usize, usize, Init); 2] {
        let fan_in = self.cin * self.k * self.k;
        [
            (
                self.w,
                self.cout * fan_in,
                if zero { Init::Zeros } else { Init::Kaiming { fan_in } },
            ),
            (self.b, self.cout, Init::Zeros),
        ]
    }

    fn out_size(&self, n: usize) -> usize {
        (n + 2 * self.pad - self.k) / self.stride + 1
    }

    fn im2col<S: Scalar>(&self, x: &[S], h: usize, w: usize, ho: usize, wo: usize) -> Vec<S> {
        let k = self.k;
        let mut cols = vec![S::zero(); self.cin * k * k * ho * wo];
        for ci in 0..self.cin {
            let src = &x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let iy = iy as usize;
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[oy * wo + ox] = src[iy * w + ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im<S: Scalar>(&self, cols: &[S], dx: &mut [S], h: usize, w: usize, ho: usize, wo: usize) {
        let k = self.k;
        for ci in 0..self.cin {
            let dst = &mut dx[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let iy = iy as usize;
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                let d = &mut dst[iy * w + ix as usize];
                                *d = *d + src[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward<S: Scalar>(&self, p: &[S], x: &Act<S>) -> (Act<S>, ConvCache<S>) {
        debug_assert_eq!(x.c, self.cin);
        let (ho, wo) = (self.out_size(x.h), self.out_size(x.w));
        let ckk = self.cin * self.k * self.k;
        let weight = &p[self.w..self.w + self.cout * ckk];
        let bias = &p[self.b..self.b + self.cout];
        let mut out = Act::zeros(x.n, self.cout, ho, wo);
        let mut cache = Vec::with_capacity(x.n);
        for b in 0..x.n {
            let cols = self.im2col(x.sample(b), x.h, x.w, ho, wo);
            let dst = out.sample_mut(b);
            for (co, plane) in dst.chunks_mut(ho * wo).enumerate() {
                plane.fill(bias[co]);
            }
            S::gemm(
                self.cout,
                ckk,
                ho * wo,
                S::one(),
                weight,
                ckk as isize,
                1,
                &cols,
                (ho * wo) as isize,
                1,
                S::one(),
                dst,
                (ho * wo) as isize,
                1,
            );
            cache.push(cols);
        }
        (
            out,
            ConvCache {
                cols: cache,
                in_shape: (x.n, x.c, x.h, x.w),
            },
        )
    }

    /// Accumulates parameter gradients into `g`; returns the input gradient
    /// when `need_dx`.
    pub fn backward<S: Scalar>(
        &self,
        p: &[S],
        g: &mut [S],
        cache: &ConvCache<S>,
        dy: &Act<S>,
        need_dx: bool,
    ) -> Option<Act<S>> {
        let (n, _, h, w) = cache.in_shape;
        let (ho, wo) = (dy.h, dy.w);
        let hw = ho * wo;
        let ckk = self.cin * self.k * self.k;
        let weight = &p[self.w..self.w + self.cout * ckk];
        let mut dx = need_dx.then(|| Act::zeros(n, self.cin, h, w));
        let mut dcols = vec![S::zero(); ckk * hw];
        for b in 0..n {
            let dyb = dy.sample(b);
            let cols = &cache.cols[b];
            {
                let gw = &mut g[self.w..self.w + self.cout * ckk];
                S::gemm(
                    self.cout,
                    hw,
                    ckk,
                    S::one(),
                    dyb,
                    hw as isize,
                    1,
                    cols,
                    1,
                    hw as isize,
                    S::one(),
                    gw,
                    ckk as isize,
                    1,
                );
            }
            for co in 0..self.cout {
                let s = dyb[co * hw..(co + 1) * hw].iter().fold(S::zero(), |a, &v| a + v);
                g[self.b + co] = g[self.b + co] + s;
            }
            if let Some(dx) = dx.as_mut() {
                S::gemm(
                    ckk,
                    self.cout,
                    hw,
                    S::one(),
                    weight,
                    1,
                    ckk as isize,
                    dyb,
                    hw as isize,
                    1,
                    S::zero(),
                    &mut dcols,
                    hw as isize,
                    1,
                );
                self.col2im(&dcols, dx.sample_mut(b), h, w, ho, wo);
            }
        }
        dx
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub channels: usize,
    pub groups: usize,
    pub gamma: usize,
    pub beta: usize,
}

#[derive(Debug, Clone)]
pub struct GnCache<S> {
    xhat: Vec<S>,
    inv_std: Vec<S>,
}

pub const GN_EPS: f64 = 1e-5;

impl GroupNorm {
    pub fn new(layout: &mut ParamLayout, name: &str, channels: usize) -> Self {
        let groups = channels.min(8);
        assert!(channels.is_multiple_of(groups), "channels must divide into groups");
        let gamma = layout.add(format!("{name}.gamma"), vec![channels]);
        let beta = layout.add(format!("{name}.beta"), vec![channels]);
        Self {
            channels,
            groups,
            gamma,
            beta,
        }
    }

    pub fn inits(&self) -> [(usize, usize, Init); 2] {
        [
            (self.gamma, self.channels, Init::Ones),
            (self.beta, self.channels, Init::Zeros),
        ]
    }

    pub fn forward<S: Scalar>(&self, p: &[S], x: &Act<S>) -> (Act<S>, GnCache<S>) {
        let cg = self.channels / self.groups;
        let hw = x.plane();
        let m = cg * hw;
        let mut out = Act::zeros(x.n, x.c, x.h, x.w);
        let mut xhat = vec![S::zero(); x.data.len()];
        let mut inv_std = Vec::with_capacity(x.n * self.groups);
        let eps = S::of(GN_EPS);
        let inv_m = S::of(1.0 / m as f64);
        for b in 0..x.n {
            let base = b * x.c * hw;
            for gi in 0..self.groups {
                let lo = base + gi * m;
                let seg = &x.data[lo..lo + m];
                let mean = seg.iter().fold(S::zero(), |a, &v| a + v) * inv_m;
                let var = seg.iter().fold(S::zero(), |a, &v| a + (v - mean) * (v - mean)) * inv_m;
                let inv = S::one() / (var + eps).sqrt();
                inv_std.push(inv);
                for j in 0..m {
                    let c = gi * cg + j / hw;
                    let xh = (seg[j] - mean) * inv;
                    xhat[lo + j] = xh;
                    out.data[lo + j] = p[self.gamma + c] * xh + p[self.beta + c];
                }
            }
        }
        (out, GnCache { xhat, inv_std })
    }

    pub fn backward<S: Scalar>(&self, p: &[S], g: &mut [S], cache: &GnCache<S>, dy: &Act<S>) -> Act<S> {
        let cg = self.channels / self.groups;
        let hw = dy.plane();
        let m = cg * hw;
        let mut dx = Act::zeros(dy.n, dy.c, dy.h, dy.w);
        let inv_m = S::of(1.0 / m as f64);
        let mut dxhat = vec![S::zero(); m];
        for b in 0..dy.n {
            let base = b * dy.c * hw;
            for gi in 0..self.groups {
                let lo = base + gi * m;
                let mut sum = S::zero();
                let mut sum_x = S::zero();
                for j in 0..m {
                    let c = gi * cg + j / hw;
                    let d = dy.data[lo + j];
                    let xh = cache.xhat[lo + j];
                    g[self.gamma + c] = g[self.gamma + c] + d * xh;
                    g[self.beta + c] = g[self.beta + c] + d;
                    let dh = d * p[self.gamma + c];
                    dxhat[j] = dh;
                    sum = sum + dh;
                    sum_x = sum_x + dh * xh;
                }
                let inv = cache.inv_std[b * self.groups + gi];
                for j in 0..m {
                    let xh = cache.xhat[lo + j];
                    dx.data[lo + j] = inv * (dxhat[j] - (sum + xh * sum_x) * inv_m);
                }
            }
        }
        dx
    }
}

#[inline]
fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

pub fn silu<S: Scalar>(x: &[S]) -> Vec<S> {
    x.iter().map(|&v| v * sigmoid(v)).collect()
}

/// Gradient of SiLU given its input `x`.
pub fn silu_backward<S: Scalar>(x: &[S], dy: &[S]) -> Vec<S> {
    x.iter()
        .zip(dy)
        .map(|(&v, &d)| {
            let s = sigmoid(v);
            d * s * (S::one() + v * (S::one() - s))
        })
        .collect()
}

pub fn silu_act<S: Scalar>(x: &Act<S>) -> Act<S> {
    Act {
        data: silu(&x.data),
        ..*x
    }
}

pub fn silu_act_backward<S: Scalar>(x: &Act<S>, dy: &Act<S>) -> Act<S> {
    Act {
        data: silu_backward(&x.data, &dy.data),
        ..*x
    }
}

/// Fully connected `y = W x + b` on `[n, in]` rows.
#[derive(Debug, Clone)]
pub struct Linear {
    pub fan_in: usize,
    pub fan_out: usize,
    pub w: usize,
    pub b: usize,
}

impl Linear {
    pub fn new(layout: &mut ParamLayout, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let w = layout.add(format!("{name}.weight"), vec![fan_out, fan_in]);
        let b = layout.add(format!("{name}.bias"), vec![fan_out]);
        Self { fan_in, fan_out, w, b }
    }

    pub fn inits(&self) -> [(usize, usize, Init); 2] {
        [
            (
                self.w,
                self.fan_in * self.fan_out,
                Init::Kaiming { fan_in: self.fan_in },
            ),
            (self.b, self.fan_out, Init::Zeros),
        ]
    }

    pub fn forward<S: Scalar>(&self, p: &[S], x: &[S], n: usize) -> Vec<S> {
        let mut y = Vec::with_capacity(n * self.fan_out);
        for _ in 0..n {
            y.extend_from_slice(&p[self.b..self.b + self.fan_out]);
        }
        S::gemm(
            n,
            self.fan_in,
            self.fan_out,
            S::one(),
            x,
            self.fan_in as isize,
            1,
            &p[self.w..],
            1,
            self.fan_in as isize,
            S::one(),
            &mut y,
            self.fan_out as isize,
            1,
        );
        y
    }

    pub fn backward<S: Scalar>(&self, p: &[S], g: &mut [S], x: &[S], dy: &[S], n: usize) -> Vec<S> {
        S::gemm(
            self.fan_out,
            n,
            self.fan_in,
            S::one(),
            dy,
            1,
            self.fan_out as isize,
            x,
            self.fan_in as isize,
            1,
            S::one(),
            &mut g[self.w..self.w + self.fan_in * self.fan_out],
            self.fan_in as isize,
            1,
        );
        for row in dy.chunks(self.fan_out) {
            for (o, &d) in row.iter().enumerate() {
                g[self.b + o] = g[self.b + o] + d;
            }
        }
        let mut dx = vec![S::zero(); n * self.fan_in];
        S::gemm(
            n,
            self.fan_out,
            self.fan_in,
            S::one(),
            dy,
            self.fan_out as isize,
            1,
            &p[self.w..],
            self.fan_in as isize,
            1,
            S::zero(),
            &mut dx,
            self.fan_in as isize,
            1,
        );
        dx
    }
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2<S: Scalar>(x: &Act<S>) -> Act<S> {
    let (h, w) = (x.h * 2, x.w * 2);
    let mut out = Act::zeros(x.n, x.c, h, w);
    for nc in 0..x.n * x.c {
        let src = &x.data[nc * x.h * x.w..(nc + 1) * x.h * x.w];
        let dst = &mut out.data[nc * h * w..(nc + 1) * h * w];
        for r in 0..h {
            for c in 0..w {
                dst[r * w + c] = src[(r / 2) * x.w + c / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward<S: Scalar>(dy: &Act<S>) -> Act<S> {
    let (h, w) = (dy.h / 2, dy.w / 2);
    let mut dx = Act::zeros(dy.n, dy.c, h, w);
    for nc in 0..dy.n * dy.c {
        let src = &dy.data[nc * dy.h * dy.w..(nc + 1) * dy.h * dy.w];
        let dst = &mut dx.data[nc * h * w..(nc + 1) * h * w];
        for r in 0..dy.h {
            for c in 0..dy.w {
                let d = &mut dst[(r / 2) * w + c / 2];
                *d = *d + src[r * dy.w + c];
            }
        }
    }
    dx
}

/// Fills `params` according to `inits`.
pub fn initialize<S: Scalar>(params: &mut [S], inits: &[(usize, usize, Init)], rng: &mut Rng) {
    for &(off, len, init) in inits {
        let dst = &mut params[off..off + len];
        match init {
            Init::Zeros => dst.fill(S::zero()),
            Init::Ones => dst.fill(S::one()),
            Init::Kaiming { fan_in } => {
                let std = (2.0 / fan_in as f64).sqrt();
                for v in dst {
                    *v = S::of(std * rng.normal());
                }
            }
        }
    }
}
