//! Minimal layer kit with hand-written backward passes.
//!
//! Activations are `[C, H, W]` grids (or `[n]` vectors for dense layers).
//! Each `backward` returns the input cotangent and, when given an
//! accumulator of the same layer type, adds the parameter gradients into it.

use crate::numerics::{lit, Grid, Rng, Scalar};

/// 2-D convolution with square kernel, zero padding and integer stride.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<S> {
    /// `[out, in, k, k]`
    pub weight: Grid<S>,
    /// `[out]`
    pub bias: Grid<S>,
    pub stride: usize,
    pub pad: usize,
}

/// Output indices `o` in `0..out_len` whose tap `o*stride + k_off - pad`
/// lands inside `0..in_len`.
fn tap_range(k_off: usize, pad: usize, stride: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let lo = if k_off >= pad {
        0
    } else {
        (pad - k_off).div_ceil(stride)
    };
    let hi = match (in_len + pad).checked_sub(k_off + 1) {
        Some(top) => (top / stride + 1).min(out_len),
        None => 0,
    };
    (lo, hi.max(lo))
}

impl<S: Scalar> Conv2d<S> {
    /// He-uniform weights, zero bias.
    pub fn init(rng: &mut Rng, in_c: usize, out_c: usize, k: usize, stride: usize, pad: usize) -> Self {
        let bound = (6.0 / (in_c * k * k) as f64).sqrt();
        Self {
            weight: Grid::from_fn(&[out_c, in_c, k, k], |_| lit(rng.uniform_in(-bound, bound))),
            bias: Grid::zeros(&[out_c]),
            stride,
            pad,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: Grid::zeros(self.weight.shape()),
            bias: Grid::zeros(self.bias.shape()),
            stride: self.stride,
            pad: self.pad,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim(1)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim(0)
    }

    pub fn kernel(&self) -> usize {
        self.weight.dim(2)
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel();
        (
            (h + 2 * self.pad - k) / self.stride + 1,
            (w + 2 * self.pad - k) / self.stride + 1,
        )
    }

    pub fn forward(&self, x: &Grid<S>) -> Grid<S> {
        let (ic, h, w) = (x.dim(0), x.dim(1), x.dim(2));
        debug_assert_eq!(ic, self.in_channels());
        let (oc, k, s, p) = (self.out_channels(), self.kernel(), self.stride, self.pad);
        let (oh, ow) = self.out_hw(h, w);
        let mut out = Grid::zeros(&[oc, oh, ow]);
        let xd = x.data();
        let wd = self.weight.data();
        let od = out.data_mut();
        for o in 0..oc {
            let plane = &mut od[o * oh * ow..(o + 1) * oh * ow];
            plane.fill(self.bias.data()[o]);
            for i in 0..ic {
                let src = &xd[i * h * w..(i + 1) * h * w];
                for ky in 0..k {
                    let (y0, y1) = tap_range(ky, p, s, h, oh);
                    for kx in 0..k {
                        let (x0, x1) = tap_range(kx, p, s, w, ow);
                        let wv = wd[((o * ic + i) * k + ky) * k + kx];
                        for oy in y0..y1 {
                            let row = &src[(oy * s + ky - p) * w..];
                            let orow = &mut plane[oy * ow..(oy + 1) * ow];
                            for ox in x0..x1 {
                                orow[ox] += wv * row[ox * s + kx - p];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn backward(&self, x: &Grid<S>, gout: &Grid<S>, grads: Option<&mut Self>) -> Grid<S> {
        let (ic, h, w) = (x.dim(0), x.dim(1), x.dim(2));
        let (oc, k, s, p) = (self.out_channels(), self.kernel(), self.stride, self.pad);
        let (oh, ow) = (gout.dim(1), gout.dim(2));
        let mut gin = Grid::zeros(x.shape());
        let xd = x.data();
        let gd = gout.data();
        let wd = self.weight.data();
        let mut grads = grads;
        {
            let gi = gin.data_mut();
            for o in 0..oc {
                let gplane = &gd[o * oh * ow..(o + 1) * oh * ow];
                if let Some(g) = grads.as_deref_mut() {
                    g.bias.data_mut()[o] += gplane.iter().copied().sum::<S>();
                }
                for i in 0..ic {
                    let src = &xd[i * h * w..(i + 1) * h * w];
                    let dst = &mut gi[i * h * w..(i + 1) * h * w];
                    for ky in 0..k {
                        let (y0, y1) = tap_range(ky, p, s, h, oh);
                        for kx in 0..k {
                            let (x0, x1) = tap_range(kx, p, s, w, ow);
                            let widx = ((o * ic + i) * k + ky) * k + kx;
                            let wv = wd[widx];
                            let mut acc = S::zero();
                            for oy in y0..y1 {
                                let base = (oy * s + ky - p) * w;
                                let grow = &gplane[oy * ow..(oy + 1) * ow];
                                for ox in x0..x1 {
                                    let ix = base + ox * s + kx - p;
                                    dst[ix] += wv * grow[ox];
                                    acc += grow[ox] * src[ix];
                                }
                            }
                            if let Some(g) = grads.as_deref_mut() {
                                g.weight.data_mut()[widx] += acc;
                            }
                        }
                    }
                }
            }
        }
        gin
    }
}

/// Fully connected layer on `[n]` vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<S> {
    /// `[out, in]`
    pub weight: Grid<S>,
    pub bias: Grid<S>,
}

impl<S: Scalar> Linear<S> {
    pub fn init(rng: &mut Rng, n_in: usize, n_out: usize) -> Self {
        let bound = (3.0 / n_in as f64).sqrt();
        Self {
            weight: Grid::from_fn(&[n_out, n_in], |_| lit(rng.uniform_in(-bound, bound))),
            // Nonzero so an all-zero input still has a direction to normalize.
            bias: Grid::from_fn(&[n_out], |_| lit(rng.uniform_in(-0.1, 0.1))),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: Grid::zeros(self.weight.shape()),
            bias: Grid::zeros(self.bias.shape()),
        }
    }

    pub fn forward(&self, x: &Grid<S>) -> Grid<S> {
        let (n_out, n_in) = (self.weight.dim(0), self.weight.dim(1));
        let w = self.weight.data();
        let xd = x.data();
        Grid::from_fn(&[n_out], |o| {
            self.bias.data()[o]
                + w[o * n_in..(o + 1) * n_in]
                    .iter()
                    .zip(xd)
                    .map(|(&a, &b)| a * b)
                    .sum::<S>()
        })
    }

    pub fn backward(&self, x: &Grid<S>, gout: &Grid<S>, grads: Option<&mut Self>) -> Grid<S> {
        let (n_out, n_in) = (self.weight.dim(0), self.weight.dim(1));
        let w = self.weight.data();
        let g = gout.data();
        let mut gin = Grid::zeros(&[n_in]);
        for o in 0..n_out {
            for (gi, &wv) in gin.data_mut().iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                *gi += wv * g[o];
            }
        }
        if let Some(acc) = grads {
            for o in 0..n_out {
                acc.bias.data_mut()[o] += g[o];
                let row = &mut acc.weight.data_mut()[o * n_in..(o + 1) * n_in];
                for (r, &xv) in row.iter_mut().zip(x.data()) {
                    *r += g[o] * xv;
                }
            }
        }
        gin
    }
}

fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

/// `x * sigmoid(x)`.
pub fn silu<S: Scalar>(pre: &Grid<S>) -> Grid<S> {
    pre.map(|x| x * sigmoid(x))
}

pub fn silu_backward<S: Scalar>(pre: &Grid<S>, gout: &Grid<S>) -> Grid<S> {
    pre.zip_map(gout, |x, g| {
        let s = sigmoid(x);
        g * s * (S::one() + x * (S::one() - s))
    })
    .expect("activation shapes agree")
}

/// Mean over the spatial axes of `[C, H, W]`.
pub fn global_avg_pool<S: Scalar>(x: &Grid<S>) -> Grid<S> {
    let c = x.dim(0);
    let hw = x.len() / c;
    let inv = S::one() / S::from_usize(hw).unwrap();
    Grid::from_fn(&[c], |i| x.data()[i * hw..(i + 1) * hw].iter().copied().sum::<S>() * inv)
}

pub fn global_avg_pool_backward<S: Scalar>(shape: &[usize], gout: &Grid<S>) -> Grid<S> {
    let hw: usize = shape[1..].iter().product();
    let inv = S::one() / S::from_usize(hw).unwrap();
    Grid::from_fn(shape, |k| gout.data()[k / hw] * inv)
}

/// Nearest-neighbour 2x upsampling of `[C, H, W]`.
pub fn upsample2<S: Scalar>(x: &Grid<S>) -> Grid<S> {
    let (c, h, w) = (x.dim(0), x.dim(1), x.dim(2));
    let (h2, w2) = (2 * h, 2 * w);
    Grid::from_fn(&[c, h2, w2], |k| {
        let ch = k / (h2 * w2);
        let y = (k / w2) % h2;
        let xx = k % w2;
        x.data()[(ch * h + y / 2) * w + xx / 2]
    })
}

pub fn upsample2_backward<S: Scalar>(gout: &Grid<S>) -> Grid<S> {
    let (c, h2, w2) = (gout.dim(0), gout.dim(1), gout.dim(2));
    let (h, w) = (h2 / 2, w2 / 2);
    let mut g = Grid::zeros(&[c, h, w]);
    let gd = g.data_mut();
    for ch in 0..c {
        for y in 0..h2 {
            for x in 0..w2 {
                gd[(ch * h + y / 2) * w + x / 2] += gout.data()[(ch * h2 + y) * w2 + x];
            }
        }
    }
    g
}

/// Channel concatenation of two `[C, H, W]` maps with equal `H, W`.
pub fn concat_channels<S: Scalar>(a: &Grid<S>, b: &Grid<S>) -> Grid<S> {
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    Grid::new(vec![a.dim(0) + b.dim(0), a.dim(1), a.dim(2)], data).expect("matching spatial dims")
}

pub fn split_channels<S: Scalar>(g: &Grid<S>, first: usize) -> (Grid<S>, Grid<S>) {
    let (c, h, w) = (g.dim(0), g.dim(1), g.dim(2));
    let cut = first * h * w;
    (
        Grid::new(vec![first, h, w], g.data()[..cut].to_vec()).expect("split"),
        Grid::new(vec![c - first, h, w], g.data()[cut..].to_vec()).expect("split"),
    )
}

/// Norms below this are clamped before dividing.
pub const NORM_FLOOR: f64 = 1e-12;

/// Returns `v / |v|` and the (floored) norm.
pub fn l2_normalize<S: Scalar>(v: &Grid<S>) -> (Grid<S>, S) {
    let n = v.norm_l2().max(lit(NORM_FLOOR));
    (v.scale(S::one() / n), n)
}

/// Cotangent of `v` given the cotangent of `y = v / |v|`.
pub fn l2_normalize_backward<S: Scalar>(y: &Grid<S>, norm: S, gout: &Grid<S>) -> Grid<S> {
    let proj = y.dot(gout).expect("same shape");
    y.zip_map(gout, |yv, g| (g - yv * proj) / norm).expect("same shape")
}

/// Anything whose trainable tensors can be listed in a fixed order.
pub trait Parameterized<S: Scalar> {
    fn params(&self) -> Vec<&Grid<S>>;
    fn params_mut(&mut self) -> Vec<&mut Grid<S>>;

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}

/// Adds `src` into `dst` parameter-wise.
pub fn accumulate<S: Scalar, P: Parameterized<S>>(dst: &mut P, src: &P) {
    for (d, s) in dst.params_mut().into_iter().zip(src.params()) {
        for (a, &b) in d.data_mut().iter_mut().zip(s.data()) {
            *a += b;
        }
    }
}

/// Plain gradient descent.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
}

impl Sgd {
    pub fn step<S: Scalar, P: Parameterized<S>>(&self, model: &mut P, grads: &P, scale: f64) {
        let k: S = lit(-self.lr * scale);
        for (p, g) in model.params_mut().into_iter().zip(grads.params()) {
            for (a, &b) in p.data_mut().iter_mut().zip(g.data()) {
                *a += k * b;
            }
        }
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<S> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step<P: Parameterized<S>>(&mut self, model: &mut P, grads: &P, scale: f64) {
        let gs = grads.params();
        if self.m.is_empty() {
            self.m = gs.iter().map(|g| vec![S::zero(); g.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        let (b1s, b2s, sc): (S, S, S) = (lit(b1), lit(b2), lit(scale));
        let lr: S = lit(self.lr);
        let (c1s, c2s, eps): (S, S, S) = (lit(c1), lit(c2), lit(self.eps));
        for (k, p) in model.params_mut().into_iter().enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (j, a) in p.data_mut().iter_mut().enumerate() {
                let g = gs[k].data()[j] * sc;
                m[j] = b1s * m[j] + (S::one() - b1s) * g;
                v[j] = b2s * v[j] + (S::one() - b2s) * g * g;
                let mh = m[j] / c1s;
                let vh = v[j] / c2s;
                *a -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}
