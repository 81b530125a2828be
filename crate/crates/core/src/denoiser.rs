//! Per-frame noise predictor: a two-level U-shaped convolutional network with
//! skip connections and a sinusoidal step embedding added at the bottleneck.

use std::path::Path;

use rayon::prelude::*;

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::nn::{
    accumulate, concat_channels, silu, silu_backward, split_channels, upsample2,
    upsample2_backward, Adam, Conv2d, Linear, Parameterized,
};
use crate::numerics::{lit, to_f64, DifferentiableOp, Grid, Rng, Scalar};
use crate::schedule::NoiseSchedule;

pub const TIME_DIM: usize = 16;
const WIDTH: [usize; 2] = [16, 32];
const MAGIC: &[u8; 8] = b"SVDEN\0\0\x01";

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserModel<S> {
    /// `[C, H, W]`; `H` and `W` must be multiples of 4.
    pub io_spec: [usize; 3],
    /// Largest valid step.
    pub steps: usize,
    inc: Conv2d<S>,
    down1: Conv2d<S>,
    down2: Conv2d<S>,
    time: Linear<S>,
    mid: Conv2d<S>,
    up1: Conv2d<S>,
    up2: Conv2d<S>,
    out: Conv2d<S>,
}

/// Sinusoidal embedding of the step index.
pub fn time_embedding<S: Scalar>(t: usize) -> Grid<S> {
    let half = TIME_DIM / 2;
    Grid::from_fn(&[TIME_DIM], |k| {
        let f = (-(10_000f64.ln()) * (k % half) as f64 / half as f64).exp();
        let a = t as f64 * f;
        lit(if k < half { a.sin() } else { a.cos() })
    })
}

struct Trace<S> {
    x: Grid<S>,
    h1p: Grid<S>,
    h1: Grid<S>,
    h2p: Grid<S>,
    h2: Grid<S>,
    h3p: Grid<S>,
    temb: Grid<S>,
    tp: Grid<S>,
    h3t: Grid<S>,
    h4p: Grid<S>,
    c1: Grid<S>,
    h5p: Grid<S>,
    c2: Grid<S>,
    h6p: Grid<S>,
    h6: Grid<S>,
}

impl<S: Scalar> Parameterized<S> for DenoiserModel<S> {
    fn params(&self) -> Vec<&Grid<S>> {
        let mut p = Vec::new();
        for c in [&self.inc, &self.down1, &self.down2] {
            p.extend([&c.weight, &c.bias]);
        }
        p.extend([&self.time.weight, &self.time.bias]);
        for c in [&self.mid, &self.up1, &self.up2, &self.out] {
            p.extend([&c.weight, &c.bias]);
        }
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Grid<S>> {
        let mut p = Vec::new();
        for c in [&mut self.inc, &mut self.down1, &mut self.down2] {
            p.extend([&mut c.weight, &mut c.bias]);
        }
        p.extend([&mut self.time.weight, &mut self.time.bias]);
        for c in [&mut self.mid, &mut self.up1, &mut self.up2, &mut self.out] {
            p.extend([&mut c.weight, &mut c.bias]);
        }
        p
    }
}

impl<S: Scalar> DenoiserModel<S> {
    pub fn new(io_spec: [usize; 3], steps: usize, rng: &mut Rng) -> Result<Self> {
        let [c, h, w] = io_spec;
        if c == 0 || h == 0 || w == 0 || h % 4 != 0 || w % 4 != 0 || steps == 0 {
            return Err(Error::InvalidShape(io_spec.to_vec()));
        }
        let [a, b] = WIDTH;
        Ok(Self {
            io_spec,
            steps,
            inc: Conv2d::init(rng, c, a, 3, 1, 1),
            down1: Conv2d::init(rng, a, b, 3, 2, 1),
            down2: Conv2d::init(rng, b, b, 3, 2, 1),
            time: Linear::init(rng, TIME_DIM, b),
            mid: Conv2d::init(rng, b, b, 3, 1, 1),
            up1: Conv2d::init(rng, 2 * b, b, 3, 1, 1),
            up2: Conv2d::init(rng, b + a, a, 3, 1, 1),
            out: Conv2d::init(rng, a, c, 3, 1, 1),
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            io_spec: self.io_spec,
            steps: self.steps,
            inc: self.inc.zeros_like(),
            down1: self.down1.zeros_like(),
            down2: self.down2.zeros_like(),
            time: self.time.zeros_like(),
            mid: self.mid.zeros_like(),
            up1: self.up1.zeros_like(),
            up2: self.up2.zeros_like(),
            out: self.out.zeros_like(),
        }
    }

    fn check(&self, x: &Grid<S>, t: usize) -> Result<()> {
        x.ensure_shape(&self.io_spec)?;
        if t == 0 || t > self.steps {
            return Err(Error::Domain(format!("step {t} outside 1..={}", self.steps)));
        }
        Ok(())
    }

    fn trace(&self, x: &Grid<S>, t: usize) -> (Trace<S>, Grid<S>) {
        let h1p = self.inc.forward(x);
        let h1 = silu(&h1p);
        let h2p = self.down1.forward(&h1);
        let h2 = silu(&h2p);
        let h3p = self.down2.forward(&h2);
        let h3 = silu(&h3p);
        let temb = time_embedding(t);
        let tp = self.time.forward(&temb);
        let ta = silu(&tp);
        let hw = h3.dim(1) * h3.dim(2);
        let h3t = Grid::from_fn(h3.shape(), |k| h3.data()[k] + ta.data()[k / hw]);
        let h4p = self.mid.forward(&h3t);
        let h4 = silu(&h4p);
        let c1 = concat_channels(&upsample2(&h4), &h2);
        let h5p = self.up1.forward(&c1);
        let h5 = silu(&h5p);
        let c2 = concat_channels(&upsample2(&h5), &h1);
        let h6p = self.up2.forward(&c2);
        let h6 = silu(&h6p);
        let out = self.out.forward(&h6);
        (
            Trace {
                x: x.clone(),
                h1p,
                h1,
                h2p,
                h2,
                h3p,
                temb,
                tp,
                h3t,
                h4p,
                c1,
                h5p,
                c2,
                h6p,
                h6,
            },
            out,
        )
    }

    fn backward(&self, tr: &Trace<S>, g_out: &Grid<S>, mut grads: Option<&mut Self>) -> Grid<S> {
        let [a, b] = WIDTH;
        let g = self.out.backward(&tr.h6, g_out, grads.as_deref_mut().map(|m| &mut m.out));
        let g = silu_backward(&tr.h6p, &g);
        let g = self.up2.backward(&tr.c2, &g, grads.as_deref_mut().map(|m| &mut m.up2));
        let (g_u2, g_h1_skip) = split_channels(&g, b);
        let g = silu_backward(&tr.h5p, &upsample2_backward(&g_u2));
        let g = self.up1.backward(&tr.c1, &g, grads.as_deref_mut().map(|m| &mut m.up1));
        let (g_u1, g_h2_skip) = split_channels(&g, b);
        let g = silu_backward(&tr.h4p, &upsample2_backward(&g_u1));
        let g_h3t = self.mid.backward(&tr.h3t, &g, grads.as_deref_mut().map(|m| &mut m.mid));
        if let Some(m) = grads.as_deref_mut() {
            let hw = g_h3t.dim(1) * g_h3t.dim(2);
            let g_ta = Grid::from_fn(&[b], |c| {
                g_h3t.data()[c * hw..(c + 1) * hw].iter().copied().sum::<S>()
            });
            let g_tp = silu_backward(&tr.tp, &g_ta);
            self.time.backward(&tr.temb, &g_tp, Some(&mut m.time));
        }
        let g = silu_backward(&tr.h3p, &g_h3t);
        let mut g = self.down2.backward(&tr.h2, &g, grads.as_deref_mut().map(|m| &mut m.down2));
        g.axpy(S::one(), &g_h2_skip).expect("skip shape");
        let g = silu_backward(&tr.h2p, &g);
        let mut g = self.down1.backward(&tr.h1, &g, grads.as_deref_mut().map(|m| &mut m.down1));
        g.axpy(S::one(), &g_h1_skip).expect("skip shape");
        debug_assert_eq!(g.dim(0), a);
        let g = silu_backward(&tr.h1p, &g);
        self.inc.backward(&tr.x, &g, grads.map(|m| &mut m.inc))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let [c, h, w] = self.io_spec;
        checkpoint::encode(
            MAGIC,
            &[TIME_DIM as u32, c as u32, h as u32, w as u32, self.steps as u32],
            &self.params(),
        )
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, tensors) = checkpoint::decode::<S>(bytes, MAGIC)?;
        let [td, c, h, w, steps] = header[..] else {
            return Err(Error::Checkpoint("denoiser header must have 5 words".into()));
        };
        if td as usize != TIME_DIM {
            return Err(Error::Checkpoint(format!("time embedding width {td}")));
        }
        let mut model = Self::new([c as usize, h as usize, w as usize], steps as usize, &mut Rng::new(0))?;
        let mut params = model.params_mut();
        if params.len() != tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                params.len(),
                tensors.len()
            )));
        }
        for (p, t) in params.iter_mut().zip(tensors) {
            t.ensure_shape(p.shape())
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
            **p = t;
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        checkpoint::write_file(path, &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&checkpoint::read_file(path)?)
    }
}

/// `eps_theta(x_t, t)`.
pub fn predict_noise<S: Scalar>(model: &DenoiserModel<S>, x_t: &Grid<S>, t: usize) -> Result<Grid<S>> {
    model.check(x_t, t)?;
    Ok(model.trace(x_t, t).1)
}

/// Cotangent of `x_t` given the cotangent of the predicted noise.
pub fn predict_noise_vjp<S: Scalar>(
    model: &DenoiserModel<S>,
    x_t: &Grid<S>,
    t: usize,
    cotangent: &Grid<S>,
) -> Result<Grid<S>> {
    model.check(x_t, t)?;
    cotangent.ensure_shape(&model.io_spec)?;
    let (tr, _) = model.trace(x_t, t);
    Ok(model.backward(&tr, cotangent, None))
}

/// Clean-frame estimate `(x_t - sqrt(1 - abar_t) eps) / sqrt(abar_t)` for a
/// given noise estimate.
pub fn x0_from_noise<S: Scalar>(x_t: &Grid<S>, eps: &Grid<S>, t: usize, sched: &NoiseSchedule<S>) -> Result<Grid<S>> {
    sched.index(t)?;
    let (a, b) = sched.forward_coefficients(t);
    if !(a > S::zero()) {
        return Err(Error::Domain(format!("alpha_bar at step {t} is not positive")));
    }
    x_t.zip_map(eps, |x, e| (x - b * e) / a)
}

/// `x0_hat` from the network's own noise estimate.
pub fn predict_x0<S: Scalar>(
    x_t: &Grid<S>,
    t: usize,
    model: &DenoiserModel<S>,
    sched: &NoiseSchedule<S>,
) -> Result<Grid<S>> {
    let eps = predict_noise(model, x_t, t)?;
    x0_from_noise(x_t, &eps, t, sched)
}

/// Cotangent of `x_t` given the cotangent `g` of `predict_x0`:
/// `(g - sqrt(1 - abar) J_eps^T g) / sqrt(abar)`.
pub fn predict_x0_vjp<S: Scalar>(
    x_t: &Grid<S>,
    t: usize,
    model: &DenoiserModel<S>,
    sched: &NoiseSchedule<S>,
    g: &Grid<S>,
) -> Result<Grid<S>> {
    let (a, b) = sched.forward_coefficients(t);
    let through = predict_noise_vjp(model, x_t, t, g)?;
    g.zip_map(&through, |gv, j| (gv - b * j) / a)
}

pub struct NoiseOp<'a, S> {
    pub model: &'a DenoiserModel<S>,
    pub t: usize,
}

impl<S: Scalar> DifferentiableOp<S> for NoiseOp<'_, S> {
    fn name(&self) -> &str {
        "predict_noise"
    }

    fn forward(&self, inputs: &[Grid<S>]) -> Result<Grid<S>> {
        predict_noise(self.model, &inputs[0], self.t)
    }

    fn vjp(&self, inputs: &[Grid<S>], cot: &Grid<S>) -> Result<Vec<Grid<S>>> {
        Ok(vec![predict_noise_vjp(self.model, &inputs[0], self.t, cot)?])
    }
}

pub struct X0Op<'a, S> {
    pub model: &'a DenoiserModel<S>,
    pub sched: &'a NoiseSchedule<S>,
    pub t: usize,
}

impl<S: Scalar> DifferentiableOp<S> for X0Op<'_, S> {
    fn name(&self) -> &str {
        "predict_x0"
    }

    fn forward(&self, inputs: &[Grid<S>]) -> Result<Grid<S>> {
        predict_x0(&inputs[0], self.t, self.model, self.sched)
    }

    fn vjp(&self, inputs: &[Grid<S>], cot: &Grid<S>) -> Result<Vec<Grid<S>>> {
        Ok(vec![predict_x0_vjp(&inputs[0], self.t, self.model, self.sched, cot)?])
    }
}

#[derive(Clone, Debug)]
pub struct DenoiserTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for DenoiserTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 2e-3,
            batch: 16,
            seed: 0,
        }
    }
}

/// Mean per-pixel noise MSE of every epoch, with the untrained model's loss
/// on the first epoch's draws as `initial`.
#[derive(Clone, Debug, Default)]
pub struct DenoiserLog {
    pub initial: f64,
    pub epochs: Vec<f64>,
}

/// Noise-prediction MSE and its parameter gradient for one sample.
fn sample_grad<S: Scalar>(model: &DenoiserModel<S>, x_t: &Grid<S>, t: usize, eps: &Grid<S>) -> (f64, DenoiserModel<S>) {
    let (tr, pred) = model.trace(x_t, t);
    let n: S = S::from_usize(pred.len()).unwrap();
    let diff = pred.sub(eps).expect("shape");
    let loss = to_f64(diff.dot(&diff).expect("shape") / n);
    let g = diff.scale(lit::<S>(2.0) / n);
    let mut acc = model.zeros_like();
    model.backward(&tr, &g, Some(&mut acc));
    (loss, acc)
}

struct Draw<S> {
    frame: usize,
    t: usize,
    eps: Grid<S>,
}

fn draws_for_epoch<S: Scalar>(n: usize, shape: &[usize], steps: usize, seed: u64, epoch: usize) -> Vec<Draw<S>> {
    let mut order_rng = Rng::with_stream(seed, crate::numerics::stream_key(&[0xd0, epoch as u64]));
    let mut order: Vec<usize> = (0..n).collect();
    order_rng.shuffle(&mut order);
    order
        .into_iter()
        .enumerate()
        .map(|(k, frame)| {
            let mut r = Rng::with_stream(seed, crate::numerics::stream_key(&[0xd1, epoch as u64, k as u64]));
            let t = 1 + r.below(steps);
            let eps = Grid::from_fn(shape, |_| lit(r.normal()));
            Draw { frame, t, eps }
        })
        .collect()
}

/// Trains the noise predictor with Adam on the standard DDPM objective.
pub fn train_denoiser<S: Scalar>(
    corpus: &[Grid<S>],
    sched: &NoiseSchedule<S>,
    cfg: &DenoiserTrainConfig,
) -> Result<(DenoiserModel<S>, DenoiserLog)> {
    let first = corpus
        .first()
        .ok_or_else(|| Error::Data("empty training corpus".into()))?;
    let spec = [first.dim(0), first.dim(1), first.dim(2)];
    for f in corpus {
        f.ensure_shape(&spec)?;
    }
    let mut model = DenoiserModel::new(spec, sched.steps(), &mut Rng::with_stream(cfg.seed, 0xde00))?;
    let mut opt = Adam::new(cfg.lr);
    let batch = cfg.batch.max(1);
    let mut log = DenoiserLog::default();
    for epoch in 0..cfg.epochs {
        let draws = draws_for_epoch::<S>(corpus.len(), &spec, sched.steps(), cfg.seed, epoch);
        let mut total = 0.0;
        for chunk in draws.chunks(batch) {
            let per: Vec<(f64, DenoiserModel<S>)> = chunk
                .par_iter()
                .map(|d| {
                    let x_t = sched.noise(&corpus[d.frame], &d.eps, d.t).expect("shape");
                    sample_grad(&model, &x_t, d.t, &d.eps)
                })
                .collect();
            let mut grads = model.zeros_like();
            for (loss, g) in &per {
                total += loss;
                accumulate(&mut grads, g);
            }
            if epoch == 0 && log.initial == 0.0 {
                log.initial = per.iter().map(|p| p.0).sum::<f64>() / per.len() as f64;
            }
            opt.step(&mut model, &grads, 1.0 / chunk.len() as f64);
        }
        log.epochs.push(total / corpus.len() as f64);
    }
    Ok((model, log))
}

/// Held-out noise MSE of the model and of the all-zero predictor on the same
/// draws.
pub fn heldout_mse<S: Scalar>(
    model: &DenoiserModel<S>,
    frames: &[Grid<S>],
    sched: &NoiseSchedule<S>,
    seed: u64,
) -> Result<(f64, f64)> {
    let draws = draws_for_epoch::<S>(frames.len(), &model.io_spec, sched.steps(), seed, usize::MAX);
    let per: Vec<Result<(f64, f64)>> = draws
        .par_iter()
        .map(|d| {
            let x_t = sched.noise(&frames[d.frame], &d.eps, d.t)?;
            let pred = predict_noise(model, &x_t, d.t)?;
            let n = pred.len() as f64;
            let diff = pred.sub(&d.eps)?;
            Ok((to_f64(diff.dot(&diff)?) / n, to_f64(d.eps.dot(&d.eps)?) / n))
        })
        .collect();
    let (mut m, mut z) = (0.0, 0.0);
    for p in per {
        let (a, b) = p?;
        m += a;
        z += b;
    }
    Ok((m / frames.len() as f64, z / frames.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::check_gradient;
    use crate::schedule::make_linear_schedule;

    fn model(seed: u64) -> DenoiserModel<f64> {
        DenoiserModel::new([1, 8, 8], 100, &mut Rng::new(seed)).unwrap()
    }

    #[test]
    fn parameter_budget() {
        let m = DenoiserModel::<f64>::new([3, 16, 16], 100, &mut Rng::new(0)).unwrap();
        let n = m.param_count();
        assert!((40_000..60_000).contains(&n), "{n}");
    }

    #[test]
    fn output_shape_and_determinism() {
        let m = model(1);
        let x = Grid::from_fn(&[1, 8, 8], |k| (k as f64 * 0.37).sin());
        let a = predict_noise(&m, &x, 5).unwrap();
        assert_eq!(a.shape(), x.shape());
        assert!(a.bitwise_eq(&predict_noise(&m, &x, 5).unwrap()));
        assert!(predict_noise(&m, &x, 0).is_err());
        assert!(predict_noise(&m, &x, 101).is_err());
        assert!(predict_noise(&m, &Grid::zeros(&[1, 4, 8]), 3).is_err());
    }

    #[test]
    fn oracle_noise_inverts_forward_process() {
        let sched = make_linear_schedule::<f64>(100, 1e-4, 0.02).unwrap();
        let mut rng = Rng::new(4);
        for t in [1, 37, 100] {
            let x0 = Grid::from_fn(&[3, 4, 4], |_| rng.uniform_in(-1.0, 1.0));
            let eps = Grid::from_fn(&[3, 4, 4], |_| rng.normal());
            let xt = sched.noise(&x0, &eps, t).unwrap();
            let back = x0_from_noise(&xt, &eps, t, &sched).unwrap();
            assert!(back.max_abs_diff(&x0).unwrap() < 1e-9);
        }
    }

    #[test]
    fn zero_noise_specialization() {
        let sched = make_linear_schedule::<f64>(100, 1e-4, 0.02).unwrap();
        let x = Grid::from_fn(&[1, 2, 2], |k| k as f64);
        let out = x0_from_noise(&x, &Grid::zeros(&[1, 2, 2]), 1, &sched).unwrap();
        let expect = x.scale(1.0 / (1.0 - 1e-4f64).sqrt());
        assert!(out.max_abs_diff(&expect).unwrap() < 1e-15);
    }

    #[test]
    fn frozen_noise_response_is_affine() {
        // With eps frozen, x0_hat responds to dx_t as dx_t / sqrt(abar).
        let sched = make_linear_schedule::<f64>(100, 1e-4, 0.02).unwrap();
        let t = 60;
        let e = Grid::from_fn(&[1, 3, 3], |k| 0.1 * k as f64);
        let x = Grid::from_fn(&[1, 3, 3], |k| (k as f64).cos());
        let base = x0_from_noise(&x, &e, t, &sched).unwrap();
        let h = 1e-4;
        for j in 0..9 {
            let mut xp = x.clone();
            xp.data_mut()[j] += h;
            let moved = x0_from_noise(&xp, &e, t, &sched).unwrap();
            let slope = (moved.data()[j] - base.data()[j]) / h;
            assert!((slope - 1.0 / sched.alpha_bar(t).sqrt()).abs() < 1e-6);
        }
    }

    #[test]
    fn vjps_pass_gradient_check() {
        let sched = make_linear_schedule::<f64>(100, 1e-4, 0.02).unwrap();
        let mut rng = Rng::new(8);
        for seed in 0..3 {
            let m = model(seed);
            let x = Grid::from_fn(&[1, 8, 8], |_| rng.uniform_in(-1.0, 1.0));
            let t = 1 + rng.below(100);
            let r = check_gradient(&NoiseOp { model: &m, t }, std::slice::from_ref(&x), 1e-4).unwrap();
            assert!(r.passed(), "{r:?}");
            let r = check_gradient(&X0Op { model: &m, sched: &sched, t }, &[x], 1e-4).unwrap();
            assert!(r.passed(), "{r:?}");
        }
    }

    #[test]
    fn parameter_gradient_matches_differences() {
        let m = model(3);
        let mut rng = Rng::new(12);
        let x = Grid::from_fn(&[1, 8, 8], |_| rng.uniform_in(-1.0, 1.0));
        let eps = Grid::from_fn(&[1, 8, 8], |_| rng.normal());
        let (_, g) = sample_grad(&m, &x, 40, &eps);
        let loss_of = |mm: &DenoiserModel<f64>| {
            let p = predict_noise(mm, &x, 40).unwrap();
            let d = p.sub(&eps).unwrap();
            d.dot(&d).unwrap() / d.len() as f64
        };
        let gp = g.params();
        for (k, p) in m.params().iter().enumerate() {
            for j in [0, p.len() / 2, p.len() - 1] {
                let mut plus = m.clone();
                plus.params_mut()[k].data_mut()[j] += 1e-5;
                let mut minus = m.clone();
                minus.params_mut()[k].data_mut()[j] -= 1e-5;
                let fd = (loss_of(&plus) - loss_of(&minus)) / 2e-5;
                let an = gp[k].data()[j];
                assert!((fd - an).abs() < 1e-6 + 1e-4 * fd.abs(), "param {k}[{j}]: {fd} vs {an}");
            }
        }
    }

    fn toy_corpus() -> Vec<Grid<f64>> {
        (0..24)
            .map(|i| {
                let phase = i as f64 * 0.4;
                Grid::from_fn(&[1, 8, 8], |k| {
                    let (y, x) = ((k / 8) as f64, (k % 8) as f64);
                    0.8 * ((x + y) * 0.5 + phase).sin()
                })
            })
            .collect()
    }

    #[test]
    fn zero_lr_and_zero_epochs_keep_initialization() {
        let sched = make_linear_schedule::<f64>(100, 1e-4, 0.02).unwrap();
        let corpus = toy_corpus();
        let init = DenoiserModel::<f64>::new([1, 8, 8], 100, &mut Rng::with_stream(5, 0xde00)).unwrap();
        let cfg = DenoiserTrainConfig { epochs: 0, seed: 5, ..Default::default() };
        assert_eq!(train_denoiser(&corpus, &sched, &cfg).unwrap().0, init);
        let cfg = DenoiserTrainConfig { epochs: 2, lr: 0.0, seed: 5, ..Default::default() };
        let (m, _) = train_denoiser(&corpus, &sched, &cfg).unwrap();
        assert!(m.params().iter().zip(init.params()).all(|(a, b)| a.bitwise_eq(b)));
        assert!(matches!(train_denoiser(&[], &sched, &cfg), Err(Error::Data(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = model(9);
        assert_eq!(DenoiserModel::<f64>::from_bytes(&m.to_bytes()).unwrap(), m);
    }
}
