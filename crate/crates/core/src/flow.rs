//! Dense displacement fields, bilinear backward warping, synthetic and
//! block-matched flows, and the warped-difference consistency metric.
//!
//! Convention: a [`FlowPair`] for frames `i, i+1` stores `fwd`, the motion of
//! content from frame `i` to frame `i+1`, sampled on frame `i`'s grid, so that
//! `frame_i(p) ~ frame_{i+1}(p + fwd(p))`. Backward-warping frame `i+1` with
//! `fwd` therefore lands on frame `i`, and warping frame `i` with `bwd` lands
//! on frame `i+1`.

use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::{lit, to_f64, DifferentiableOp, Grid, Scalar, Video};

pub const FLOW_MAGIC: &[u8; 8] = b"SVFLOW\0\x01";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlowDirection {
    Forward,
    Backward,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowField<S> {
    /// Horizontal displacement, `[H, W]`.
    pub u: Grid<S>,
    /// Vertical displacement, `[H, W]`.
    pub v: Grid<S>,
    pub direction: FlowDirection,
}

impl<S: Scalar> FlowField<S> {
    pub fn new(u: Grid<S>, v: Grid<S>, direction: FlowDirection) -> Result<Self> {
        if u.shape().len() != 2 {
            return Err(Error::InvalidShape(u.shape().to_vec()));
        }
        v.ensure_shape(u.shape())?;
        let bound: S = lit(u.dim(0).max(u.dim(1)) as f64);
        if u.max_abs() > bound || v.max_abs() > bound {
            return Err(Error::Domain(format!(
                "displacement exceeds image extent {}",
                to_f64(bound)
            )));
        }
        Ok(Self { u, v, direction })
    }

    pub fn zeros(h: usize, w: usize, direction: FlowDirection) -> Self {
        Self {
            u: Grid::zeros(&[h, w]),
            v: Grid::zeros(&[h, w]),
            direction,
        }
    }

    pub fn constant(h: usize, w: usize, du: f64, dv: f64, direction: FlowDirection) -> Result<Self> {
        Self::new(Grid::filled(&[h, w], lit(du)), Grid::filled(&[h, w], lit(dv)), direction)
    }

    pub fn height(&self) -> usize {
        self.u.dim(0)
    }

    pub fn width(&self) -> usize {
        self.u.dim(1)
    }

    pub fn max_magnitude(&self) -> S {
        self.u
            .data()
            .iter()
            .zip(self.v.data())
            .map(|(&a, &b)| (a * a + b * b).sqrt())
            .fold(S::zero(), S::max)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowPair<S> {
    pub fwd: FlowField<S>,
    pub bwd: FlowField<S>,
    /// Index of the earlier frame of the pair.
    pub frame_index: usize,
}

impl<S: Scalar> FlowPair<S> {
    pub fn new(fwd: FlowField<S>, bwd: FlowField<S>, frame_index: usize) -> Result<Self> {
        if fwd.direction != FlowDirection::Forward || bwd.direction != FlowDirection::Backward {
            return Err(Error::Domain("flow pair directions must be forward then backward".into()));
        }
        bwd.u.ensure_shape(fwd.u.shape())?;
        Ok(Self { fwd, bwd, frame_index })
    }

    pub fn zeros(h: usize, w: usize, frame_index: usize) -> Self {
        Self {
            fwd: FlowField::zeros(h, w, FlowDirection::Forward),
            bwd: FlowField::zeros(h, w, FlowDirection::Backward),
            frame_index,
        }
    }
}

/// Per-pixel flag: 1 where the warp source lies inside the image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ValidityMask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
}

impl ValidityMask {
    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn all(&self) -> bool {
        self.bits.iter().all(|&b| b)
    }
}

#[derive(Clone, Copy, Debug)]
struct Tap<S> {
    idx: [usize; 4],
    wt: [S; 4],
}

/// Precomputed bilinear sampling positions for one flow field; applying it to
/// many frames (and its adjoint to many cotangents) avoids recomputing the
/// weights.
#[derive(Clone, Debug)]
pub struct WarpPlan<S> {
    height: usize,
    width: usize,
    taps: Vec<Option<Tap<S>>>,
    validity: ValidityMask,
}

impl<S: Scalar> WarpPlan<S> {
    pub fn new(flow: &FlowField<S>) -> Self {
        let (h, w) = (flow.height(), flow.width());
        let (wm, hm): (S, S) = (lit((w - 1) as f64), lit((h - 1) as f64));
        let mut taps = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let sx = lit::<S>(x as f64) + flow.u.data()[p];
                let sy = lit::<S>(y as f64) + flow.v.data()[p];
                if !(sx >= S::zero() && sx <= wm && sy >= S::zero() && sy <= hm) {
                    taps.push(None);
                    continue;
                }
                let x0 = to_f64(sx.floor()).min(w.saturating_sub(2) as f64) as usize;
                let y0 = to_f64(sy.floor()).min(h.saturating_sub(2) as f64) as usize;
                let x1 = (x0 + 1).min(w - 1);
                let y1 = (y0 + 1).min(h - 1);
                let fx = sx - lit(x0 as f64);
                let fy = sy - lit(y0 as f64);
                let (gx, gy) = (S::one() - fx, S::one() - fy);
                taps.push(Some(Tap {
                    idx: [y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1],
                    wt: [gx * gy, fx * gy, gx * fy, fx * fy],
                }));
            }
        }
        let bits = taps.iter().map(Option::is_some).collect();
        Self {
            height: h,
            width: w,
            taps,
            validity: ValidityMask { height: h, width: w, bits },
        }
    }

    pub fn validity(&self) -> &ValidityMask {
        &self.validity
    }

    fn check(&self, g: &Grid<S>) -> Result<usize> {
        if g.shape().len() != 3 || g.dim(1) != self.height || g.dim(2) != self.width {
            return Err(Error::shape(&[g.dim(0), self.height, self.width], g.shape()));
        }
        Ok(g.dim(0))
    }

    pub fn apply(&self, frame: &Grid<S>) -> Result<Grid<S>> {
        let c = self.check(frame)?;
        let hw = self.height * self.width;
        let src = frame.data();
        let mut out = Grid::zeros(frame.shape());
        let dst = out.data_mut();
        for ch in 0..c {
            let base = ch * hw;
            for (p, tap) in self.taps.iter().enumerate() {
                if let Some(t) = tap {
                    dst[base + p] = t.wt[0] * src[base + t.idx[0]]
                        + t.wt[1] * src[base + t.idx[1]]
                        + t.wt[2] * src[base + t.idx[2]]
                        + t.wt[3] * src[base + t.idx[3]];
                }
            }
        }
        Ok(out)
    }

    /// Transpose of [`WarpPlan::apply`].
    pub fn adjoint(&self, cot: &Grid<S>) -> Result<Grid<S>> {
        let c = self.check(cot)?;
        let hw = self.height * self.width;
        let g = cot.data();
        let mut out = Grid::zeros(cot.shape());
        let dst = out.data_mut();
        for ch in 0..c {
            let base = ch * hw;
            for (p, tap) in self.taps.iter().enumerate() {
                if let Some(t) = tap {
                    for k in 0..4 {
                        dst[base + t.idx[k]] += t.wt[k] * g[base + p];
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Bilinear backward warp: `out(p) = frame(p + flow(p))`, zero and invalid
/// where the sample position leaves the image.
pub fn warp<S: Scalar>(frame: &Grid<S>, flow: &FlowField<S>) -> Result<(Grid<S>, ValidityMask)> {
    let plan = WarpPlan::new(flow);
    let out = plan.apply(frame)?;
    Ok((out, plan.validity))
}

/// [`warp`] as a differentiable op of the frame, flow held constant.
pub struct WarpOp<S> {
    plan: WarpPlan<S>,
}

impl<S: Scalar> WarpOp<S> {
    pub fn new(flow: &FlowField<S>) -> Self {
        Self { plan: WarpPlan::new(flow) }
    }
}

impl<S: Scalar> DifferentiableOp<S> for WarpOp<S> {
    fn name(&self) -> &str {
        "warp"
    }

    fn forward(&self, inputs: &[Grid<S>]) -> Result<Grid<S>> {
        self.plan.apply(&inputs[0])
    }

    fn vjp(&self, _inputs: &[Grid<S>], cot: &Grid<S>) -> Result<Vec<Grid<S>>> {
        Ok(vec![self.plan.adjoint(cot)?])
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FlowPattern {
    /// Content moves by `(dx, dy)` pixels per frame.
    Translation { dx: f64, dy: f64 },
    /// Content rotates by `degrees` about the image centre per frame.
    Rotation { degrees: f64 },
}

/// Analytically exact flow pair for a global motion pattern.
pub fn synth_flow<S: Scalar>(pattern: FlowPattern, h: usize, w: usize, frame_index: usize) -> Result<FlowPair<S>> {
    if h == 0 || w == 0 {
        return Err(Error::InvalidShape(vec![h, w]));
    }
    let extent = h.max(w) as f64;
    let field = |f: &dyn Fn(f64, f64) -> (f64, f64), direction| {
        let mut u = Grid::zeros(&[h, w]);
        let mut v = Grid::zeros(&[h, w]);
        for y in 0..h {
            for x in 0..w {
                let (a, b) = f(x as f64, y as f64);
                u.data_mut()[y * w + x] = lit(a);
                v.data_mut()[y * w + x] = lit(b);
            }
        }
        FlowField::new(u, v, direction)
    };
    let (fwd, bwd) = match pattern {
        FlowPattern::Translation { dx, dy } => {
            if !(dx.abs() <= extent && dy.abs() <= extent) {
                return Err(Error::Domain(format!("translation ({dx}, {dy}) exceeds image extent")));
            }
            (
                field(&|_, _| (dx, dy), FlowDirection::Forward)?,
                field(&|_, _| (-dx, -dy), FlowDirection::Backward)?,
            )
        }
        FlowPattern::Rotation { degrees } => {
            if !(degrees.abs() <= 90.0) {
                return Err(Error::Domain(format!("rotation {degrees} degrees outside [-90, 90]")));
            }
            let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
            let rot = move |theta: f64| {
                let (s, c) = theta.to_radians().sin_cos();
                move |x: f64, y: f64| {
                    let (px, py) = (x - cx, y - cy);
                    (c * px - s * py - px, s * px + c * py - py)
                }
            };
            let (f, b) = (rot(degrees), rot(-degrees));
            (
                field(&f, FlowDirection::Forward)?,
                field(&b, FlowDirection::Backward)?,
            )
        }
    };
    FlowPair::new(fwd, bwd, frame_index)
}

/// Displacement of every block of `a` that best matches `b`, as integer
/// vectors on the block grid.
fn match_blocks<S: Scalar>(a: &Grid<S>, b: &Grid<S>, block: usize, radius: usize) -> (Vec<(f64, f64)>, usize, usize) {
    let (c, h, w) = (a.dim(0), a.dim(1), a.dim(2));
    let (bh, bw) = (h.div_ceil(block), w.div_ceil(block));
    let r = radius as isize;
    let mut candidates: Vec<(isize, isize)> = (-r..=r).flat_map(|dy| (-r..=r).map(move |dx| (dx, dy))).collect();
    // Stable sort keeps scan order among equal magnitudes, so ties resolve to
    // the smallest displacement deterministically.
    candidates.sort_by_key(|&(dx, dy)| dx * dx + dy * dy);
    let blocks: Vec<(usize, usize)> = (0..bh).flat_map(|by| (0..bw).map(move |bx| (by, bx))).collect();
    let best = blocks
        .par_iter()
        .map(|&(by, bx)| {
            let (y0, x0) = (by * block, bx * block);
            let (y1, x1) = ((y0 + block).min(h), (x0 + block).min(w));
            let area = (y1 - y0) * (x1 - x0);
            let mut best: Option<(f64, (isize, isize))> = None;
            for &(dx, dy) in &candidates {
                let mut ssd = 0.0;
                let mut n = 0usize;
                for y in y0..y1 {
                    let ty = y as isize + dy;
                    if ty < 0 || ty >= h as isize {
                        continue;
                    }
                    for x in x0..x1 {
                        let tx = x as isize + dx;
                        if tx < 0 || tx >= w as isize {
                            continue;
                        }
                        n += 1;
                        for ch in 0..c {
                            let pa = a.data()[(ch * h + y) * w + x];
                            let pb = b.data()[(ch * h + ty as usize) * w + tx as usize];
                            let d = to_f64(pa - pb);
                            ssd += d * d;
                        }
                    }
                }
                if 2 * n < area {
                    continue;
                }
                let score = ssd / n as f64;
                if best.is_none_or(|(s, _)| score < s) {
                    best = Some((score, (dx, dy)));
                }
            }
            let (_, (dx, dy)) = best.unwrap_or((0.0, (0, 0)));
            (dx as f64, dy as f64)
        })
        .collect();
    (best, bh, bw)
}

/// Bilinear upsampling of block-centre values to every pixel, clamped at the
/// borders.
fn densify<S: Scalar>(vals: &[(f64, f64)], bh: usize, bw: usize, block: usize, h: usize, w: usize, direction: FlowDirection) -> Result<FlowField<S>> {
    let centre = |i: usize, n: usize| {
        let lo = i * block;
        let hi = (lo + block).min(n);
        (lo + hi - 1) as f64 / 2.0
    };
    let coord = |p: usize, nb: usize, n: usize| -> (usize, usize, f64) {
        let pf = p as f64;
        if nb == 1 || pf <= centre(0, n) {
            return (0, 0, 0.0);
        }
        if pf >= centre(nb - 1, n) {
            return (nb - 1, nb - 1, 0.0);
        }
        let mut i = 0;
        while centre(i + 1, n) < pf {
            i += 1;
        }
        let (c0, c1) = (centre(i, n), centre(i + 1, n));
        (i, i + 1, (pf - c0) / (c1 - c0))
    };
    let mut u = Grid::zeros(&[h, w]);
    let mut v = Grid::zeros(&[h, w]);
    for y in 0..h {
        let (y0, y1, fy) = coord(y, bh, h);
        for x in 0..w {
            let (x0, x1, fx) = coord(x, bw, w);
            let at = |by: usize, bx: usize| vals[by * bw + bx];
            let mix = |sel: fn((f64, f64)) -> f64| {
                (1.0 - fy) * ((1.0 - fx) * sel(at(y0, x0)) + fx * sel(at(y0, x1)))
                    + fy * ((1.0 - fx) * sel(at(y1, x0)) + fx * sel(at(y1, x1)))
            };
            u.data_mut()[y * w + x] = lit(mix(|p| p.0));
            v.data_mut()[y * w + x] = lit(mix(|p| p.1));
        }
    }
    FlowField::new(u, v, direction)
}

/// Block-matching flow between two frames, both directions computed
/// independently.
pub fn estimate_flow<S: Scalar>(a: &Grid<S>, b: &Grid<S>, block: usize, radius: usize, frame_index: usize) -> Result<FlowPair<S>> {
    if radius == 0 {
        return Err(Error::Domain("search radius must be positive".into()));
    }
    if a.shape().len() != 3 {
        return Err(Error::InvalidShape(a.shape().to_vec()));
    }
    b.ensure_shape(a.shape())?;
    let (h, w) = (a.dim(1), a.dim(2));
    if block == 0 || block > h || block > w {
        return Err(Error::Domain(format!("block {block} does not fit a {h}x{w} frame")));
    }
    let (f, bh, bw) = match_blocks(a, b, block, radius);
    let (r, _, _) = match_blocks(b, a, block, radius);
    let fwd = densify(&f, bh, bw, block, h, w, FlowDirection::Forward)?;
    let bwd = densify(&r, bh, bw, block, h, w, FlowDirection::Backward)?;
    FlowPair::new(fwd, bwd, frame_index)
}

/// Flows for every adjacent pair of a video.
pub fn estimate_video_flows<S: Scalar>(video: &Video<S>, block: usize, radius: usize) -> Result<Vec<FlowPair<S>>> {
    (0..video.len().saturating_sub(1))
        .map(|i| estimate_flow(video.frame(i), video.frame(i + 1), block, radius, i))
        .collect()
}

/// Mean absolute warped difference restricted to valid pixels, over adjacent
/// pairs, times 100.
pub fn t_diff<S: Scalar>(video: &Video<S>, flows: &[FlowPair<S>]) -> Result<f64> {
    let n = video.len();
    if n < 2 {
        return Err(Error::Domain("temporal difference needs at least two frames".into()));
    }
    if flows.len() != n - 1 {
        return Err(Error::Context(format!("expected {} flow pairs, got {}", n - 1, flows.len())));
    }
    let mut total = 0.0;
    for (i, pair) in flows.iter().enumerate() {
        let plan = WarpPlan::new(&pair.fwd);
        let warped = plan.apply(video.frame(i + 1))?;
        let hw = plan.height * plan.width;
        let target = video.frame(i).data();
        let mut sum = 0.0;
        let mut count = 0usize;
        for ch in 0..video.channels() {
            for (p, &ok) in plan.validity.bits.iter().enumerate() {
                if ok {
                    let k = ch * hw + p;
                    sum += to_f64((warped.data()[k] - target[k]).abs());
                    count += 1;
                }
            }
        }
        if count > 0 {
            total += sum / count as f64;
        }
    }
    Ok(100.0 * total / (n - 1) as f64)
}

pub fn encode_flow<S: Scalar>(flow: &FlowField<S>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * flow.u.len());
    out.extend_from_slice(FLOW_MAGIC);
    out.extend_from_slice(&(flow.height() as u32).to_le_bytes());
    out.extend_from_slice(&(flow.width() as u32).to_le_bytes());
    for g in [&flow.u, &flow.v] {
        for &x in g.data() {
            out.extend_from_slice(&(to_f64(x) as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_flow<S: Scalar>(bytes: &[u8], direction: FlowDirection) -> Result<FlowField<S>> {
    if bytes.len() < 16 || &bytes[..8] != FLOW_MAGIC {
        return Err(Error::Format("not a flow file".into()));
    }
    let word = |k: usize| u32::from_le_bytes(bytes[k..k + 4].try_into().unwrap()) as usize;
    let (h, w) = (word(8), word(12));
    let body = &bytes[16..];
    if h == 0 || w == 0 || body.len() != 8 * h * w {
        return Err(Error::Format(format!("flow body has {} bytes for {h}x{w}", body.len())));
    }
    let vals: Vec<S> = body
        .chunks_exact(4)
        .map(|c| lit(f32::from_le_bytes(c.try_into().unwrap()) as f64))
        .collect();
    let (u, v) = vals.split_at(h * w);
    FlowField::new(Grid::new(vec![h, w], u.to_vec())?, Grid::new(vec![h, w], v.to_vec())?, direction)
}

pub fn write_flow<S: Scalar>(path: impl AsRef<Path>, flow: &FlowField<S>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_flow(flow)).map_err(|e| Error::io(path, e))
}

pub fn read_flow<S: Scalar>(path: impl AsRef<Path>, direction: FlowDirection) -> Result<FlowField<S>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_flow(&bytes, direction)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{check_gradient, Rng};
    use proptest::prelude::*;

    fn ramp(c: usize, h: usize, w: usize) -> Grid<f64> {
        Grid::from_fn(&[c, h, w], |k| {
            let x = k % w;
            let y = (k / w) % h;
            let ch = k / (h * w);
            0.1 * x as f64 + 0.03 * y as f64 + 0.5 * ch as f64
        })
    }

    fn textured(h: usize, w: usize, phase: f64) -> Grid<f64> {
        Grid::from_fn(&[1, h, w], |k| {
            let (y, x) = ((k / w) as f64, (k % w) as f64);
            (0.9 * x + phase).sin() * (0.7 * y - phase).cos()
        })
    }

    #[test]
    fn zero_flow_is_identity() {
        let f = ramp(2, 5, 7);
        let (out, valid) = warp(&f, &FlowField::zeros(5, 7, FlowDirection::Forward)).unwrap();
        assert!(out.bitwise_eq(&f));
        assert!(valid.all());
        let g = WarpPlan::new(&FlowField::<f64>::zeros(5, 7, FlowDirection::Forward))
            .adjoint(&f)
            .unwrap();
        assert!(g.bitwise_eq(&f));
    }

    #[test]
    fn integer_shift_matches_shifted_ramp() {
        let f = ramp(1, 6, 10);
        let flow = FlowField::constant(6, 10, 3.0, 0.0, FlowDirection::Forward).unwrap();
        let (out, valid) = warp(&f, &flow).unwrap();
        for y in 0..6 {
            for x in 0..10 {
                let p = y * 10 + x;
                if x + 3 < 10 {
                    assert!(valid.bits[p]);
                    assert_eq!(out.data()[p], f.data()[y * 10 + x + 3]);
                } else {
                    assert!(!valid.bits[p]);
                    assert_eq!(out.data()[p], 0.0);
                }
            }
        }
    }

    #[test]
    fn half_pixel_flow_interpolates_ramp() {
        let f = ramp(1, 4, 8);
        let flow = FlowField::constant(4, 8, 0.5, 0.5, FlowDirection::Forward).unwrap();
        let (out, valid) = warp(&f, &flow).unwrap();
        for y in 0..3 {
            for x in 0..7 {
                let p = y * 8 + x;
                assert!(valid.bits[p]);
                let expect = 0.1 * (x as f64 + 0.5) + 0.03 * (y as f64 + 0.5);
                assert!((out.data()[p] - expect).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn warp_vjp_gradient_check() {
        let mut rng = Rng::new(2);
        let u = Grid::from_fn(&[6, 6], |_| rng.uniform_in(-2.0, 2.0));
        let v = Grid::from_fn(&[6, 6], |_| rng.uniform_in(-2.0, 2.0));
        let op = WarpOp::new(&FlowField::new(u, v, FlowDirection::Forward).unwrap());
        let x = Grid::from_fn(&[2, 6, 6], |_| rng.normal());
        let r = check_gradient(&op, &[x], 1e-4).unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn warp_rejects_mismatched_frame() {
        let flow = FlowField::<f64>::zeros(4, 4, FlowDirection::Forward);
        assert!(warp(&Grid::zeros(&[1, 4, 5]), &flow).is_err());
    }

    #[test]
    fn synthetic_translation_and_rotation() {
        let p = synth_flow::<f64>(FlowPattern::Translation { dx: 2.0, dy: 0.0 }, 5, 5, 0).unwrap();
        assert!(p.fwd.u.data().iter().all(|&x| x == 2.0));
        assert!(p.bwd.u.data().iter().all(|&x| x == -2.0));
        let z = synth_flow::<f64>(FlowPattern::Translation { dx: 0.0, dy: 0.0 }, 5, 5, 0).unwrap();
        assert_eq!(z.fwd.max_magnitude(), 0.0);
        assert_eq!(z.bwd.max_magnitude(), 0.0);

        let (h, w) = (21, 21);
        let r = synth_flow::<f64>(FlowPattern::Rotation { degrees: 5.0 }, h, w, 0).unwrap();
        let k = 2.0 * (2.5f64).to_radians().sin();
        for y in 0..h {
            for x in 0..w {
                let radius = ((x as f64 - 10.0).powi(2) + (y as f64 - 10.0).powi(2)).sqrt();
                let p = y * w + x;
                let mag = r.fwd.u.data()[p].hypot(r.fwd.v.data()[p]);
                assert!((mag - k * radius).abs() < 1e-12);
            }
        }
        assert!(synth_flow::<f64>(FlowPattern::Translation { dx: 40.0, dy: 0.0 }, 8, 8, 0).is_err());
    }

    #[test]
    fn block_matching_recovers_shift() {
        let (h, w) = (16, 24);
        let a = textured(h, w, 0.3);
        let b = Grid::from_fn(&[1, h, w], |k| {
            let (y, x) = (k / w, k % w);
            if x >= 3 {
                a.data()[y * w + x - 3]
            } else {
                0.0
            }
        });
        let pair = estimate_flow(&a, &b, 8, 4, 0).unwrap();
        let mut u = pair.fwd.u.data().to_vec();
        u.sort_by(f64::total_cmp);
        let median = u[u.len() / 2];
        assert!((median - 3.0).abs() <= 0.5, "{median}");
        let mut ub = pair.bwd.u.data().to_vec();
        ub.sort_by(f64::total_cmp);
        assert!((ub[ub.len() / 2] + 3.0).abs() <= 0.5);
    }

    #[test]
    fn block_matching_edge_cases() {
        let a = textured(16, 16, 1.0);
        let same = estimate_flow(&a, &a, 4, 3, 0).unwrap();
        assert_eq!(same.fwd.max_magnitude(), 0.0);
        assert_eq!(same.bwd.max_magnitude(), 0.0);

        let mut rng = Rng::new(6);
        let n1 = Grid::from_fn(&[3, 16, 16], |_| rng.normal());
        let n2 = Grid::from_fn(&[3, 16, 16], |_| rng.normal());
        let pair = estimate_flow(&n1, &n2, 4, 2, 0).unwrap();
        assert!(pair.fwd.u.max_abs() <= 2.0 && pair.fwd.v.max_abs() <= 2.0);
        assert!(matches!(estimate_flow(&n1, &n2, 4, 0, 0), Err(Error::Domain(_))));
        assert!(estimate_flow(&n1, &n2, 17, 1, 0).is_err());
    }

    fn translating_video(n: usize, dx: i64, dy: i64, offset: f64) -> (Video<f64>, Vec<FlowPair<f64>>) {
        let (h, w) = (12, 12);
        let frames = (0..n)
            .map(|i| {
                Grid::from_fn(&[2, h, w], |k| {
                    let (y, x, c) = ((k / w) % h, k % w, k / (h * w));
                    let sx = x as f64 - (dx * i as i64) as f64;
                    let sy = y as f64 - (dy * i as i64) as f64;
                    (0.8 * sx).sin() + (0.5 * sy).cos() + 0.2 * c as f64 + offset
                })
            })
            .collect();
        let flows = (0..n - 1)
            .map(|i| synth_flow(FlowPattern::Translation { dx: dx as f64, dy: dy as f64 }, h, w, i).unwrap())
            .collect();
        (Video::new(frames).unwrap(), flows)
    }

    #[test]
    fn t_diff_examples() {
        let f = textured(8, 8, 0.1);
        let stat = Video::new(vec![f.clone(); 4]).unwrap();
        let zeros: Vec<_> = (0..3).map(|i| FlowPair::zeros(8, 8, i)).collect();
        assert_eq!(t_diff(&stat, &zeros).unwrap(), 0.0);

        let wrong: Vec<_> = (0..3)
            .map(|i| synth_flow(FlowPattern::Translation { dx: 1.0, dy: 0.0 }, 8, 8, i).unwrap())
            .collect();
        assert!(t_diff(&stat, &wrong).unwrap() > 0.0);

        let (v, flows) = translating_video(5, 1, -1, 0.0);
        assert!(t_diff(&v, &flows).unwrap() < 1e-6);

        assert!(matches!(t_diff(&Video::new(vec![f]).unwrap(), &[]), Err(Error::Domain(_))));
        assert!(matches!(t_diff(&stat, &zeros[..2]), Err(Error::Context(_))));
    }

    #[test]
    fn flow_file_round_trip() {
        let pair = synth_flow::<f64>(FlowPattern::Translation { dx: 1.0, dy: -1.0 }, 5, 7, 0).unwrap();
        let back = decode_flow::<f64>(&encode_flow(&pair.fwd), FlowDirection::Forward).unwrap();
        assert_eq!(back, pair.fwd);
        assert!(decode_flow::<f64>(&encode_flow(&pair.fwd)[..20], FlowDirection::Forward).is_err());
    }

    proptest! {
        #[test]
        fn t_diff_ignores_constant_offset(dx in -2i64..=2, dy in -2i64..=2, offset in -3.0f64..3.0) {
            let (a, fa) = translating_video(4, dx, dy, 0.0);
            let (b, _) = translating_video(4, dx, dy, offset);
            let (ta, tb) = (t_diff(&a, &fa).unwrap(), t_diff(&b, &fa).unwrap());
            prop_assert!((ta - tb).abs() < 1e-9);
        }

        #[test]
        fn integer_warps_are_exact(dx in -3i64..=3, dy in -3i64..=3, seed in 0u64..100) {
            let mut rng = Rng::new(seed);
            let f = Grid::from_fn(&[1, 7, 9], |_| rng.normal());
            let flow = FlowField::constant(7, 9, dx as f64, dy as f64, FlowDirection::Forward).unwrap();
            let (out, valid) = warp(&f, &flow).unwrap();
            for y in 0..7i64 {
                for x in 0..9i64 {
                    let p = (y * 9 + x) as usize;
                    let (sx, sy) = (x + dx, y + dy);
                    let inside = (0..9).contains(&sx) && (0..7).contains(&sy);
                    prop_assert_eq!(valid.bits[p], inside);
                    if inside {
                        prop_assert_eq!(out.data()[p].to_bits(), f.data()[(sy * 9 + sx) as usize].to_bits());
                    }
                }
            }
        }
    }
}
