//! Audio-driven guidance losses on the clean-frame estimates and their
//! weighted per-frame gradient.
//!
//! * sound guidance: masked-frame embedding vs. the frame's audio embedding;
//! * directional guidance: frame-to-frame embedding change vs. chunk-to-chunk
//!   audio change;
//! * flow consistency: each frame against its flow-warped neighbour, both
//!   ways, on valid pixels;
//! * background preservation: L1 outside the mask plus a perceptual distance
//!   between the background-only frames: squared distance of channel-normalized
//!   encoder features, averaged over feature positions.

use rayon::prelude::*;

use crate::embed::{apply_mask, EncoderKind, EncoderModel, EncoderTrace, Embedding};
use crate::error::{Error, Result};
use crate::flow::{FlowPair, WarpPlan};
use crate::nn::{l2_normalize_backward, NORM_FLOOR};
use crate::numerics::{lit, to_f64, DifferentiableOp, Grid, MaskSequence, Scalar, Video};
use crate::schedule::DEFAULT_STEPS;

/// Norms below this make a direction uninformative.
pub const DIRECTION_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceConfig {
    pub lambda_sg: f64,
    pub lambda_dsg: f64,
    pub lambda_flow: f64,
    pub lambda_back: f64,
    pub steps: usize,
    /// Phase the flow term in as `(T - t) / T`.
    pub flow_ramp: bool,
    /// Push the gradient through the clean-frame estimate to `x_t` instead of
    /// using the gradient with respect to the estimate directly.
    pub chain_rule: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            lambda_sg: 1000.0,
            lambda_dsg: 1000.0,
            lambda_flow: 500.0,
            lambda_back: 1000.0,
            steps: DEFAULT_STEPS,
            flow_ramp: true,
            chain_rule: false,
        }
    }
}

impl GuidanceConfig {
    pub fn zero(steps: usize) -> Self {
        Self {
            lambda_sg: 0.0,
            lambda_dsg: 0.0,
            lambda_flow: 0.0,
            lambda_back: 0.0,
            steps,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, l) in [
            ("sg", self.lambda_sg),
            ("dsg", self.lambda_dsg),
            ("flow", self.lambda_flow),
            ("back", self.lambda_back),
        ] {
            if !(l.is_finite() && l >= 0.0) {
                return Err(Error::Domain(format!("guidance weight {name} = {l} must be finite and nonnegative")));
            }
        }
        if self.steps == 0 {
            return Err(Error::Domain("guidance needs at least one step".into()));
        }
        Ok(())
    }

    /// Multiplier on the flow weight at step `t`.
    pub fn ramp(&self, t: usize) -> Result<f64> {
        if t > self.steps {
            return Err(Error::Domain(format!("step {t} outside 0..={}", self.steps)));
        }
        Ok(if self.flow_ramp {
            (self.steps - t) as f64 / self.steps as f64
        } else {
            1.0
        })
    }

    /// Effective weights `(sg, dsg, flow, back)` at step `t`.
    pub fn weights(&self, t: usize) -> Result<[f64; 4]> {
        self.validate()?;
        let r = self.ramp(t)?;
        Ok([self.lambda_sg, self.lambda_dsg, r * self.lambda_flow, self.lambda_back])
    }
}

/// Everything the losses need besides the current estimate. Owns the fixed
/// per-edit data; the visual encoder is borrowed.
pub struct GuidanceContext<'a, S> {
    pub source: Video<S>,
    pub masks: MaskSequence<S>,
    pub audio_embeds: Vec<Embedding<S>>,
    pub visual: &'a EncoderModel<S>,
    flows: Vec<FlowPair<S>>,
    plans: Vec<(WarpPlan<S>, WarpPlan<S>)>,
    background_features: Vec<Grid<S>>,
}

impl<'a, S: Scalar> GuidanceContext<'a, S> {
    pub fn new(
        source: Video<S>,
        masks: MaskSequence<S>,
        audio_embeds: Vec<Embedding<S>>,
        flows: Vec<FlowPair<S>>,
        visual: &'a EncoderModel<S>,
    ) -> Result<Self> {
        let n = source.len();
        source.ensure_masks(&masks)?;
        if !masks.is_binary() {
            return Err(Error::Domain("guidance masks must be binary".into()));
        }
        if audio_embeds.len() != n {
            return Err(Error::Context(format!("{} audio embeddings for {n} frames", audio_embeds.len())));
        }
        if visual.kind != EncoderKind::Visual {
            return Err(Error::Context("guidance needs a visual encoder".into()));
        }
        visual.check_input(source.frame(0))?;
        if let Some(e) = audio_embeds.iter().find(|e| e.dim() != visual.dim()) {
            return Err(Error::Context(format!(
                "audio embedding width {} differs from visual width {}",
                e.dim(),
                visual.dim()
            )));
        }
        let background_features = (0..n)
            .into_par_iter()
            .map(|i| {
                let bg = apply_mask(source.frame(i), &complement(masks.frame(i)))?;
                Ok(unit_channels(visual.trace(&bg)?.features()).0)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut ctx = Self {
            source,
            masks,
            audio_embeds,
            visual,
            flows: Vec::new(),
            plans: Vec::new(),
            background_features,
        };
        ctx.set_flows(flows)?;
        Ok(ctx)
    }

    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }

    pub fn flows(&self) -> &[FlowPair<S>] {
        &self.flows
    }

    /// Replaces the flow fields (an empty list is allowed until the flow term
    /// is evaluated).
    pub fn set_flows(&mut self, flows: Vec<FlowPair<S>>) -> Result<()> {
        let n = self.len();
        if !flows.is_empty() && flows.len() != n - 1 {
            return Err(Error::Context(format!("{} flow pairs for {n} frames", flows.len())));
        }
        let (h, w) = (self.source.height(), self.source.width());
        for p in &flows {
            p.fwd.u.ensure_shape(&[h, w])?;
        }
        self.plans = flows
            .iter()
            .map(|p| (WarpPlan::new(&p.fwd), WarpPlan::new(&p.bwd)))
            .collect();
        self.flows = flows;
        Ok(())
    }
}

/// Normalizes the channel vector at every spatial position of a `[C, H, W]`
/// feature map; returns the normalized map and the per-position norms.
fn unit_channels<S: Scalar>(f: &Grid<S>) -> (Grid<S>, Vec<S>) {
    let (c, hw) = (f.dim(0), f.dim(1) * f.dim(2));
    let floor: S = lit(NORM_FLOOR);
    let norms: Vec<S> = (0..hw)
        .map(|p| {
            (0..c)
                .map(|ch| f.data()[ch * hw + p].powi(2))
                .fold(S::zero(), |a, b| a + b)
                .sqrt()
                .max(floor)
        })
        .collect();
    let unit = Grid::from_fn(f.shape(), |k| f.data()[k] / norms[k % hw]);
    (unit, norms)
}

/// Cotangent of the raw feature map given the cotangent of [`unit_channels`].
fn unit_channels_backward<S: Scalar>(unit: &Grid<S>, norms: &[S], g: &Grid<S>) -> Grid<S> {
    let (c, hw) = (unit.dim(0), unit.dim(1) * unit.dim(2));
    let proj: Vec<S> = (0..hw)
        .map(|p| (0..c).fold(S::zero(), |a, ch| a + unit.data()[ch * hw + p] * g.data()[ch * hw + p]))
        .collect();
    Grid::from_fn(unit.shape(), |k| {
        let p = k % hw;
        (g.data()[k] - unit.data()[k] * proj[p]) / norms[p]
    })
}

fn complement<S: Scalar>(mask: &Grid<S>) -> Grid<S> {
    mask.map(|m| S::one() - m)
}

/// Multiplies a `[C, H, W]` cotangent by a `[1, H, W]` mask.
fn masked<S: Scalar>(g: &Grid<S>, mask: &Grid<S>) -> Grid<S> {
    let hw = mask.len();
    Grid::from_fn(g.shape(), |k| g.data()[k] * mask.data()[k % hw])
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerms<S> {
    pub sg: S,
    pub dsg: S,
    pub flow: S,
    pub back: S,
}

impl<S: Scalar> LossTerms<S> {
    pub fn zero() -> Self {
        Self { sg: S::zero(), dsg: S::zero(), flow: S::zero(), back: S::zero() }
    }

    pub fn as_array(&self) -> [S; 4] {
        [self.sg, self.dsg, self.flow, self.back]
    }

    pub fn weighted(&self, w: [f64; 4]) -> S {
        self.as_array()
            .iter()
            .zip(w)
            .fold(S::zero(), |acc, (&v, k)| acc + lit::<S>(k) * v)
    }
}

/// A loss value and its gradient with respect to every frame.
#[derive(Clone, Debug)]
pub struct LossGrad<S> {
    pub value: S,
    pub grad: Vec<Grid<S>>,
}

#[derive(Clone, Debug)]
pub struct GuidanceOutput<S> {
    pub gradient: Vec<Grid<S>>,
    pub terms: LossTerms<S>,
    /// Flow-weight multiplier used at this step.
    pub ramp_weight: f64,
    pub total: S,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Sg,
    Dsg,
    Flow,
    Back,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [LossKind::Sg, LossKind::Dsg, LossKind::Flow, LossKind::Back];

    fn index(self) -> usize {
        self as usize
    }
}

/// Which values to compute and how to weight their gradients (no gradient
/// work for a zero weight).
struct Request {
    values: [bool; 4],
    weights: Option<[f64; 4]>,
}

impl Request {
    fn weight(&self, k: LossKind) -> Option<f64> {
        self.weights.map(|w| w[k.index()]).filter(|&w| w != 0.0)
    }

    fn wants(&self, k: LossKind) -> bool {
        self.values[k.index()] || self.weight(k).is_some()
    }
}

fn check_video<S: Scalar>(xhat: &Video<S>, ctx: &GuidanceContext<S>) -> Result<()> {
    if xhat.is_empty() {
        return Err(Error::Domain("no frames".into()));
    }
    if xhat.len() != ctx.len() || xhat.frame_shape() != ctx.source.frame_shape() {
        return Err(Error::shape(
            &[ctx.len(), ctx.source.channels(), ctx.source.height(), ctx.source.width()],
            &[xhat.len(), xhat.channels(), xhat.height(), xhat.width()],
        ));
    }
    Ok(())
}

fn evaluate<S: Scalar>(xhat: &Video<S>, ctx: &GuidanceContext<S>, req: &Request) -> Result<(LossTerms<S>, Vec<Grid<S>>)> {
    check_video(xhat, ctx)?;
    let n = xhat.len();
    let shape = xhat.frame_shape().to_vec();
    let mut grad: Vec<Grid<S>> = (0..n).map(|_| Grid::zeros(&shape)).collect();
    let mut terms = LossTerms::zero();

    if req.wants(LossKind::Sg) || req.wants(LossKind::Dsg) {
        let traces: Vec<EncoderTrace<S>> = (0..n)
            .into_par_iter()
            .map(|i| ctx.visual.trace(&apply_mask(xhat.frame(i), ctx.masks.frame(i))?))
            .collect::<Result<_>>()?;
        let emb: Vec<Embedding<S>> = traces.iter().map(EncoderTrace::embedding).collect();
        let dim = ctx.visual.dim();
        let mut d_emb: Vec<Grid<S>> = (0..n).map(|_| Grid::zeros(&[dim])).collect();
        let mut any = false;

        if req.wants(LossKind::Sg) {
            let nf: S = lit(n as f64);
            let mut total = S::zero();
            for (e, z) in emb.iter().zip(&ctx.audio_embeds) {
                total += S::one() - e.dot(z)?;
            }
            terms.sg = total / nf;
            if let Some(w) = req.weight(LossKind::Sg) {
                any = true;
                for (d, z) in d_emb.iter_mut().zip(&ctx.audio_embeds) {
                    d.axpy(-lit::<S>(w) / nf, z.vector())?;
                }
            }
        }

        if req.wants(LossKind::Dsg) {
            if n < 2 {
                return Err(Error::Domain("directional guidance needs at least two frames".into()));
            }
            let pairs: S = lit((n - 1) as f64);
            let eps: S = lit(DIRECTION_EPS);
            let mut total = S::zero();
            for i in 0..n - 1 {
                let dv = emb[i + 1].vector().sub(emb[i].vector())?;
                let dz = ctx.audio_embeds[i + 1].vector().sub(ctx.audio_embeds[i].vector())?;
                let (nv, nz) = (dv.norm_l2(), dz.norm_l2());
                if nv < eps || nz < eps {
                    total += S::one();
                    continue;
                }
                let (vh, zh) = (dv.scale(S::one() / nv), dz.scale(S::one() / nz));
                total += S::one() - vh.dot(&zh)?;
                if let Some(w) = req.weight(LossKind::Dsg) {
                    any = true;
                    let g_vh = zh.scale(-lit::<S>(w) / pairs);
                    let g_dv = l2_normalize_backward(&vh, nv, &g_vh);
                    d_emb[i + 1].axpy(S::one(), &g_dv)?;
                    d_emb[i].axpy(-S::one(), &g_dv)?;
                }
            }
            terms.dsg = total / pairs;
        }

        if any {
            let back: Vec<Grid<S>> = (0..n)
                .into_par_iter()
                .map(|i| {
                    let g = ctx.visual.backward(&traces[i], Some(&d_emb[i]), None, None);
                    masked(&g, ctx.masks.frame(i))
                })
                .collect();
            for (g, b) in grad.iter_mut().zip(&back) {
                g.axpy(S::one(), b)?;
            }
        }
    }

    if req.wants(LossKind::Flow) {
        if n < 2 {
            return Err(Error::Domain("flow guidance needs at least two frames".into()));
        }
        if ctx.plans.len() != n - 1 {
            return Err(Error::Context(format!("{} flow pairs for {n} frames", ctx.plans.len())));
        }
        let w = req.weight(LossKind::Flow);
        let pairs: S = lit((n - 1) as f64);
        let per: Vec<(S, Option<(Grid<S>, Grid<S>)>)> = (0..n - 1)
            .into_par_iter()
            .map(|i| flow_pair_term(xhat.frame(i), xhat.frame(i + 1), &ctx.plans[i], w.map(|w| lit::<S>(w) / pairs)))
            .collect::<Result<_>>()?;
        let mut total = S::zero();
        for (i, (v, g)) in per.into_iter().enumerate() {
            total += v;
            if let Some((gi, gj)) = g {
                grad[i].axpy(S::one(), &gi)?;
                grad[i + 1].axpy(S::one(), &gj)?;
            }
        }
        terms.flow = total / pairs;
    }

    if req.wants(LossKind::Back) {
        let w = req.weight(LossKind::Back).map(|w| lit::<S>(w) / lit(n as f64));
        let per: Vec<(S, Option<Grid<S>>)> = (0..n)
            .into_par_iter()
            .map(|i| background_term(xhat.frame(i), ctx, i, w))
            .collect::<Result<_>>()?;
        let mut total = S::zero();
        for (i, (v, g)) in per.into_iter().enumerate() {
            total += v;
            if let Some(g) = g {
                grad[i].axpy(S::one(), &g)?;
            }
        }
        terms.back = total / lit(n as f64);
    }

    for (k, v) in terms.as_array().iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("guidance loss {:?}", LossKind::ALL[k])));
        }
    }
    Ok((terms, grad))
}

/// Mean squared difference between `target` and `warped` over valid pixels,
/// with the cotangent of the residual if `scale` is given.
fn valid_mse<S: Scalar>(target: &Grid<S>, warped: &Grid<S>, plan: &WarpPlan<S>, scale: Option<S>) -> (S, Option<Grid<S>>) {
    let valid = &plan.validity().bits;
    let hw = valid.len();
    let count = valid.iter().filter(|&&b| b).count() * target.dim(0);
    if count == 0 {
        return (S::zero(), scale.map(|_| Grid::zeros(target.shape())));
    }
    let nc: S = lit(count as f64);
    let resid = Grid::from_fn(target.shape(), |k| {
        if valid[k % hw] {
            target.data()[k] - warped.data()[k]
        } else {
            S::zero()
        }
    });
    let value = resid.dot(&resid).expect("same shape") / nc;
    (value, scale.map(|s| resid.scale(lit::<S>(2.0) * s / nc)))
}

fn flow_pair_term<S: Scalar>(
    a: &Grid<S>,
    b: &Grid<S>,
    plans: &(WarpPlan<S>, WarpPlan<S>),
    scale: Option<S>,
) -> Result<(S, Option<(Grid<S>, Grid<S>)>)> {
    let (fwd, bwd) = plans;
    let (v1, r1) = valid_mse(a, &fwd.apply(b)?, fwd, scale);
    let (v2, r2) = valid_mse(b, &bwd.apply(a)?, bwd, scale);
    let grads = match (r1, r2) {
        (Some(r1), Some(r2)) => {
            let mut ga = r1.clone();
            ga.axpy(-S::one(), &bwd.adjoint(&r2)?)?;
            let mut gb = r2;
            gb.axpy(-S::one(), &fwd.adjoint(&r1)?)?;
            Some((ga, gb))
        }
        _ => None,
    };
    Ok((v1 + v2, grads))
}

fn background_term<S: Scalar>(x: &Grid<S>, ctx: &GuidanceContext<S>, i: usize, scale: Option<S>) -> Result<(S, Option<Grid<S>>)> {
    let src = ctx.source.frame(i);
    let mask = ctx.masks.frame(i);
    let hw = mask.len();
    let outside = mask.data().iter().filter(|&&m| m == S::zero()).count() * x.dim(0);
    let mut l1 = S::zero();
    let mut grad = scale.map(|_| Grid::zeros(x.shape()));
    if outside > 0 {
        let no: S = lit(outside as f64);
        for k in 0..x.len() {
            if mask.data()[k % hw] == S::zero() {
                let d = x.data()[k] - src.data()[k];
                l1 += d.abs();
                if let (Some(g), Some(s)) = (grad.as_mut(), scale) {
                    let sign = if d > S::zero() {
                        S::one()
                    } else if d < S::zero() {
                        -S::one()
                    } else {
                        S::zero()
                    };
                    g.data_mut()[k] = s * sign / no;
                }
            }
        }
        l1 /= no;
    }
    let inv = complement(mask);
    let tr = ctx.visual.trace(&apply_mask(x, &inv)?)?;
    let (unit, norms) = unit_channels(tr.features());
    let diff = unit.sub(&ctx.background_features[i])?;
    let positions: S = lit((diff.dim(1) * diff.dim(2)) as f64);
    let perceptual = diff.dot(&diff)? / positions;
    if let (Some(g), Some(s)) = (grad.as_mut(), scale) {
        let d_unit = diff.scale(lit::<S>(2.0) * s / positions);
        let d_feat = unit_channels_backward(&unit, &norms, &d_unit);
        let gi = ctx.visual.backward(&tr, None, Some(&d_feat), None);
        g.axpy(S::one(), &masked(&gi, &inv))?;
    }
    Ok((l1 + perceptual, grad))
}

fn single<S: Scalar>(xhat: &Video<S>, ctx: &GuidanceContext<S>, kind: LossKind) -> Result<LossGrad<S>> {
    let mut values = [false; 4];
    values[kind.index()] = true;
    let mut weights = [0.0; 4];
    weights[kind.index()] = 1.0;
    let (terms, grad) = evaluate(xhat, ctx, &Request { values, weights: Some(weights) })?;
    Ok(LossGrad {
        value: terms.as_array()[kind.index()],
        grad,
    })
}

/// Mean cosine distance between masked-frame and audio embeddings.
pub fn loss_sg<S: Scalar>(xhat: &Video<S>, ctx: &GuidanceContext<S>) -> Result<LossGrad<S>> {
    single(xhat, ctx, LossKind::Sg)
}

/// Mean cosine distance between normalized visual and audio directions;
/// a pair with a vanishing direction counts as distance 1 with no gradient.
pub fn loss_dsg<S: Scalar>(xhat: &Video<S>, ctx: &GuidanceContext<S>) -> Result<LossGrad<S>> {
    single(xhat, ctx, LossKind::Dsg)
}

/// Two-way warped MSE per adjacent pair, averaged over pairs.
pub fn loss_flow<S: Scalar>(xhat: &Video<S>, ctx: &GuidanceContext<S>) -> Result<LossGrad<S>> {
    single(xhat, ctx, LossKind::Flow)
}

/// Outside-mask L1 plus the background perceptual distance, averaged over
/// frames.
pub fn loss_back<S: Scalar>(xhat: &Video<S>, ctx: &GuidanceContext<S>) -> Result<LossGrad<S>> {
    single(xhat, ctx, LossKind::Back)
}

/// All four loss values without gradients.
pub fn loss_terms<S: Scalar>(xhat: &Video<S>, ctx: &GuidanceContext<S>) -> Result<LossTerms<S>> {
    Ok(evaluate(xhat, ctx, &Request { values: [true; 4], weights: None })?.0)
}

/// Gradient of the weighted total loss with respect to every frame estimate,
/// together with every loss value for logging.
pub fn total_gradient<S: Scalar>(xhat: &Video<S>, t: usize, cfg: &GuidanceConfig, ctx: &GuidanceContext<S>) -> Result<GuidanceOutput<S>> {
    let weights = cfg.weights(t)?;
    let n = xhat.len();
    let values = [true, n >= 2, n >= 2 && !ctx.plans.is_empty(), true];
    for (k, (&w, &v)) in weights.iter().zip(&values).enumerate() {
        if w != 0.0 && !v {
            return Err(Error::Context(format!("{:?} guidance is not available for this clip", LossKind::ALL[k])));
        }
    }
    let (terms, gradient) = evaluate(xhat, ctx, &Request { values, weights: Some(weights) })?;
    Ok(GuidanceOutput {
        gradient,
        total: terms.weighted(weights),
        terms,
        ramp_weight: cfg.ramp(t)?,
    })
}

fn as_video<S: Scalar>(inputs: &[Grid<S>]) -> Result<Video<S>> {
    Video::new(inputs.to_vec())
}

/// One loss as a scalar op of the frame list.
pub struct LossOp<'c, 'a, S> {
    pub ctx: &'c GuidanceContext<'a, S>,
    pub kind: LossKind,
}

impl<S: Scalar> DifferentiableOp<S> for LossOp<'_, '_, S> {
    fn name(&self) -> &str {
        match self.kind {
            LossKind::Sg => "loss_sg",
            LossKind::Dsg => "loss_dsg",
            LossKind::Flow => "loss_flow",
            LossKind::Back => "loss_back",
        }
    }

    fn forward(&self, inputs: &[Grid<S>]) -> Result<Grid<S>> {
        let v = single(&as_video(inputs)?, self.ctx, self.kind)?.value;
        Ok(Grid::filled(&[1], v))
    }

    fn vjp(&self, inputs: &[Grid<S>], cot: &Grid<S>) -> Result<Vec<Grid<S>>> {
        let g = single(&as_video(inputs)?, self.ctx, self.kind)?.grad;
        Ok(g.iter().map(|x| x.scale(cot.data()[0])).collect())
    }
}

/// The weighted total loss at step `t` as a scalar op of the frame list.
pub struct TotalLossOp<'c, 'a, S> {
    pub ctx: &'c GuidanceContext<'a, S>,
    pub cfg: GuidanceConfig,
    pub t: usize,
}

impl<S: Scalar> DifferentiableOp<S> for TotalLossOp<'_, '_, S> {
    fn name(&self) -> &str {
        "total_loss"
    }

    fn forward(&self, inputs: &[Grid<S>]) -> Result<Grid<S>> {
        let out = total_gradient(&as_video(inputs)?, self.t, &self.cfg, self.ctx)?;
        Ok(Grid::filled(&[1], out.total))
    }

    fn vjp(&self, inputs: &[Grid<S>], cot: &Grid<S>) -> Result<Vec<Grid<S>>> {
        let out = total_gradient(&as_video(inputs)?, self.t, &self.cfg, self.ctx)?;
        Ok(out.gradient.iter().map(|x| x.scale(cot.data()[0])).collect())
    }
}

/// Global L2 norm of a per-frame gradient.
pub fn gradient_norm<S: Scalar>(g: &[Grid<S>]) -> f64 {
    g.iter()
        .map(|x| to_f64(x.dot(x).expect("same shape")))
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::{cosine_distance, EncoderKind};
    use crate::flow::{synth_flow, warp, FlowPattern};
    use crate::numerics::{check_gradient, Rng};

    struct Fixture {
        visual: EncoderModel<f64>,
        source: Video<f64>,
        masks: Video<f64>,
        audio: Vec<Embedding<f64>>,
        flows: Vec<FlowPair<f64>>,
    }

    fn fixture(n: usize, seed: u64) -> Fixture {
        let mut rng = Rng::new(seed);
        let visual = EncoderModel::new(EncoderKind::Visual, [1, 8, 8], 8, &mut rng);
        let source = Video::new((0..n).map(|_| Grid::from_fn(&[1, 8, 8], |_| rng.uniform_in(-1.0, 1.0))).collect()).unwrap();
        let masks = Video::new(
            (0..n)
                .map(|i| Grid::from_fn(&[1, 8, 8], |k| if (2 + i % 2..6).contains(&(k % 8)) && (2..6).contains(&(k / 8)) { 1.0 } else { 0.0 }))
                .collect(),
        )
        .unwrap();
        let audio = (0..n).map(|_| Embedding::from_raw(&Grid::from_fn(&[8], |_| rng.normal()))).collect();
        let flows = (0..n - 1)
            .map(|i| {
                let dx = [0.5, -1.25, 1.0][i % 3];
                synth_flow(FlowPattern::Translation { dx, dy: 0.75 }, 8, 8, i).unwrap()
            })
            .collect();
        Fixture { visual, source, masks, audio, flows }
    }

    impl Fixture {
        fn ctx(&self) -> GuidanceContext<'_, f64> {
            GuidanceContext::new(self.source.clone(), self.masks.clone(), self.audio.clone(), self.flows.clone(), &self.visual).unwrap()
        }
    }

    fn random_video(n: usize, seed: u64) -> Video<f64> {
        let mut rng = Rng::new(seed);
        Video::new((0..n).map(|_| Grid::from_fn(&[1, 8, 8], |_| rng.uniform_in(-1.0, 1.0))).collect()).unwrap()
    }

    fn masked_embed(f: &Fixture, x: &Video<f64>, i: usize) -> Embedding<f64> {
        f.visual.embed(&apply_mask(x.frame(i), f.masks.frame(i)).unwrap()).unwrap()
    }

    #[test]
    fn sg_matches_loop_oracle() {
        let f = fixture(3, 1);
        let x = random_video(3, 2);
        let mut oracle = 0.0;
        for i in 0..3 {
            oracle += cosine_distance(&masked_embed(&f, &x, i), &f.audio[i]).unwrap();
        }
        oracle /= 3.0;
        let got = loss_sg(&x, &f.ctx()).unwrap().value;
        assert!((got - oracle).abs() < 1e-12);
        assert!((0.0..=2.0).contains(&got));
    }

    #[test]
    fn sg_single_frame_is_one_distance_and_zero_when_aligned() {
        let mut f = fixture(2, 3);
        let x = random_video(2, 4);
        f.audio = (0..2).map(|i| masked_embed(&f, &x, i)).collect();
        assert!(loss_sg(&x, &f.ctx()).unwrap().value.abs() < 1e-12);

        let g = fixture(2, 5);
        let one = GuidanceContext::new(
            Video::new(vec![g.source.frame(0).clone()]).unwrap(),
            Video::new(vec![g.masks.frame(0).clone()]).unwrap(),
            vec![g.audio[0].clone()],
            vec![],
            &g.visual,
        )
        .unwrap();
        let x1 = Video::new(vec![x.frame(0).clone()]).unwrap();
        let d = cosine_distance(&masked_embed(&g, &x1, 0), &g.audio[0]).unwrap();
        assert!((loss_sg(&x1, &one).unwrap().value - d).abs() < 1e-15);
    }

    #[test]
    fn dsg_matches_loop_oracle() {
        let f = fixture(3, 6);
        let x = random_video(3, 7);
        let mut oracle = 0.0;
        for i in 0..2 {
            let dv = masked_embed(&f, &x, i + 1).vector().sub(masked_embed(&f, &x, i).vector()).unwrap();
            let dz = f.audio[i + 1].vector().sub(f.audio[i].vector()).unwrap();
            let c = dv.dot(&dz).unwrap() / (dv.norm_l2() * dz.norm_l2());
            oracle += 1.0 - c;
        }
        oracle /= 2.0;
        assert!((loss_dsg(&x, &f.ctx()).unwrap().value - oracle).abs() < 1e-12);
    }

    #[test]
    fn dsg_static_video_and_parallel_directions() {
        let f = fixture(3, 8);
        let frame = random_video(1, 9).frame(0).clone();
        let stat = Video::new(vec![frame; 3]).unwrap();
        let mut same_masks = f.masks.clone();
        same_masks = Video::new(vec![same_masks.frame(0).clone(); 3]).unwrap();
        let ctx = GuidanceContext::new(f.source.clone(), same_masks, f.audio.clone(), f.flows.clone(), &f.visual).unwrap();
        let r = loss_dsg(&stat, &ctx).unwrap();
        assert_eq!(r.value, 1.0);
        assert!(r.grad.iter().all(|g| g.max_abs() == 0.0));

        // Audio embeddings chosen so every audio delta equals the visual delta.
        let x = random_video(3, 10);
        let e: Vec<_> = (0..3).map(|i| masked_embed(&f, &x, i)).collect();
        let ctx = GuidanceContext::new(f.source.clone(), f.masks.clone(), e, f.flows.clone(), &f.visual).unwrap();
        assert!(loss_dsg(&x, &ctx).unwrap().value.abs() < 1e-12);
    }

    #[test]
    fn flow_matches_loop_oracle_and_examples() {
        let f = fixture(3, 11);
        let x = random_video(3, 12);
        let mut oracle = 0.0;
        for (i, p) in f.flows.iter().enumerate() {
            for (target, moving, field) in [(x.frame(i), x.frame(i + 1), &p.fwd), (x.frame(i + 1), x.frame(i), &p.bwd)] {
                let (w, valid) = warp(moving, field).unwrap();
                let (mut s, mut c) = (0.0, 0usize);
                for k in 0..64 {
                    if valid.bits[k] {
                        s += (target.data()[k] - w.data()[k]).powi(2);
                        c += 1;
                    }
                }
                oracle += s / c as f64;
            }
        }
        oracle /= 2.0;
        assert!((loss_flow(&x, &f.ctx()).unwrap().value - oracle).abs() < 1e-12);

        let frame = x.frame(0).clone();
        let stat = Video::new(vec![frame; 3]).unwrap();
        let zero: Vec<_> = (0..2).map(|i| FlowPair::zeros(8, 8, i)).collect();
        let ctx = GuidanceContext::new(f.source.clone(), f.masks.clone(), f.audio.clone(), zero, &f.visual).unwrap();
        assert_eq!(loss_flow(&stat, &ctx).unwrap().value, 0.0);
        let wrong: Vec<_> = (0..2).map(|i| synth_flow(FlowPattern::Translation { dx: 2.0, dy: 0.0 }, 8, 8, i).unwrap()).collect();
        let ctx = GuidanceContext::new(f.source.clone(), f.masks.clone(), f.audio.clone(), wrong, &f.visual).unwrap();
        assert!(loss_flow(&stat, &ctx).unwrap().value > 0.0);
    }

    #[test]
    fn flow_is_tiny_for_exact_translation() {
        let f = fixture(3, 13);
        let frames: Vec<_> = (0..3)
            .map(|i| Grid::from_fn(&[1, 8, 8], |k| ((k % 8) as f64 - i as f64 - 0.3 * (k / 8) as f64).sin()))
            .collect();
        let flows: Vec<_> = (0..2).map(|i| synth_flow(FlowPattern::Translation { dx: 1.0, dy: 0.0 }, 8, 8, i).unwrap()).collect();
        let ctx = GuidanceContext::new(f.source.clone(), f.masks.clone(), f.audio.clone(), flows, &f.visual).unwrap();
        assert!(loss_flow(&Video::new(frames).unwrap(), &ctx).unwrap().value < 1e-10);
    }

    #[test]
    fn back_examples() {
        let f = fixture(3, 14);
        let ctx = f.ctx();
        assert_eq!(loss_back(&f.source, &ctx).unwrap().value, 0.0);

        let shifted = Video::new(
            (0..3)
                .map(|i| {
                    let m = f.masks.frame(i);
                    Grid::from_fn(&[1, 8, 8], |k| f.source.frame(i).data()[k] + if m.data()[k] == 0.0 { 0.1 } else { 0.0 })
                })
                .collect(),
        )
        .unwrap();
        let mut l1 = 0.0;
        for i in 0..3 {
            let (mut s, mut c) = (0.0, 0);
            for k in 0..64 {
                if f.masks.frame(i).data()[k] == 0.0 {
                    s += (shifted.frame(i).data()[k] - f.source.frame(i).data()[k]).abs();
                    c += 1;
                }
            }
            l1 += s / c as f64;
        }
        assert!((l1 / 3.0 - 0.1).abs() < 1e-15);
        assert!(loss_back(&shifted, &ctx).unwrap().value >= 0.1 - 1e-15);

        let ones = Video::ones(3, 8, 8);
        let ctx = GuidanceContext::new(f.source.clone(), ones, f.audio.clone(), f.flows.clone(), &f.visual).unwrap();
        assert_eq!(loss_back(&random_video(3, 15), &ctx).unwrap().value, 0.0);
    }

    #[test]
    fn every_loss_passes_gradient_check() {
        for draw in 0..5 {
            let f = fixture(3, 100 + draw);
            let ctx = f.ctx();
            let x = random_video(3, 200 + draw).into_frames();
            for kind in LossKind::ALL {
                let r = check_gradient(&LossOp { ctx: &ctx, kind }, &x, 1e-4).unwrap();
                assert!(r.passed(), "{kind:?} draw {draw}: {r:?}");
            }
            let op = TotalLossOp { ctx: &ctx, cfg: GuidanceConfig::default(), t: 37 };
            let r = check_gradient(&op, &x, 1e-4).unwrap();
            assert!(r.passed(), "total draw {draw}: {r:?}");
        }
    }

    #[test]
    fn zero_weights_and_ramp_endpoint() {
        let f = fixture(3, 16);
        let ctx = f.ctx();
        let x = random_video(3, 17);
        let out = total_gradient(&x, 50, &GuidanceConfig::zero(100), &ctx).unwrap();
        assert!(out.gradient.iter().all(|g| g.data().iter().all(|&v| v == 0.0)));
        let flow_only = GuidanceConfig {
            lambda_flow: 500.0,
            ..GuidanceConfig::zero(100)
        };
        let out = total_gradient(&x, 100, &flow_only, &ctx).unwrap();
        assert_eq!(out.ramp_weight, 0.0);
        assert!(out.gradient.iter().all(|g| g.max_abs() == 0.0));
        let bad = GuidanceConfig {
            lambda_back: -1.0,
            ..GuidanceConfig::default()
        };
        assert!(matches!(total_gradient(&x, 10, &bad, &ctx), Err(Error::Domain(_))));
        assert!(total_gradient(&x, 101, &GuidanceConfig::default(), &ctx).is_err());
    }

    #[test]
    fn gradient_is_linear_in_weights() {
        let f = fixture(3, 18);
        let ctx = f.ctx();
        let x = random_video(3, 19);
        let t = 40;
        let a = GuidanceConfig { lambda_sg: 3.0, lambda_dsg: 0.5, lambda_flow: 2.0, lambda_back: 1.5, ..Default::default() };
        let b = GuidanceConfig { lambda_sg: 1.0, lambda_dsg: 2.0, lambda_flow: 0.0, lambda_back: 4.0, ..Default::default() };
        let sum = GuidanceConfig {
            lambda_sg: 4.0,
            lambda_dsg: 2.5,
            lambda_flow: 2.0,
            lambda_back: 5.5,
            ..Default::default()
        };
        let ga = total_gradient(&x, t, &a, &ctx).unwrap().gradient;
        let gb = total_gradient(&x, t, &b, &ctx).unwrap().gradient;
        let gs = total_gradient(&x, t, &sum, &ctx).unwrap().gradient;
        for i in 0..3 {
            let expect = ga[i].add(&gb[i]).unwrap();
            assert!(gs[i].max_abs_diff(&expect).unwrap() < 1e-12 * (1.0 + expect.max_abs()));
        }
    }

    #[test]
    fn gradient_is_local_without_coupling_terms() {
        let f = fixture(3, 20);
        let ctx = f.ctx();
        let cfg = GuidanceConfig { lambda_dsg: 0.0, lambda_flow: 0.0, ..Default::default() };
        let x = random_video(3, 21);
        let base = total_gradient(&x, 10, &cfg, &ctx).unwrap().gradient;
        let mut frames = x.into_frames();
        frames[2] = frames[2].map(|v| -v);
        let moved = total_gradient(&Video::new(frames).unwrap(), 10, &cfg, &ctx).unwrap().gradient;
        assert!(base[0].bitwise_eq(&moved[0]));
        assert!(base[1].bitwise_eq(&moved[1]));
        assert!(!base[2].bitwise_eq(&moved[2]));
    }

    #[test]
    fn context_validation() {
        let f = fixture(3, 22);
        assert!(GuidanceContext::new(f.source.clone(), f.masks.clone(), f.audio[..2].to_vec(), f.flows.clone(), &f.visual).is_err());
        assert!(GuidanceContext::new(f.source.clone(), f.masks.clone(), f.audio.clone(), f.flows[..1].to_vec(), &f.visual).is_err());
        let soft = Video::new(vec![Grid::filled(&[1, 8, 8], 0.5); 3]).unwrap();
        assert!(GuidanceContext::new(f.source.clone(), soft, f.audio.clone(), f.flows.clone(), &f.visual).is_err());
        let ctx = GuidanceContext::new(f.source.clone(), f.masks.clone(), f.audio.clone(), vec![], &f.visual).unwrap();
        assert!(matches!(loss_flow(&f.source, &ctx), Err(Error::Context(_))));
    }
}
