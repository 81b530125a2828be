//! Guided ancestral sampling over all frames of a clip, followed by
//! background substitution (local edits) or feathered compositing (global
//! edits).

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::audio::{chunk_for_frames, mel_spectrogram, Waveform, DEFAULT_CHUNK, DEFAULT_HOP, DEFAULT_MEL_BINS, DEFAULT_WIN};
use crate::denoiser::{predict_noise, predict_x0_vjp, x0_from_noise, DenoiserModel};
use crate::embed::{apply_mask, EncoderKind, EncoderModel, Embedding};
use crate::error::{Error, Result};
use crate::flow::{estimate_video_flows, t_diff, FlowPair};
use crate::guidance::{gradient_norm, total_gradient, GuidanceConfig, GuidanceContext};
use crate::numerics::{lit, stream_key, to_f64, Grid, MaskSequence, Rng, Scalar, Video};
use crate::schedule::NoiseSchedule;

/// Stream tag of the per-frame noise that starts sampling.
pub const START_STREAM: u64 = 0x5747_0001;
/// Stream tag of the noise added at each reverse step.
pub const STEP_STREAM: u64 = 0x5747_0002;

pub const STEP_LOG_HEADER: &str = "t,ramp_weight,L_SG,L_DSG,L_flow,L_back,grad_norm";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EditMode {
    /// Edit inside the mask, keep the rest of every frame.
    Local,
    /// Edit whole frames; masks are ignored and treated as all ones.
    Global,
}

#[derive(Clone, Debug)]
pub enum FlowSource<S> {
    /// Known flows (synthetic ground truth or loaded from files).
    Provided(Vec<FlowPair<S>>),
    /// Block matching: first on the source, then on the current clean-frame
    /// estimates every `refresh` steps (0 disables refreshing).
    Estimated { block: usize, radius: usize, refresh: usize },
}

impl<S> Default for FlowSource<S> {
    fn default() -> Self {
        FlowSource::Estimated { block: 4, radius: 2, refresh: 10 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MelParams {
    pub bins: usize,
    pub win: usize,
    pub hop: usize,
    pub chunk: usize,
    pub overlap_ratio: f64,
}

impl Default for MelParams {
    fn default() -> Self {
        Self {
            bins: DEFAULT_MEL_BINS,
            win: DEFAULT_WIN,
            hop: DEFAULT_HOP,
            chunk: DEFAULT_CHUNK,
            overlap_ratio: 0.5,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EditRequest<S> {
    pub source: Video<S>,
    pub masks: MaskSequence<S>,
    pub waveform: Waveform,
    pub cfg: GuidanceConfig,
    pub seed: u64,
    pub mode: EditMode,
    pub flow_source: FlowSource<S>,
    pub mel: MelParams,
    /// Border ramp width for global compositing.
    pub feather: usize,
}

impl<S: Scalar> EditRequest<S> {
    /// Local edit with default guidance, mel and flow settings.
    pub fn local(source: Video<S>, masks: MaskSequence<S>, waveform: Waveform, seed: u64) -> Self {
        Self {
            source,
            masks,
            waveform,
            cfg: GuidanceConfig::default(),
            seed,
            mode: EditMode::Local,
            flow_source: FlowSource::default(),
            mel: MelParams::default(),
            feather: 0,
        }
    }
}

/// Trained networks and the schedule they were trained with.
#[derive(Clone, Copy)]
pub struct Models<'a, S> {
    pub denoiser: &'a DenoiserModel<S>,
    pub schedule: &'a NoiseSchedule<S>,
    pub visual: &'a EncoderModel<S>,
    pub audio: &'a EncoderModel<S>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub t: usize,
    pub ramp_weight: f64,
    /// `(sg, dsg, flow, back)`.
    pub losses: [f64; 4],
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EditMetrics {
    /// Absent for single-frame clips.
    pub t_diff: Option<f64>,
    pub av_similarity: f64,
}

#[derive(Clone, Debug)]
pub struct EditResult<S> {
    /// Final frames after substitution or compositing.
    pub video: Video<S>,
    /// Sampler output before substitution or compositing.
    pub raw: Video<S>,
    pub log: Vec<StepLog>,
    pub metrics: EditMetrics,
    /// Flows used for the metric (and by the last guidance step).
    pub flows: Vec<FlowPair<S>>,
}

/// Per-frame audio embeddings of the chunks assigned to `n` frames.
pub fn audio_embeddings<S: Scalar>(waveform: &Waveform, n: usize, mel: &MelParams, audio: &EncoderModel<S>) -> Result<Vec<Embedding<S>>> {
    if audio.kind != EncoderKind::Audio {
        return Err(Error::Domain("audio embeddings need an audio encoder".into()));
    }
    let spec = mel_spectrogram::<S>(waveform, mel.bins, mel.win, mel.hop)?;
    let chunks = chunk_for_frames(&spec, n, mel.chunk, mel.overlap_ratio)?;
    chunks.par_iter().map(|c| audio.embed(&c.values)).collect()
}

/// Mean cosine similarity between each masked frame's embedding and its
/// audio embedding.
pub fn av_similarity<S: Scalar>(video: &Video<S>, masks: &MaskSequence<S>, audio_embeds: &[Embedding<S>], visual: &EncoderModel<S>) -> Result<f64> {
    video.ensure_masks(masks)?;
    if audio_embeds.len() != video.len() {
        return Err(Error::Context(format!("{} audio embeddings for {} frames", audio_embeds.len(), video.len())));
    }
    let sims: Vec<f64> = (0..video.len())
        .into_par_iter()
        .map(|i| {
            let e = visual.embed(&apply_mask(video.frame(i), masks.frame(i))?)?;
            Ok(to_f64(e.dot(&audio_embeds[i])?))
        })
        .collect::<Result<_>>()?;
    Ok(sims.iter().sum::<f64>() / sims.len() as f64)
}

/// `result` inside the mask, `source` outside, selected per pixel so that
/// kept pixels are bit-for-bit the source.
pub fn background_substitute<S: Scalar>(result: &Video<S>, source: &Video<S>, masks: &MaskSequence<S>) -> Result<Video<S>> {
    if result.len() != source.len() || result.frame_shape() != source.frame_shape() {
        return Err(Error::shape(source.frame_shape(), result.frame_shape()));
    }
    source.ensure_masks(masks)?;
    if !masks.is_binary() {
        return Err(Error::Domain("background substitution needs a binary mask".into()));
    }
    let frames = (0..source.len())
        .map(|i| {
            let (r, s, m) = (result.frame(i), source.frame(i), masks.frame(i));
            let hw = m.len();
            Grid::from_fn(s.shape(), |k| if m.data()[k % hw] == S::one() { r.data()[k] } else { s.data()[k] })
        })
        .collect();
    Video::new(frames)
}

/// Border alpha `min(1, d / feather)` where `d` is the pixel's distance (in
/// pixel indices) to the nearest frame edge.
pub fn feather_alpha(h: usize, w: usize, feather: usize) -> Vec<f64> {
    (0..h * w)
        .map(|p| {
            if feather == 0 {
                return 1.0;
            }
            let (y, x) = (p / w, p % w);
            let d = x.min(y).min(w - 1 - x).min(h - 1 - y);
            (d as f64 / feather as f64).min(1.0)
        })
        .collect()
}

/// Blends `result` over `source` with a feathered border.
pub fn global_composite<S: Scalar>(result: &Video<S>, source: &Video<S>, feather: usize) -> Result<Video<S>> {
    if result.len() != source.len() || result.frame_shape() != source.frame_shape() {
        return Err(Error::shape(source.frame_shape(), result.frame_shape()));
    }
    let (h, w) = (source.height(), source.width());
    if 2 * feather > h.min(w) {
        return Err(Error::Domain(format!("feather {feather} exceeds half of {h}x{w}")));
    }
    if feather == 0 {
        return Ok(result.clone());
    }
    let alpha = feather_alpha(h, w, feather);
    let frames = (0..source.len())
        .map(|i| {
            let (r, s) = (result.frame(i), source.frame(i));
            Grid::from_fn(s.shape(), |k| {
                let a: S = lit(alpha[k % (h * w)]);
                a * r.data()[k] + (S::one() - a) * s.data()[k]
            })
        })
        .collect();
    Video::new(frames)
}

fn check_models<S: Scalar>(source: &Video<S>, models: &Models<S>, mel: &MelParams) -> Result<()> {
    let shape = source.frame_shape();
    if models.denoiser.io_spec[..] != shape[..] {
        return Err(Error::shape(&models.denoiser.io_spec, shape));
    }
    if models.visual.input_spec[..] != shape[..] {
        return Err(Error::shape(&models.visual.input_spec, shape));
    }
    let chunk = [1, mel.bins, mel.chunk];
    if models.audio.input_spec != chunk {
        return Err(Error::shape(&models.audio.input_spec, &chunk));
    }
    if models.denoiser.steps != models.schedule.steps() {
        return Err(Error::Data(format!(
            "denoiser trained for {} steps, schedule has {}",
            models.denoiser.steps,
            models.schedule.steps()
        )));
    }
    Ok(())
}

/// Source frames noised to step `T` with the per-frame start streams.
fn start_point<S: Scalar>(source: &Video<S>, sched: &NoiseSchedule<S>, seed: u64) -> Result<Vec<Grid<S>>> {
    let t = sched.steps();
    (0..source.len())
        .map(|i| {
            let mut rng = Rng::with_stream(seed, stream_key(&[START_STREAM, i as u64]));
            let eps = Grid::from_fn(source.frame_shape(), |_| lit(rng.normal()));
            sched.noise(source.frame(i), &eps, t)
        })
        .collect()
}

/// Reverse-process mean `(x_t - beta_t / sqrt(1 - abar_t) eps) / sqrt(alpha_t)`.
fn reverse_mean<S: Scalar>(x: &Grid<S>, eps: &Grid<S>, t: usize, sched: &NoiseSchedule<S>) -> Result<Grid<S>> {
    let c = sched.beta(t) / (S::one() - sched.alpha_bar(t)).sqrt();
    let inv = S::one() / sched.alpha(t).sqrt();
    x.zip_map(eps, |xv, e| (xv - c * e) * inv)
}

fn step_noise<S: Scalar>(shape: &[usize], seed: u64, t: usize, i: usize) -> Grid<S> {
    let mut rng = Rng::with_stream(seed, stream_key(&[STEP_STREAM, t as u64, i as u64]));
    Grid::from_fn(shape, |_| lit(rng.normal()))
}

/// Plain ancestral sampling from the noised source with the same random
/// streams as [`guided_sample`] and no guidance.
pub fn unguided_sample<S: Scalar>(source: &Video<S>, seed: u64, denoiser: &DenoiserModel<S>, sched: &NoiseSchedule<S>) -> Result<Video<S>> {
    let mut x = start_point(source, sched, seed)?;
    for t in (1..=sched.steps()).rev() {
        x = x
            .par_iter()
            .enumerate()
            .map(|(i, xi)| {
                let eps = predict_noise(denoiser, xi, t)?;
                let mean = reverse_mean(xi, &eps, t, sched)?;
                if t == 1 {
                    return Ok(mean);
                }
                let z = step_noise::<S>(xi.shape(), seed, t, i);
                let sd = sched.posterior_variance(t).sqrt();
                mean.zip_map(&z, |m, zv| m + sd * zv)
            })
            .collect::<Result<_>>()?;
    }
    Video::new(x)
}

fn numeric(t: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite(what) => Error::NumericFailure { step: t, what },
        other => other,
    }
}

/// Runs one edit end to end.
pub fn guided_sample<S: Scalar>(req: &EditRequest<S>, models: &Models<S>) -> Result<EditResult<S>> {
    req.cfg.validate()?;
    let source = &req.source;
    let n = source.len();
    source.ensure_masks(&req.masks)?;
    let masks = match req.mode {
        EditMode::Global => Video::ones(n, source.height(), source.width()),
        EditMode::Local => {
            if !req.masks.is_binary() {
                return Err(Error::Domain("edit masks must be binary".into()));
            }
            if req.masks.frames().iter().all(|m| m.max_abs() == S::zero()) {
                return Err(Error::Data("local edit with an empty mask".into()));
            }
            req.masks.clone()
        }
    };
    check_models(source, models, &req.mel)?;
    if req.cfg.steps != models.schedule.steps() {
        return Err(Error::Data(format!(
            "guidance configured for {} steps, schedule has {}",
            req.cfg.steps,
            models.schedule.steps()
        )));
    }
    let sched = models.schedule;
    let big_t = sched.steps();

    let audio_embeds = audio_embeddings(&req.waveform, n, &req.mel, models.audio)?;
    let initial_flows = match &req.flow_source {
        FlowSource::Provided(f) => {
            if n >= 2 && f.len() != n - 1 {
                return Err(Error::Data(format!("{} flow pairs for {n} frames", f.len())));
            }
            f.clone()
        }
        FlowSource::Estimated { block, radius, .. } => estimate_video_flows(source, *block, *radius)?,
    };
    let mut ctx = GuidanceContext::new(source.clone(), masks.clone(), audio_embeds.clone(), initial_flows, models.visual)?;

    let mut x = start_point(source, sched, req.seed)?;
    let mut log = Vec::with_capacity(big_t);
    for t in (1..=big_t).rev() {
        let eps: Vec<Grid<S>> = x
            .par_iter()
            .map(|xi| predict_noise(models.denoiser, xi, t))
            .collect::<Result<_>>()?;
        let xhat: Vec<Grid<S>> = x
            .iter()
            .zip(&eps)
            .map(|(xi, e)| x0_from_noise(xi, e, t, sched))
            .collect::<Result<_>>()?;
        let xhat = Video::new(xhat)?;
        if let FlowSource::Estimated { block, radius, refresh } = req.flow_source {
            let done = big_t - t;
            if refresh > 0 && done >= refresh && done.is_multiple_of(refresh) {
                ctx.set_flows(estimate_video_flows(&xhat, block, radius)?)?;
            }
        }
        let out = total_gradient(&xhat, t, &req.cfg, &ctx).map_err(numeric(t))?;
        let mut grad = out.gradient;
        if req.cfg.chain_rule {
            grad = x
                .par_iter()
                .zip(&grad)
                .map(|(xi, g)| predict_x0_vjp(xi, t, models.denoiser, sched, g))
                .collect::<Result<_>>()?;
        }
        let grad_norm = gradient_norm(&grad);
        let var = sched.posterior_variance(t);
        x = x
            .par_iter()
            .enumerate()
            .map(|(i, xi)| {
                let mean = reverse_mean(xi, &eps[i], t, sched)?;
                let shifted = mean.zip_map(&grad[i], |m, g| m - var * g)?;
                if t == 1 {
                    return Ok(shifted);
                }
                let z = step_noise::<S>(xi.shape(), req.seed, t, i);
                let sd = var.sqrt();
                shifted.zip_map(&z, |m, zv| m + sd * zv)
            })
            .collect::<Result<_>>()?;
        if let Some(bad) = x.iter().position(|f| !f.is_finite()) {
            return Err(Error::NumericFailure {
                step: t,
                what: format!("frame {bad} became non-finite"),
            });
        }
        log.push(StepLog {
            t,
            ramp_weight: out.ramp_weight,
            losses: out.terms.as_array().map(to_f64),
            grad_norm,
        });
    }

    let raw = Video::new(x)?;
    let video = match req.mode {
        EditMode::Local => background_substitute(&raw, source, &masks)?,
        EditMode::Global => global_composite(&raw, source, req.feather)?,
    };
    let flows = match &req.flow_source {
        FlowSource::Provided(f) => f.clone(),
        FlowSource::Estimated { block, radius, .. } => estimate_video_flows(&video, *block, *radius)?,
    };
    let metrics = EditMetrics {
        t_diff: if n >= 2 { Some(t_diff(&video, &flows)?) } else { None },
        av_similarity: av_similarity(&video, &masks, &audio_embeds, models.visual)?,
    };
    Ok(EditResult { video, raw, log, metrics, flows })
}

/// The step log as CSV with [`STEP_LOG_HEADER`].
pub fn step_log_csv(log: &[StepLog]) -> String {
    let mut out = String::from(STEP_LOG_HEADER);
    out.push('\n');
    for s in log {
        let [a, b, c, d] = s.losses;
        let _ = writeln!(out, "{},{},{},{},{},{},{}", s.t, s.ramp_weight, a, b, c, d, s.grad_norm);
    }
    out
}
