//! Model bundles, training drivers and the edit experiments (flow ablation,
//! volume series, audio transition) shared by the commands and the
//! acceptance suite.

use std::path::Path;

use svedit_core::audio::{concat_transition, scale_volume, Waveform};
use svedit_core::corpus::{clip_pairs, contrastive_batches, denoiser_frames, style_audio, synth_clip, synth_corpus, Clip, Style};
use svedit_core::denoiser::{self, DenoiserLog};
use svedit_core::embed::{self, mean_embedding, train_contrastive, TrainLog};
use svedit_core::numerics::{stream_key, Rng};
use svedit_core::sampler::{audio_embeddings, guided_sample, EditRequest, FlowSource, Models};
use svedit_core::schedule::make_linear_schedule;
use svedit_core::{DenoiserModel, EditResult, Embedding, EncoderModel, Error, NoiseSchedule, Video};

use crate::config::Config;
use crate::error::{CliError, CliResult};

/// Intensity of the still clip every experiment edits.
pub const SOURCE_INTENSITY: f64 = 0.5;
/// Seed offset separating experiment sources from training clips.
pub const SOURCE_SEED_BASE: u64 = 1000;
pub const VOLUME_GAINS: [f64; 3] = [0.5, 1.0, 2.0];
pub const CROSSFADE_MS: f64 = 100.0;
/// Frames at each end of a transition edit that must follow their half.
pub const TRANSITION_FRAMES: usize = 3;
pub const RETRIEVAL_CLIPS_PER_CLASS: usize = 10;
pub const RETRIEVAL_PAIRS_PER_CLIP: usize = 5;

/// Trained models plus the schedule they were trained under.
pub struct Bundle {
    pub denoiser: DenoiserModel,
    pub schedule: NoiseSchedule,
    pub visual: EncoderModel,
    pub audio: EncoderModel,
}

fn load_checkpoint<T>(path: &Path, load: impl Fn(&Path) -> svedit_core::Result<T>) -> CliResult<T> {
    if !path.is_file() {
        return Err(CliError::Missing(path.to_path_buf()));
    }
    Ok(load(path)?)
}

pub fn schedule(cfg: &Config) -> CliResult<NoiseSchedule> {
    Ok(make_linear_schedule(cfg.sched_steps, cfg.sched_beta_start, cfg.sched_beta_end)?)
}

impl Bundle {
    pub fn load(cfg: &Config) -> CliResult<Self> {
        let denoiser = load_checkpoint(&cfg.io_denoiser, |p| DenoiserModel::load(p))?;
        let visual = load_checkpoint(&cfg.io_visual, |p| EncoderModel::load(p))?;
        let audio = load_checkpoint(&cfg.io_audio, |p| EncoderModel::load(p))?;
        if denoiser.steps != cfg.sched_steps {
            return Err(CliError::Data(format!(
                "denoiser was trained for {} steps, config has sched.steps={}",
                denoiser.steps, cfg.sched_steps
            )));
        }
        Ok(Self {
            denoiser,
            schedule: schedule(cfg)?,
            visual,
            audio,
        })
    }

    pub fn save(&self, cfg: &Config) -> CliResult<()> {
        for p in [&cfg.io_denoiser, &cfg.io_visual, &cfg.io_audio] {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        self.denoiser.save(&cfg.io_denoiser)?;
        self.visual.save(&cfg.io_visual)?;
        self.audio.save(&cfg.io_audio)?;
        Ok(())
    }

    pub fn models(&self) -> Models<'_, f64> {
        Models {
            denoiser: &self.denoiser,
            schedule: &self.schedule,
            visual: &self.visual,
            audio: &self.audio,
        }
    }
}

pub fn training_corpus(cfg: &Config) -> CliResult<Vec<Clip<f64>>> {
    Ok(synth_corpus(cfg.styles(), cfg.synth_clips_per_class, cfg.run_seed, &cfg.synth_config())?)
}

pub fn train_encoders(cfg: &Config, clips: &[Clip<f64>]) -> CliResult<(EncoderModel, EncoderModel, TrainLog)> {
    let batches = contrastive_batches(clips, cfg.train_encoder_batch, &cfg.mel(), cfg.run_seed)?;
    if batches.is_empty() {
        return Err(CliError::Data("corpus too small for a single mixed-class batch".into()));
    }
    Ok(train_contrastive(&batches, &cfg.encoder_training())?)
}

pub fn train_denoiser(cfg: &Config, clips: &[Clip<f64>]) -> CliResult<(DenoiserModel, DenoiserLog)> {
    let sched = schedule(cfg)?;
    Ok(denoiser::train_denoiser(&denoiser_frames(clips), &sched, &cfg.denoiser_training())?)
}

/// Both training runs on one corpus.
pub fn train_bundle(cfg: &Config) -> CliResult<Bundle> {
    let clips = training_corpus(cfg)?;
    let (visual, audio, _) = train_encoders(cfg, &clips)?;
    let (denoiser, _) = train_denoiser(cfg, &clips)?;
    Ok(Bundle {
        denoiser,
        schedule: schedule(cfg)?,
        visual,
        audio,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Retrieval {
    pub hits: usize,
    pub total: usize,
}

impl Retrieval {
    pub fn accuracy(&self) -> f64 {
        self.hits as f64 / self.total as f64
    }
}

/// Top-1 audio to visual retrieval over pairs from freshly generated clips.
///
/// Each class gets the mean of its visual embeddings as a centroid; an audio
/// query counts as a hit when its nearest centroid is its own class.
pub fn retrieval(cfg: &Config, visual: &EncoderModel, audio: &EncoderModel) -> CliResult<Retrieval> {
    let seed = stream_key(&[0x4e1d, cfg.run_seed]);
    let clips = synth_corpus::<f64>(cfg.styles(), RETRIEVAL_CLIPS_PER_CLASS, seed, &cfg.synth_config())?;
    let mel = cfg.mel();
    let mut pairs = Vec::new();
    for c in &clips {
        pairs.extend(clip_pairs(c, &mel)?.into_iter().take(RETRIEVAL_PAIRS_PER_CLIP));
    }
    let ve = pairs.iter().map(|p| visual.embed(&p.frame)).collect::<svedit_core::Result<Vec<_>>>()?;
    let ae = pairs.iter().map(|p| audio.embed(&p.chunk)).collect::<svedit_core::Result<Vec<_>>>()?;
    let mut centroids = Vec::new();
    for label in 0..Style::ALL.len() {
        let members: Vec<_> = ve.iter().zip(&pairs).filter(|(_, p)| p.label == label).map(|(v, _)| v.clone()).collect();
        if !members.is_empty() {
            centroids.push((label, mean_embedding(&members)?));
        }
    }
    let mut hits = 0;
    for (a, pair) in ae.iter().zip(&pairs) {
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for (label, c) in &centroids {
            let s = a.dot(c)?;
            if s > best.0 {
                best = (s, *label);
            }
        }
        if best.1 == pair.label {
            hits += 1;
        }
    }
    Ok(Retrieval {
        hits,
        total: pairs.len(),
    })
}

/// The still clip edited by experiment seed `seed`.
pub fn still_source(cfg: &Config, seed: u64) -> CliResult<Clip<f64>> {
    Ok(synth_clip(Style::Still, SOURCE_INTENSITY, SOURCE_SEED_BASE + seed, &cfg.synth_config())?)
}

/// Target audio of `style` at peak `amplitude`, drawn from seed `seed`.
pub fn target_audio(cfg: &Config, style: Style, amplitude: f64, seed: u64) -> CliResult<Waveform> {
    Ok(style_audio(style, amplitude, &cfg.synth_config(), &mut Rng::new(seed))?)
}

/// An edit request for frames and masks under the configured guidance,
/// without a flow source decision.
pub fn configured_request(cfg: &Config, source: Video, masks: Video, waveform: Waveform) -> EditRequest<f64> {
    let mut req = EditRequest::local(source, masks, waveform, cfg.run_seed);
    req.cfg = cfg.guidance();
    req.mel = cfg.mel();
    req.mode = cfg.run_mode;
    req.feather = cfg.run_feather;
    req.flow_source = cfg.estimated_flows();
    req
}

/// An edit of a synthetic clip toward `waveform`, guided by the clip's
/// ground-truth flows.
pub fn edit_request(cfg: &Config, source: &Clip<f64>, waveform: Waveform, seed: u64) -> EditRequest<f64> {
    let mut req = configured_request(cfg, source.frames.clone(), source.masks.clone(), waveform);
    req.seed = seed;
    req.flow_source = FlowSource::Provided(source.flows.clone());
    req
}

/// Mean absolute difference between two videos over mask-interior entries.
pub fn masked_l1(a: &Video, b: &Video, masks: &Video) -> CliResult<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for ((fa, fb), m) in a.frames().iter().zip(b.frames()).zip(masks.frames()) {
        let plane = m.len();
        let channels = fa.len() / plane;
        if fb.len() != fa.len() || channels * plane != fa.len() {
            return Err(CliError::Data("frame and mask sizes disagree".into()));
        }
        for c in 0..channels {
            for (k, &mk) in m.data().iter().enumerate() {
                if mk == 1.0 {
                    sum += (fa.data()[c * plane + k] - fb.data()[c * plane + k]).abs();
                    count += 1;
                }
            }
        }
    }
    if count == 0 {
        return Err(CliError::Data("masks select no pixels".into()));
    }
    Ok(sum / count as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Full,
    NoFlow,
    RampOff,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Full, Variant::NoFlow, Variant::RampOff];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoFlow => "no_flow",
            Variant::RampOff => "ramp_off",
        }
    }

    pub fn apply(self, req: &mut EditRequest<f64>) {
        match self {
            Variant::Full => {}
            Variant::NoFlow => req.cfg.lambda_flow = 0.0,
            Variant::RampOff => req.cfg.flow_ramp = false,
        }
    }
}

/// Outcome of one ablation run; `None` when sampling failed numerically.
#[derive(Clone, Debug)]
pub struct AblationRun {
    pub variant: Variant,
    pub seed: u64,
    pub result: Option<EditResult>,
}

pub fn ablation_run(cfg: &Config, bundle: &Bundle, variant: Variant, seed: u64) -> CliResult<AblationRun> {
    let source = still_source(cfg, seed)?;
    let audio = target_audio(cfg, cfg.run_target, cfg.run_amplitude, seed)?;
    let mut req = edit_request(cfg, &source, audio, seed);
    variant.apply(&mut req);
    let result = match guided_sample(&req, &bundle.models()) {
        Ok(r) => Some(r),
        Err(Error::NumericFailure { .. }) => None,
        Err(e) => return Err(e.into()),
    };
    Ok(AblationRun { variant, seed, result })
}

/// Masked L1 deviation from the source for each gain in [`VOLUME_GAINS`].
pub fn volume_series(cfg: &Config, bundle: &Bundle, seed: u64) -> CliResult<Vec<(f64, EditResult)>> {
    let source = still_source(cfg, seed)?;
    let audio = target_audio(cfg, cfg.run_target, cfg.run_amplitude, seed)?;
    VOLUME_GAINS
        .iter()
        .map(|&g| {
            let req = edit_request(cfg, &source, scale_volume(&audio, g)?, seed);
            let r = guided_sample(&req, &bundle.models())?;
            Ok((masked_l1(&r.video, &source.frames, &source.masks)?, r))
        })
        .collect()
}

pub fn nondecreasing(xs: &[f64]) -> bool {
    xs.windows(2).all(|w| w[0] <= w[1])
}

/// Per-frame similarity of an edit to the two halves of a transition.
#[derive(Clone, Debug)]
pub struct Transition {
    pub to_first: Vec<f64>,
    pub to_second: Vec<f64>,
    pub result: EditResult,
}

impl Transition {
    /// Head frames closer to the first audio, tail frames closer to the second.
    pub fn follows(&self, k: usize) -> bool {
        let n = self.to_first.len();
        (0..k.min(n)).all(|i| self.to_first[i] > self.to_second[i])
            && (n.saturating_sub(k)..n).all(|i| self.to_first[i] < self.to_second[i])
    }
}

/// Class embedding of a waveform: normalized mean of its per-frame chunks.
pub fn audio_class_embedding(cfg: &Config, bundle: &Bundle, w: &Waveform) -> CliResult<Embedding> {
    let chunks = audio_embeddings(w, cfg.synth_frames, &cfg.mel(), &bundle.audio)?;
    Ok(mean_embedding(&chunks)?)
}

/// Edits the still source toward `run.target` audio followed by
/// `run.transition` audio, then scores every masked output frame against
/// each half's class embedding.
pub fn transition(cfg: &Config, bundle: &Bundle, seed: u64) -> CliResult<Transition> {
    let source = still_source(cfg, seed)?;
    let a = target_audio(cfg, cfg.run_target, cfg.run_amplitude, seed)?;
    let b = target_audio(cfg, cfg.run_transition, cfg.run_amplitude, stream_key(&[0x7a, seed]))?;
    let joined = concat_transition(&a, &b, CROSSFADE_MS)?;
    let result = guided_sample(&edit_request(cfg, &source, joined, seed), &bundle.models())?;
    let ea = audio_class_embedding(cfg, bundle, &a)?;
    let eb = audio_class_embedding(cfg, bundle, &b)?;
    let mut to_first = Vec::new();
    let mut to_second = Vec::new();
    for (f, m) in result.video.frames().iter().zip(source.masks.frames()) {
        let e = embed::encode_image(&bundle.visual, &embed::apply_mask(f, m)?)?;
        to_first.push(e.dot(&ea)?);
        to_second.push(e.dot(&eb)?);
    }
    Ok(Transition {
        to_first,
        to_second,
        result,
    })
}
