//! Synthetic audio-visual clips.
//!
//! Every clip is a smooth background pattern translating by an integer step
//! per frame, with a square region that moves with the content. The region's
//! look and the clip's audio both come from one of four styles and share one
//! intensity, so louder audio goes with stronger region colour:
//!
//! | style   | region                      | audio                          |
//! |---------|-----------------------------|--------------------------------|
//! | flicker | red, brightness pulsing     | 440 Hz tone, 8 Hz tremolo      |
//! | waves   | blue, drifting stripes      | rising chirp                   |
//! | burst   | green speckle               | gated noise bursts             |
//! | still   | neutral (zero)              | silence                        |

use std::f64::consts::PI;

use crate::audio::{chunk_for_frames, mel_spectrogram, Waveform};
use crate::embed::{apply_mask, ContrastiveBatch, ContrastivePair};
use crate::error::{Error, Result};
use crate::flow::{synth_flow, FlowPair, FlowPattern};
use crate::numerics::{lit, stream_key, Grid, MaskSequence, Rng, Scalar, Video};
use crate::sampler::MelParams;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Style {
    Flicker,
    Waves,
    Burst,
    Still,
}

impl Style {
    pub const ALL: [Style; 4] = [Style::Flicker, Style::Waves, Style::Burst, Style::Still];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::Domain(format!("no style {i}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            Style::Flicker => "flicker",
            Style::Waves => "waves",
            Style::Burst => "burst",
            Style::Still => "still",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Domain(format!("unknown style {s:?}")))
    }

    fn colour(self) -> [f64; 3] {
        match self {
            Style::Flicker => [0.9, -0.3, -0.3],
            Style::Waves => [-0.3, -0.3, 0.9],
            Style::Burst => [-0.3, 0.9, -0.3],
            Style::Still => [0.0; 3],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub frames: usize,
    /// Side of the square region.
    pub region: usize,
    pub sample_rate: u32,
    pub duration_s: f64,
    /// Audio peak amplitude per unit of intensity.
    pub amplitude: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            height: 16,
            width: 16,
            channels: 3,
            frames: 10,
            region: 6,
            sample_rate: 16_000,
            duration_s: 1.0,
            amplitude: 0.7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::Domain(format!("{} channels; expected 1 or 3", self.channels)));
        }
        if self.frames == 0 || self.region == 0 || self.region >= self.height.min(self.width) {
            return Err(Error::Domain(format!(
                "region {} must be positive and smaller than {}x{}",
                self.region, self.height, self.width
            )));
        }
        let travel = self.frames - 1;
        if self.region + travel > self.height.min(self.width) {
            return Err(Error::Domain(format!(
                "a {}-pixel region cannot travel {travel} pixels inside {}x{}",
                self.region, self.height, self.width
            )));
        }
        if !(self.duration_s > 0.0 && self.amplitude >= 0.0 && self.amplitude <= 1.0) {
            return Err(Error::Domain("duration must be positive and amplitude in [0, 1]".into()));
        }
        Ok(())
    }

    fn samples(&self) -> usize {
        (self.duration_s * self.sample_rate as f64).round() as usize
    }
}

#[derive(Clone, Debug)]
pub struct Clip<S> {
    pub style: Style,
    pub intensity: f64,
    pub frames: Video<S>,
    pub masks: MaskSequence<S>,
    pub waveform: Waveform,
    pub flows: Vec<FlowPair<S>>,
    /// Per-frame content displacement `(dx, dy)`.
    pub shift: (i64, i64),
}

fn hash01(parts: &[u64]) -> f64 {
    (stream_key(parts) >> 11) as f64 / (1u64 << 53) as f64
}

/// Region pattern before intensity scaling, in `[-1, 1]` per channel.
fn region_value(style: Style, c: usize, u: usize, v: usize, frame: usize, salt: u64) -> f64 {
    let base = style.colour()[c.min(2)];
    let f = frame as f64;
    let k = match style {
        Style::Flicker => 0.75 + 0.25 * (2.0 * PI * 0.3 * f).sin(),
        Style::Waves => 0.6 + 0.4 * (1.6 * u as f64 + 0.8 * f).sin(),
        Style::Burst => 0.4 + 0.6 * hash01(&[salt, frame as u64, u as u64, v as u64]),
        Style::Still => 0.0,
    };
    base * k
}

/// The style's audio at peak amplitude `amp`.
pub fn style_audio(style: Style, amp: f64, cfg: &SynthConfig, rng: &mut Rng) -> Result<Waveform> {
    let n = cfg.samples();
    let rate = cfg.sample_rate as f64;
    let phase = rng.uniform_in(0.0, 2.0 * PI);
    let samples: Vec<f64> = match style {
        Style::Flicker => (0..n)
            .map(|k| {
                let t = k as f64 / rate;
                amp * (0.5 + 0.5 * (2.0 * PI * 8.0 * t).sin()) * (2.0 * PI * 440.0 * t + phase).sin()
            })
            .collect(),
        Style::Waves => {
            let (f0, f1) = (300.0, 3000.0);
            let dur = n as f64 / rate;
            (0..n)
                .map(|k| {
                    let t = k as f64 / rate;
                    amp * (2.0 * PI * (f0 * t + (f1 - f0) * t * t / (2.0 * dur)) + phase).sin()
                })
                .collect()
        }
        Style::Burst => {
            let period = (0.2 * rate) as usize;
            let on = (0.05 * rate) as usize;
            let offset = rng.below(period);
            let mut lp = 0.0;
            (0..n)
                .map(|k| {
                    lp = 0.6 * lp + 0.4 * rng.uniform_in(-1.0, 1.0);
                    if (k + offset) % period < on {
                        (amp * 1.6 * lp).clamp(-amp, amp)
                    } else {
                        0.0
                    }
                })
                .collect()
        }
        Style::Still => vec![0.0; n],
    };
    Waveform::new(samples, cfg.sample_rate)
}

/// One clip of `style` at `intensity` in `[0, 1]`, fully determined by
/// `seed`.
pub fn synth_clip<S: Scalar>(style: Style, intensity: f64, seed: u64, cfg: &SynthConfig) -> Result<Clip<S>> {
    cfg.validate()?;
    if !(0.0..=1.0).contains(&intensity) {
        return Err(Error::Domain(format!("intensity {intensity} outside [0, 1]")));
    }
    let mut rng = Rng::with_stream(seed, stream_key(&[0xc1, style.index() as u64]));
    let (h, w, c, n, r) = (cfg.height, cfg.width, cfg.channels, cfg.frames, cfg.region);
    let dx = rng.below(3) as i64 - 1;
    let dy = rng.below(3) as i64 - 1;
    let travel = (n - 1) as i64;
    let start = |d: i64, extent: usize, rng: &mut Rng| -> i64 {
        let lo = if d < 0 { travel } else { 0 };
        let hi = extent as i64 - r as i64 - if d > 0 { travel } else { 0 };
        lo + rng.below((hi - lo + 1) as usize) as i64
    };
    let (x0, y0) = (start(dx, w, &mut rng), start(dy, h, &mut rng));
    let freq: Vec<(f64, f64, f64)> = (0..c)
        .map(|_| (rng.uniform_in(0.4, 0.9), rng.uniform_in(0.3, 0.8), rng.uniform_in(0.0, 2.0 * PI)))
        .collect();
    let salt = rng.next_u64();

    let mut frames = Vec::with_capacity(n);
    let mut masks = Vec::with_capacity(n);
    for i in 0..n {
        let (ox, oy) = (x0 + dx * i as i64, y0 + dy * i as i64);
        let inside = |x: usize, y: usize| {
            let (x, y) = (x as i64, y as i64);
            x >= ox && x < ox + r as i64 && y >= oy && y < oy + r as i64
        };
        let frame = Grid::from_fn(&[c, h, w], |k| {
            let (ch, y, x) = (k / (h * w), (k / w) % h, k % w);
            if inside(x, y) {
                let (u, v) = ((x as i64 - ox) as usize, (y as i64 - oy) as usize);
                lit(intensity * region_value(style, ch, u, v, i, salt))
            } else {
                // Background in content coordinates, so it moves with the clip.
                let cx = x as f64 - (dx * i as i64) as f64;
                let cy = y as f64 - (dy * i as i64) as f64;
                let (fx, fy, ph) = freq[ch];
                lit(0.5 * (fx * cx + ph).sin() * (fy * cy - ph).cos())
            }
        });
        frames.push(frame);
        masks.push(Grid::from_fn(&[1, h, w], |k| if inside(k % w, k / w) { S::one() } else { S::zero() }));
    }
    let flows = (0..n.saturating_sub(1))
        .map(|i| synth_flow(FlowPattern::Translation { dx: dx as f64, dy: dy as f64 }, h, w, i))
        .collect::<Result<_>>()?;
    let waveform = style_audio(style, cfg.amplitude * intensity, cfg, &mut rng)?;
    Ok(Clip {
        style,
        intensity,
        frames: Video::new(frames)?,
        masks: Video::new(masks)?,
        waveform,
        flows,
        shift: (dx, dy),
    })
}

/// Intensity range of generated clips.
pub const INTENSITY_RANGE: (f64, f64) = (0.2, 1.0);

/// `per_class` clips of each style with intensities drawn from
/// [`INTENSITY_RANGE`], ordered clip-major (style cycles fastest).
pub fn synth_corpus<S: Scalar>(styles: &[Style], per_class: usize, seed: u64, cfg: &SynthConfig) -> Result<Vec<Clip<S>>> {
    let mut out = Vec::with_capacity(per_class * styles.len());
    for k in 0..per_class {
        for &style in styles {
            let id = (k * Style::ALL.len() + style.index()) as u64;
            let mut rng = Rng::with_stream(seed, stream_key(&[0xc0, id]));
            let a = rng.uniform_in(INTENSITY_RANGE.0, INTENSITY_RANGE.1);
            out.push(synth_clip(style, a, stream_key(&[seed, id]), cfg)?);
        }
    }
    Ok(out)
}

/// Per-frame `(masked frame, mel chunk)` pairs of one clip.
pub fn clip_pairs<S: Scalar>(clip: &Clip<S>, mel: &MelParams) -> Result<Vec<ContrastivePair<S>>> {
    let spec = mel_spectrogram::<S>(&clip.waveform, mel.bins, mel.win, mel.hop)?;
    let chunks = chunk_for_frames(&spec, clip.frames.len(), mel.chunk, mel.overlap_ratio)?;
    chunks
        .into_iter()
        .enumerate()
        .map(|(i, ch)| {
            Ok(ContrastivePair {
                frame: apply_mask(clip.frames.frame(i), clip.masks.frame(i))?,
                chunk: ch.values,
                label: clip.style.index(),
            })
        })
        .collect()
}

/// Shuffled contrastive batches; each batch takes at most one pair per clip
/// so that positives are never duplicated inside a batch.
pub fn contrastive_batches<S: Scalar>(clips: &[Clip<S>], batch: usize, mel: &MelParams, seed: u64) -> Result<Vec<ContrastiveBatch<S>>> {
    if batch < 2 {
        return Err(Error::Domain("contrastive batches need at least two pairs".into()));
    }
    let per_clip: Vec<Vec<ContrastivePair<S>>> = clips.iter().map(|c| clip_pairs(c, mel)).collect::<Result<_>>()?;
    let mut rng = Rng::with_stream(seed, 0xba7c);
    let frames = per_clip.iter().map(Vec::len).max().unwrap_or(0);
    let mut out = Vec::new();
    for f in 0..frames {
        let mut order: Vec<usize> = (0..clips.len()).filter(|&c| f < per_clip[c].len()).collect();
        rng.shuffle(&mut order);
        for group in order.chunks(batch) {
            if group.len() < 2 {
                continue;
            }
            let b = ContrastiveBatch {
                pairs: group.iter().map(|&c| per_clip[c][f].clone()).collect(),
                classes: Style::ALL.len(),
            };
            if b.pairs.iter().any(|p| p.label != b.pairs[0].label) {
                out.push(b);
            }
        }
    }
    rng.shuffle(&mut out);
    Ok(out)
}

/// Every frame of every clip, for denoiser training.
pub fn denoiser_frames<S: Scalar>(clips: &[Clip<S>]) -> Vec<Grid<S>> {
    clips.iter().flat_map(|c| c.frames.frames().iter().cloned()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::t_diff;

    #[test]
    fn clip_shapes_ranges_and_flows() {
        let cfg = SynthConfig::default();
        for style in Style::ALL {
            let clip = synth_clip::<f64>(style, 0.8, 11, &cfg).unwrap();
            assert_eq!(clip.frames.len(), 10);
            assert_eq!(clip.frames.frame_shape(), &[3, 16, 16]);
            assert!(clip.masks.is_binary());
            for m in clip.masks.frames() {
                assert_eq!(m.sum(), 36.0);
            }
            assert!(clip.frames.frames().iter().all(|f| f.max_abs() <= 1.0));
            assert_eq!(clip.flows.len(), 9);
            assert_eq!(clip.waveform.len(), 16_000);
            // Background and region move together, so only the region's own
            // dynamics can break the warp.
            let bg_only = Video::new(
                (0..10)
                    .map(|i| {
                        let m = clip.masks.frame(i);
                        Grid::from_fn(&[3, 16, 16], |k| if m.data()[k % 256] == 1.0 { 0.0 } else { clip.frames.frame(i).data()[k] })
                    })
                    .collect(),
            )
            .unwrap();
            assert!(t_diff(&bg_only, &clip.flows).unwrap() < 1e-9);
        }
    }

    #[test]
    fn still_region_is_neutral_and_silent() {
        let clip = synth_clip::<f64>(Style::Still, 0.9, 2, &SynthConfig::default()).unwrap();
        for i in 0..10 {
            let masked = apply_mask(clip.frames.frame(i), clip.masks.frame(i)).unwrap();
            assert_eq!(masked.max_abs(), 0.0);
        }
        assert_eq!(clip.waveform.peak(), 0.0);
    }

    #[test]
    fn intensity_couples_colour_and_loudness() {
        let cfg = SynthConfig::default();
        let lo = synth_clip::<f64>(Style::Flicker, 0.3, 4, &cfg).unwrap();
        let hi = synth_clip::<f64>(Style::Flicker, 0.9, 4, &cfg).unwrap();
        assert!(hi.waveform.peak() > 2.5 * lo.waveform.peak());
        let region = |c: &Clip<f64>| apply_mask(c.frames.frame(0), c.masks.frame(0)).unwrap().max_abs();
        assert!((region(&hi) / region(&lo) - 3.0).abs() < 1e-9);
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let cfg = SynthConfig::default();
        let a = synth_clip::<f64>(Style::Burst, 0.5, 9, &cfg).unwrap();
        let b = synth_clip::<f64>(Style::Burst, 0.5, 9, &cfg).unwrap();
        assert!(a.frames.bitwise_eq(&b.frames));
        assert_eq!(a.waveform, b.waveform);
        let c = synth_clip::<f64>(Style::Burst, 0.5, 10, &cfg).unwrap();
        assert!(!a.frames.bitwise_eq(&c.frames));
    }

    #[test]
    fn batches_mix_classes_without_repeating_clips() {
        let cfg = SynthConfig::default();
        let clips = synth_corpus::<f64>(&Style::ALL, 3, 1, &cfg).unwrap();
        assert_eq!(clips.len(), 12);
        let batches = contrastive_batches(&clips, 6, &MelParams::default(), 0).unwrap();
        assert!(!batches.is_empty());
        for b in &batches {
            assert!(b.pairs.iter().any(|p| p.label != b.pairs[0].label));
            assert_eq!(b.pairs[0].chunk.shape(), &[1, 32, 50]);
        }
        assert_eq!(denoiser_frames(&clips).len(), 120);
    }

    #[test]
    fn config_validation() {
        let bad = SynthConfig { region: 8, ..SynthConfig::default() };
        assert!(bad.validate().is_err());
        assert!(synth_clip::<f64>(Style::Still, 1.5, 0, &SynthConfig::default()).is_err());
        assert_eq!(Style::parse("waves").unwrap(), Style::Waves);
        assert!(Style::parse("jazz").is_err());
    }
}
