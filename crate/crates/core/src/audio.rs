//! Waveform ingestion, log-mel spectrograms, per-frame chunking, volume
//! scaling and crossfaded concatenation.

use std::path::Path;

use rustfft::{num_complex::Complex, FftPlanner};

use crate::error::{Error, Result};
use crate::numerics::{lit, Grid, Scalar};

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;
pub const DEFAULT_MEL_BINS: usize = 32;
pub const DEFAULT_WIN: usize = 400;
pub const DEFAULT_HOP: usize = 160;
/// About half a second of spectrogram at the default hop.
pub const DEFAULT_CHUNK: usize = 50;

/// Mono samples in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    /// Clips samples into `[-1, 1]`; rejects non-finite samples.
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Format("sample rate must be positive".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::Format("non-finite audio sample".into()));
        }
        Ok(Self {
            samples: samples.into_iter().map(|s| s.clamp(-1.0, 1.0)).collect(),
            sample_rate,
        })
    }

    pub fn silence(len: usize, sample_rate: u32) -> Self {
        Self {
            samples: vec![0.0; len],
            sample_rate,
        }
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, s| m.max(s.abs()))
    }
}

/// Loads `.wav` (PCM-16 mono) or raw little-endian `f32` (any other
/// extension, assumed at [`DEFAULT_SAMPLE_RATE`]).
pub fn load_waveform(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let is_wav = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("wav"));
    if is_wav {
        decode_wav(&bytes)
    } else {
        decode_raw_f32(&bytes, DEFAULT_SAMPLE_RATE)
    }
}

pub fn decode_raw_f32(bytes: &[u8], sample_rate: u32) -> Result<Waveform> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(4) {
        return Err(Error::Format(format!(
            "raw f32 payload of {} bytes",
            bytes.len()
        )));
    }
    let samples = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Waveform::new(samples, sample_rate)
}

pub fn encode_raw_f32(w: &Waveform) -> Vec<u8> {
    w.samples
        .iter()
        .flat_map(|&s| (s as f32).to_le_bytes())
        .collect()
}

fn read_u16(b: &[u8], at: usize) -> Option<u16> {
    Some(u16::from_le_bytes(b.get(at..at + 2)?.try_into().ok()?))
}

fn read_u32(b: &[u8], at: usize) -> Option<u32> {
    Some(u32::from_le_bytes(b.get(at..at + 4)?.try_into().ok()?))
}

pub fn decode_wav(bytes: &[u8]) -> Result<Waveform> {
    let bad = |what: &str| Error::Format(format!("wav: {what}"));
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(bad("missing RIFF/WAVE header"));
    }
    let mut at = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    while at + 8 <= bytes.len() {
        let id = &bytes[at..at + 4];
        let size = read_u32(bytes, at + 4).ok_or_else(|| bad("truncated chunk"))? as usize;
        let body = at + 8;
        if id == b"fmt " {
            let f = (
                read_u16(bytes, body).ok_or_else(|| bad("truncated fmt"))?,
                read_u16(bytes, body + 2).ok_or_else(|| bad("truncated fmt"))?,
                read_u32(bytes, body + 4).ok_or_else(|| bad("truncated fmt"))?,
                read_u16(bytes, body + 14).ok_or_else(|| bad("truncated fmt"))?,
            );
            fmt = Some(f);
        } else if id == b"data" {
            let (format, channels, rate, bits) = fmt.ok_or_else(|| bad("data before fmt"))?;
            if format != 1 || bits != 16 {
                return Err(bad("only PCM-16 is supported"));
            }
            if channels != 1 {
                return Err(bad(&format!("{channels} channels, expected mono")));
            }
            let end = body
                .checked_add(size)
                .filter(|&e| e <= bytes.len())
                .ok_or_else(|| bad("truncated data"))?;
            if size == 0 {
                return Err(bad("empty payload"));
            }
            let samples = bytes[body..end]
                .chunks_exact(2)
                .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0)
                .collect();
            return Waveform::new(samples, rate);
        }
        at = body + size + (size & 1);
    }
    Err(bad("no data chunk"))
}

pub fn encode_wav(w: &Waveform) -> Vec<u8> {
    let data_len = (w.samples.len() * 2) as u32;
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&w.sample_rate.to_le_bytes());
    out.extend_from_slice(&(w.sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in &w.samples {
        let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    out
}

/// Writes `.wav` as PCM-16, anything else as raw `f32`.
pub fn save_waveform(w: &Waveform, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let is_wav = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("wav"));
    let bytes = if is_wav { encode_wav(w) } else { encode_raw_f32(w) };
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// `M x L` log-mel magnitudes, `log1p` compressed (silence maps to 0).
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram<S> {
    pub values: Grid<S>,
}

impl<S: Scalar> MelSpectrogram<S> {
    pub fn bins(&self) -> usize {
        self.values.dim(0)
    }

    pub fn frames(&self) -> usize {
        self.values.dim(1)
    }
}

/// Slice of the spectrogram assigned to one video frame.
#[derive(Clone, Debug, PartialEq)]
pub struct MelChunk<S> {
    /// `[1, M, width]`, ready for the audio encoder.
    pub values: Grid<S>,
    /// 1-based frame number.
    pub frame_index: usize,
    /// First spectrogram column.
    pub start: usize,
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular HTK-spaced filters over the `n_fft / 2 + 1` power bins.
pub fn mel_filterbank(bins: usize, n_fft: usize, sample_rate: u32) -> Vec<Vec<f64>> {
    let n_freq = n_fft / 2 + 1;
    let nyquist = sample_rate as f64 / 2.0;
    let top = hz_to_mel(nyquist);
    let edges: Vec<f64> = (0..bins + 2)
        .map(|k| mel_to_hz(top * k as f64 / (bins + 1) as f64))
        .collect();
    (0..bins)
        .map(|m| {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..n_freq)
                .map(|k| {
                    let f = k as f64 * sample_rate as f64 / n_fft as f64;
                    if f > lo && f <= mid {
                        (f - lo) / (mid - lo)
                    } else if f > mid && f < hi {
                        (hi - f) / (hi - mid)
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect()
}

/// Periodic Hann window.
pub fn hann(win: usize) -> Vec<f64> {
    (0..win)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / win as f64).cos())
        .collect()
}

/// Number of STFT frames for `len` samples.
pub fn frame_count(len: usize, win: usize, hop: usize) -> usize {
    1 + (len - win) / hop
}

/// Hann-windowed STFT with `n_fft = win`, power `|X|^2 / win`, HTK mel
/// filterbank, then `log1p`.
pub fn mel_spectrogram<S: Scalar>(w: &Waveform, bins: usize, win: usize, hop: usize) -> Result<MelSpectrogram<S>> {
    if bins == 0 || hop == 0 || win < hop {
        return Err(Error::Domain(format!(
            "need bins >= 1 and win >= hop >= 1, got bins={bins} win={win} hop={hop}"
        )));
    }
    if w.len() < win {
        return Err(Error::Length(format!(
            "waveform of {} samples shorter than window {win}",
            w.len()
        )));
    }
    let frames = frame_count(w.len(), win, hop);
    let window = hann(win);
    let bank = mel_filterbank(bins, win, w.sample_rate);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(win);
    let mut buf = vec![Complex::new(0.0, 0.0); win];
    let mut out = vec![S::zero(); bins * frames];
    let n_freq = win / 2 + 1;
    let mut power = vec![0.0; n_freq];
    for l in 0..frames {
        let seg = &w.samples[l * hop..l * hop + win];
        for (b, (&s, &h)) in buf.iter_mut().zip(seg.iter().zip(&window)) {
            *b = Complex::new(s * h, 0.0);
        }
        fft.process(&mut buf);
        for (p, c) in power.iter_mut().zip(&buf) {
            *p = c.norm_sqr() / win as f64;
        }
        for (m, filt) in bank.iter().enumerate() {
            let e: f64 = filt.iter().zip(&power).map(|(a, b)| a * b).sum();
            out[m * frames + l] = lit(e.ln_1p());
        }
    }
    Ok(MelSpectrogram {
        values: Grid::new(vec![bins, frames], out)?,
    })
}

/// Cuts `n` chunks of `width` columns with starts evenly spaced over
/// `[0, L - width]` (rounded to the nearest column).
///
/// Even spacing fixes every offset, so `overlap_ratio` only has to be a valid
/// ratio; the overlap between neighbours follows from `L`, `width` and `n`.
pub fn chunk_for_frames<S: Scalar>(
    s: &MelSpectrogram<S>,
    n: usize,
    width: usize,
    overlap_ratio: f64,
) -> Result<Vec<MelChunk<S>>> {
    if n == 0 || width == 0 {
        return Err(Error::Domain("need at least one frame and a positive chunk width".into()));
    }
    if !(0.0..1.0).contains(&overlap_ratio) {
        return Err(Error::Domain(format!("overlap ratio {overlap_ratio} outside [0, 1)")));
    }
    let (bins, total) = (s.bins(), s.frames());
    if width > total {
        return Err(Error::Length(format!(
            "chunk width {width} exceeds spectrogram length {total}"
        )));
    }
    let span = (total - width) as f64;
    (0..n)
        .map(|i| {
            let start = if n == 1 {
                0
            } else {
                (span * i as f64 / (n - 1) as f64).round() as usize
            };
            let data = (0..bins)
                .flat_map(|m| {
                    let row = &s.values.data()[m * total + start..m * total + start + width];
                    row.iter().copied()
                })
                .collect();
            Ok(MelChunk {
                values: Grid::new(vec![1, bins, width], data)?,
                frame_index: i + 1,
                start,
            })
        })
        .collect()
}

/// Multiplies by `gain` and clips to `[-1, 1]`.
pub fn scale_volume(w: &Waveform, gain: f64) -> Result<Waveform> {
    if !(gain >= 0.0) || !gain.is_finite() {
        return Err(Error::Domain(format!("gain must be finite and >= 0, got {gain}")));
    }
    Waveform::new(w.samples.iter().map(|s| s * gain).collect(), w.sample_rate)
}

/// `a` then `b`, overlapping the last/first `crossfade_ms` with a linear fade.
pub fn concat_transition(a: &Waveform, b: &Waveform, crossfade_ms: f64) -> Result<Waveform> {
    if a.sample_rate != b.sample_rate {
        return Err(Error::Format(format!(
            "sample rates differ: {} vs {}",
            a.sample_rate, b.sample_rate
        )));
    }
    if !(crossfade_ms >= 0.0) {
        return Err(Error::Domain(format!("negative crossfade {crossfade_ms}")));
    }
    let n = (crossfade_ms * a.sample_rate as f64 / 1000.0).round() as usize;
    if n > a.len() || n > b.len() {
        return Err(Error::Length(format!(
            "crossfade of {n} samples longer than an input"
        )));
    }
    let head = a.len() - n;
    let mut out = Vec::with_capacity(a.len() + b.len() - n);
    out.extend_from_slice(&a.samples[..head]);
    for k in 0..n {
        let t = (k + 1) as f64 / (n + 1) as f64;
        out.push((1.0 - t) * a.samples[head + k] + t * b.samples[k]);
    }
    out.extend_from_slice(&b.samples[n..]);
    Waveform::new(out, a.sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn sine(freq: f64, amp: f64, secs: f64, rate: u32) -> Waveform {
        let n = (secs * rate as f64) as usize;
        let s = (0..n)
            .map(|k| amp * (2.0 * std::f64::consts::PI * freq * k as f64 / rate as f64).sin())
            .collect();
        Waveform::new(s, rate).unwrap()
    }

    fn noise(amp: f64, len: usize, seed: u64) -> Waveform {
        let mut rng = Rng::new(seed);
        Waveform::new((0..len).map(|_| rng.uniform_in(-amp, amp)).collect(), 16_000).unwrap()
    }

    #[test]
    fn wav_round_trip_of_sine() {
        let w = sine(440.0, 0.5, 1.0, 16_000);
        let back = decode_wav(&encode_wav(&w)).unwrap();
        assert_eq!(back.len(), 16_000);
        assert_eq!(back.sample_rate(), 16_000);
        assert!((back.peak() - 0.5).abs() < 1e-3);
    }

    #[test]
    fn wav_errors() {
        let w = sine(440.0, 0.5, 0.1, 16_000);
        let bytes = encode_wav(&w);
        assert!(matches!(decode_wav(&bytes[..20]), Err(Error::Format(_))));
        assert!(matches!(decode_wav(&bytes[..50]), Err(Error::Format(_))));
        let mut stereo = bytes.clone();
        stereo[22] = 2;
        assert!(matches!(decode_wav(&stereo), Err(Error::Format(_))));
        let empty = encode_wav(&Waveform::silence(0, 16_000));
        assert!(matches!(decode_wav(&empty), Err(Error::Format(_))));
    }

    #[test]
    fn raw_zero_file_and_files_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.f32");
        std::fs::write(&p, vec![0u8; 64]).unwrap();
        let w = load_waveform(&p).unwrap();
        assert_eq!(w.len(), 16);
        assert!(w.samples().iter().all(|&s| s == 0.0));
        std::fs::write(&p, []).unwrap();
        assert!(load_waveform(&p).is_err());
        let wav = dir.path().join("a.wav");
        save_waveform(&sine(300.0, 0.25, 0.05, 16_000), &wav).unwrap();
        assert_eq!(load_waveform(&wav).unwrap().len(), 800);
    }

    #[test]
    fn silence_gives_zero_mel() {
        let m: MelSpectrogram<f64> = mel_spectrogram(&Waveform::silence(4000, 16_000), 32, 400, 160).unwrap();
        assert!(m.values.data().iter().all(|&v| v == 0.0));
        assert_eq!(m.frames(), frame_count(4000, 400, 160));
    }

    #[test]
    fn noise_frame_count_and_finiteness() {
        let w = noise(0.4, 12_345, 3);
        let m: MelSpectrogram<f64> = mel_spectrogram(&w, 32, 400, 160).unwrap();
        assert_eq!(m.bins(), 32);
        assert_eq!(m.frames(), 1 + (12_345 - 400) / 160);
        assert!(m.values.is_finite());
    }

    #[test]
    fn tone_matches_direct_dft_and_has_stable_peak() {
        let w = sine(440.0, 0.5, 0.5, 16_000);
        let m: MelSpectrogram<f64> = mel_spectrogram(&w, 32, 400, 160).unwrap();
        let l = m.frames();
        let argmax = |col: usize| {
            (0..32)
                .max_by(|&a, &b| {
                    m.values.data()[a * l + col]
                        .partial_cmp(&m.values.data()[b * l + col])
                        .unwrap()
                })
                .unwrap()
        };
        let first = argmax(0);
        assert!((0..l).all(|c| argmax(c) == first));

        // Direct O(n^2) DFT of the third window.
        let win = hann(400);
        let seg = &w.samples()[320..720];
        let power: Vec<f64> = (0..201)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (n, (&s, &h)) in seg.iter().zip(&win).enumerate() {
                    let ph = -2.0 * std::f64::consts::PI * (k * n) as f64 / 400.0;
                    re += s * h * ph.cos();
                    im += s * h * ph.sin();
                }
                (re * re + im * im) / 400.0
            })
            .collect();
        let bank = mel_filterbank(32, 400, 16_000);
        for (mi, f) in bank.iter().enumerate() {
            let e: f64 = f.iter().zip(&power).map(|(a, b)| a * b).sum();
            assert!((e.ln_1p() - m.values.data()[mi * l + 2]).abs() < 1e-9);
        }
    }

    #[test]
    fn short_waveform_is_rejected() {
        assert!(matches!(
            mel_spectrogram::<f64>(&Waveform::silence(100, 16_000), 32, 400, 160),
            Err(Error::Length(_))
        ));
    }

    fn ramp_spec(l: usize) -> MelSpectrogram<f64> {
        MelSpectrogram {
            values: Grid::from_fn(&[2, l], |k| (k % l) as f64),
        }
    }

    #[test]
    fn chunk_offsets() {
        let s = ramp_spec(100);
        let c = chunk_for_frames(&s, 5, 20, 0.0).unwrap();
        assert_eq!(c.iter().map(|c| c.start).collect::<Vec<_>>(), vec![0, 20, 40, 60, 80]);
        assert_eq!(c[3].frame_index, 4);
        assert_eq!(c[1].values.data()[0], 20.0);
        assert_eq!(c[1].values.shape(), &[1, 2, 20]);
        let one = chunk_for_frames(&s, 1, 20, 0.0).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].start, 0);
        let full = chunk_for_frames(&ramp_spec(20), 4, 20, 0.5).unwrap();
        assert!(full.iter().all(|c| c.start == 0 && c.values == full[0].values));
        assert!(matches!(chunk_for_frames(&s, 3, 101, 0.0), Err(Error::Length(_))));
        assert!(chunk_for_frames(&s, 3, 10, 1.0).is_err());
    }

    #[test]
    fn volume_scaling() {
        let w = sine(440.0, 0.4, 0.1, 16_000);
        assert!(scale_volume(&w, 0.0).unwrap().samples().iter().all(|&s| s == 0.0));
        assert_eq!(scale_volume(&w, 1.0).unwrap(), w);
        let doubled = scale_volume(&w, 2.0).unwrap();
        assert!((doubled.peak() - 2.0 * w.peak()).abs() < 1e-12);
        assert!((doubled.peak() - 0.8).abs() < 1e-3);
        assert!(scale_volume(&w, -1.0).is_err());
        assert!(scale_volume(&w, 10.0).unwrap().peak() <= 1.0);
    }

    #[test]
    fn mel_grows_with_gain() {
        let w = noise(0.4, 4000, 9);
        let mels: Vec<MelSpectrogram<f64>> = [0.5, 1.0, 2.0]
            .iter()
            .map(|&g| mel_spectrogram(&scale_volume(&w, g).unwrap(), 32, 400, 160).unwrap())
            .collect();
        for pair in mels.windows(2) {
            assert!(pair[0]
                .values
                .data()
                .iter()
                .zip(pair[1].values.data())
                .all(|(a, b)| a <= b));
        }
    }

    #[test]
    fn crossfade_lengths_and_bounds() {
        let a = sine(440.0, 0.3, 1.0, 16_000);
        let b = sine(880.0, 0.6, 1.0, 16_000);
        assert_eq!(concat_transition(&a, &b, 0.0).unwrap().len(), 32_000);
        assert_eq!(concat_transition(&a, &b, 100.0).unwrap().len(), 30_400);
        let (lo, hi) = a
            .samples()
            .iter()
            .fold((f64::MAX, f64::MIN), |(l, h), &s| (l.min(s), h.max(s)));
        let same = concat_transition(&a, &a, 250.0).unwrap();
        assert!(same.samples().iter().all(|&s| s >= lo - 1e-15 && s <= hi + 1e-15));
        let other_rate = Waveform::silence(10, 8_000);
        assert!(matches!(concat_transition(&a, &other_rate, 0.0), Err(Error::Format(_))));
    }

    proptest::proptest! {
        #[test]
        fn raw_f32_round_trip_is_bit_exact(v in proptest::collection::vec(-1.0f32..=1.0, 1..64)) {
            let bytes: Vec<u8> = v.iter().flat_map(|s| s.to_le_bytes()).collect();
            let w = decode_raw_f32(&bytes, 16_000).unwrap();
            proptest::prop_assert_eq!(encode_raw_f32(&w), bytes);
        }

        #[test]
        fn chunks_are_ordered(l in 1usize..200, width in 1usize..50, n in 1usize..20) {
            proptest::prop_assume!(width <= l);
            let s = ramp_spec(l);
            let c = chunk_for_frames(&s, n, width, 0.0).unwrap();
            proptest::prop_assert_eq!(c.len(), n);
            proptest::prop_assert!(c.windows(2).all(|p| p[0].start <= p[1].start));
            proptest::prop_assert!(c.iter().all(|c| c.start + width <= l));
        }
    }
}
