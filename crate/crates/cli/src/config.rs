//! Flat `key=value` run configuration.
//!
//! Lines are `key = value`; `#` starts a comment. Keys are namespaced
//! (`sched.*`, `mel.*`, `guide.*`, `flow.*`, `synth.*`, `train.*`, `run.*`,
//! `io.*`). Unknown keys and out-of-range values are rejected. Serializing
//! writes every key in a fixed order, so parse -> serialize -> parse is a
//! fixed point.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use svedit_core::corpus::{Style, SynthConfig};
use svedit_core::denoiser::DenoiserTrainConfig;
use svedit_core::embed::ContrastiveConfig;
use svedit_core::guidance::GuidanceConfig;
use svedit_core::sampler::{EditMode, FlowSource, MelParams};

use crate::error::{CliError, CliResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlowKind {
    /// Ground-truth flow files next to the input (required to exist).
    Provided,
    /// Block matching on the frames.
    Estimated,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub sched_steps: usize,
    pub sched_beta_start: f64,
    pub sched_beta_end: f64,

    pub mel_bins: usize,
    pub mel_win: usize,
    pub mel_hop: usize,
    pub mel_chunk: usize,
    pub mel_overlap: f64,

    pub guide_sg: f64,
    pub guide_dsg: f64,
    pub guide_flow: f64,
    pub guide_back: f64,
    pub guide_flow_ramp: bool,
    pub guide_chain_rule: bool,

    pub flow_source: FlowKind,
    pub flow_block: usize,
    pub flow_radius: usize,
    pub flow_refresh: usize,

    pub synth_classes: usize,
    pub synth_clips_per_class: usize,
    pub synth_height: usize,
    pub synth_width: usize,
    pub synth_channels: usize,
    pub synth_frames: usize,
    pub synth_region: usize,
    pub synth_seconds: f64,

    pub train_denoiser_epochs: usize,
    pub train_denoiser_lr: f64,
    pub train_denoiser_batch: usize,
    pub train_encoder_epochs: usize,
    pub train_encoder_lr: f64,
    pub train_encoder_batch: usize,
    pub train_temperature: f64,
    pub train_dim: usize,

    pub run_seed: u64,
    pub run_mode: EditMode,
    pub run_feather: usize,
    pub run_seeds: Vec<u64>,
    pub run_target: Style,
    pub run_transition: Style,
    pub run_amplitude: f64,

    pub io_denoiser: PathBuf,
    pub io_visual: PathBuf,
    pub io_audio: PathBuf,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            sched_steps: 100,
            sched_beta_start: 1e-4,
            sched_beta_end: 0.02,
            mel_bins: 32,
            mel_win: 400,
            mel_hop: 160,
            mel_chunk: 50,
            mel_overlap: 0.5,
            guide_sg: 1000.0,
            guide_dsg: 1000.0,
            guide_flow: 500.0,
            guide_back: 1000.0,
            guide_flow_ramp: true,
            guide_chain_rule: false,
            flow_source: FlowKind::Estimated,
            flow_block: 4,
            flow_radius: 2,
            flow_refresh: 10,
            synth_classes: 4,
            synth_clips_per_class: 40,
            synth_height: 16,
            synth_width: 16,
            synth_channels: 3,
            synth_frames: 10,
            synth_region: 6,
            synth_seconds: 1.0,
            train_denoiser_epochs: 20,
            train_denoiser_lr: 2e-3,
            train_denoiser_batch: 16,
            train_encoder_epochs: 20,
            train_encoder_lr: 0.5,
            train_encoder_batch: 16,
            train_temperature: 0.07,
            train_dim: 32,
            run_seed: 0,
            run_mode: EditMode::Local,
            run_feather: 0,
            run_seeds: vec![0, 1, 2, 3, 4],
            run_target: Style::Flicker,
            run_transition: Style::Waves,
            run_amplitude: 0.35,
            io_denoiser: PathBuf::from("models/denoiser.ckpt"),
            io_visual: PathBuf::from("models/visual.ckpt"),
            io_audio: PathBuf::from("models/audio.ckpt"),
        }
    }
}

fn num<T: FromStr>(key: &str, v: &str) -> CliResult<T> {
    v.parse()
        .map_err(|_| CliError::bad(key, format!("cannot parse {v:?}")))
}

fn ranged<T: FromStr + PartialOrd + Display>(key: &str, v: &str, lo: T, hi: T) -> CliResult<T> {
    let x: T = num(key, v)?;
    if x < lo || x > hi {
        return Err(CliError::bad(key, format!("{x} outside [{lo}, {hi}]")));
    }
    Ok(x)
}

fn real(key: &str, v: &str, lo: f64, hi: f64) -> CliResult<f64> {
    let x: f64 = num(key, v)?;
    if !x.is_finite() || x < lo || x > hi {
        return Err(CliError::bad(key, format!("{x} outside [{lo}, {hi}]")));
    }
    Ok(x)
}

fn switch(key: &str, v: &str) -> CliResult<bool> {
    match v {
        "on" => Ok(true),
        "off" => Ok(false),
        _ => Err(CliError::bad(key, format!("expected on|off, got {v:?}"))),
    }
}

fn on_off(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

impl Config {
    pub fn parse(text: &str) -> CliResult<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("config line {}: expected key=value", lineno + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|_| CliError::Missing(path.to_path_buf()))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, v: &str) -> CliResult<()> {
        const BIG: usize = 1 << 20;
        match key {
            "sched.steps" => self.sched_steps = ranged(key, v, 1, 10_000)?,
            "sched.beta_start" => self.sched_beta_start = real(key, v, f64::MIN_POSITIVE, 0.999)?,
            "sched.beta_end" => self.sched_beta_end = real(key, v, f64::MIN_POSITIVE, 0.999)?,
            "mel.bins" => self.mel_bins = ranged(key, v, 1, 512)?,
            "mel.win" => self.mel_win = ranged(key, v, 2, 1 << 16)?,
            "mel.hop" => self.mel_hop = ranged(key, v, 1, 1 << 16)?,
            "mel.chunk" => self.mel_chunk = ranged(key, v, 1, BIG)?,
            "mel.overlap" => self.mel_overlap = real(key, v, 0.0, 0.999_999)?,
            "guide.sg" => self.guide_sg = real(key, v, 0.0, f64::MAX)?,
            "guide.dsg" => self.guide_dsg = real(key, v, 0.0, f64::MAX)?,
            "guide.flow" => self.guide_flow = real(key, v, 0.0, f64::MAX)?,
            "guide.back" => self.guide_back = real(key, v, 0.0, f64::MAX)?,
            "guide.flow_ramp" => self.guide_flow_ramp = switch(key, v)?,
            "guide.chain_rule" => self.guide_chain_rule = switch(key, v)?,
            "flow.source" => {
                self.flow_source = match v {
                    "provided" => FlowKind::Provided,
                    "estimated" => FlowKind::Estimated,
                    _ => return Err(CliError::bad(key, format!("expected provided|estimated, got {v:?}"))),
                }
            }
            "flow.block" => self.flow_block = ranged(key, v, 1, 4096)?,
            "flow.radius" => self.flow_radius = ranged(key, v, 1, 4096)?,
            "flow.refresh" => self.flow_refresh = ranged(key, v, 0, BIG)?,
            "synth.classes" => self.synth_classes = ranged(key, v, 2, Style::ALL.len())?,
            "synth.clips_per_class" => self.synth_clips_per_class = ranged(key, v, 1, BIG)?,
            "synth.height" => self.synth_height = ranged(key, v, 4, 4096)?,
            "synth.width" => self.synth_width = ranged(key, v, 4, 4096)?,
            "synth.channels" => {
                self.synth_channels = ranged(key, v, 1, 3)?;
                if self.synth_channels == 2 {
                    return Err(CliError::bad(key, "expected 1 or 3"));
                }
            }
            "synth.frames" => self.synth_frames = ranged(key, v, 1, 4096)?,
            "synth.region" => self.synth_region = ranged(key, v, 1, 4096)?,
            "synth.seconds" => self.synth_seconds = real(key, v, 0.01, 3600.0)?,
            "train.denoiser_epochs" => self.train_denoiser_epochs = ranged(key, v, 0, BIG)?,
            "train.denoiser_lr" => self.train_denoiser_lr = real(key, v, 0.0, 10.0)?,
            "train.denoiser_batch" => self.train_denoiser_batch = ranged(key, v, 1, BIG)?,
            "train.encoder_epochs" => self.train_encoder_epochs = ranged(key, v, 0, BIG)?,
            "train.encoder_lr" => self.train_encoder_lr = real(key, v, 0.0, 100.0)?,
            "train.encoder_batch" => self.train_encoder_batch = ranged(key, v, 2, BIG)?,
            "train.temperature" => self.train_temperature = real(key, v, 1e-6, 100.0)?,
            "train.dim" => self.train_dim = ranged(key, v, 1, 4096)?,
            "run.seed" => self.run_seed = num(key, v)?,
            "run.mode" => {
                self.run_mode = match v {
                    "local" => EditMode::Local,
                    "global" => EditMode::Global,
                    _ => return Err(CliError::bad(key, format!("expected local|global, got {v:?}"))),
                }
            }
            "run.feather" => self.run_feather = ranged(key, v, 0, 4096)?,
            "run.seeds" => {
                let seeds = v
                    .split(',')
                    .map(|s| num::<u64>(key, s.trim()))
                    .collect::<CliResult<Vec<_>>>()?;
                if seeds.is_empty() {
                    return Err(CliError::bad(key, "need at least one seed"));
                }
                self.run_seeds = seeds;
            }
            "run.target" => self.run_target = Style::parse(v).map_err(|e| CliError::bad(key, e.to_string()))?,
            "run.transition" => {
                self.run_transition = Style::parse(v).map_err(|e| CliError::bad(key, e.to_string()))?
            }
            "run.amplitude" => self.run_amplitude = real(key, v, 0.0, 1.0)?,
            "io.denoiser" => self.io_denoiser = PathBuf::from(v),
            "io.visual" => self.io_visual = PathBuf::from(v),
            "io.audio" => self.io_audio = PathBuf::from(v),
            _ => return Err(CliError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Cross-key checks.
    pub fn validate(&self) -> CliResult<()> {
        if self.sched_beta_start > self.sched_beta_end {
            return Err(CliError::bad("sched.beta_start", "must not exceed sched.beta_end"));
        }
        if self.mel_hop > self.mel_win {
            return Err(CliError::bad("mel.hop", "must not exceed mel.win"));
        }
        if self.run_target == self.run_transition {
            return Err(CliError::bad("run.transition", "must differ from run.target"));
        }
        self.synth_config()
            .validate()
            .map_err(|e| CliError::bad("synth.region", e.to_string()))?;
        Ok(())
    }

    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        let paths = |p: &Path| p.to_string_lossy().into_owned();
        vec![
            ("sched.steps", self.sched_steps.to_string()),
            ("sched.beta_start", self.sched_beta_start.to_string()),
            ("sched.beta_end", self.sched_beta_end.to_string()),
            ("mel.bins", self.mel_bins.to_string()),
            ("mel.win", self.mel_win.to_string()),
            ("mel.hop", self.mel_hop.to_string()),
            ("mel.chunk", self.mel_chunk.to_string()),
            ("mel.overlap", self.mel_overlap.to_string()),
            ("guide.sg", self.guide_sg.to_string()),
            ("guide.dsg", self.guide_dsg.to_string()),
            ("guide.flow", self.guide_flow.to_string()),
            ("guide.back", self.guide_back.to_string()),
            ("guide.flow_ramp", on_off(self.guide_flow_ramp).to_string()),
            ("guide.chain_rule", on_off(self.guide_chain_rule).to_string()),
            (
                "flow.source",
                match self.flow_source {
                    FlowKind::Provided => "provided",
                    FlowKind::Estimated => "estimated",
                }
                .to_string(),
            ),
            ("flow.block", self.flow_block.to_string()),
            ("flow.radius", self.flow_radius.to_string()),
            ("flow.refresh", self.flow_refresh.to_string()),
            ("synth.classes", self.synth_classes.to_string()),
            ("synth.clips_per_class", self.synth_clips_per_class.to_string()),
            ("synth.height", self.synth_height.to_string()),
            ("synth.width", self.synth_width.to_string()),
            ("synth.channels", self.synth_channels.to_string()),
            ("synth.frames", self.synth_frames.to_string()),
            ("synth.region", self.synth_region.to_string()),
            ("synth.seconds", self.synth_seconds.to_string()),
            ("train.denoiser_epochs", self.train_denoiser_epochs.to_string()),
            ("train.denoiser_lr", self.train_denoiser_lr.to_string()),
            ("train.denoiser_batch", self.train_denoiser_batch.to_string()),
            ("train.encoder_epochs", self.train_encoder_epochs.to_string()),
            ("train.encoder_lr", self.train_encoder_lr.to_string()),
            ("train.encoder_batch", self.train_encoder_batch.to_string()),
            ("train.temperature", self.train_temperature.to_string()),
            ("train.dim", self.train_dim.to_string()),
            ("run.seed", self.run_seed.to_string()),
            (
                "run.mode",
                match self.run_mode {
                    EditMode::Local => "local",
                    EditMode::Global => "global",
                }
                .to_string(),
            ),
            ("run.feather", self.run_feather.to_string()),
            (
                "run.seeds",
                self.run_seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(","),
            ),
            ("run.target", self.run_target.name().to_string()),
            ("run.transition", self.run_transition.name().to_string()),
            ("run.amplitude", self.run_amplitude.to_string()),
            ("io.denoiser", paths(&self.io_denoiser)),
            ("io.visual", paths(&self.io_visual)),
            ("io.audio", paths(&self.io_audio)),
        ]
    }

    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.pairs() {
            out.push_str(k);
            out.push('=');
            out.push_str(&v);
            out.push('\n');
        }
        out
    }

    pub fn guidance(&self) -> GuidanceConfig {
        GuidanceConfig {
            lambda_sg: self.guide_sg,
            lambda_dsg: self.guide_dsg,
            lambda_flow: self.guide_flow,
            lambda_back: self.guide_back,
            steps: self.sched_steps,
            flow_ramp: self.guide_flow_ramp,
            chain_rule: self.guide_chain_rule,
        }
    }

    pub fn mel(&self) -> MelParams {
        MelParams {
            bins: self.mel_bins,
            win: self.mel_win,
            hop: self.mel_hop,
            chunk: self.mel_chunk,
            overlap_ratio: self.mel_overlap,
        }
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            height: self.synth_height,
            width: self.synth_width,
            channels: self.synth_channels,
            frames: self.synth_frames,
            region: self.synth_region,
            duration_s: self.synth_seconds,
            ..SynthConfig::default()
        }
    }

    pub fn styles(&self) -> &'static [Style] {
        &Style::ALL[..self.synth_classes]
    }

    pub fn estimated_flows<S>(&self) -> FlowSource<S> {
        FlowSource::Estimated {
            block: self.flow_block,
            radius: self.flow_radius,
            refresh: self.flow_refresh,
        }
    }

    pub fn denoiser_training(&self) -> DenoiserTrainConfig {
        DenoiserTrainConfig {
            epochs: self.train_denoiser_epochs,
            lr: self.train_denoiser_lr,
            batch: self.train_denoiser_batch,
            seed: self.run_seed,
        }
    }

    pub fn encoder_training(&self) -> ContrastiveConfig {
        ContrastiveConfig {
            epochs: self.train_encoder_epochs,
            lr: self.train_encoder_lr,
            temperature: self.train_temperature,
            dim: self.train_dim,
            seed: self.run_seed,
        }
    }
}
