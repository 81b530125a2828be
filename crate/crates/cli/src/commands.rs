//! Subcommand definitions and their implementations.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use svedit_core::flow::{estimate_video_flows, t_diff};
use svedit_core::sampler::{audio_embeddings, av_similarity, guided_sample, step_log_csv, FlowSource};
use svedit_core::{EncoderModel, Error, Video};

use crate::clipdir;
use crate::config::{Config, FlowKind};
use crate::error::{CliError, CliResult};
use crate::experiments::{self, Bundle, Variant};

#[derive(Debug, Parser)]
#[command(name = "svedit", version, about = "Sound-guided video editing with a small diffusion model")]
pub struct Cli {
    /// Config file of `key=value` lines.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides `run.seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Write into a non-empty output directory.
    #[arg(long, global = true)]
    pub force: bool,
    /// Extra `key=value` config overrides, applied after the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus of style clips.
    Synth(OutArgs),
    /// Train the noise-prediction network.
    TrainDenoiser(TrainArgs),
    /// Train the visual and audio encoders contrastively.
    TrainEncoders(TrainArgs),
    /// Edit a frame sequence toward an audio clip.
    Edit(EditArgs),
    /// Temporal difference and audio-visual similarity of a frame sequence.
    Eval(InputArgs),
    /// Flow-loss and ramp ablation over the configured seeds.
    Ablate(OutArgs),
}

#[derive(Debug, Args)]
pub struct OutArgs {
    /// Run directory.
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Run directory for logs.
    pub out: PathBuf,
    /// Corpus written by `synth`; generated in memory when absent.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InputArgs {
    /// Run directory.
    pub out: PathBuf,
    /// Directory of PPM/PGM frames.
    #[arg(long)]
    pub frames: PathBuf,
    /// Directory of per-frame PGM masks.
    #[arg(long, conflicts_with = "mask")]
    pub masks: Option<PathBuf>,
    /// One PGM mask used for every frame.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// WAV or raw f32 audio.
    #[arg(long)]
    pub audio: PathBuf,
    /// Directory of `fwd_NN.flo` / `bwd_NN.flo` files.
    #[arg(long)]
    pub flows: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EditArgs {
    #[command(flatten)]
    pub input: InputArgs,
}

/// Loads the config file, then applies `--set` pairs and `--seed`.
pub fn resolve_config(cli: &Cli) -> CliResult<Config> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    for kv in &cli.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = cli.seed {
        cfg.run_seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Creates the run directory, refusing a non-empty one unless forced.
pub fn prepare_out(dir: &Path, force: bool) -> CliResult<()> {
    if dir.exists() {
        let mut entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        if entries.next().is_some() && !force {
            return Err(CliError::Usage(format!(
                "{} is not empty; pass --force to write into it",
                dir.display()
            )));
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(())
}

fn write_text(dir: &Path, name: &str, text: &str) -> CliResult<String> {
    let path = dir.join(name);
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(name.to_string())
}

fn finish(dir: &Path, command: &str, cfg: &Config, mut header: Vec<String>, mut files: Vec<String>) -> CliResult<()> {
    files.push(write_text(dir, "config.txt", &cfg.serialize())?);
    header.insert(0, format!("command={command}"));
    clipdir::write_manifest(dir, &header, &files)
}

pub fn run(cli: &Cli) -> CliResult<()> {
    let cfg = resolve_config(cli)?;
    match &cli.command {
        Command::Synth(a) => synth(&cfg, &a.out, cli.force),
        Command::TrainDenoiser(a) => train_denoiser(&cfg, a, cli.force),
        Command::TrainEncoders(a) => train_encoders(&cfg, a, cli.force),
        Command::Edit(a) => edit(&cfg, &a.input, cli.force),
        Command::Eval(a) => eval(&cfg, a, cli.force),
        Command::Ablate(a) => ablate(&cfg, &a.out, cli.force),
    }
}

pub fn synth(cfg: &Config, out: &Path, force: bool) -> CliResult<()> {
    prepare_out(out, force)?;
    let clips = experiments::training_corpus(cfg)?;
    let mut files = Vec::new();
    let mut counters = [0usize; 4];
    for clip in &clips {
        let k = clip.style.index();
        let rel = format!("{}/clip_{:03}", clip.style.name(), counters[k]);
        counters[k] += 1;
        for f in clipdir::write_clip(&out.join(&rel), clip)? {
            files.push(format!("{rel}/{f}"));
        }
    }
    let names: Vec<&str> = cfg.styles().iter().map(|s| s.name()).collect();
    let header = vec![
        format!("classes={}", names.join(",")),
        format!("clips_per_class={}", cfg.synth_clips_per_class),
    ];
    finish(out, "synth", cfg, header, files)
}

fn training_clips(cfg: &Config, corpus: &Option<PathBuf>) -> CliResult<Vec<svedit_core::corpus::Clip<f64>>> {
    match corpus {
        Some(root) => clipdir::corpus_clips(root)?.iter().map(|d| clipdir::read_clip(d)).collect(),
        None => experiments::training_corpus(cfg),
    }
}

fn loss_csv(initial: f64, epochs: &[f64]) -> String {
    let mut s = String::from("epoch,loss\n");
    s.push_str(&format!("0,{initial}\n"));
    for (i, l) in epochs.iter().enumerate() {
        s.push_str(&format!("{},{l}\n", i + 1));
    }
    s
}

fn save_model(path: &Path, save: impl FnOnce(&Path) -> svedit_core::Result<()>) -> CliResult<String> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    save(path)?;
    Ok(format!("checkpoint={}", path.display()))
}

pub fn train_denoiser(cfg: &Config, a: &TrainArgs, force: bool) -> CliResult<()> {
    prepare_out(&a.out, force)?;
    let clips = training_clips(cfg, &a.corpus)?;
    let (model, log) = experiments::train_denoiser(cfg, &clips)?;
    let header = vec![save_model(&cfg.io_denoiser, |p| model.save(p))?];
    let files = vec![write_text(&a.out, "denoiser_loss.csv", &loss_csv(log.initial, &log.epochs))?];
    finish(&a.out, "train-denoiser", cfg, header, files)
}

pub fn train_encoders(cfg: &Config, a: &TrainArgs, force: bool) -> CliResult<()> {
    prepare_out(&a.out, force)?;
    let clips = training_clips(cfg, &a.corpus)?;
    let (visual, audio, log) = experiments::train_encoders(cfg, &clips)?;
    let r = experiments::retrieval(cfg, &visual, &audio)?;
    let header = vec![
        save_model(&cfg.io_visual, |p| visual.save(p))?,
        save_model(&cfg.io_audio, |p| audio.save(p))?,
    ];
    let files = vec![
        write_text(&a.out, "encoder_loss.csv", &loss_csv(log.initial, &log.epochs))?,
        write_text(
            &a.out,
            "retrieval.csv",
            &format!("hits,total,accuracy\n{},{},{}\n", r.hits, r.total, r.accuracy()),
        )?,
    ];
    finish(&a.out, "train-encoders", cfg, header, files)
}

struct Inputs {
    frames: Video,
    masks: Video,
    waveform: svedit_core::audio::Waveform,
    flows: Option<Vec<svedit_core::FlowPair>>,
}

fn read_inputs(a: &InputArgs) -> CliResult<Inputs> {
    let frames = clipdir::read_frames(&a.frames)?;
    let masks = match (&a.masks, &a.mask) {
        (Some(dir), None) => clipdir::read_masks(dir)?,
        (None, Some(file)) => clipdir::replicate_mask(file, frames.len())?,
        _ => return Err(CliError::Usage("pass exactly one of --masks or --mask".into())),
    };
    if masks.len() != frames.len() {
        return Err(CliError::Data(format!("{} frames but {} masks", frames.len(), masks.len())));
    }
    frames.ensure_masks(&masks)?;
    let waveform = clipdir::read_audio(&a.audio)?;
    let flows = match &a.flows {
        Some(dir) => Some(clipdir::read_flows(dir, frames.len().saturating_sub(1))?),
        None => None,
    };
    Ok(Inputs {
        frames,
        masks,
        waveform,
        flows,
    })
}

/// The metrics CSV; a sequence too short for the temporal metric gets
/// `NA` plus a warning row.
pub fn metrics_csv(t_diff: Option<f64>, av_similarity: f64) -> String {
    match t_diff {
        Some(t) => format!("t_diff,av_similarity\n{t},{av_similarity}\n"),
        None => format!("t_diff,av_similarity\nNA,{av_similarity}\nwarning,t_diff needs at least two frames\n"),
    }
}

pub fn edit(cfg: &Config, a: &InputArgs, force: bool) -> CliResult<()> {
    let inputs = read_inputs(a)?;
    let bundle = Bundle::load(cfg)?;
    let mut req = experiments::configured_request(cfg, inputs.frames, inputs.masks, inputs.waveform);
    req.flow_source = match (cfg.flow_source, inputs.flows) {
        (_, Some(f)) => FlowSource::Provided(f),
        (FlowKind::Estimated, None) => cfg.estimated_flows(),
        (FlowKind::Provided, None) => {
            return Err(CliError::Usage("flow.source=provided needs --flows".into()));
        }
    };
    let result = guided_sample(&req, &bundle.models())?;
    prepare_out(&a.out, force)?;
    let mut files: Vec<String> = clipdir::write_frames(&a.out.join("frames"), &result.video)?
        .into_iter()
        .map(|n| format!("frames/{n}"))
        .collect();
    files.push(write_text(&a.out, "step_log.csv", &step_log_csv(&result.log))?);
    files.push(write_text(
        &a.out,
        "metrics.csv",
        &metrics_csv(result.metrics.t_diff, result.metrics.av_similarity),
    )?);
    finish(&a.out, "edit", cfg, Vec::new(), files)
}

fn load_encoder(path: &Path) -> CliResult<EncoderModel> {
    if !path.is_file() {
        return Err(CliError::Missing(path.to_path_buf()));
    }
    Ok(EncoderModel::load(path)?)
}

pub fn eval(cfg: &Config, a: &InputArgs, force: bool) -> CliResult<()> {
    let inputs = read_inputs(a)?;
    let visual = load_encoder(&cfg.io_visual)?;
    let audio = load_encoder(&cfg.io_audio)?;
    let n = inputs.frames.len();
    let t = if n < 2 {
        eprintln!("warning: t_diff needs at least two frames, got {n}");
        None
    } else {
        let flows = match inputs.flows {
            Some(f) => f,
            None => estimate_video_flows(&inputs.frames, cfg.flow_block, cfg.flow_radius)?,
        };
        Some(t_diff(&inputs.frames, &flows)?)
    };
    let embeds = audio_embeddings(&inputs.waveform, n, &cfg.mel(), &audio)?;
    let sim = av_similarity(&inputs.frames, &inputs.masks, &embeds, &visual)?;
    prepare_out(&a.out, force)?;
    let files = vec![write_text(&a.out, "metrics.csv", &metrics_csv(t, sim))?];
    finish(&a.out, "eval", cfg, Vec::new(), files)
}

pub fn ablate(cfg: &Config, out: &Path, force: bool) -> CliResult<()> {
    let bundle = Bundle::load(cfg)?;
    prepare_out(out, force)?;
    let mut per_seed = String::from("variant,seed,t_diff,av_similarity\n");
    let mut table = String::from("variant,t_diff,av_similarity,numeric_failures\n");
    for v in Variant::ALL {
        let (mut td, mut sim, mut ok, mut failed) = (0.0, 0.0, 0usize, 0usize);
        for &seed in &cfg.run_seeds {
            let run = experiments::ablation_run(cfg, &bundle, v, seed)?;
            match run.result {
                Some(r) => {
                    let t = r.metrics.t_diff.unwrap_or(f64::NAN);
                    per_seed.push_str(&format!("{},{seed},{t},{}\n", v.name(), r.metrics.av_similarity));
                    td += t;
                    sim += r.metrics.av_similarity;
                    ok += 1;
                }
                None => {
                    per_seed.push_str(&format!("{},{seed},NA,NA\n", v.name()));
                    failed += 1;
                }
            }
        }
        let mean = |x: f64| if ok == 0 { "NA".to_string() } else { (x / ok as f64).to_string() };
        table.push_str(&format!("{},{},{},{failed}\n", v.name(), mean(td), mean(sim)));
    }
    let files = vec![
        write_text(out, "ablation.csv", &table)?,
        write_text(out, "ablation_seeds.csv", &per_seed)?,
    ];
    let seeds: Vec<String> = cfg.run_seeds.iter().map(u64::to_string).collect();
    finish(out, "ablate", cfg, vec![format!("seeds={}", seeds.join(","))], files)
}
