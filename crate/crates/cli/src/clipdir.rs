//! On-disk layout of frame sequences, masks, flows and synthetic clips.
//!
//! A clip directory holds `frame_NN.ppm` (or `.pgm`), `mask_NN.pgm`,
//! `fwd_NN.flo` / `bwd_NN.flo` for every adjacent pair, `audio.wav` and a
//! `meta.txt` with the style and intensity.

use std::path::{Path, PathBuf};

use svedit_core::audio::{load_waveform, save_waveform, Waveform};
use svedit_core::corpus::{Clip, Style};
use svedit_core::flow::{read_flow, write_flow, FlowDirection};
use svedit_core::{Error, FlowPair, Grid, Video};

use crate::error::{CliError, CliResult};
use crate::pnm;

pub fn frame_name(i: usize, channels: usize) -> String {
    format!("frame_{i:02}.{}", if channels == 1 { "pgm" } else { "ppm" })
}

fn sorted_files(dir: &Path, keep: impl Fn(&str) -> bool) -> CliResult<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|_| CliError::Missing(dir.to_path_buf()))?;
    let mut out: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.file_name().and_then(|n| n.to_str()).is_some_and(&keep))
        .collect();
    out.sort();
    Ok(out)
}

fn is_image(n: &str) -> bool {
    n.ends_with(".ppm") || n.ends_with(".pgm")
}

/// Frames of a directory: `frame_*` images if present, otherwise every
/// PPM/PGM file, in name order.
pub fn read_frames(dir: &Path) -> CliResult<Video> {
    let mut files = sorted_files(dir, |n| n.starts_with("frame_") && is_image(n))?;
    if files.is_empty() {
        files = sorted_files(dir, is_image)?;
    }
    if files.is_empty() {
        return Err(CliError::Data(format!("no frames in {}", dir.display())));
    }
    let frames = files.iter().map(|p| pnm::read(p)).collect::<Result<Vec<Grid>, Error>>()?;
    Video::new(frames).map_err(|e| CliError::Data(e.to_string()))
}

/// Masks of a directory: `mask_*.pgm` if present, otherwise every PGM file.
pub fn read_masks(dir: &Path) -> CliResult<Video> {
    let mut files = sorted_files(dir, |n| n.starts_with("mask_") && n.ends_with(".pgm"))?;
    if files.is_empty() {
        files = sorted_files(dir, |n| n.ends_with(".pgm"))?;
    }
    if files.is_empty() {
        return Err(CliError::Data(format!("no masks in {}", dir.display())));
    }
    let masks = files.iter().map(|p| pnm::read_mask(p)).collect::<Result<Vec<Grid>, Error>>()?;
    Video::new(masks).map_err(|e| CliError::Data(e.to_string()))
}

/// One mask replicated for `n` frames.
pub fn replicate_mask(path: &Path, n: usize) -> CliResult<Video> {
    let m = pnm::read_mask(path)?;
    Ok(Video::new(vec![m; n])?)
}

pub fn read_flows(dir: &Path, pairs: usize) -> CliResult<Vec<FlowPair>> {
    (0..pairs)
        .map(|i| {
            let f = dir.join(format!("fwd_{i:02}.flo"));
            let b = dir.join(format!("bwd_{i:02}.flo"));
            for p in [&f, &b] {
                if !p.is_file() {
                    return Err(CliError::Missing(p.clone()));
                }
            }
            Ok(FlowPair::new(
                read_flow(&f, FlowDirection::Forward)?,
                read_flow(&b, FlowDirection::Backward)?,
                i,
            )?)
        })
        .collect()
}

pub fn read_audio(path: &Path) -> CliResult<Waveform> {
    if !path.is_file() {
        return Err(CliError::Missing(path.to_path_buf()));
    }
    Ok(load_waveform(path)?)
}

/// Writes frames and returns the file names.
pub fn write_frames(dir: &Path, video: &Video) -> CliResult<Vec<String>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = Vec::new();
    for (i, f) in video.frames().iter().enumerate() {
        let name = frame_name(i, video.channels());
        pnm::write(&dir.join(&name), f)?;
        names.push(name);
    }
    Ok(names)
}

/// Writes a whole synthetic clip; returns the file names relative to `dir`.
pub fn write_clip(dir: &Path, clip: &Clip<f64>) -> CliResult<Vec<String>> {
    let mut names = write_frames(dir, &clip.frames)?;
    for (i, m) in clip.masks.frames().iter().enumerate() {
        let name = format!("mask_{i:02}.pgm");
        pnm::write_mask(&dir.join(&name), m)?;
        names.push(name);
    }
    for (i, p) in clip.flows.iter().enumerate() {
        for (tag, field) in [("fwd", &p.fwd), ("bwd", &p.bwd)] {
            let name = format!("{tag}_{i:02}.flo");
            write_flow(dir.join(&name), field)?;
            names.push(name);
        }
    }
    save_waveform(&clip.waveform, dir.join("audio.wav"))?;
    names.push("audio.wav".into());
    let meta = format!(
        "style={}\nintensity={}\nshift={},{}\n",
        clip.style.name(),
        clip.intensity,
        clip.shift.0,
        clip.shift.1
    );
    std::fs::write(dir.join("meta.txt"), meta).map_err(|e| Error::io(dir.join("meta.txt"), e))?;
    names.push("meta.txt".into());
    Ok(names)
}

/// A clip read back from disk: frames and audio are as quantized by their
/// file formats, flows are exact for the synthetic generator.
pub fn read_clip(dir: &Path) -> CliResult<Clip<f64>> {
    let meta_path = dir.join("meta.txt");
    let meta = std::fs::read_to_string(&meta_path).map_err(|_| CliError::Missing(meta_path.clone()))?;
    let field = |k: &str| {
        meta.lines()
            .find_map(|l| l.strip_prefix(k).and_then(|r| r.strip_prefix('=')))
            .ok_or_else(|| CliError::Data(format!("{}: missing {k}", meta_path.display())))
    };
    let style = Style::parse(field("style")?)?;
    let intensity: f64 = field("intensity")?
        .parse()
        .map_err(|_| CliError::Data(format!("{}: bad intensity", meta_path.display())))?;
    let shift = field("shift")?
        .split_once(',')
        .and_then(|(a, b)| Some((a.parse().ok()?, b.parse().ok()?)))
        .ok_or_else(|| CliError::Data(format!("{}: bad shift", meta_path.display())))?;
    let frames = read_frames(dir)?;
    let masks = read_masks(dir)?;
    let flows = read_flows(dir, frames.len().saturating_sub(1))?;
    let waveform = read_audio(&dir.join("audio.wav"))?;
    Ok(Clip {
        style,
        intensity,
        frames,
        masks,
        waveform,
        flows,
        shift,
    })
}

/// Clip directories listed in a corpus manifest, in manifest order.
pub fn corpus_clips(root: &Path) -> CliResult<Vec<PathBuf>> {
    let manifest = root.join("manifest.txt");
    let text = std::fs::read_to_string(&manifest).map_err(|_| CliError::Missing(manifest.clone()))?;
    let mut dirs: Vec<PathBuf> = Vec::new();
    for line in text.lines() {
        if let Some(rel) = line.strip_suffix("/meta.txt") {
            dirs.push(root.join(rel));
        }
    }
    if dirs.is_empty() {
        return Err(CliError::Data(format!("{} lists no clips", manifest.display())));
    }
    Ok(dirs)
}

/// Writes `manifest.txt` listing `files` (relative paths) after a header.
pub fn write_manifest(dir: &Path, header: &[String], files: &[String]) -> CliResult<()> {
    let mut sorted = files.to_vec();
    sorted.sort();
    let mut text = String::new();
    for h in header {
        text.push_str(h);
        text.push('\n');
    }
    for f in sorted {
        text.push_str(&f);
        text.push('\n');
    }
    let path = dir.join("manifest.txt");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(())
}
