//! Sound-guided diffusion video editing at desk scale.
//!
//! A per-frame DDPM sampler whose reverse steps are shifted by the gradient of
//! four guidance losses: local sound alignment, directional sound alignment,
//! bidirectional optical-flow consistency and background preservation. The
//! audio-visual embedding space and the noise predictor are tiny networks
//! trained in-crate on a synthetic corpus.
//!
//! All math is generic over [`Scalar`]; the aliases at the crate root fix the
//! scalar to `f64`, which is what every trainer, sampler and test uses.

pub mod audio;
pub mod checkpoint;
pub mod corpus;
pub mod denoiser;
pub mod embed;
pub mod error;
pub mod flow;
pub mod guidance;
pub mod nn;
pub mod numerics;
pub mod sampler;
pub mod schedule;

pub use error::{Error, Result};
pub use numerics::{lit, Scalar};

/// Dense array of `f64`.
pub type Grid = numerics::Grid<f64>;
/// Frame stack of `f64` frames.
pub type Video = numerics::Video<f64>;
pub type NoiseSchedule = schedule::NoiseSchedule<f64>;
pub type MelSpectrogram = audio::MelSpectrogram<f64>;
pub type MelChunk = audio::MelChunk<f64>;
pub type Embedding = embed::Embedding<f64>;
pub type EncoderModel = embed::EncoderModel<f64>;
pub type DenoiserModel = denoiser::DenoiserModel<f64>;
pub type FlowField = flow::FlowField<f64>;
pub type FlowPair = flow::FlowPair<f64>;
pub type EditResult = sampler::EditResult<f64>;
