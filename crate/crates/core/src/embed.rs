//! Joint audio-visual embedding: two small convolutional encoders mapping
//! masked frames and mel chunks onto the unit sphere, trained with symmetric
//! InfoNCE so that cosine geometry separates the sound/visual styles.

use std::path::Path;

use rayon::prelude::*;

use crate::audio::MelChunk;
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::nn::{
    accumulate, global_avg_pool, global_avg_pool_backward, l2_normalize, l2_normalize_backward,
    silu, silu_backward, Conv2d, Linear, Parameterized, Sgd,
};
use crate::numerics::{lit, to_f64, DifferentiableOp, Grid, Rng, Scalar};

pub const DEFAULT_DIM: usize = 32;
pub const DEFAULT_TEMPERATURE: f64 = 0.07;
const CHANNELS: [usize; 3] = [8, 16, 32];
const MAGIC: &[u8; 8] = b"SVENC\0\0\x01";

/// Unit-norm embedding vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding<S> {
    vector: Grid<S>,
}

impl<S: Scalar> Embedding<S> {
    /// Normalizes `v` onto the unit sphere.
    pub fn from_raw(v: &Grid<S>) -> Self {
        Self {
            vector: l2_normalize(v).0,
        }
    }

    pub fn vector(&self) -> &Grid<S> {
        &self.vector
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn dot(&self, other: &Self) -> Result<S> {
        self.vector.dot(&other.vector)
    }
}

/// `1 - a.b`, in `[0, 2]` for unit vectors.
pub fn cosine_distance<S: Scalar>(a: &Embedding<S>, b: &Embedding<S>) -> Result<S> {
    Ok(S::one() - a.dot(b)?)
}

/// `e2 - e1` (not normalized).
pub fn directional_delta<S: Scalar>(e1: &Embedding<S>, e2: &Embedding<S>) -> Result<Grid<S>> {
    e2.vector.sub(&e1.vector)
}

/// Normalized mean of several embeddings (class centroids, whole-clip audio).
pub fn mean_embedding<S: Scalar>(items: &[Embedding<S>]) -> Result<Embedding<S>> {
    let first = items
        .first()
        .ok_or_else(|| Error::Data("mean of no embeddings".into()))?;
    let mut acc = Grid::zeros(first.vector.shape());
    for e in items {
        acc.axpy(S::one(), &e.vector)?;
    }
    Ok(Embedding::from_raw(&acc))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderKind {
    Visual,
    Audio,
}

/// Three strided 3x3 convolutions with SiLU, global average pool, linear head,
/// L2 normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderModel<S> {
    pub kind: EncoderKind,
    /// Expected `[C, H, W]` input.
    pub input_spec: [usize; 3],
    pub convs: [Conv2d<S>; 3],
    pub head: Linear<S>,
}

/// Intermediate values of one forward pass, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct EncoderTrace<S> {
    input: Grid<S>,
    pre: Vec<Grid<S>>,
    act: Vec<Grid<S>>,
    pooled: Grid<S>,
    embedding: Grid<S>,
    norm: S,
}

impl<S: Scalar> EncoderTrace<S> {
    pub fn embedding(&self) -> Embedding<S> {
        Embedding {
            vector: self.embedding.clone(),
        }
    }

    /// Last convolutional feature map (before pooling).
    pub fn features(&self) -> &Grid<S> {
        &self.act[2]
    }
}

impl<S: Scalar> Parameterized<S> for EncoderModel<S> {
    fn params(&self) -> Vec<&Grid<S>> {
        let mut p: Vec<&Grid<S>> = self.convs.iter().flat_map(|c| [&c.weight, &c.bias]).collect();
        p.push(&self.head.weight);
        p.push(&self.head.bias);
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Grid<S>> {
        let mut p: Vec<&mut Grid<S>> = self
            .convs
            .iter_mut()
            .flat_map(|c| [&mut c.weight, &mut c.bias])
            .collect();
        p.push(&mut self.head.weight);
        p.push(&mut self.head.bias);
        p
    }
}

impl<S: Scalar> EncoderModel<S> {
    pub fn new(kind: EncoderKind, input_spec: [usize; 3], dim: usize, rng: &mut Rng) -> Self {
        let c0 = input_spec[0];
        let convs = [
            Conv2d::init(rng, c0, CHANNELS[0], 3, 2, 1),
            Conv2d::init(rng, CHANNELS[0], CHANNELS[1], 3, 2, 1),
            Conv2d::init(rng, CHANNELS[1], CHANNELS[2], 3, 2, 1),
        ];
        let head = Linear::init(rng, CHANNELS[2], dim);
        Self {
            kind,
            input_spec,
            convs,
            head,
        }
    }

    pub fn dim(&self) -> usize {
        self.head.weight.dim(0)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            kind: self.kind,
            input_spec: self.input_spec,
            convs: [
                self.convs[0].zeros_like(),
                self.convs[1].zeros_like(),
                self.convs[2].zeros_like(),
            ],
            head: self.head.zeros_like(),
        }
    }

    pub fn check_input(&self, x: &Grid<S>) -> Result<()> {
        x.ensure_shape(&self.input_spec)
    }

    pub fn trace(&self, x: &Grid<S>) -> Result<EncoderTrace<S>> {
        self.check_input(x)?;
        let mut pre = Vec::with_capacity(3);
        let mut act: Vec<Grid<S>> = Vec::with_capacity(3);
        for (k, conv) in self.convs.iter().enumerate() {
            let p = conv.forward(if k == 0 { x } else { &act[k - 1] });
            act.push(silu(&p));
            pre.push(p);
        }
        let pooled = global_avg_pool(&act[2]);
        let raw = self.head.forward(&pooled);
        let (embedding, norm) = l2_normalize(&raw);
        Ok(EncoderTrace {
            input: x.clone(),
            pre,
            act,
            pooled,
            embedding,
            norm,
        })
    }

    pub fn embed(&self, x: &Grid<S>) -> Result<Embedding<S>> {
        Ok(self.trace(x)?.embedding())
    }

    /// Input cotangent given cotangents of the embedding and/or the last
    /// feature map. Parameter gradients are added into `grads` if given.
    pub fn backward(
        &self,
        tr: &EncoderTrace<S>,
        d_embedding: Option<&Grid<S>>,
        d_features: Option<&Grid<S>>,
        mut grads: Option<&mut Self>,
    ) -> Grid<S> {
        let mut g_act = match d_embedding {
            Some(de) => {
                let g_raw = l2_normalize_backward(&tr.embedding, tr.norm, de);
                let g_pool = self.head.backward(
                    &tr.pooled,
                    &g_raw,
                    grads.as_deref_mut().map(|g| &mut g.head),
                );
                global_avg_pool_backward(tr.act[2].shape(), &g_pool)
            }
            None => Grid::zeros(tr.act[2].shape()),
        };
        if let Some(df) = d_features {
            g_act.axpy(S::one(), df).expect("feature cotangent shape");
        }
        for k in (0..3).rev() {
            let g_pre = silu_backward(&tr.pre[k], &g_act);
            let input = if k == 0 { &tr.input } else { &tr.act[k - 1] };
            g_act = self.convs[k].backward(
                input,
                &g_pre,
                grads.as_deref_mut().map(|g| &mut g.convs[k]),
            );
        }
        g_act
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let kind = match self.kind {
            EncoderKind::Visual => 0,
            EncoderKind::Audio => 1,
        };
        let [c, h, w] = self.input_spec;
        checkpoint::encode(
            MAGIC,
            &[self.dim() as u32, kind, c as u32, h as u32, w as u32],
            &self.params(),
        )
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, tensors) = checkpoint::decode::<S>(bytes, MAGIC)?;
        let [dim, kind, c, h, w] = header[..] else {
            return Err(Error::Checkpoint("encoder header must have 5 words".into()));
        };
        let kind = match kind {
            0 => EncoderKind::Visual,
            1 => EncoderKind::Audio,
            k => return Err(Error::Checkpoint(format!("unknown encoder kind {k}"))),
        };
        let spec = [c as usize, h as usize, w as usize];
        let mut model = Self::new(kind, spec, dim as usize, &mut Rng::new(0));
        let mut params = model.params_mut();
        if params.len() != tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                params.len(),
                tensors.len()
            )));
        }
        for (p, t) in params.iter_mut().zip(tensors) {
            t.ensure_shape(p.shape())
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
            **p = t;
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        checkpoint::write_file(path, &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&checkpoint::read_file(path)?)
    }
}

/// `frame * mask`, broadcasting a `[1, H, W]` mask over channels.
pub fn apply_mask<S: Scalar>(frame: &Grid<S>, mask: &Grid<S>) -> Result<Grid<S>> {
    let (c, h, w) = (frame.dim(0), frame.dim(1), frame.dim(2));
    mask.ensure_shape(&[1, h, w])?;
    let hw = h * w;
    Ok(Grid::from_fn(&[c, h, w], |k| frame.data()[k] * mask.data()[k % hw]))
}

pub fn encode_image<S: Scalar>(model: &EncoderModel<S>, frame: &Grid<S>) -> Result<Embedding<S>> {
    if model.kind != EncoderKind::Visual {
        return Err(Error::Domain("encode_image needs a visual encoder".into()));
    }
    model.embed(frame)
}

pub fn encode_audio<S: Scalar>(model: &EncoderModel<S>, chunk: &MelChunk<S>) -> Result<Embedding<S>> {
    if model.kind != EncoderKind::Audio {
        return Err(Error::Domain("encode_audio needs an audio encoder".into()));
    }
    model.embed(&chunk.values)
}

/// Frame -> embedding as a differentiable op (input cotangent only).
pub struct EncoderOp<'a, S>(pub &'a EncoderModel<S>);

impl<S: Scalar> DifferentiableOp<S> for EncoderOp<'_, S> {
    fn name(&self) -> &str {
        "encoder"
    }

    fn forward(&self, inputs: &[Grid<S>]) -> Result<Grid<S>> {
        Ok(self.0.embed(&inputs[0])?.vector)
    }

    fn vjp(&self, inputs: &[Grid<S>], cot: &Grid<S>) -> Result<Vec<Grid<S>>> {
        let tr = self.0.trace(&inputs[0])?;
        Ok(vec![self.0.backward(&tr, Some(cot), None, None)])
    }
}

/// Frame -> last convolutional feature map.
pub struct FeatureOp<'a, S>(pub &'a EncoderModel<S>);

impl<S: Scalar> DifferentiableOp<S> for FeatureOp<'_, S> {
    fn name(&self) -> &str {
        "encoder-features"
    }

    fn forward(&self, inputs: &[Grid<S>]) -> Result<Grid<S>> {
        Ok(self.0.trace(&inputs[0])?.features().clone())
    }

    fn vjp(&self, inputs: &[Grid<S>], cot: &Grid<S>) -> Result<Vec<Grid<S>>> {
        let tr = self.0.trace(&inputs[0])?;
        Ok(vec![self.0.backward(&tr, None, Some(cot), None)])
    }
}

/// One training example: a masked frame, the mel chunk heard with it, and the
/// style class both come from.
#[derive(Clone, Debug)]
pub struct ContrastivePair<S> {
    pub frame: Grid<S>,
    pub chunk: Grid<S>,
    pub label: usize,
}

#[derive(Clone, Debug)]
pub struct ContrastiveBatch<S> {
    pub pairs: Vec<ContrastivePair<S>>,
    pub classes: usize,
}

impl<S: Scalar> ContrastiveBatch<S> {
    fn validate(&self) -> Result<()> {
        let first = self
            .pairs
            .first()
            .ok_or_else(|| Error::DegenerateBatch("empty batch".into()))?
            .label;
        if self.classes < 2 || self.pairs.iter().all(|p| p.label == first) {
            return Err(Error::DegenerateBatch(format!(
                "batch of {} pairs covers a single class",
                self.pairs.len()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ContrastiveConfig {
    pub epochs: usize,
    pub lr: f64,
    pub temperature: f64,
    pub dim: usize,
    pub seed: u64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr: 0.5,
            temperature: DEFAULT_TEMPERATURE,
            dim: DEFAULT_DIM,
            seed: 0,
        }
    }
}

/// Mean loss of every epoch, plus the loss of the initial models.
#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    pub initial: f64,
    pub epochs: Vec<f64>,
}

/// Per-row and per-column softmax cross-entropy gradients of the symmetric
/// InfoNCE loss with respect to the logits, and the loss itself.
fn infonce_logit_grads(logits: &[f64], b: usize) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; b * b];
    let mut loss = 0.0;
    let inv = 1.0 / (2.0 * b as f64);
    for i in 0..b {
        let row = &logits[i * b..(i + 1) * b];
        let m = row.iter().copied().fold(f64::MIN, f64::max);
        let z: f64 = row.iter().map(|&l| (l - m).exp()).sum();
        loss -= row[i] - m - z.ln();
        for j in 0..b {
            grad[i * b + j] += ((row[j] - m).exp() / z - if i == j { 1.0 } else { 0.0 }) * inv;
        }
    }
    for j in 0..b {
        let m = (0..b).map(|i| logits[i * b + j]).fold(f64::MIN, f64::max);
        let z: f64 = (0..b).map(|i| (logits[i * b + j] - m).exp()).sum();
        loss -= logits[j * b + j] - m - z.ln();
        for i in 0..b {
            grad[i * b + j] +=
                ((logits[i * b + j] - m).exp() / z - if i == j { 1.0 } else { 0.0 }) * inv;
        }
    }
    (loss * inv, grad)
}

/// Symmetric InfoNCE of one batch under the given encoders.
pub fn infonce_loss<S: Scalar>(
    visual: &EncoderModel<S>,
    audio: &EncoderModel<S>,
    batch: &ContrastiveBatch<S>,
    temperature: f64,
) -> Result<f64> {
    let (v, a) = embed_batch(visual, audio, batch)?;
    let logits = batch_logits(&v, &a, temperature);
    Ok(infonce_logit_grads(&logits, v.len()).0)
}

type Traces<S> = (Vec<EncoderTrace<S>>, Vec<EncoderTrace<S>>);

fn trace_batch<S: Scalar>(visual: &EncoderModel<S>, audio: &EncoderModel<S>, batch: &ContrastiveBatch<S>) -> Result<Traces<S>> {
    let v = batch
        .pairs
        .par_iter()
        .map(|p| visual.trace(&p.frame))
        .collect::<Result<Vec<_>>>()?;
    let a = batch
        .pairs
        .par_iter()
        .map(|p| audio.trace(&p.chunk))
        .collect::<Result<Vec<_>>>()?;
    Ok((v, a))
}

fn embed_batch<S: Scalar>(
    visual: &EncoderModel<S>,
    audio: &EncoderModel<S>,
    batch: &ContrastiveBatch<S>,
) -> Result<(Vec<Grid<S>>, Vec<Grid<S>>)> {
    let (v, a) = trace_batch(visual, audio, batch)?;
    Ok((
        v.into_iter().map(|t| t.embedding).collect(),
        a.into_iter().map(|t| t.embedding).collect(),
    ))
}

fn batch_logits<S: Scalar>(v: &[Grid<S>], a: &[Grid<S>], temperature: f64) -> Vec<f64> {
    let b = v.len();
    let mut logits = vec![0.0; b * b];
    for i in 0..b {
        for j in 0..b {
            logits[i * b + j] = to_f64(v[i].dot(&a[j]).expect("equal dims")) / temperature;
        }
    }
    logits
}

/// Trains a visual and an audio encoder with symmetric InfoNCE and plain SGD.
///
/// Input shapes are taken from the first pair of the first batch.
pub fn train_contrastive<S: Scalar>(
    batches: &[ContrastiveBatch<S>],
    cfg: &ContrastiveConfig,
) -> Result<(EncoderModel<S>, EncoderModel<S>, TrainLog)> {
    if !(cfg.temperature > 0.0) {
        return Err(Error::Domain(format!(
            "temperature must be positive, got {}",
            cfg.temperature
        )));
    }
    let first = batches
        .first()
        .and_then(|b| b.pairs.first())
        .ok_or_else(|| Error::Data("no contrastive batches".into()))?;
    for b in batches {
        b.validate()?;
    }
    let spec = |g: &Grid<S>| [g.dim(0), g.dim(1), g.dim(2)];
    let mut rng = Rng::with_stream(cfg.seed, 0xe4c0);
    let mut visual = EncoderModel::new(EncoderKind::Visual, spec(&first.frame), cfg.dim, &mut rng);
    let mut audio = EncoderModel::new(EncoderKind::Audio, spec(&first.chunk), cfg.dim, &mut rng);
    let init = batches
        .iter()
        .map(|b| infonce_loss(&visual, &audio, b, cfg.temperature))
        .sum::<Result<f64>>()?
        / batches.len() as f64;
    let mut log = TrainLog {
        initial: init,
        epochs: Vec::with_capacity(cfg.epochs),
    };
    let opt = Sgd { lr: cfg.lr };
    let mut order: Vec<usize> = (0..batches.len()).collect();
    for _ in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0;
        for &bi in &order {
            let batch = &batches[bi];
            let (loss, gv, ga) = contrastive_grads(&visual, &audio, batch, cfg.temperature)?;
            total += loss;
            opt.step(&mut visual, &gv, 1.0);
            opt.step(&mut audio, &ga, 1.0);
        }
        log.epochs.push(total / batches.len() as f64);
    }
    Ok((visual, audio, log))
}

fn contrastive_grads<S: Scalar>(
    visual: &EncoderModel<S>,
    audio: &EncoderModel<S>,
    batch: &ContrastiveBatch<S>,
    temperature: f64,
) -> Result<(f64, EncoderModel<S>, EncoderModel<S>)> {
    let (vt, at) = trace_batch(visual, audio, batch)?;
    let b = vt.len();
    let v: Vec<&Grid<S>> = vt.iter().map(|t| &t.embedding).collect();
    let a: Vec<&Grid<S>> = at.iter().map(|t| &t.embedding).collect();
    let mut logits = vec![0.0; b * b];
    for i in 0..b {
        for j in 0..b {
            logits[i * b + j] = to_f64(v[i].dot(a[j])?) / temperature;
        }
    }
    let (loss, g) = infonce_logit_grads(&logits, b);
    let dim = v[0].len();
    let inv_t = 1.0 / temperature;
    let dv: Vec<Grid<S>> = (0..b)
        .map(|i| {
            let mut acc = Grid::zeros(&[dim]);
            for j in 0..b {
                acc.axpy(lit(g[i * b + j] * inv_t), a[j]).expect("dims");
            }
            acc
        })
        .collect();
    let da: Vec<Grid<S>> = (0..b)
        .map(|j| {
            let mut acc = Grid::zeros(&[dim]);
            for i in 0..b {
                acc.axpy(lit(g[i * b + j] * inv_t), v[i]).expect("dims");
            }
            acc
        })
        .collect();
    let per_v: Vec<EncoderModel<S>> = (0..b)
        .into_par_iter()
        .map(|i| {
            let mut acc = visual.zeros_like();
            visual.backward(&vt[i], Some(&dv[i]), None, Some(&mut acc));
            acc
        })
        .collect();
    let per_a: Vec<EncoderModel<S>> = (0..b)
        .into_par_iter()
        .map(|j| {
            let mut acc = audio.zeros_like();
            audio.backward(&at[j], Some(&da[j]), None, Some(&mut acc));
            acc
        })
        .collect();
    let mut gv = visual.zeros_like();
    for p in &per_v {
        accumulate(&mut gv, p);
    }
    let mut ga = audio.zeros_like();
    for p in &per_a {
        accumulate(&mut ga, p);
    }
    Ok((loss, gv, ga))
}
