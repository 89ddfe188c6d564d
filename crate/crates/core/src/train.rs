//! Two-stage training: per-frame appearance learning, then temporal modules
//! on frozen appearance weights.

use std::time::Instant;

use candle_core::{DType, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::beats::{extract_beats, BeatVector};
use crate::checkpoint::Checkpoint;
use crate::codec::{encode_frames, CodecConfig, DEFAULT_CODEC_SEED};
use crate::conditioning::Vocab;
use crate::config::TrainConfig;
use crate::dataset::{caption_vocabulary, VideoClip};
use crate::diffusion::{denoising_loss, ConditionBundle, NoiseSchedule, TrainItem};
use crate::error::{param_err, Result};
use crate::model::{DanceModel, Stage};
use crate::nn::ParamGroup;
use crate::tensor::LatentTensor;
use crate::unet::Topology;

/// Probability that a stage-1 target is trained without its pose mask, so
/// the appearance network also works when no mask is given.
pub const MASK_DROP: f64 = 0.5;
/// Probability that a stage-2 window starts at frame 0 (no motion context,
/// pose mask on the first frame), matching the first generated chunk.
pub const FIRST_WINDOW_PROB: f64 = 0.5;

/// Draws 1-based `(i, j)`: `i` uniform on `w+1 ..= n−w`, `j` uniform on
/// `i−w ..= i+w` without `i`.
pub fn sample_frame_pair<R: Rng + ?Sized>(n: usize, w: usize, rng: &mut R) -> Result<(usize, usize)> {
    if w == 0 {
        return Err(param_err!("window must be >= 1"));
    }
    if n < 2 * w + 1 {
        return Err(param_err!("clip of {n} frames too short for window {w}"));
    }
    let i = rng.random_range(w + 1..=n - w);
    let mut j = rng.random_range(i - w..i + w);
    if j >= i {
        j += 1;
    }
    Ok((i, j))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub elapsed_ms: u128,
}

impl StepLog {
    /// `step\tloss\tlr\telapsed_ms`.
    pub fn line(&self) -> String {
        format!("{}\t{:.6}\t{:e}\t{}", self.step, self.loss, self.lr, self.elapsed_ms)
    }
}

pub struct TrainOutcome {
    pub model: DanceModel,
    pub log: Vec<StepLog>,
}

/// A clip with latents and beats precomputed.
#[derive(Debug, Clone)]
pub struct PreparedClip {
    pub clip: VideoClip,
    /// `(N, H_z, W_z, C_z)`.
    pub latents: LatentTensor,
    pub beats: BeatVector,
}

impl PreparedClip {
    pub fn new(clip: VideoClip, codec: &CodecConfig) -> Result<Self> {
        let latents = encode_frames(&clip.frames, codec)?;
        let beats = extract_beats(&clip.waveform, clip.fps, clip.len())?;
        Ok(Self { clip, latents, beats })
    }

    pub fn frame_latent(&self, k: usize) -> Result<LatentTensor> {
        LatentTensor::new(self.latents.tensor().get(k)?)
    }

    pub fn window_latent(&self, start: usize, len: usize) -> Result<LatentTensor> {
        LatentTensor::new(self.latents.tensor().narrow(0, start, len)?)
    }
}

pub fn prepare(clips: &[VideoClip], codec: &CodecConfig) -> Result<Vec<PreparedClip>> {
    if clips.is_empty() {
        return Err(param_err!("empty dataset"));
    }
    clips.iter().map(|c| PreparedClip::new(c.clone(), codec)).collect()
}

pub fn default_codec() -> Result<CodecConfig> {
    CodecConfig::new(crate::codec::DEFAULT_PATCH, DEFAULT_CODEC_SEED, DType::F32)
}

/// Stage-1 topology for a dataset: template words plus every caption token.
pub fn topology_for(clips: &[VideoClip], base_width: usize) -> Topology {
    let mut words = caption_vocabulary();
    for c in clips {
        for t in &c.caption {
            if !words.contains(t) {
                words.push(t.clone());
            }
        }
    }
    let vocab = Vocab::new(words);
    Topology {
        base_width,
        ..Topology::new(vocab.words().to_vec())
    }
}

fn adam(model: &DanceModel, lr: f64) -> Result<AdamW> {
    let params = ParamsAdamW {
        lr,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        weight_decay: 0.0,
    };
    Ok(AdamW::new(model.store().trainable_vars(), params)?)
}

pub type StepHook<'a> = dyn FnMut(&StepLog, &DanceModel) -> Result<()> + 'a;

fn run_loop<F>(model: &DanceModel, cfg: &TrainConfig, hook: &mut StepHook, mut step_loss: F) -> Result<Vec<StepLog>>
where
    F: FnMut(&mut ChaCha8Rng) -> Result<Tensor>,
{
    let mut opt = adam(model, cfg.lr)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let start = Instant::now();
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let loss = step_loss(&mut rng)?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            return Err(param_err!("non-finite loss at step {step}"));
        }
        opt.backward_step(&loss)?;
        let entry = StepLog {
            step,
            loss: value,
            lr: cfg.lr,
            elapsed_ms: start.elapsed().as_millis(),
        };
        hook(&entry, model)?;
        log.push(entry);
    }
    Ok(log)
}

/// Stage 1: reference frame `i`, target frame `j`, target pose mask added to
/// the denoiser input, caption through the text encoder.
pub fn train_stage1(clips: &[VideoClip], cfg: &TrainConfig, hook: &mut StepHook) -> Result<TrainOutcome> {
    if cfg.stage != 1 {
        return Err(param_err!("train_stage1 needs stage = 1, got {}", cfg.stage));
    }
    cfg.validate()?;
    let codec = default_codec()?;
    let data = prepare(clips, &codec)?;
    for d in &data {
        if d.clip.len() < 2 * cfg.window + 1 {
            return Err(param_err!("clip of {} frames too short for window {}", d.clip.len(), cfg.window));
        }
    }
    let model = DanceModel::new(topology_for(clips, cfg.base_width), DType::F32, cfg.seed)?;
    let sched = NoiseSchedule::default();
    let log = run_loop(&model, cfg, hook, |rng| {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let d = &data[rng.random_range(0..data.len())];
            let (i, j) = sample_frame_pair(d.clip.len(), cfg.window, rng)?;
            let (i, j) = (i - 1, j - 1);
            let use_mask = rng.random::<f64>() >= MASK_DROP;
            let cond = ConditionBundle {
                text: Some(model.embed_text(&d.clip.caption)?),
                reference: Some(model.reference_features(&d.frame_latent(i)?)?),
                pose: if use_mask { Some(model.encode_mask(&d.clip.masks[j])?) } else { None },
                ..Default::default()
            };
            batch.push(TrainItem {
                z0: d.frame_latent(j)?,
                cond,
            });
        }
        denoising_loss(&model.staged(Stage::One), &batch, &sched, cfg.drop_prob, rng)
    })?;
    Ok(TrainOutcome { model, log })
}

/// Pose residual for a `len`-frame window with `mask` on the first frame
/// and nothing on the others.
pub fn first_frame_pose(model: &DanceModel, mask: &crate::frame::PoseMask, len: usize) -> Result<Tensor> {
    let m = model.encode_mask(mask)?.unsqueeze(0)?;
    if len == 1 {
        return Ok(m);
    }
    let (_, h, w, c) = m.dims4()?;
    let rest = Tensor::zeros((len - 1, h, w, c), m.dtype(), m.device())?;
    Ok(Tensor::cat(&[&m, &rest], 0)?)
}

/// Conditions for frames `start .. start+len` of a clip, without motion
/// context. The clip's first pose mask is applied only to a window starting
/// at frame 0, mirroring the first generated chunk.
pub fn window_condition(
    model: &DanceModel,
    d: &PreparedClip,
    reference: &crate::unet::ReferenceFeatures,
    start: usize,
    len: usize,
) -> Result<ConditionBundle> {
    let fps = d.clip.fps;
    let pose = if start == 0 {
        Some(first_frame_pose(model, &d.clip.masks[0], len)?)
    } else {
        None
    };
    Ok(ConditionBundle {
        text: Some(model.embed_text(&d.clip.caption)?.detach()),
        music: Some(model.encode_music(&d.clip.waveform, start as f64 / fps, len as f64 / fps)?),
        beat: Some(model.embed_beats(&d.beats.window(start, len))?),
        reference: Some(reference.clone()),
        motion: None,
        pose,
    })
}

/// Motion context for a window starting at `start`: post-spatial hidden
/// states of the preceding `M` clean frames.
pub fn window_context(
    model: &DanceModel,
    d: &PreparedClip,
    reference: &crate::unet::ReferenceFeatures,
    start: usize,
) -> Result<Option<crate::temporal::MotionContext>> {
    let m = model.topology().motion_frames.min(start);
    if m == 0 {
        return Ok(None);
    }
    let s = start - m;
    let mut cond = window_condition(model, d, reference, s, m)?;
    cond.pose = None;
    let out = model.forward(&d.window_latent(s, m)?, 0, &cond, Stage::Two, true)?;
    Ok(out.context.map(|c| c.detach()))
}

impl crate::conditioning::TextEmbedding {
    pub fn detach(&self) -> Self {
        Self {
            tokens: self.tokens.detach(),
            is_null: self.is_null,
        }
    }
}

impl crate::unet::ReferenceFeatures {
    pub fn detach(&self) -> Self {
        Self {
            maps: self.maps.iter().map(Tensor::detach).collect(),
        }
    }
}

/// Builds the stage-2 model from a stage-1 checkpoint with appearance groups
/// loaded and frozen.
pub fn stage2_model(stage1: &Checkpoint, seed: u64) -> Result<DanceModel> {
    if stage1.has_temporal_groups() {
        return Err(crate::error::Error::Checkpoint("expected a stage-1 checkpoint".into()));
    }
    let model = DanceModel::new(stage1.topology.with_temporal(true), DType::F32, seed)?;
    stage1.load_groups(&model, &ParamGroup::APPEARANCE)?;
    for g in ParamGroup::APPEARANCE {
        model.store().set_frozen(g, true);
    }
    Ok(model)
}

/// Stage 2: K-frame windows with music, beats and motion context; only the
/// temporal modules and the music encoder train.
pub fn train_stage2(
    clips: &[VideoClip],
    cfg: &TrainConfig,
    stage1: &Checkpoint,
    hook: &mut StepHook,
) -> Result<TrainOutcome> {
    if cfg.stage != 2 {
        return Err(param_err!("train_stage2 needs stage = 2, got {}", cfg.stage));
    }
    cfg.validate()?;
    let codec = default_codec()?;
    let data = prepare(clips, &codec)?;
    let k = cfg.clip_frames;
    for d in &data {
        if d.clip.len() < k {
            return Err(param_err!("clip of {} frames shorter than window {k}", d.clip.len()));
        }
    }
    let model = stage2_model(stage1, cfg.seed)?;
    let sched = NoiseSchedule::default();
    let log = run_loop(&model, cfg, hook, |rng| {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let d = &data[rng.random_range(0..data.len())];
            let n = d.clip.len();
            let start = if n == k || rng.random::<f64>() < FIRST_WINDOW_PROB {
                0
            } else {
                rng.random_range(1..=n - k)
            };
            let r = rng.random_range(0..n);
            let reference = model.reference_features(&d.frame_latent(r)?)?.detach();
            let mut cond = window_condition(&model, d, &reference, start, k)?;
            cond.motion = window_context(&model, d, &reference, start)?;
            batch.push(TrainItem {
                z0: d.window_latent(start, k)?,
                cond,
            });
        }
        denoising_loss(&model.staged(Stage::Two), &batch, &sched, cfg.drop_prob, rng)
    })?;
    Ok(TrainOutcome { model, log })
}
