//! Chunked autoregressive video generation with motion context carried
//! across chunk boundaries.

use candle_core::DType;

use crate::audio::{seconds_to_samples, Waveform};
use crate::beats::{extract_beats, BeatVector};
use crate::codec::{decode_frames, encode, CodecConfig};
use crate::conditioning::TextEmbedding;
use crate::diffusion::{ddim_sample_projected, ConditionBundle, NoiseSchedule, DEFAULT_GUIDANCE};
use crate::error::{param_err, Result};
use crate::frame::{Image, PoseMask};
use crate::model::{DanceModel, Stage};
use crate::temporal::MotionContext;
use crate::tensor::LatentTensor;
use crate::train::first_frame_pose;
use crate::unet::ReferenceFeatures;

#[derive(Debug, Clone, PartialEq)]
pub struct GenerateConfig {
    /// Frames per chunk.
    pub clip_frames: usize,
    pub ddim_steps: usize,
    pub guidance: f64,
    pub seed: u64,
    pub fps: f64,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            clip_frames: 16,
            ddim_steps: 25,
            guidance: DEFAULT_GUIDANCE,
            seed: 0,
            fps: 12.0,
        }
    }
}

/// Conditions shared by every chunk of one generation.
#[derive(Debug, Clone)]
pub struct Session {
    pub text: TextEmbedding,
    pub reference: ReferenceFeatures,
    /// Zero-padded to cover every chunk.
    pub waveform: Waveform,
    /// One bit per frame of every chunk.
    pub beats: BeatVector,
    pub fps: f64,
    pub pose: PoseMask,
}

impl Session {
    pub fn new(
        model: &DanceModel,
        codec: &CodecConfig,
        reference: &Image,
        mask: &PoseMask,
        w: &Waveform,
        caption: &[String],
        total_frames: usize,
        fps: f64,
    ) -> Result<Self> {
        let need = seconds_to_samples(total_frames as f64 / fps);
        let mut samples = w.samples().to_vec();
        if samples.len() < need {
            samples.resize(need, 0.0);
        }
        let waveform = Waveform::new(samples);
        let beats = extract_beats(&waveform, fps, total_frames)?;
        Ok(Self {
            text: model.embed_text(caption)?,
            reference: model.reference_features(&encode(reference, codec)?)?,
            waveform,
            beats,
            fps,
            pose: mask.clone(),
        })
    }

    /// Conditions for frames `start .. start+len`; the pose mask goes on
    /// frame 0 of the video only.
    pub fn window(&self, model: &DanceModel, start: usize, len: usize, motion: Option<MotionContext>) -> Result<ConditionBundle> {
        let temporal = model.has_temporal();
        Ok(ConditionBundle {
            text: Some(self.text.clone()),
            music: if temporal {
                Some(model.encode_music(&self.waveform, start as f64 / self.fps, len as f64 / self.fps)?)
            } else {
                None
            },
            beat: if temporal {
                Some(model.embed_beats(&self.beats.window(start, len))?)
            } else {
                None
            },
            reference: Some(self.reference.clone()),
            motion,
            pose: if start == 0 {
                Some(first_frame_pose(model, &self.pose, len)?)
            } else {
                None
            },
        })
    }
}

/// Post-spatial hidden states of the last `M` frames of a finished chunk,
/// from a clean (`t = 0`) pass over those frames.
pub fn capture_context(model: &DanceModel, session: &Session, chunk: &LatentTensor, chunk_start: usize) -> Result<MotionContext> {
    let k = chunk
        .frame_count()
        .ok_or_else(|| param_err!("chunk latent must be clip-shaped"))?;
    let m = model.topology().motion_frames.min(k);
    let frames = LatentTensor::new(chunk.tensor().narrow(0, k - m, m)?)?;
    let mut cond = session.window(model, chunk_start + k - m, m, None)?;
    cond.pose = None;
    model
        .forward(&frames, 0, &cond, Stage::Two, true)?
        .context
        .ok_or_else(|| param_err!("model produced no motion context"))
}

#[derive(Debug, Clone)]
pub struct ChunkTrace {
    pub start: usize,
    pub latent: LatentTensor,
    /// Context this chunk was generated with.
    pub context_in: Option<MotionContext>,
}

#[derive(Debug, Clone)]
pub struct Generation {
    pub frames: Vec<Image>,
    /// Beat bits of the returned frames.
    pub beats: BeatVector,
    pub chunks: Vec<ChunkTrace>,
    pub session: Session,
}

/// Animates `reference` over `length` frames in chunks of `cfg.clip_frames`.
/// Stage-1 models generate each frame independently.
#[allow(clippy::too_many_arguments)]
pub fn generate_video(
    model: &DanceModel,
    codec: &CodecConfig,
    reference: &Image,
    mask: &PoseMask,
    w: &Waveform,
    caption: &[String],
    length: usize,
    cfg: &GenerateConfig,
) -> Result<Generation> {
    if length == 0 {
        return Err(param_err!("length must be >= 1"));
    }
    if cfg.clip_frames == 0 {
        return Err(param_err!("clip_frames must be >= 1"));
    }
    if !(cfg.fps > 0.0) {
        return Err(param_err!("fps must be positive"));
    }
    let needed = length as f64 / cfg.fps;
    if w.duration_s() + 0.5 / (crate::audio::SAMPLE_RATE as f64) < needed {
        return Err(param_err!("waveform of {:.3} s shorter than {needed:.3} s of video", w.duration_s()));
    }
    if mask.height() != reference.height() || mask.width() != reference.width() {
        return Err(param_err!("mask dims do not match the reference image"));
    }
    let k = cfg.clip_frames;
    let n_chunks = length.div_ceil(k);
    let session = Session::new(model, codec, reference, mask, w, caption, n_chunks * k, cfg.fps)?;
    let stage = if model.has_temporal() { Stage::Two } else { Stage::One };
    let sched = NoiseSchedule::default();
    let (h, wd) = (reference.height() / codec.patch(), reference.width() / codec.patch());
    let shape = [k, h, wd, codec.latent_channels()];

    let mut frames = Vec::with_capacity(n_chunks * k);
    let mut chunks = Vec::with_capacity(n_chunks);
    let mut context: Option<MotionContext> = None;
    for c in 0..n_chunks {
        let start = c * k;
        let cond = session.window(model, start, k, context.clone())?;
        let seed = cfg.seed.wrapping_add((c as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let z = ddim_sample_projected(
            &model.staged(stage),
            &cond,
            &sched,
            cfg.ddim_steps,
            cfg.guidance,
            seed,
            &shape,
            DType::F32,
            Some(&|x0| codec.project_tensor(x0)),
        )?;
        frames.extend(decode_frames(&z, codec)?);
        let next = if stage == Stage::Two && c + 1 < n_chunks {
            Some(capture_context(model, &session, &z, start)?)
        } else {
            None
        };
        chunks.push(ChunkTrace {
            start,
            latent: z,
            context_in: context.take(),
        });
        context = next;
    }
    frames.truncate(length);
    let beats = session.beats.window(0, length);
    Ok(Generation {
        frames,
        beats,
        chunks,
        session,
    })
}

/// Stage-1 single-frame synthesis: `reference` re-posed to `mask`.
#[allow(clippy::too_many_arguments)]
pub fn reconstruct_frame(
    model: &DanceModel,
    codec: &CodecConfig,
    reference: &Image,
    mask: &PoseMask,
    caption: &[String],
    ddim_steps: usize,
    guidance: f64,
    seed: u64,
) -> Result<Image> {
    let cond = ConditionBundle {
        text: Some(model.embed_text(caption)?),
        reference: Some(model.reference_features(&encode(reference, codec)?)?),
        pose: Some(model.encode_mask(mask)?),
        ..Default::default()
    };
    let shape = [reference.height() / codec.patch(), reference.width() / codec.patch(), codec.latent_channels()];
    let z = ddim_sample_projected(
        &model.staged(Stage::One),
        &cond,
        &NoiseSchedule::default(),
        ddim_steps,
        guidance,
        seed,
        &shape,
        DType::F32,
        Some(&|x0| codec.project_tensor(x0)),
    )?;
    crate::codec::decode(&z, codec)
}
