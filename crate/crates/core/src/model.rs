//! The assembled animation model: denoising U-Net, ReferenceNet, condition
//! encoders and (for stage-2 topologies) the temporal modules.

use candle_core::{DType, Tensor};

use crate::audio::Waveform;
use crate::beats::BeatVector;
use crate::conditioning::{
    embed_beats, BeatEmbedding, MaskEncoder, MusicEmbedding, MusicEncoder, TextEmbedding, TextEncoder, Vocab,
};
use crate::diffusion::{ConditionBundle, EpsModel, NoiseSchedule};
use crate::error::{param_err, shape_err, Result};
use crate::frame::PoseMask;
use crate::nn::{Init, Param, ParamGroup, ParamStore};
use crate::temporal::{to_temporal, MotionContext, TemporalSite};
use crate::tensor::LatentTensor;
use crate::unet::{ReferenceFeatures, SpatialAttention, TextCrossAttention, Topology, UNet};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    /// Frames are denoised independently; temporal modules are bypassed.
    One,
    /// Clip-shaped input; temporal modules run at every site.
    Two,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub eps: Tensor,
    /// Post-spatial hidden states of the last `M` frames, when requested.
    pub context: Option<MotionContext>,
}

/// Assumed per-element spread of clean latents around what the conditions
/// predict; sets the preconditioning below.
const SIGMA_DATA: f64 = 0.5;

/// Input, skip and output gains for `ε̂ = c_skip·z_t + c_out·F(c_in·z_t)`:
/// the ε form of variance-preserving preconditioning, which keeps both the
/// network's input and its regression target at unit scale for every `t`.
fn preconditioning(t: usize) -> (f64, f64, f64) {
    static AB: std::sync::OnceLock<Vec<f64>> = std::sync::OnceLock::new();
    let ab = AB.get_or_init(|| NoiseSchedule::default().alpha_bars().to_vec());
    let a = ab[t.min(ab.len() - 1)];
    let var = 1.0 - a;
    let c2 = var + a * SIGMA_DATA * SIGMA_DATA;
    (1.0 / c2.sqrt(), var.sqrt() / c2, SIGMA_DATA * a.sqrt() / c2.sqrt())
}

pub struct DanceModel {
    topology: Topology,
    store: ParamStore,
    unet: UNet,
    spatial: Vec<SpatialAttention>,
    text_attn: Vec<TextCrossAttention>,
    temporal: Vec<TemporalSite>,
    reference: UNet,
    reference_attn: Vec<SpatialAttention>,
    mask_encoder: MaskEncoder,
    text_encoder: TextEncoder,
    music_encoder: Option<MusicEncoder>,
    beat_table: Option<Param>,
}

impl std::fmt::Debug for DanceModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DanceModel")
            .field("topology", &self.topology)
            .field("params", &self.store.len())
            .finish()
    }
}

impl DanceModel {
    pub fn new(topology: Topology, dtype: DType, seed: u64) -> Result<Self> {
        topology.validate()?;
        let widths = topology.widths();
        let heads = topology.heads;
        let mut store = ParamStore::new(dtype, seed);

        let mut root = store.root(ParamGroup::Conv);
        let unet = UNet::new(&mut root.pp("unet"), &topology, ParamGroup::TimeEmbedding, true)?;
        let mut spatial = Vec::new();
        let mut text_attn = Vec::new();
        let mut temporal = Vec::new();
        for (i, &level) in crate::unet::SITE_LEVELS.iter().enumerate() {
            let d = widths[level];
            let mut site = root.pp(&format!("site{i}"));
            spatial.push(SpatialAttention::new(
                &mut site.group(ParamGroup::SpatialAttention).pp("spatial"),
                d,
                heads,
            )?);
            text_attn.push(TextCrossAttention::new(
                &mut site.group(ParamGroup::TextCrossAttention).pp("text"),
                d,
                topology.text_dim,
                heads,
            )?);
            if topology.temporal {
                temporal.push(TemporalSite::new(&mut site, d, topology.music_dim(), heads)?);
            }
        }

        let mut rb = root.group(ParamGroup::ReferenceNet);
        let mut rb = rb.pp("reference");
        let reference = UNet::new(&mut rb, &topology, ParamGroup::ReferenceNet, false)?;
        // The last site's attention output is never consumed, so it has none.
        let reference_attn = crate::unet::SITE_LEVELS[..4]
            .iter()
            .enumerate()
            .map(|(i, &l)| SpatialAttention::new(&mut rb.pp(&format!("site{i}")), widths[l], heads))
            .collect::<Result<Vec<_>>>()?;

        let mask_encoder = MaskEncoder::new(
            &mut root.group(ParamGroup::MaskEncoder).pp("mask_encoder"),
            topology.patch,
            topology.latent_channels,
        )?;
        let text_encoder = TextEncoder::new(
            &mut root.group(ParamGroup::TextEncoder).pp("text_encoder"),
            Vocab::from_words(topology.vocab.clone())?,
            topology.text_dim,
            topology.max_text_tokens,
            heads,
        )?;
        let (music_encoder, beat_table) = if topology.temporal {
            let m = MusicEncoder::new(
                &mut root.group(ParamGroup::MusicEncoder).pp("music_encoder"),
                topology.music_dim(),
                topology.max_music_tokens,
                heads,
            )?;
            let t = root
                .group(ParamGroup::TemporalBeat)
                .pp("beat_embedding")
                .param("table", &[2, topology.music_dim()], Init::Normal(1.0))?;
            (Some(m), Some(t))
        } else {
            (None, None)
        };

        Ok(Self {
            topology,
            store,
            unet,
            spatial,
            text_attn,
            temporal,
            reference,
            reference_attn,
            mask_encoder,
            text_encoder,
            music_encoder,
            beat_table,
        })
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn has_temporal(&self) -> bool {
        self.topology.temporal
    }

    /// Runs the ReferenceNet once on a clean reference latent.
    pub fn reference_features(&self, ref_latent: &LatentTensor) -> Result<ReferenceFeatures> {
        if ref_latent.is_clip() {
            return Err(param_err!("reference latent must be a single frame"));
        }
        let x = ref_latent.batched()?;
        let mut maps = Vec::with_capacity(self.topology.site_count());
        let attn = &self.reference_attn;
        self.reference.forward(&x, 0.0, &mut |i, h| {
            maps.push(h.clone());
            match attn.get(i) {
                Some(a) => a.self_attend(&h),
                None => Ok(h),
            }
        })?;
        Ok(ReferenceFeatures { maps })
    }

    /// Latent-layout mask features `(H_z, W_z, C_z)`.
    pub fn encode_mask(&self, mask: &PoseMask) -> Result<Tensor> {
        Ok(self.encode_masks(&[mask])?.squeeze(0)?)
    }

    /// `(B, H_z, W_z, C_z)` for a batch of masks.
    pub fn encode_masks(&self, masks: &[&PoseMask]) -> Result<Tensor> {
        if masks.is_empty() {
            return Err(param_err!("no masks"));
        }
        self.mask_encoder.encode(masks, self.dtype())
    }

    pub fn embed_text(&self, tokens: &[String]) -> Result<TextEmbedding> {
        self.text_encoder.embed(tokens)
    }

    pub fn vocab(&self) -> &Vocab {
        self.text_encoder.vocab()
    }

    fn music_encoder(&self) -> Result<&MusicEncoder> {
        self.music_encoder
            .as_ref()
            .ok_or_else(|| param_err!("stage-1 model has no music encoder"))
    }

    pub fn encode_music(&self, w: &Waveform, start_s: f64, span_s: f64) -> Result<MusicEmbedding> {
        self.music_encoder()?.encode(w, start_s, span_s, self.dtype())
    }

    pub fn embed_beats(&self, b: &BeatVector) -> Result<BeatEmbedding> {
        let table = self
            .beat_table
            .as_ref()
            .ok_or_else(|| param_err!("stage-1 model has no beat embedding"))?;
        embed_beats(b, &table.t())
    }

    /// One ε-prediction pass. With `capture`, also returns the post-spatial
    /// hidden states of the last `M` frames at every site (stage 2 only).
    pub fn forward(
        &self,
        z_t: &LatentTensor,
        t: usize,
        cond: &ConditionBundle,
        stage: Stage,
        capture: bool,
    ) -> Result<ForwardOutput> {
        let stage2 = stage == Stage::Two;
        if stage2 {
            if !self.has_temporal() {
                return Err(param_err!("stage-2 pass on a model without temporal modules"));
            }
            if !z_t.is_clip() {
                return Err(param_err!("stage-2 pass needs a clip-shaped latent"));
            }
        }
        let (h, w, c) = z_t.frame_dims();
        if c != self.topology.latent_channels {
            return Err(shape_err!("latent has {c} channels, model expects {}", self.topology.latent_channels));
        }
        let (c_in, c_skip, c_out) = preconditioning(t);
        let mut x = (z_t.batched()? * c_in)?;
        let frames = x.dim(0)?;
        if let Some(p) = &cond.pose {
            let p = if p.rank() == 3 { p.unsqueeze(0)? } else { p.clone() };
            let (pb, ph, pw, pc) = p.dims4()?;
            if (ph, pw, pc) != (h, w, c) || (pb != 1 && pb != frames) {
                return Err(shape_err!("pose residual {:?} vs latent {:?}", p.dims(), z_t.dims()));
            }
            x = x.broadcast_add(&p)?;
        }
        if let Some(r) = &cond.reference {
            if r.maps.len() != self.topology.site_count() {
                return Err(shape_err!("{} reference maps for {} sites", r.maps.len(), self.topology.site_count()));
            }
        }
        let (music, beat, motion) = if stage2 {
            if let Some(m) = &cond.motion {
                if m.per_site.len() != self.topology.site_count() {
                    return Err(shape_err!("motion context has {} sites", m.per_site.len()));
                }
            }
            (cond.music.as_ref(), cond.beat.as_ref(), cond.motion.as_ref())
        } else {
            (None, None, None)
        };
        let keep = self.topology.motion_frames.min(frames);
        let mut captured = Vec::new();

        let eps = self.unet.forward(&x, t as f64, &mut |i, h| {
            let mut h = h;
            if let Some(r) = &cond.reference {
                h = self.spatial[i].fuse(&h, &r.maps[i])?;
            }
            if let Some(text) = &cond.text {
                h = self.text_attn[i].forward(&h, text)?;
            }
            if !stage2 {
                return Ok(h);
            }
            let (b, hh, ww, d) = h.dims4()?;
            let tokens = h.reshape((b, hh * ww, d))?;
            if capture {
                captured.push(to_temporal(&tokens.narrow(0, b - keep, keep)?)?.detach());
            }
            let ctx = motion.map(|m| &m.per_site[i]);
            let out = self.temporal[i].forward(&tokens, music, beat, ctx)?;
            Ok(out.reshape((b, hh, ww, d))?)
        })?;

        let eps = ((eps * c_out)? + (z_t.batched()? * c_skip)?)?;
        let eps = if z_t.is_clip() { eps } else { eps.squeeze(0)? };
        Ok(ForwardOutput {
            eps,
            context: (capture && stage2).then_some(MotionContext { per_site: captured }),
        })
    }

    pub fn denoise_step(&self, z_t: &LatentTensor, t: usize, cond: &ConditionBundle, stage: Stage) -> Result<LatentTensor> {
        LatentTensor::new(self.forward(z_t, t, cond, stage, false)?.eps)
    }

    pub fn staged(&self, stage: Stage) -> Staged<'_> {
        Staged { model: self, stage }
    }

    /// Per-frame feature vectors for the Fréchet distance: the middle-level
    /// map of an unconditioned `t = 0` pass, averaged over space.
    pub fn frame_features(&self, z: &LatentTensor) -> Result<Vec<Vec<f64>>> {
        let x = z.batched()?;
        let mut feats = None;
        self.unet.forward(&x, 0.0, &mut |i, h| {
            if i == 2 {
                feats = Some(h.mean((1, 2))?);
            }
            Ok(h)
        })?;
        let f = feats.expect("site 2 visited").to_dtype(DType::F64)?;
        Ok(f.to_vec2::<f64>()?)
    }

    /// Zeroes the output projections of every beat module so they add
    /// nothing to the residual stream.
    pub fn disable_beat_module(&self) -> Result<()> {
        for p in self.store.group_params(ParamGroup::TemporalBeat) {
            if p.name().contains(".cross.to_out.") {
                p.var().set(&p.var().as_tensor().zeros_like()?)?;
            }
        }
        Ok(())
    }

    pub fn null_text_embedding(&self) -> TextEmbedding {
        self.text_encoder.null_embedding()
    }

    pub fn null_music_embedding(&self) -> Option<MusicEmbedding> {
        self.music_encoder.as_ref().map(MusicEncoder::null_embedding)
    }
}

/// Binds a model to one stage so it can drive the generic sampler and loss.
#[derive(Debug, Clone, Copy)]
pub struct Staged<'a> {
    pub model: &'a DanceModel,
    pub stage: Stage,
}

impl EpsModel for Staged<'_> {
    fn predict_eps(&self, z_t: &LatentTensor, t: usize, cond: &ConditionBundle) -> Result<Tensor> {
        Ok(self.model.forward(z_t, t, cond, self.stage, false)?.eps)
    }

    fn null_text(&self) -> Result<Option<TextEmbedding>> {
        Ok(Some(self.model.null_text_embedding()))
    }

    fn null_music(&self) -> Result<Option<MusicEmbedding>> {
        Ok(self.model.null_music_embedding())
    }
}
