//! Temporal modules inserted at every attention site in the stage-2 network.
//!
//! Hidden states arrive in the spatial view `(K, HW, d)`: frames are the
//! batch. Temporal attention works on the transposed view `(HW, K, d)` so
//! every spatial position attends across frames.

use candle_core::{DType, Tensor};

use crate::conditioning::{BeatEmbedding, MusicEmbedding};
use crate::error::{shape_err, Result};
use crate::nn::{sinusoidal, Attention, Builder, LayerNorm, ParamGroup};

/// Post-spatial hidden states of the last `M` frames of the preceding chunk,
/// one `(HW, M, d)` tensor per attention site.
#[derive(Debug, Clone)]
pub struct MotionContext {
    pub per_site: Vec<Tensor>,
}

impl MotionContext {
    pub fn frames(&self) -> usize {
        self.per_site.first().map_or(0, |t| t.dims()[1])
    }

    pub fn detach(&self) -> Self {
        Self {
            per_site: self.per_site.iter().map(Tensor::detach).collect(),
        }
    }
}

/// `(K, HW, d)` → `(HW, K, d)`.
pub fn to_temporal(z: &Tensor) -> Result<Tensor> {
    Ok(z.transpose(0, 1)?.contiguous()?)
}

/// `(HW, K, d)` → `(K, HW, d)`.
pub fn to_spatial(z: &Tensor) -> Result<Tensor> {
    Ok(z.transpose(0, 1)?.contiguous()?)
}

fn frame_positions(n: usize, dim: usize, dtype: DType) -> Result<Tensor> {
    let pos: Vec<f64> = (0..n).map(|i| i as f64).collect();
    sinusoidal(&pos, dim, dtype)
}

/// Self-attention along the frame axis with sinusoidal frame positions.
#[derive(Debug, Clone)]
pub struct TemporalSelfAttention {
    norm: LayerNorm,
    attn: Attention,
}

impl TemporalSelfAttention {
    pub fn new(b: &mut Builder, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(&mut b.pp("norm"), dim)?,
            attn: Attention::new(&mut b.pp("attn"), dim, dim, heads, true)?,
        })
    }

    /// `(HW, K, d)` → `(HW, K, d)`.
    pub fn forward(&self, zt: &Tensor) -> Result<Tensor> {
        let (_, k, d) = zt.dims3()?;
        let h = self
            .norm
            .forward(zt)?
            .broadcast_add(&frame_positions(k, d, zt.dtype())?.unsqueeze(0)?)?;
        Ok((zt + self.attn.forward(&h, &h)?)?)
    }
}

/// Cross-attention from every position of every frame to the music tokens,
/// followed by temporal self-attention.
#[derive(Debug, Clone)]
pub struct MusicModule {
    norm: LayerNorm,
    cross: Attention,
    temporal: TemporalSelfAttention,
}

impl MusicModule {
    pub fn new(b: &mut Builder, dim: usize, music_dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(&mut b.pp("norm"), dim)?,
            cross: Attention::new(&mut b.pp("cross"), dim, music_dim, heads, true)?,
            temporal: TemporalSelfAttention::new(&mut b.pp("temporal"), dim, heads)?,
        })
    }

    pub fn forward(&self, z: &Tensor, music: &MusicEmbedding) -> Result<Tensor> {
        let kv = music.tokens.unsqueeze(0)?;
        let z = (z + self.cross.forward(&self.norm.forward(z)?, &kv)?)?;
        to_spatial(&self.temporal.forward(&to_temporal(&z)?)?)
    }
}

/// Frame `i` attends over the beat rows with matching sinusoidal positions
/// on both sides, so it can single out its own row; then temporal
/// self-attention.
#[derive(Debug, Clone)]
pub struct BeatModule {
    norm: LayerNorm,
    cross: Attention,
    temporal: TemporalSelfAttention,
}

impl BeatModule {
    pub fn new(b: &mut Builder, dim: usize, beat_dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(&mut b.pp("norm"), dim)?,
            cross: Attention::new(&mut b.pp("cross"), dim, beat_dim, heads, true)?,
            temporal: TemporalSelfAttention::new(&mut b.pp("temporal"), dim, heads)?,
        })
    }

    pub fn forward(&self, z: &Tensor, beat: &BeatEmbedding) -> Result<Tensor> {
        let (k, hw, d) = z.dims3()?;
        let (kb, db) = beat.rows.dims2()?;
        if kb != k {
            return Err(shape_err!("{kb} beat rows for {k} frames"));
        }
        let q = self
            .norm
            .forward(z)?
            .broadcast_add(&frame_positions(k, d, z.dtype())?.unsqueeze(1)?)?;
        let rows = (&beat.rows + frame_positions(k, db, z.dtype())?)?;
        let kv = rows.unsqueeze(0)?.broadcast_as((k, kb, db))?.contiguous()?;
        let z = (z + self.cross.forward(&q, &kv)?)?;
        debug_assert_eq!(z.dims(), &[k, hw, d]);
        to_spatial(&self.temporal.forward(&to_temporal(&z)?)?)
    }
}

/// Temporal attention over `[context; current]`: queries are the current
/// frames, keys and values also cover the `M` context frames.
#[derive(Debug, Clone)]
pub struct MotionModule {
    norm: LayerNorm,
    attn: Attention,
}

impl MotionModule {
    pub fn new(b: &mut Builder, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(&mut b.pp("norm"), dim)?,
            attn: Attention::new(&mut b.pp("attn"), dim, dim, heads, true)?,
        })
    }

    pub fn forward(&self, z: &Tensor, context: Option<&Tensor>) -> Result<Tensor> {
        let zt = to_temporal(z)?;
        let (hw, k, d) = zt.dims3()?;
        let full = match context {
            Some(c) => {
                let (chw, _, cd) = c.dims3()?;
                if chw != hw || cd != d {
                    return Err(shape_err!("motion context {:?} vs hidden {:?}", c.dims(), zt.dims()));
                }
                Tensor::cat(&[c, &zt], 1)?
            }
            None => zt.clone(),
        };
        let n = full.dim(1)?;
        let h = self
            .norm
            .forward(&full)?
            .broadcast_add(&frame_positions(n, d, z.dtype())?.unsqueeze(0)?)?;
        let q = h.narrow(1, n - k, k)?;
        to_spatial(&(zt + self.attn.forward(&q, &h)?)?)
    }
}

/// The three temporal modules of one attention site, applied in order
/// music → beat → motion. A module whose condition is absent is skipped.
#[derive(Debug, Clone)]
pub struct TemporalSite {
    pub music: MusicModule,
    pub beat: BeatModule,
    pub motion: MotionModule,
}

impl TemporalSite {
    pub fn new(b: &mut Builder, dim: usize, music_dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            music: MusicModule::new(&mut b.group(ParamGroup::TemporalMusic).pp("music"), dim, music_dim, heads)?,
            beat: BeatModule::new(&mut b.group(ParamGroup::TemporalBeat).pp("beat"), dim, music_dim, heads)?,
            motion: MotionModule::new(&mut b.group(ParamGroup::TemporalMotion).pp("motion"), dim, heads)?,
        })
    }

    pub fn forward(
        &self,
        z: &Tensor,
        music: Option<&MusicEmbedding>,
        beat: Option<&BeatEmbedding>,
        context: Option<&Tensor>,
    ) -> Result<Tensor> {
        let mut z = z.clone();
        if let Some(m) = music {
            z = self.music.forward(&z, m)?;
        }
        if let Some(b) = beat {
            z = self.beat.forward(&z, b)?;
        }
        self.motion.forward(&z, context)
    }
}
