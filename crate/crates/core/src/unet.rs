//! U-Net backbone shared by the denoiser and its ReferenceNet twin, plus the
//! spatial/text attention blocks that sit at each attention site.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::conditioning::TextEmbedding;
use crate::error::{param_err, shape_err, Result};
use crate::nn::{sinusoidal, Attention, Builder, Conv3x3, Downsample, GroupNorm, LayerNorm, Linear, ParamGroup, Upsample};

/// Attention sites in forward order: after the first encoder block, after
/// the second, after the middle block, after each decoder block.
pub const SITE_LEVELS: [usize; 5] = [0, 1, 2, 1, 0];

/// Everything needed to rebuild a network with identically named parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    pub base_width: usize,
    pub heads: usize,
    pub norm_groups: usize,
    pub latent_channels: usize,
    pub patch: usize,
    pub text_dim: usize,
    pub max_text_tokens: usize,
    pub vocab: Vec<String>,
    pub max_music_tokens: usize,
    /// Stage-2 networks carry temporal modules and the music encoder.
    pub temporal: bool,
    pub motion_frames: usize,
}

impl Topology {
    pub fn new(vocab: Vec<String>) -> Self {
        Self {
            base_width: 64,
            heads: 4,
            norm_groups: 8,
            latent_channels: 48,
            patch: crate::codec::DEFAULT_PATCH,
            text_dim: 64,
            max_text_tokens: 16,
            vocab,
            max_music_tokens: 64,
            temporal: false,
            motion_frames: 2,
        }
    }

    pub fn with_temporal(&self, temporal: bool) -> Self {
        Self {
            temporal,
            ..self.clone()
        }
    }

    /// Channel widths at the three resolution levels.
    pub fn widths(&self) -> [usize; 3] {
        [self.base_width, 2 * self.base_width, 2 * self.base_width]
    }

    pub fn music_dim(&self) -> usize {
        self.base_width
    }

    pub fn site_count(&self) -> usize {
        SITE_LEVELS.len()
    }

    /// `(H, W, d)` of each site's feature map for an `h × w` latent.
    pub fn site_shapes(&self, h: usize, w: usize) -> Vec<(usize, usize, usize)> {
        let widths = self.widths();
        SITE_LEVELS
            .iter()
            .map(|&l| (h >> l, w >> l, widths[l]))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.widths();
        for &c in &w {
            if c % self.heads != 0 || c % self.norm_groups != 0 {
                return Err(param_err!("width {c} incompatible with {} heads / {} groups", self.heads, self.norm_groups));
            }
        }
        if self.text_dim % self.heads != 0 || self.text_dim % 2 != 0 {
            return Err(param_err!("text width {} incompatible with {} heads", self.text_dim, self.heads));
        }
        if self.latent_channels == 0 || self.patch == 0 || self.max_text_tokens == 0 || self.max_music_tokens == 0 {
            return Err(param_err!("topology dimensions must be positive"));
        }
        if self.vocab.first().map(String::as_str) != Some(crate::conditioning::UNK) {
            return Err(param_err!("vocabulary must start with {}", crate::conditioning::UNK));
        }
        Ok(())
    }

    /// True when `other` has the same appearance network, so stage-1 groups
    /// can be loaded into it.
    pub fn appearance_compatible(&self, other: &Topology) -> bool {
        self.with_temporal(false) == other.with_temporal(false)
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv3x3,
    temb: Linear,
    norm2: GroupNorm,
    conv2: Conv3x3,
    skip: Option<Linear>,
}

impl ResBlock {
    fn new(b: &mut Builder, time_group: ParamGroup, c_in: usize, c_out: usize, tdim: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(&mut b.pp("norm1"), c_in, groups)?,
            conv1: Conv3x3::new(&mut b.pp("conv1"), c_in, c_out)?,
            temb: Linear::new(&mut b.group(time_group).pp("temb"), tdim, c_out)?,
            norm2: GroupNorm::new(&mut b.pp("norm2"), c_out, groups)?,
            conv2: Conv3x3::new(&mut b.pp("conv2"), c_out, c_out)?,
            skip: if c_in == c_out {
                None
            } else {
                Some(Linear::new(&mut b.pp("skip"), c_in, c_out)?)
            },
        })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        let c = h.dim(3)?;
        let h = h.broadcast_add(&self.temb.forward(temb)?.reshape((1, 1, 1, c))?)?;
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }
}

/// Three-level residual U-Net. Attention sites are supplied by the caller as
/// a closure receiving `(site index, feature map)`.
#[derive(Debug, Clone)]
pub(crate) struct UNet {
    time1: Linear,
    time2: Linear,
    conv_in: Conv3x3,
    enc1: ResBlock,
    down1: Downsample,
    enc2: ResBlock,
    down2: Downsample,
    mid: ResBlock,
    up2: Upsample,
    dec2: ResBlock,
    up1: Upsample,
    dec1: ResBlock,
    out: Option<(GroupNorm, Conv3x3)>,
    base_width: usize,
}

pub(crate) type SiteFn<'a> = dyn FnMut(usize, Tensor) -> Result<Tensor> + 'a;

impl UNet {
    pub(crate) fn new(b: &mut Builder, topo: &Topology, time_group: ParamGroup, with_out: bool) -> Result<Self> {
        let [c1, c2, c3] = topo.widths();
        let g = topo.norm_groups;
        let tdim = 4 * c1;
        let mut tb = b.group(time_group);
        let time1 = Linear::new(&mut tb.pp("time_mlp1"), c1, tdim)?;
        let time2 = Linear::new(&mut tb.pp("time_mlp2"), tdim, tdim)?;
        Ok(Self {
            time1,
            time2,
            conv_in: Conv3x3::new(&mut b.pp("conv_in"), topo.latent_channels, c1)?,
            enc1: ResBlock::new(&mut b.pp("enc1"), time_group, c1, c1, tdim, g)?,
            down1: Downsample::new(&mut b.pp("down1"), c1, c2)?,
            enc2: ResBlock::new(&mut b.pp("enc2"), time_group, c2, c2, tdim, g)?,
            down2: Downsample::new(&mut b.pp("down2"), c2, c3)?,
            mid: ResBlock::new(&mut b.pp("mid"), time_group, c3, c3, tdim, g)?,
            up2: Upsample::new(&mut b.pp("up2"), c3, c2)?,
            dec2: ResBlock::new(&mut b.pp("dec2"), time_group, 2 * c2, c2, tdim, g)?,
            up1: Upsample::new(&mut b.pp("up1"), c2, c1)?,
            dec1: ResBlock::new(&mut b.pp("dec1"), time_group, 2 * c1, c1, tdim, g)?,
            out: if with_out {
                Some((
                    GroupNorm::new(&mut b.pp("out_norm"), c1, g)?,
                    Conv3x3::new(&mut b.pp("conv_out"), c1, topo.latent_channels)?,
                ))
            } else {
                None
            },
            base_width: c1,
        })
    }

    fn time_embedding(&self, t: f64, dtype: DType) -> Result<Tensor> {
        let e = sinusoidal(&[t], self.base_width, dtype)?;
        Ok(self.time2.forward(&self.time1.forward(&e)?.silu()?)?.silu()?)
    }

    /// `x`: `(B, H, W, C_z)`. Returns the output-head result, or the last
    /// decoder feature map when the network has no output head.
    pub(crate) fn forward(&self, x: &Tensor, t: f64, site: &mut SiteFn) -> Result<Tensor> {
        let (_, h, w, _) = x.dims4()?;
        if h % 4 != 0 || w % 4 != 0 {
            return Err(shape_err!("latent {h}x{w} must be divisible by 4"));
        }
        let temb = self.time_embedding(t, x.dtype())?;
        let h = self.conv_in.forward(x)?;
        let h = site(0, self.enc1.forward(&h, &temb)?)?;
        let s1 = h.clone();
        let h = site(1, self.enc2.forward(&self.down1.forward(&h)?, &temb)?)?;
        let s2 = h.clone();
        let h = site(2, self.mid.forward(&self.down2.forward(&h)?, &temb)?)?;
        let h = Tensor::cat(&[&self.up2.forward(&h)?, &s2], 3)?;
        let h = site(3, self.dec2.forward(&h, &temb)?)?;
        let h = Tensor::cat(&[&self.up1.forward(&h)?, &s1], 3)?;
        let h = site(4, self.dec1.forward(&h, &temb)?)?;
        match &self.out {
            Some((norm, conv)) => conv.forward(&norm.forward(&h)?.silu()?),
            None => Ok(h),
        }
    }
}

/// Pre-attention ReferenceNet feature maps, one `(1, H, W, d)` per site.
#[derive(Debug, Clone)]
pub struct ReferenceFeatures {
    pub maps: Vec<Tensor>,
}

/// Pre-norm self-attention; with a reference map, keys and values also cover
/// the reference tokens.
#[derive(Debug, Clone)]
pub struct SpatialAttention {
    norm: LayerNorm,
    attn: Attention,
}

impl SpatialAttention {
    pub fn new(b: &mut Builder, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(&mut b.pp("norm"), dim)?,
            attn: Attention::new(&mut b.pp("attn"), dim, dim, heads, false)?,
        })
    }

    pub fn self_attend(&self, x: &Tensor) -> Result<Tensor> {
        let (b, h, w, d) = x.dims4()?;
        let tokens = x.reshape((b, h * w, d))?;
        let n = self.norm.forward(&tokens)?;
        Ok((tokens + self.attn.forward(&n, &n)?)?.reshape((b, h, w, d))?)
    }

    /// Width-concatenated fusion. `x_d`: `(B, H, W, d)`; `x_r`: `(1, H, W, d)`
    /// or `(B, H, W, d)`. Only the `x_d` half of the joint token grid is
    /// queried, which is exactly the half that would be kept afterwards.
    pub fn fuse(&self, x_d: &Tensor, x_r: &Tensor) -> Result<Tensor> {
        let (b, h, w, d) = x_d.dims4()?;
        let (br, hr, wr, dr) = x_r.dims4()?;
        if (hr, wr, dr) != (h, w, d) || (br != 1 && br != b) {
            return Err(param_err!("reference map {:?} does not match {:?}", x_r.dims(), x_d.dims()));
        }
        let tokens = x_d.reshape((b, h * w, d))?;
        let n_d = self.norm.forward(&tokens)?;
        let n_r = self.norm.forward(&x_r.reshape((br, h * w, d))?)?;
        let n_r = if br == b { n_r } else { n_r.broadcast_as((b, h * w, d))?.contiguous()? };
        let kv = Tensor::cat(&[&n_d, &n_r], 1)?;
        Ok((tokens + self.attn.forward(&n_d, &kv)?)?.reshape((b, h, w, d))?)
    }

    /// The literal construction: concatenate along width, attend over all
    /// `2·H·W` tokens, keep the first half. Used to check [`Self::fuse`].
    pub fn fuse_concat(&self, x_d: &Tensor, x_r: &Tensor) -> Result<Tensor> {
        let (b, h, w, d) = x_d.dims4()?;
        let x_r = x_r.broadcast_as((b, h, w, d))?;
        let grid = Tensor::cat(&[x_d, &x_r], 2)?;
        let tokens = grid.reshape((b, 2 * h * w, d))?;
        let n = self.norm.forward(&tokens)?;
        let out = (tokens + self.attn.forward(&n, &n)?)?.reshape((b, h, 2 * w, d))?;
        Ok(out.narrow(2, 0, w)?.contiguous()?)
    }
}

pub fn fuse_spatial(block: &SpatialAttention, x_d: &Tensor, x_r: &Tensor) -> Result<Tensor> {
    block.fuse(x_d, x_r)
}

#[derive(Debug, Clone)]
pub struct TextCrossAttention {
    norm: LayerNorm,
    attn: Attention,
}

impl TextCrossAttention {
    pub fn new(b: &mut Builder, dim: usize, text_dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(&mut b.pp("norm"), dim)?,
            attn: Attention::new(&mut b.pp("attn"), dim, text_dim, heads, true)?,
        })
    }

    pub fn forward(&self, x: &Tensor, text: &TextEmbedding) -> Result<Tensor> {
        let (b, h, w, d) = x.dims4()?;
        let tokens = x.reshape((b, h * w, d))?;
        let kv = text.tokens.unsqueeze(0)?;
        Ok((&tokens + self.attn.forward(&self.norm.forward(&tokens)?, &kv)?)?.reshape((b, h, w, d))?)
    }
}

pub fn cross_attend_text(block: &TextCrossAttention, x: &Tensor, text: &TextEmbedding) -> Result<Tensor> {
    block.forward(x, text)
}
