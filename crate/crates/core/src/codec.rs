//! Exactly invertible image ↔ latent map: space-to-depth by the patch factor
//! followed by a fixed orthonormal channel mixing.

use candle_core::{DType, Device, Tensor};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{param_err, shape_err, Result};
use crate::frame::Image;
use crate::tensor::LatentTensor;

pub const DEFAULT_PATCH: usize = 4;
pub const DEFAULT_CODEC_SEED: u64 = 0x5eed_c0de;

#[derive(Debug, Clone)]
pub struct CodecConfig {
    patch: usize,
    /// Row-major `D×D` orthonormal matrix, `D = 3p²`.
    mixing: Vec<f64>,
    dtype: DType,
}

impl CodecConfig {
    /// Orthonormal mixing from the QR factor of a seeded Gaussian matrix.
    pub fn new(patch: usize, seed: u64, dtype: DType) -> Result<Self> {
        if patch == 0 {
            return Err(param_err!("patch factor must be positive"));
        }
        let d = 3 * patch * patch;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = DMatrix::<f64>::from_fn(d, d, |_, _| StandardNormal.sample(&mut rng));
        let q = g.qr().q();
        let mixing = (0..d).flat_map(|r| (0..d).map(move |c| (r, c))).map(|(r, c)| q[(r, c)]).collect();
        Ok(Self { patch, mixing, dtype })
    }

    pub fn identity(patch: usize, dtype: DType) -> Result<Self> {
        if patch == 0 {
            return Err(param_err!("patch factor must be positive"));
        }
        let d = 3 * patch * patch;
        let mixing = (0..d * d).map(|i| if i / d == i % d { 1.0 } else { 0.0 }).collect();
        Ok(Self { patch, mixing, dtype })
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    pub fn latent_channels(&self) -> usize {
        3 * self.patch * self.patch
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn mixing(&self) -> &[f64] {
        &self.mixing
    }

    fn mixing_tensor(&self) -> Result<Tensor> {
        let d = self.latent_channels();
        Ok(Tensor::from_slice(&self.mixing, (d, d), &Device::Cpu)?.to_dtype(self.dtype)?)
    }

    /// Encodes a `(B, H, W, 3)` pixel tensor to `(B, H/p, W/p, 3p²)`.
    pub fn encode_tensor(&self, x: &Tensor) -> Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        let p = self.patch;
        if c != 3 || h % p != 0 || w % p != 0 {
            return Err(param_err!("image {h}x{w}x{c} not divisible by patch factor {p}"));
        }
        let d = self.latent_channels();
        let blocks = x
            .to_dtype(self.dtype)?
            .reshape((b, h / p, p, w / p, p, 3))?
            .permute((0, 1, 3, 2, 4, 5))?
            .reshape((b * (h / p) * (w / p), d))?;
        Ok(blocks.matmul(&self.mixing_tensor()?)?.reshape((b, h / p, w / p, d))?)
    }

    /// Inverse of [`encode_tensor`](Self::encode_tensor) without clamping.
    pub fn decode_tensor(&self, z: &Tensor) -> Result<Tensor> {
        let (b, h, w, d) = z.dims4()?;
        let p = self.patch;
        if d != self.latent_channels() {
            return Err(shape_err!("latent has {d} channels, codec expects {}", self.latent_channels()));
        }
        let m_t = self.mixing_tensor()?.t()?;
        let blocks = z.reshape((b * h * w, d))?.matmul(&m_t)?;
        Ok(blocks
            .reshape((b, h, w, p, p, 3))?
            .permute((0, 1, 3, 2, 4, 5))?
            .reshape((b, h * p, w * p, 3))?)
    }

    /// Nearest latent whose decoded pixels lie in `[-1, 1]`: the codec is
    /// orthonormal, so clamping in pixel space is the exact projection.
    pub fn project_tensor(&self, z: &Tensor) -> Result<Tensor> {
        let batched = z.rank() == 4;
        let zb = if batched { z.clone() } else { z.unsqueeze(0)? };
        let x = self.decode_tensor(&zb)?.clamp(-1.0, 1.0)?;
        let out = self.encode_tensor(&x)?;
        Ok(if batched { out } else { out.squeeze(0)? })
    }
}

/// Frame latent `(H/p, W/p, 3p²)`.
pub fn encode(img: &Image, cfg: &CodecConfig) -> Result<LatentTensor> {
    let x = img.to_tensor(cfg.dtype)?.unsqueeze(0)?;
    LatentTensor::new(cfg.encode_tensor(&x)?.squeeze(0)?)
}

/// Clip latent `(K, H/p, W/p, 3p²)`.
pub fn encode_frames(frames: &[Image], cfg: &CodecConfig) -> Result<LatentTensor> {
    if frames.is_empty() {
        return Err(param_err!("no frames to encode"));
    }
    let ts = frames
        .iter()
        .map(|f| f.to_tensor(cfg.dtype))
        .collect::<Result<Vec<_>>>()?;
    LatentTensor::new(cfg.encode_tensor(&Tensor::stack(&ts, 0)?)?)
}

/// Decodes a frame latent, clamping pixels to `[-1, 1]`.
pub fn decode(z: &LatentTensor, cfg: &CodecConfig) -> Result<Image> {
    if z.is_clip() {
        return Err(shape_err!("decode expects a frame latent, got {:?}", z.dims()));
    }
    let x = cfg.decode_tensor(&z.tensor().unsqueeze(0)?)?;
    Image::from_tensor(&x.squeeze(0)?)
}

pub fn decode_frames(z: &LatentTensor, cfg: &CodecConfig) -> Result<Vec<Image>> {
    let x = cfg.decode_tensor(&z.batched()?)?;
    (0..x.dim(0)?).map(|i| Image::from_tensor(&x.get(i)?)).collect()
}
