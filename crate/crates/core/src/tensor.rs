//! Latent tensors and seeded tensor construction.

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{shape_err, Result};

/// A latent frame `(H, W, C)` or clip `(K, H, W, C)`.
///
/// The rank distinguishes the two variants. Construction checks that every
/// entry is finite.
#[derive(Debug, Clone)]
pub struct LatentTensor(Tensor);

impl LatentTensor {
    pub fn new(t: Tensor) -> Result<Self> {
        let rank = t.rank();
        if rank != 3 && rank != 4 {
            return Err(shape_err!(
                "latent must be (H, W, C) or (K, H, W, C), got {:?}",
                t.dims()
            ));
        }
        if rank == 4 && t.dim(0)? == 0 {
            return Err(shape_err!("clip latent with zero frames"));
        }
        if !all_finite(&t)? {
            return Err(shape_err!("latent contains non-finite entries"));
        }
        Ok(Self(t))
    }

    /// Wraps a tensor without the finiteness scan. Used on hot paths where the
    /// tensor was produced by finite arithmetic on validated inputs.
    pub(crate) fn from_tensor_unchecked(t: Tensor) -> Self {
        debug_assert!(t.rank() == 3 || t.rank() == 4);
        Self(t)
    }

    pub fn is_clip(&self) -> bool {
        self.0.rank() == 4
    }

    /// Number of frames for a clip, `None` for a single frame.
    pub fn frame_count(&self) -> Option<usize> {
        self.is_clip().then(|| self.0.dims()[0])
    }

    /// `(H, W, C)` of one frame.
    pub fn frame_dims(&self) -> (usize, usize, usize) {
        let d = self.0.dims();
        let o = d.len() - 3;
        (d[o], d[o + 1], d[o + 2])
    }

    pub fn dims(&self) -> &[usize] {
        self.0.dims()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    /// Batched view `(B, H, W, C)`: a frame becomes a batch of one.
    pub fn batched(&self) -> Result<Tensor> {
        Ok(if self.is_clip() {
            self.0.clone()
        } else {
            self.0.unsqueeze(0)?
        })
    }

    pub fn to_vec(&self) -> Result<Vec<f64>> {
        Ok(self
            .0
            .to_dtype(DType::F64)?
            .flatten_all()?
            .to_vec1::<f64>()?)
    }
}

pub(crate) fn all_finite(t: &Tensor) -> Result<bool> {
    let s = t.to_dtype(DType::F64)?.abs()?.sum_all()?.to_scalar::<f64>()?;
    Ok(s.is_finite())
}

/// Standard-normal tensor drawn from `rng` in row-major order.
pub fn normal_tensor<R: Rng + ?Sized>(
    shape: &[usize],
    dtype: DType,
    device: &Device,
    rng: &mut R,
) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Ok(Tensor::from_vec(data, shape, device)?.to_dtype(dtype)?)
}

pub(crate) fn tensor_from_f32(data: Vec<f32>, shape: &[usize], dtype: DType) -> Result<Tensor> {
    Ok(Tensor::from_vec(data, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

pub(crate) fn to_f32_vec(t: &Tensor) -> Result<Vec<f32>> {
    Ok(t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?)
}
