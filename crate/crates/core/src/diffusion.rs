//! Noise schedule, closed-form forward diffusion, the ε-prediction loss with
//! condition dropout, and deterministic DDIM sampling with classifier-free
//! guidance.

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conditioning::{BeatEmbedding, MusicEmbedding, TextEmbedding};
use crate::error::{param_err, shape_err, Result};
use crate::temporal::MotionContext;
use crate::tensor::{normal_tensor, LatentTensor};
use crate::unet::ReferenceFeatures;

/// Default number of diffusion timesteps.
pub const DEFAULT_T: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;
pub const DEFAULT_GUIDANCE: f64 = 3.5;

/// Linear β schedule with its derived α and ᾱ tables.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(param_err!("schedule needs at least one timestep"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(param_err!(
                "need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
            ));
        }
        let betas: Vec<f64> = if steps == 1 {
            vec![beta_start]
        } else {
            let step = (beta_end - beta_start) / (steps - 1) as f64;
            (0..steps)
                .map(|i| if i == steps - 1 { beta_end } else { beta_start + step * i as f64 })
                .collect()
        };
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bars
            .get(t)
            .copied()
            .ok_or_else(|| param_err!("timestep {t} out of range 0..{}", self.len()))
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(DEFAULT_T, DEFAULT_BETA_START, DEFAULT_BETA_END).expect("valid default schedule")
    }
}

pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    NoiseSchedule::linear(steps, beta_start, beta_end)
}

/// `√ᾱ_t · z0 + √(1−ᾱ_t) · eps`.
pub fn forward_diffuse(
    z0: &LatentTensor,
    t: usize,
    eps: &LatentTensor,
    sched: &NoiseSchedule,
) -> Result<LatentTensor> {
    if z0.dims() != eps.dims() {
        return Err(shape_err!("z0 {:?} vs eps {:?}", z0.dims(), eps.dims()));
    }
    let out = diffuse_tensor(z0.tensor(), t, eps.tensor(), sched)?;
    Ok(LatentTensor::from_tensor_unchecked(out))
}

pub(crate) fn diffuse_tensor(z0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    let ab = sched.alpha_bar(t)?;
    Ok(((z0 * ab.sqrt())? + (eps * (1.0 - ab).sqrt())?)?)
}

/// Everything the denoiser may attend to. Any subset may be absent.
#[derive(Debug, Clone, Default)]
pub struct ConditionBundle {
    pub text: Option<TextEmbedding>,
    pub music: Option<MusicEmbedding>,
    pub beat: Option<BeatEmbedding>,
    pub reference: Option<ReferenceFeatures>,
    pub motion: Option<MotionContext>,
    /// Pose-mask residual in latent layout, added to the latent being denoised.
    pub pose: Option<Tensor>,
}

impl ConditionBundle {
    /// The guidance branch: text and music replaced by the model's null
    /// embeddings where the model provides them.
    pub fn unconditional<M: EpsModel + ?Sized>(&self, model: &M) -> Result<Self> {
        let mut out = self.clone();
        if out.text.is_some() {
            if let Some(null) = model.null_text()? {
                out.text = Some(null);
            }
        }
        if out.music.is_some() {
            if let Some(null) = model.null_music()? {
                out.music = Some(null);
            }
        }
        Ok(out)
    }
}

/// An ε-predictor. The trained network implements this, as do the analytic
/// predictors used to check the sampler.
pub trait EpsModel {
    /// Predicts the noise in `z_t`; the result has the shape of `z_t`.
    fn predict_eps(&self, z_t: &LatentTensor, t: usize, cond: &ConditionBundle) -> Result<Tensor>;

    fn null_text(&self) -> Result<Option<TextEmbedding>> {
        Ok(None)
    }

    fn null_music(&self) -> Result<Option<MusicEmbedding>> {
        Ok(None)
    }
}

/// One training example: a clean latent (frame or clip) and its conditions.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub z0: LatentTensor,
    pub cond: ConditionBundle,
}

/// Mean squared error between predicted and injected noise.
///
/// Each item draws its own timestep and noise; text and music are each
/// independently replaced by their null embeddings with probability
/// `drop_prob`.
pub fn denoising_loss<M, R>(
    model: &M,
    batch: &[TrainItem],
    sched: &NoiseSchedule,
    drop_prob: f64,
    rng: &mut R,
) -> Result<Tensor>
where
    M: EpsModel + ?Sized,
    R: Rng + ?Sized,
{
    if batch.is_empty() {
        return Err(param_err!("empty batch"));
    }
    if !(0.0..1.0).contains(&drop_prob) {
        return Err(param_err!("drop_prob {drop_prob} outside [0, 1)"));
    }
    let mut total: Option<Tensor> = None;
    for item in batch {
        let t = rng.random_range(0..sched.len());
        let z0 = item.z0.tensor();
        let eps = normal_tensor(z0.dims(), z0.dtype(), z0.device(), rng)?;
        let z_t = LatentTensor::from_tensor_unchecked(diffuse_tensor(z0, t, &eps, sched)?);

        let mut cond = item.cond.clone();
        // Rolls are always drawn so the random stream does not depend on
        // drop_prob.
        let drop_text = rng.random::<f64>() < drop_prob;
        let drop_music = rng.random::<f64>() < drop_prob;
        if drop_text && cond.text.is_some() {
            if let Some(null) = model.null_text()? {
                cond.text = Some(null);
            }
        }
        if drop_music && cond.music.is_some() {
            if let Some(null) = model.null_music()? {
                cond.music = Some(null);
            }
        }

        let pred = model.predict_eps(&z_t, t, &cond)?;
        let mse = (pred - &eps)?.sqr()?.mean_all()?;
        total = Some(match total {
            None => mse,
            Some(acc) => (acc + mse)?,
        });
    }
    Ok((total.expect("non-empty batch") / batch.len() as f64)?)
}

/// Evenly strided descending timesteps from `T−1` down to `0`.
pub fn ddim_timesteps(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > total {
        return Err(param_err!("DDIM steps must be in 1..={total}, got {steps}"));
    }
    if steps == 1 {
        return Ok(vec![total - 1]);
    }
    let span = (total - 1) as f64;
    Ok((0..steps)
        .map(|i| (span * (steps - 1 - i) as f64 / (steps - 1) as f64).round() as usize)
        .collect())
}

/// One η=0 DDIM update from `t` to `t_prev` (`None` means the clean end point).
pub fn ddim_update(
    z_t: &Tensor,
    eps: &Tensor,
    t: usize,
    t_prev: Option<usize>,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    let ab = sched.alpha_bar(t)?;
    let ab_prev = match t_prev {
        Some(tp) => sched.alpha_bar(tp)?,
        None => 1.0,
    };
    let x0 = ((z_t - (eps * (1.0 - ab).sqrt())?)? / ab.sqrt())?;
    if t_prev.is_none() {
        return Ok(x0);
    }
    Ok(((x0 * ab_prev.sqrt())? + (eps * (1.0 - ab_prev).sqrt())?)?)
}

/// `ε_u + s·(ε_c − ε_u)`; the unconditional pass is skipped when `s = 1`.
pub fn guided_eps<M: EpsModel + ?Sized>(
    model: &M,
    z_t: &LatentTensor,
    t: usize,
    cond: &ConditionBundle,
    uncond: &ConditionBundle,
    guidance_scale: f64,
) -> Result<Tensor> {
    let eps_c = model.predict_eps(z_t, t, cond)?.detach();
    if guidance_scale == 1.0 {
        return Ok(eps_c);
    }
    let eps_u = model.predict_eps(z_t, t, uncond)?.detach();
    Ok((&eps_u + ((eps_c - &eps_u)? * guidance_scale)?)?)
}

/// Deterministic DDIM sampling from seeded Gaussian noise of `shape`.
#[allow(clippy::too_many_arguments)]
pub fn ddim_sample<M: EpsModel + ?Sized>(
    model: &M,
    cond: &ConditionBundle,
    sched: &NoiseSchedule,
    steps: usize,
    guidance_scale: f64,
    seed: u64,
    shape: &[usize],
    dtype: DType,
) -> Result<LatentTensor> {
    ddim_sample_projected(model, cond, sched, steps, guidance_scale, seed, shape, dtype, None)
}

/// Maps a predicted clean latent onto the data domain.
pub type X0Projection<'a> = dyn Fn(&Tensor) -> Result<Tensor> + 'a;

/// DDIM where each step's predicted `x0` is passed through `project` and ε̂ is
/// re-derived from the projected `x0`, keeping the trajectory on the data
/// domain when ε̂ is inaccurate at high noise levels.
#[allow(clippy::too_many_arguments)]
pub fn ddim_sample_projected<M: EpsModel + ?Sized>(
    model: &M,
    cond: &ConditionBundle,
    sched: &NoiseSchedule,
    steps: usize,
    guidance_scale: f64,
    seed: u64,
    shape: &[usize],
    dtype: DType,
    project: Option<&X0Projection>,
) -> Result<LatentTensor> {
    if !(guidance_scale >= 0.0) {
        return Err(param_err!("guidance scale must be >= 0, got {guidance_scale}"));
    }
    let timesteps = ddim_timesteps(sched.len(), steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z_init = normal_tensor(shape, dtype, &Device::Cpu, &mut rng)?;
    let mut z = LatentTensor::new(z_init)?;
    let uncond = cond.unconditional(model)?;
    for (i, &t) in timesteps.iter().enumerate() {
        let mut eps = guided_eps(model, &z, t, cond, &uncond, guidance_scale)?;
        if let Some(project) = project {
            let ab = sched.alpha_bar(t)?;
            let x0 = ddim_update(z.tensor(), &eps, t, None, sched)?;
            let x0 = project(&x0)?;
            eps = ((z.tensor() - (x0 * ab.sqrt())?)? / (1.0 - ab).sqrt())?;
        }
        let next = ddim_update(z.tensor(), &eps, t, timesteps.get(i + 1).copied(), sched)?;
        z = LatentTensor::from_tensor_unchecked(next.detach());
    }
    LatentTensor::new(z.into_tensor())
}
