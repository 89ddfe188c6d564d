//! Frame metrics, a Fréchet feature distance and the beat-alignment score.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::beats::BeatVector;
use crate::error::{param_err, Result};
use crate::frame::Image;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = (0.01 * 255.0) * (0.01 * 255.0);
const SSIM_C2: f64 = (0.03 * 255.0) * (0.03 * 255.0);
const SHRINKAGE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// `f64::INFINITY` for identical inputs; serialised as the string `"inf"`.
    #[serde(with = "inf_sentinel")]
    pub psnr_db: f64,
    pub ssim: f64,
    pub frechet: f64,
    pub beat_alignment: f64,
    pub n_frames: usize,
}

mod inf_sentinel {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            Repr::Text("inf".into()).serialize(s)
        } else {
            Repr::Num(*v).serialize(s)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("bad psnr value {t}"))),
        }
    }
}

fn to_255(v: f32) -> f64 {
    (v as f64 + 1.0) * 127.5
}

fn check_same(a: &Image, b: &Image) -> Result<()> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(param_err!(
            "image shapes differ: {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        ));
    }
    Ok(())
}

/// PSNR in dB on the 0–255 scale.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    check_same(a, b)?;
    let n = a.pixels().len() as f64;
    let mse = a
        .pixels()
        .iter()
        .zip(b.pixels())
        .map(|(&x, &y)| (to_255(x) - to_255(y)).powi(2))
        .sum::<f64>()
        / n;
    Ok(psnr_from_mse(mse))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        20.0 * (255.0 / mse.sqrt()).log10()
    }
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering of an `h × w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| g[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| g[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

fn channel(img: &Image, c: usize) -> Vec<f64> {
    img.pixels().chunks_exact(3).map(|p| to_255(p[c])).collect()
}

/// Mean SSIM over all valid 11×11 Gaussian windows, averaged over channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_same(a, b)?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(param_err!("SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"));
    }
    let g = gaussian_window();
    let mut total = 0.0;
    for c in 0..3 {
        let x = channel(a, c);
        let y = channel(b, c);
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let mx = filter_valid(&x, h, w, &g);
        let my = filter_valid(&y, h, w, &g);
        let sxx = filter_valid(&xx, h, w, &g);
        let syy = filter_valid(&yy, h, w, &g);
        let sxy = filter_valid(&xy, h, w, &g);
        let mut acc = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cxy = sxy[i] - ux * uy;
            acc += ((2.0 * ux * uy + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2));
        }
        total += acc / mx.len() as f64;
    }
    Ok(total / 3.0)
}

fn moments(set: &[Vec<f64>], dim: usize) -> (DVector<f64>, DMatrix<f64>) {
    let n = set.len() as f64;
    let mut mu = DVector::zeros(dim);
    for v in set {
        mu += DVector::from_column_slice(v);
    }
    mu /= n;
    let mut cov = DMatrix::zeros(dim, dim);
    for v in set {
        let d = DVector::from_column_slice(v) - &mu;
        cov += &d * d.transpose();
    }
    let denom = if set.len() > 1 { n - 1.0 } else { 1.0 };
    cov /= denom;
    cov += DMatrix::identity(dim, dim) * SHRINKAGE;
    (mu, cov)
}

/// Square root of a symmetric positive semi-definite matrix; negative
/// eigenvalues from round-off are clamped to zero.
pub fn sqrtm_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits of two feature sets, with
/// `Tr((Σa Σb)^½)` computed as `Tr((Σa^½ Σb Σa^½)^½)`.
pub fn frechet_feature_distance(set_a: &[Vec<f64>], set_b: &[Vec<f64>]) -> Result<f64> {
    let dim = set_a
        .first()
        .or(set_b.first())
        .map(Vec::len)
        .ok_or_else(|| param_err!("empty feature sets"))?;
    if set_a.is_empty() || set_b.is_empty() {
        return Err(param_err!("empty feature set"));
    }
    if dim == 0 || set_a.iter().chain(set_b).any(|v| v.len() != dim) {
        return Err(param_err!("feature dimensions differ"));
    }
    let (mu_a, cov_a) = moments(set_a, dim);
    let (mu_b, cov_b) = moments(set_b, dim);
    let root_a = sqrtm_psd(&cov_a);
    let cross = sqrtm_psd(&(&root_a * &cov_b * &root_a));
    let d = (mu_a - mu_b).norm_squared() + cov_a.trace() + cov_b.trace() - 2.0 * cross.trace();
    Ok(d.max(0.0))
}

/// Per-frame motion energy: mean absolute difference to the previous frame,
/// with `e[0] = e[1]`.
pub fn motion_energy(frames: &[Image]) -> Result<Vec<f64>> {
    if frames.len() < 2 {
        return Err(param_err!("motion energy needs at least 2 frames"));
    }
    for f in &frames[1..] {
        check_same(&frames[0], f)?;
    }
    let mut e = vec![0.0; frames.len()];
    for k in 1..frames.len() {
        let (a, b) = (frames[k - 1].pixels(), frames[k].pixels());
        e[k] = a.iter().zip(b).map(|(&x, &y)| (x - y).abs() as f64).sum::<f64>() / a.len() as f64;
    }
    e[0] = e[1];
    Ok(e)
}

/// Beat indicator convolved with a unit triangle of half-width one frame,
/// averaged over each frame interval: weights `[1/8, 3/4, 1/8]`.
pub fn smoothed_beats(b: &BeatVector) -> Vec<f64> {
    let bits = b.bits();
    (0..bits.len())
        .map(|k| {
            let at = |i: isize| -> f64 {
                if i < 0 || i as usize >= bits.len() {
                    0.0
                } else {
                    bits[i as usize] as f64
                }
            };
            let k = k as isize;
            0.75 * at(k) + 0.125 * (at(k - 1) + at(k + 1))
        })
        .collect()
}

/// Pearson correlation; `0` when either side has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    let denom = (sxx * syy).sqrt();
    if denom <= 1e-12 * n.max(1.0) || !denom.is_finite() {
        0.0
    } else {
        sxy / denom
    }
}

pub fn beat_alignment_from_energy(energy: &[f64], beats: &BeatVector) -> Result<f64> {
    if energy.len() != beats.len() {
        return Err(param_err!("{} energy values for {} beat bits", energy.len(), beats.len()));
    }
    if energy.len() < 3 {
        return Err(param_err!("beat alignment needs at least 3 frames"));
    }
    Ok(pearson(energy, &smoothed_beats(beats)))
}

/// Correlation between motion energy and the smoothed beat indicator.
pub fn beat_alignment_score(frames: &[Image], beats: &BeatVector) -> Result<f64> {
    if frames.len() != beats.len() {
        return Err(param_err!("{} frames for {} beat bits", frames.len(), beats.len()));
    }
    if frames.len() < 3 {
        return Err(param_err!("beat alignment needs at least 3 frames"));
    }
    beat_alignment_from_energy(&motion_energy(frames)?, beats)
}

/// Per-clip report: frame metrics averaged over aligned frame pairs, the
/// Fréchet distance between the supplied feature sets, and the beat score of
/// the predicted frames.
pub fn evaluate_clip(
    pred: &[Image],
    truth: &[Image],
    beats: &BeatVector,
    pred_features: &[Vec<f64>],
    truth_features: &[Vec<f64>],
) -> Result<MetricReport> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(param_err!("{} predicted vs {} reference frames", pred.len(), truth.len()));
    }
    let mut mse = 0.0;
    let mut s = 0.0;
    for (p, t) in pred.iter().zip(truth) {
        check_same(p, t)?;
        mse += p
            .pixels()
            .iter()
            .zip(t.pixels())
            .map(|(&x, &y)| (to_255(x) - to_255(y)).powi(2))
            .sum::<f64>()
            / p.pixels().len() as f64;
        s += ssim(p, t)?;
    }
    let n = pred.len() as f64;
    Ok(MetricReport {
        psnr_db: psnr_from_mse(mse / n),
        ssim: s / n,
        frechet: frechet_feature_distance(pred_features, truth_features)?,
        beat_alignment: beat_alignment_score(pred, beats)?,
        n_frames: pred.len(),
    })
}
