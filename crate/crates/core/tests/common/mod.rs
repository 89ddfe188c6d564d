#![allow(dead_code)]

use candle_core::{DType, Device, Tensor};
use dancegen_core::beats::BeatVector;
use dancegen_core::unet::Topology;
use dancegen_core::{ConditionBundle, DanceModel, LatentTensor, ParamGroup, PoseMask, Stage, Vocab, Waveform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny_topology(temporal: bool) -> Topology {
    let vocab = Vocab::new(["a", "red", "ball", "bounces"]);
    Topology {
        base_width: 8,
        heads: 2,
        norm_groups: 2,
        text_dim: 8,
        max_music_tokens: 16,
        ..Topology::new(vocab.words().to_vec())
    }
    .with_temporal(temporal)
}

pub fn caption() -> Vec<String> {
    ["a", "red", "ball", "bounces"].map(String::from).to_vec()
}

pub fn latent(shape: &[usize], dtype: DType, seed: u64) -> LatentTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    LatentTensor::new(dancegen_core::tensor::normal_tensor(shape, dtype, &Device::Cpu, &mut rng).unwrap()).unwrap()
}

/// Soft disc mask at pixel resolution.
pub fn disc_mask(h: usize, w: usize, cy: f32, cx: f32, r: f32) -> PoseMask {
    let mut v = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let d = ((y as f32 - cy).powi(2) + (x as f32 - cx).powi(2)).sqrt();
            v.push((r + 0.5 - d).clamp(0.0, 1.0));
        }
    }
    PoseMask::new(h, w, v).unwrap()
}

pub fn noise_waveform(seconds: f64, seed: u64) -> Waveform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = dancegen_core::audio::seconds_to_samples(seconds);
    Waveform::new((0..n).map(|_| rng.random_range(-0.5f32..0.5)).collect())
}

/// Full stage-2 conditions for a `k`-frame window of an `h × w` latent,
/// with motion context from a clean pass over `prev`.
pub fn stage2_conditions(model: &DanceModel, k: usize, h: usize, w: usize, seed: u64) -> ConditionBundle {
    let p = model.topology().patch;
    let fps = 12.0;
    let wave = noise_waveform(2.0, seed);
    let beats = BeatVector::from_frames(k, &[0, k / 2]).unwrap();
    let reference = latent(&[h, w, model.topology().latent_channels], model.dtype(), seed + 1);
    let mut cond = ConditionBundle {
        text: Some(model.embed_text(&caption()).unwrap()),
        music: Some(model.encode_music(&wave, 0.5, k as f64 / fps).unwrap()),
        beat: Some(model.embed_beats(&beats).unwrap()),
        reference: Some(model.reference_features(&reference).unwrap()),
        motion: None,
        pose: Some(dancegen_core::train::first_frame_pose(model, &disc_mask(h * p, w * p, 6.0, 9.0, 4.0), k).unwrap()),
    };
    let m = model.topology().motion_frames;
    let prev = latent(&[m, h, w, model.topology().latent_channels], model.dtype(), seed + 2);
    let mut ctx_cond = cond.clone();
    ctx_cond.pose = None;
    ctx_cond.music = Some(model.encode_music(&wave, 0.5 - m as f64 / fps, m as f64 / fps).unwrap());
    ctx_cond.beat = Some(model.embed_beats(&BeatVector::zeros(m)).unwrap());
    cond.motion = model.forward(&prev, 0, &ctx_cond, Stage::Two, true).unwrap().context;
    cond
}

pub fn stage1_conditions(model: &DanceModel, h: usize, w: usize, seed: u64) -> ConditionBundle {
    let p = model.topology().patch;
    let reference = latent(&[h, w, model.topology().latent_channels], model.dtype(), seed + 1);
    ConditionBundle {
        text: Some(model.embed_text(&caption()).unwrap()),
        reference: Some(model.reference_features(&reference).unwrap()),
        pose: Some(model.encode_mask(&disc_mask(h * p, w * p, 7.0, 8.0, 5.0)).unwrap()),
        ..Default::default()
    }
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    (a - b)
        .unwrap()
        .abs()
        .unwrap()
        .flatten_all()
        .unwrap()
        .max(0)
        .unwrap()
        .to_dtype(DType::F64)
        .unwrap()
        .to_scalar::<f64>()
        .unwrap()
}

pub const FD_H: f64 = 1e-6;
pub const FD_PER_GROUP: usize = 10;

/// Central finite differences against backprop on the largest and on random
/// entries of each group; returns the norm-relative error per group.
pub fn fd_relative_errors(
    model: &DanceModel,
    loss: &dyn Fn(&DanceModel) -> Tensor,
    groups: &[ParamGroup],
) -> Vec<(ParamGroup, f64)> {
    let mut out = Vec::new();
    let l = loss(model);
    let grads = l.backward().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for &g in groups {
        let params = model.store().group_params(g);
        assert!(!params.is_empty(), "{g} has no parameters");
        // Largest analytic entries of the group, plus random ones.
        let mut all: Vec<(usize, usize, f64)> = Vec::new();
        for (pi, p) in params.iter().enumerate() {
            let ga: Vec<f64> = match grads.get(p.var().as_tensor()) {
                Some(t) => t.flatten_all().unwrap().to_vec1().unwrap(),
                None => vec![0.0; p.elem_count()],
            };
            for (k, v) in ga.into_iter().enumerate() {
                all.push((pi, k, v));
            }
        }
        all.sort_by(|a, b| b.2.abs().total_cmp(&a.2.abs()));
        let mut picks: Vec<(usize, usize, f64)> = all[..FD_PER_GROUP / 2].to_vec();
        for _ in 0..FD_PER_GROUP / 2 {
            picks.push(all[rng.random_range(0..all.len())]);
        }
        let (mut num, mut den) = (0.0f64, 0.0f64);
        for (pi, k, ga) in picks {
            let var = params[pi].var();
            let orig = var.as_tensor().copy().unwrap();
            let mut flat: Vec<f64> = orig.flatten_all().unwrap().to_vec1().unwrap();
            let x = flat[k];
            let eval = |flat: &mut Vec<f64>, v: f64| {
                flat[k] = v;
                var.set(&Tensor::from_vec(flat.clone(), orig.shape(), orig.device()).unwrap()).unwrap();
                loss(model).to_scalar::<f64>().unwrap()
            };
            let fd = (eval(&mut flat, x + FD_H) - eval(&mut flat, x - FD_H)) / (2.0 * FD_H);
            var.set(&orig).unwrap();
            num += (ga - fd).powi(2);
            den += fd.powi(2).max(ga.powi(2));
        }
        assert!(den > 1e-16, "{g}: vanishing gradient, check is vacuous");
        out.push((g, (num / den).sqrt()));
    }
    out
}

