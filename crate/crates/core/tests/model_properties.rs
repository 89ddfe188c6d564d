mod common;

use candle_core::{DType, Tensor};
use common::*;
use dancegen_core::checkpoint::Checkpoint;
use dancegen_core::train::stage2_model;
use dancegen_core::{ConditionBundle, DanceModel, LatentTensor, ParamGroup, PoseMask, Stage};

fn stage1_randomized(dtype: DType, seed: u64) -> DanceModel {
    let m = DanceModel::new(tiny_topology(false).with_width(16), dtype, seed).unwrap();
    m.store().randomize(seed + 100, 0.2).unwrap();
    m
}

trait Width {
    fn with_width(self, w: usize) -> Self;
}

impl Width for dancegen_core::unet::Topology {
    fn with_width(self, w: usize) -> Self {
        Self { base_width: w, ..self }
    }
}

#[test]
fn fresh_temporal_modules_leave_frames_independent() {
    let s1 = stage1_randomized(DType::F32, 3);
    let s2 = stage2_model(&Checkpoint::from_model(&s1).unwrap(), 11).unwrap();
    let (k, h, w, c) = (4, 4, 4, s1.topology().latent_channels);
    let mut worst = 0f64;
    for seed in 0..10u64 {
        let z = latent(&[k, h, w, c], DType::F32, 1000 + seed);
        let cond2 = stage2_conditions(&s2, k, h, w, seed);
        let eps2 = s2.forward(&z, 17 + 97 * seed as usize, &cond2, Stage::Two, false).unwrap().eps;
        for f in 0..k {
            let cond1 = ConditionBundle {
                text: cond2.text.clone(),
                reference: cond2.reference.clone(),
                pose: (f == 0).then(|| cond2.pose.as_ref().unwrap().get(0).unwrap()),
                ..Default::default()
            };
            let zf = LatentTensor::new(z.tensor().get(f).unwrap()).unwrap();
            let eps1 = s1.forward(&zf, 17 + 97 * seed as usize, &cond1, Stage::One, false).unwrap().eps;
            worst = worst.max(max_abs_diff(&eps1, &eps2.get(f).unwrap()));
        }
    }
    assert!(worst < 1e-6, "max per-frame deviation {worst:e}");
}

#[test]
fn attaching_temporal_modules_keeps_appearance_init() {
    let a = DanceModel::new(tiny_topology(false), DType::F32, 5).unwrap();
    let b = DanceModel::new(tiny_topology(true), DType::F32, 5).unwrap();
    for g in ParamGroup::APPEARANCE {
        assert_eq!(a.store().group_hash(g).unwrap(), b.store().group_hash(g).unwrap(), "{g}");
    }
    let c = DanceModel::new(tiny_topology(false), DType::F32, 6).unwrap();
    assert_ne!(a.store().group_hash(ParamGroup::Conv).unwrap(), c.store().group_hash(ParamGroup::Conv).unwrap());
}

#[test]
fn groups_partition_parameters() {
    let m = DanceModel::new(tiny_topology(true), DType::F32, 0).unwrap();
    let total: usize = ParamGroup::ALL.iter().map(|&g| m.store().group_params(g).len()).sum();
    assert_eq!(total, m.store().len());
    for p in m.store().iter() {
        assert_eq!(m.store().group_params(p.group()).iter().filter(|q| q.name() == p.name()).count(), 1);
    }
    let s1 = DanceModel::new(tiny_topology(false), DType::F32, 0).unwrap();
    assert!(s1.store().groups().iter().all(|g| !g.is_temporal()));
    assert!(ParamGroup::TEMPORAL.iter().all(|g| m.store().groups().contains(g)));
}

#[test]
fn stage_two_rejects_bad_inputs() {
    let s1 = DanceModel::new(tiny_topology(false), DType::F32, 0).unwrap();
    let s2 = DanceModel::new(tiny_topology(true), DType::F32, 0).unwrap();
    let c = s1.topology().latent_channels;
    let frame = latent(&[4, 4, c], DType::F32, 0);
    let clip = latent(&[2, 4, 4, c], DType::F32, 0);
    let empty = ConditionBundle::default();
    assert!(s2.forward(&frame, 5, &empty, Stage::Two, false).is_err());
    assert!(s1.forward(&clip, 5, &empty, Stage::Two, false).is_err());
    assert!(s2.forward(&clip, 5, &empty, Stage::Two, false).is_ok());
    let wrong = latent(&[4, 4, c + 1], DType::F32, 0);
    assert!(s1.forward(&wrong, 5, &empty, Stage::One, false).is_err());
    assert!(s1.embed_beats(&dancegen_core::BeatVector::zeros(2)).is_err());
}

#[test]
fn mask_encoder_starts_silent() {
    let m = DanceModel::new(tiny_topology(false), DType::F32, 0).unwrap();
    let p = m.topology().patch;
    let ones = PoseMask::new(4 * p, 4 * p, vec![1.0; 16 * p * p]).unwrap();
    let zeros = PoseMask::zeros(4 * p, 4 * p);
    let r = m.encode_mask(&ones).unwrap();
    assert_eq!(r.abs().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap(), 0.0);
    m.store().randomize(1, 0.2).unwrap();
    let a = m.encode_mask(&ones).unwrap();
    let b = m.encode_mask(&zeros).unwrap();
    assert!(max_abs_diff(&a, &b) > 1e-3);
    assert_eq!(a.dims(), &[4, 4, m.topology().latent_channels]);
}

#[test]
fn text_and_beats_matter_only_once_trained() {
    let m = DanceModel::new(tiny_topology(true), DType::F32, 0).unwrap();
    let (k, h, w, c) = (3, 4, 4, m.topology().latent_channels);
    let z = latent(&[k, h, w, c], DType::F32, 1);
    let run = |m: &DanceModel, null_text: bool, beats: &[usize]| -> Tensor {
        let mut cond = stage2_conditions(m, k, h, w, 2);
        if null_text {
            cond.text = Some(m.null_text_embedding());
        }
        cond.beat = Some(m.embed_beats(&dancegen_core::BeatVector::from_frames(k, beats).unwrap()).unwrap());
        m.forward(&z, 400, &cond, Stage::Two, false).unwrap().eps
    };
    assert_eq!(max_abs_diff(&run(&m, false, &[0]), &run(&m, true, &[0])), 0.0);
    assert_eq!(max_abs_diff(&run(&m, false, &[0]), &run(&m, false, &[1, 2])), 0.0);
    m.store().randomize(3, 0.2).unwrap();
    assert!(max_abs_diff(&run(&m, false, &[0]), &run(&m, true, &[0])) > 1e-4);
    assert!(max_abs_diff(&run(&m, false, &[0]), &run(&m, false, &[1, 2])) > 1e-4);
    m.disable_beat_module().unwrap();
    assert_eq!(max_abs_diff(&run(&m, false, &[0]), &run(&m, false, &[1, 2])), 0.0);
}

#[test]
fn forward_is_deterministic() {
    let m = stage1_randomized(DType::F32, 8);
    let z = latent(&[4, 4, m.topology().latent_channels], DType::F32, 9);
    let cond = stage1_conditions(&m, 4, 4, 1);
    let a = m.forward(&z, 250, &cond, Stage::One, false).unwrap().eps;
    let b = m.forward(&z, 250, &cond, Stage::One, false).unwrap().eps;
    assert_eq!(max_abs_diff(&a, &b), 0.0);
    let other = m.forward(&z, 251, &cond, Stage::One, false).unwrap().eps;
    assert!(max_abs_diff(&a, &other) > 0.0);
}

#[test]
fn captured_context_has_one_map_per_site() {
    let m = DanceModel::new(tiny_topology(true), DType::F32, 0).unwrap();
    let cond = stage2_conditions(&m, 3, 4, 4, 0);
    let ctx = cond.motion.as_ref().unwrap();
    assert_eq!(ctx.per_site.len(), m.topology().site_count());
    assert_eq!(ctx.frames(), m.topology().motion_frames);
    for ((hh, ww, d), t) in m.topology().site_shapes(4, 4).into_iter().zip(&ctx.per_site) {
        assert_eq!(t.dims(), &[hh * ww, m.topology().motion_frames, d]);
    }
}
