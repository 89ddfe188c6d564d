//! Central finite differences against backprop, in f64, for every parameter
//! group that takes part in a denoising pass.

mod common;

use candle_core::{DType, Tensor};
use common::*;
use dancegen_core::{DanceModel, ParamGroup, Stage};

fn check(model: &DanceModel, loss: &dyn Fn(&DanceModel) -> Tensor, groups: &[ParamGroup]) {
    for (g, rel) in fd_relative_errors(model, loss, groups) {
        println!("{g}: rel err {rel:.2e}");
        assert!(rel < 1e-4, "{g}: relative error {rel:e}");
    }
}

fn probe(shape: &[usize], seed: u64) -> Tensor {
    latent(shape, DType::F64, seed).into_tensor()
}

#[test]
fn stage1_gradients_match_finite_differences() {
    let model = DanceModel::new(tiny_topology(false), DType::F64, 1).unwrap();
    model.store().randomize(2, 0.3).unwrap();
    let (h, w, c) = (4, 4, model.topology().latent_channels);
    let z = latent(&[h, w, c], DType::F64, 3);
    let r = probe(&[h, w, c], 4);
    let loss = |m: &DanceModel| {
        let cond = stage1_conditions(m, h, w, 5);
        let eps = m.forward(&z, 321, &cond, Stage::One, false).unwrap().eps;
        (eps * &r).unwrap().sum_all().unwrap()
    };
    let groups: Vec<ParamGroup> = ParamGroup::APPEARANCE.to_vec();
    assert_eq!(model.store().groups().into_iter().collect::<Vec<_>>().len(), groups.len());
    check(&model, &loss, &groups);
}

#[test]
fn stage2_gradients_match_finite_differences() {
    let model = DanceModel::new(tiny_topology(true), DType::F64, 1).unwrap();
    model.store().randomize(6, 0.3).unwrap();
    let (k, h, w, c) = (3, 4, 4, model.topology().latent_channels);
    let z = latent(&[k, h, w, c], DType::F64, 7);
    let r = probe(&[k, h, w, c], 8);
    // The motion context is a detached input to the pass, so it is held fixed.
    let context = stage2_conditions(&model, k, h, w, 9).motion;
    let loss = |m: &DanceModel| {
        let mut cond = stage2_conditions(m, k, h, w, 9);
        cond.motion = context.clone();
        let eps = m.forward(&z, 654, &cond, Stage::Two, false).unwrap().eps;
        (eps * &r).unwrap().sum_all().unwrap()
    };
    assert_eq!(model.store().groups().len(), ParamGroup::ALL.len());
    check(&model, &loss, &ParamGroup::ALL);
}
