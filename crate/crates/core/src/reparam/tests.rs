use super::*;
use crate::autograd::Tape;
use crate::models::{Arch, ModelConfig};
use crate::nn::{init_rng, Ctx};
use crate::tensor::{conv2d_forward, ConvGeom};
use crate::testutil::{randn, randomize, randomize_bn};

fn bn(gamma: &[f64], beta: &[f64], mean: &[f64], var: &[f64], eps: f64) -> BnParams<f64> {
    let v = |x: &[f64]| Tensor::from_vec(Shape::vector(1, x.len()), x.to_vec()).unwrap();
    BnParams {
        gamma: v(gamma),
        beta: v(beta),
        mean: v(mean),
        var: v(var),
        eps,
    }
}

#[test]
fn identity_bn_folds_to_itself() {
    let w: Tensor<f64> = randn(Shape::new(2, 1, 3, 3), 1);
    let b: Tensor<f64> = randn(Shape::vector(1, 2), 2);
    let (wf, bf) = fold_bn_into_conv(&w, Some(&b), &bn(&[1.0; 2], &[0.0; 2], &[0.0; 2], &[1.0; 2], 0.0)).unwrap();
    assert_eq!(wf, w);
    assert_eq!(bf, b);
}

#[test]
fn scaled_bn_doubles_weights() {
    let w: Tensor<f64> = randn(Shape::new(1, 1, 3, 3), 3);
    let (wf, bf) = fold_bn_into_conv(&w, None, &bn(&[2.0], &[1.0], &[0.0], &[1.0], 0.0)).unwrap();
    assert_eq!(wf, w.map(|v| 2.0 * v));
    assert_eq!(bf.data(), &[1.0]);
}

#[test]
fn fold_rejects_non_positive_variance() {
    let w: Tensor<f64> = randn(Shape::new(1, 1, 1, 1), 4);
    let r = fold_bn_into_conv(&w, None, &bn(&[1.0], &[0.0], &[0.0], &[-1e-5], 1e-5));
    assert!(matches!(r, Err(Error::NumericDomain(_))));
    let r = fold_bn_into_conv(&w, None, &bn(&[1.0; 2], &[0.0; 2], &[0.0; 2], &[1.0; 2], 0.0));
    assert!(matches!(r, Err(Error::InvalidArgument(_))));
}

#[test]
fn folded_conv_matches_conv_then_bn() {
    let g = ConvGeom::new(3, 4, 3, 1, 1, 1);
    let w: Tensor<f64> = randn(g.weight_shape(), 5);
    let b: Tensor<f64> = randn(Shape::vector(1, 4), 6);
    let var = randn::<f64>(Shape::vector(1, 4), 7).map(|v| v.abs() + 0.1);
    let p = BnParams {
        gamma: randn(Shape::vector(1, 4), 8),
        beta: randn(Shape::vector(1, 4), 9),
        mean: randn(Shape::vector(1, 4), 10),
        var,
        eps: BN_EPS,
    };
    let (wf, bf) = fold_bn_into_conv(&w, Some(&b), &p).unwrap();
    for i in 0..20 {
        let x: Tensor<f64> = randn(Shape::new(1, 3, 6, 6), 100 + i);
        let y = conv2d_forward(&x, &g, &w, Some(&b)).unwrap();
        let y = crate::tensor::batch_norm_infer(&y, p.gamma.data(), p.beta.data(), p.mean.data(), p.var.data(), p.eps).unwrap();
        let z = conv2d_forward(&x, &g, &wf, Some(&bf)).unwrap();
        assert!(y.max_abs_diff(&z) < 1e-10, "{}", y.max_abs_diff(&z));
    }
}

#[test]
fn padding_embeds_the_kernel() {
    let k = Tensor::from_vec(Shape::new(2, 1, 1, 1), vec![3.0f64, -2.0]).unwrap();
    let p = pad_1x1_to_3x3(&k).unwrap();
    assert_eq!(p.shape(), Shape::new(2, 1, 3, 3));
    let mut expect = vec![0.0; 18];
    expect[4] = 3.0;
    expect[13] = -2.0;
    assert_eq!(p.data(), &expect[..]);
    let zero = pad_1x1_to_3x3(&Tensor::<f64>::zeros(Shape::new(3, 1, 1, 1))).unwrap();
    assert!(zero.data().iter().all(|&v| v == 0.0));
    assert!(pad_1x1_to_3x3(&Tensor::<f64>::zeros(Shape::new(3, 1, 3, 3))).is_err());
}

#[test]
fn padded_kernel_matches_on_borders() {
    let k: Tensor<f64> = randn(Shape::new(3, 1, 1, 1), 11);
    let x: Tensor<f64> = randn(Shape::new(2, 3, 5, 5), 12);
    let a = conv2d_forward(&x, &ConvGeom::depthwise(3, 1), &k, None).unwrap();
    let b = conv2d_forward(&x, &ConvGeom::depthwise(3, 3), &pad_1x1_to_3x3(&k).unwrap(), None).unwrap();
    assert_eq!(a, b);
}

fn rec_store(seed: u64) -> (RecBlock, ParamStore<f32>) {
    let block = RecBlock::new("r", 6);
    let mut s = ParamStore::new();
    block.init(&mut s, &mut init_rng(seed)).unwrap();
    randomize(&mut s, seed + 1);
    (block, s)
}

fn run_block<T: Scalar>(block: &RecBlock, s: &ParamStore<T>, phase: Phase, x: &Tensor<T>) -> Tensor<T> {
    let mut tape = Tape::inference();
    let mut ctx = Ctx::new(&mut tape, s, false, phase);
    let xv = ctx.tape.constant(x.clone());
    let y = block.forward(&mut ctx, xv).unwrap();
    tape.value(y).clone()
}

#[test]
fn fused_block_matches_branches() {
    let (block, s) = rec_store(20);
    let s64 = s.cast::<f64>();
    let mut f32s = s.clone();
    let mut f64s = s64.clone();
    assert!(!fuse_rec_block(&block, &mut f32s).unwrap());
    assert!(!fuse_rec_block(&block, &mut f64s).unwrap());
    assert!(block.is_fused(&f32s));
    for i in 0..100 {
        let x: Tensor<f64> = randn(Shape::new(1, 6, 7, 7), 200 + i);
        let a = run_block(&block, &s64, Phase::Training, &x);
        let b = run_block(&block, &f64s, Phase::Inference, &x);
        assert!(a.max_abs_diff(&b) < 1e-10, "f64: {}", a.max_abs_diff(&b));
        let x = x.cast::<f32>();
        let a = run_block(&block, &s, Phase::Training, &x);
        let b = run_block(&block, &f32s, Phase::Inference, &x);
        assert!(a.max_abs_diff(&b) < 1e-4, "f32: {}", a.max_abs_diff(&b));
    }
}

#[test]
fn dead_pointwise_branch_leaves_folded_3x3() {
    let (block, mut s) = rec_store(30);
    s.get_mut(&block.dw1.weight_name()).unwrap().data_mut().fill(0.0);
    for (f, v) in [("weight", 1.0), ("bias", 0.0), ("running_mean", 0.0), ("running_var", 1.0)] {
        s.get_mut(&block.bn1.field(f)).unwrap().data_mut().fill(v);
    }
    let bn3 = BnParams::from_store(&s, &block.bn3).unwrap();
    let (w3, b3) = fold_bn_into_conv(s.get(&block.dw3.weight_name()).unwrap(), None, &bn3).unwrap();
    fuse_rec_block(&block, &mut s).unwrap();
    assert_eq!(s.get(&block.fused.weight_name()).unwrap(), &w3);
    assert_eq!(s.get(&block.fused.bias_name()).unwrap(), &b3);
}

#[test]
fn fusion_guards() {
    let (block, mut s) = rec_store(40);
    fuse_rec_block(&block, &mut s).unwrap();
    assert!(matches!(fuse_rec_block(&block, &mut s), Err(Error::InvalidState(_))));

    let (block, mut s) = rec_store(41);
    s.remove(&block.bn1.field("running_var"));
    assert!(matches!(fuse_rec_block(&block, &mut s), Err(Error::InvalidState(_))));

    let block = RecBlock::new("r", 4);
    let mut s = ParamStore::new();
    block.init(&mut s, &mut init_rng(42)).unwrap();
    assert!(fuse_rec_block(&block, &mut s).unwrap(), "default statistics are flagged");
}

#[test]
fn fusion_removes_branch_tensors_and_shrinks_the_model() {
    let m = Model::new(ModelConfig::mlcnet()).unwrap();
    let s = m.init(3).unwrap();
    let f = fuse_model(&m, &s).unwrap();
    assert_eq!(f.default_stats.len(), m.rec_blocks().len());
    assert!(f.store.num_trainable() < s.num_trainable());
    assert!(!f.store.iter().any(|(n, _, _)| n.contains(".dw1.") || n.contains(".bn3.")));
    crate::models::check_compatible(
        &crate::models::Checkpoint {
            config: m.config.clone(),
            phase: Phase::Inference,
            store: f.store,
        },
        &m,
        Phase::Inference,
    )
    .unwrap();
}

#[test]
fn model_without_rec_blocks_is_unchanged() {
    let m = Model::new(ModelConfig::new(Arch::LctNet).with_views(1)).unwrap();
    let s = m.init(4).unwrap();
    let f = fuse_model(&m, &s).unwrap();
    assert!(f.default_stats.is_empty());
    assert!(s.iter().zip(f.store.iter()).all(|(a, b)| a == b));
    let cfg = VerifyConfig {
        samples: 2,
        size: 32,
        ..Default::default()
    };
    let r = verify_equivalence(&m, &s, &f, &cfg).unwrap();
    assert!(r.passed && r.max_abs_deviation == 0.0 && r.warnings.is_empty());
}

#[test]
fn fused_model_matches_training_model() {
    let m = Model::new(ModelConfig::new(Arch::LctMsrm)).unwrap();
    let mut s = m.init(5).unwrap();
    randomize_bn(&mut s, 6);
    let f = fuse_model(&m, &s).unwrap();
    assert!(f.default_stats.is_empty());
    let cfg = VerifyConfig {
        samples: 4,
        size: 32,
        batch: 2,
        ..Default::default()
    };
    let r = verify_equivalence(&m, &s, &f, &cfg).unwrap();
    assert!(r.passed, "{r}");
    assert_eq!(r.samples, 4);

    let s64 = s.cast::<f64>();
    let f64s = fuse_model(&m, &s64).unwrap();
    let r = verify_equivalence(
        &m,
        &s64,
        &f64s,
        &VerifyConfig {
            tolerance: TOLERANCE_F64,
            ..cfg
        },
    )
    .unwrap();
    assert!(r.passed, "{r}");
}

#[test]
fn untrained_fusion_is_flagged_in_the_report() {
    let m = Model::new(ModelConfig::new(Arch::LctMsrm).with_views(1)).unwrap();
    let s = m.init(7).unwrap();
    let f = fuse_model(&m, &s).unwrap();
    let cfg = VerifyConfig {
        samples: 1,
        size: 32,
        ..Default::default()
    };
    let r = verify_equivalence(&m, &s, &f, &cfg).unwrap();
    assert_eq!(r.warnings.len(), 1);
    assert!(r.to_string().contains("warning"));
    assert!(verify_equivalence(&m, &s, &f, &VerifyConfig { samples: 0, ..cfg }).is_err());
}
