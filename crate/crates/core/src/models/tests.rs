use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::*;
use crate::error::Error;

fn randn(shape: Shape, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_, _, _, _| StandardNormal.sample(&mut rng))
}

fn vec3(v: [f32; 3]) -> Tensor<f32> {
    Tensor::from_vec(Shape::vector(1, 3), v.to_vec()).unwrap()
}

fn features<T: Scalar>(m: &Model, s: &ParamStore<T>, x: &Tensor<T>) -> Tensor<T> {
    let mut tape = Tape::inference();
    let mut ctx = Ctx::new(&mut tape, s, false, Phase::Training);
    let xv = ctx.tape.constant(x.clone());
    let u = m.backbone(&mut ctx, xv).unwrap();
    tape.value(u).clone()
}

#[test]
fn backbone_output_shapes() {
    let m = Model::new(ModelConfig::new(Arch::LctNet)).unwrap();
    let s = m.init(0).unwrap();
    assert_eq!(features(&m, &s, &Tensor::zeros(Shape::new(1, 1, 224, 224))).shape(), Shape::new(1, 768, 7, 7));
    assert_eq!(features(&m, &s, &Tensor::zeros(Shape::new(2, 1, 64, 64))).shape(), Shape::new(2, 768, 2, 2));
    let mut tape = Tape::inference();
    let mut ctx = Ctx::new(&mut tape, &s, false, Phase::Training);
    let x = ctx.tape.constant(Tensor::zeros(Shape::new(1, 1, 48, 64)));
    assert!(matches!(m.backbone(&mut ctx, x), Err(Error::InvalidArgument(_))));
}

#[test]
fn backbone_is_deterministic() {
    let m = Model::new(ModelConfig::mlcnet()).unwrap();
    let s = m.init(1).unwrap();
    let x = randn(Shape::new(2, 1, 64, 64), 2);
    assert_eq!(features(&m, &s, &x), features(&m, &s, &x));
}

#[test]
fn fuse_views_examples() {
    let t = [vec3([1.0, 5.0, 2.0]), vec3([3.0, 2.0, 2.0]), vec3([0.0, 6.0, 1.0])];
    assert_eq!(fuse_views(&t, Fusion::Max).unwrap().data(), &[3.0, 6.0, 2.0]);
    assert_eq!(fuse_views(&t, Fusion::Min).unwrap().data(), &[0.0, 2.0, 1.0]);
    assert_eq!(fuse_views(&t, Fusion::Add).unwrap().data(), &[4.0, 13.0, 5.0]);
    let cat = fuse_views(&t, Fusion::Concat).unwrap();
    assert_eq!(cat.shape(), Shape::vector(1, 9));
    let same = [t[0].clone(), t[0].clone(), t[0].clone()];
    assert_eq!(fuse_views(&same, Fusion::Max).unwrap(), t[0]);
    let perm = [t[2].clone(), t[0].clone(), t[1].clone()];
    assert_eq!(fuse_views(&perm, Fusion::Max).unwrap(), fuse_views(&t, Fusion::Max).unwrap());
    let bad = [t[0].clone(), Tensor::zeros(Shape::vector(1, 4))];
    assert!(matches!(fuse_views(&bad, Fusion::Max), Err(Error::InvalidArgument(_))));
    assert!(matches!(fuse_views(&bad, Fusion::Concat), Err(Error::InvalidArgument(_))));
    assert!(fuse_views::<f32>(&[], Fusion::Max).is_err());
}

#[test]
fn max_fusion_is_monotone() {
    let t = [randn(Shape::vector(2, 16), 3), randn(Shape::vector(2, 16), 4)];
    let base = fuse_views(&t, Fusion::Max).unwrap();
    for i in 0..t[0].len() {
        let mut bumped = t.clone();
        bumped[1].data_mut()[i] += 0.5;
        let f = fuse_views(&bumped, Fusion::Max).unwrap();
        assert!(f.data()[i] >= base.data()[i]);
    }
}

#[test]
fn identical_views_match_single_view() {
    let m3 = Model::new(ModelConfig::mlcnet()).unwrap();
    let m1 = Model::new(ModelConfig::mlcnet().with_views(1)).unwrap();
    let s = m3.init(5).unwrap();
    let x = randn(Shape::new(2, 1, 32, 32), 6);
    let l3 = m3.predict(&s, Phase::Training, &[x.clone(), x.clone(), x.clone()]).unwrap();
    let l1 = m1.predict(&s, Phase::Training, &[x]).unwrap();
    assert_eq!(l3.shape(), Shape::vector(2, 4));
    assert!(l3.max_abs_diff(&l1) < 1e-6, "{}", l3.max_abs_diff(&l1));
}

#[test]
fn params_independent_of_views() {
    let count = |c: ModelConfig| Model::new(c).unwrap().init(0).unwrap().num_trainable();
    let base = count(ModelConfig::new(Arch::LctNet).with_views(1));
    assert_eq!(count(ModelConfig::new(Arch::LctNet).with_views(2)), base);
    assert_eq!(count(ModelConfig::new(Arch::LctNet).with_views(3)), base);
    let cat = count(ModelConfig::new(Arch::LctNet).with_fusion(Fusion::Concat));
    assert_eq!(cat - base, 2 * 768 * 4);
}

#[test]
fn init_determinism_and_spread() {
    let m = Model::new(ModelConfig::mlcnet()).unwrap();
    let a = m.init(9).unwrap();
    let b = m.init(9).unwrap();
    let c = m.init(10).unwrap();
    assert!(a.iter().zip(b.iter()).all(|(x, y)| x.0 == y.0 && x.2 == y.2));
    assert!(a.iter().zip(c.iter()).any(|(x, y)| x.2 != y.2));
    for (name, t) in a.trainable() {
        if t.len() >= 10_000 {
            let n = t.len() as f64;
            let mean = t.data().iter().map(|&v| v as f64).sum::<f64>() / n;
            let std = (t.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
            assert!((0.015..=0.025).contains(&std), "{name}: {std}");
        }
    }
}

#[test]
fn config_round_trip_and_parse_errors() {
    let c = ModelConfig::new(Arch::LctLafe).with_fusion(Fusion::Concat).with_views(2);
    assert_eq!(ModelConfig::from_kv(&c.to_kv()).unwrap(), c);
    assert!("resnet".parse::<Arch>().is_err());
    assert_eq!("con".parse::<Fusion>().unwrap(), Fusion::Concat);
}

fn checkpoint() -> (Model, Checkpoint) {
    let m = Model::new(ModelConfig::new(Arch::LctNet).with_views(1)).unwrap();
    let mut store = m.init(11).unwrap();
    store.get_mut("stem.bn.running_var").unwrap().data_mut()[0] = 0.123;
    (
        m.clone(),
        Checkpoint {
            config: m.config.clone(),
            phase: Phase::Training,
            store,
        },
    )
}

#[test]
fn weights_round_trip_bit_exact() {
    let (m, ck) = checkpoint();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.mlcw");
    save_weights(&path, &ck).unwrap();
    let back = load_for(&path, &m, Phase::Training).unwrap();
    assert_eq!(back.len(), ck.store.len());
    for ((n1, k1, t1), (n2, k2, t2)) in ck.store.iter().zip(back.iter()) {
        assert_eq!((n1, k1), (n2, k2));
        assert_eq!(t1.shape(), t2.shape());
        assert!(t1.data().iter().zip(t2.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
    assert_eq!(encode_weights(&load_weights(&path).unwrap()), std::fs::read(&path).unwrap());
}

#[test]
fn weight_file_errors() {
    let (m, ck) = checkpoint();
    let bytes = encode_weights(&ck);
    for cut in [2, 6, 10, 40, bytes.len() - 1] {
        assert!(matches!(decode_weights(&bytes[..cut]), Err(Error::Truncated { .. })), "cut {cut}");
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode_weights(&bad), Err(Error::BadMagic { .. })));
    let mut bad = bytes.clone();
    bad[4] = 9;
    assert!(matches!(decode_weights(&bad), Err(Error::VersionMismatch { found: 9, .. })));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.mlcw");
    let fused = Checkpoint {
        phase: Phase::Inference,
        ..ck.clone()
    };
    save_weights(&path, &fused).unwrap();
    assert!(matches!(load_for(&path, &m, Phase::Training), Err(Error::PhaseMismatch { .. })));

    save_weights(&path, &ck).unwrap();
    let five = Model::new(ModelConfig {
        num_classes: 5,
        ..m.config.clone()
    })
    .unwrap();
    assert!(matches!(load_for(&path, &five, Phase::Training), Err(Error::ShapeMismatch { .. })));
    assert!(matches!(
        load_weights(&dir.path().join("missing")),
        Err(Error::Io { .. })
    ));
}
