use super::*;
use crate::autograd::{ParamKind, ParamStore, Tape};
use crate::models::{Arch, Fusion, Model, ModelConfig};
use crate::nn::{Conv, Ctx, Phase};
use crate::reparam::fuse_model;
use crate::tensor::{ConvGeom, Shape, Tensor};
use crate::testutil::{randn, randomize_bn};

#[test]
fn closed_form_conv_counts() {
    let mut s = ParamStore::new();
    let mut rng = crate::nn::init_rng(0);
    let conv = Conv::new("conv", ConvGeom::new(2, 4, 3, 1, 1, 1), true);
    conv.init(&mut s, &mut rng).unwrap();
    let dw = Conv::new("dw", ConvGeom::depthwise(8, 3), false);
    dw.init(&mut s, &mut rng).unwrap();
    let r = count_params(&s);
    assert_eq!(r.layers[0].params, 76);
    assert_eq!(r.layers[1].params, 72);
    assert_eq!(r.total_params, 148);

    let mut tape = Tape::profiling();
    let mut ctx = Ctx::new(&mut tape, &s, false, Phase::Training);
    let x = ctx.tape.constant(Tensor::zeros(Shape::new(1, 2, 8, 8)));
    conv.forward(&mut ctx, x).unwrap();
    let costs = tape.take_profile();
    assert_eq!(costs.len(), 1);
    assert_eq!(costs[0].layer, "conv");
    assert_eq!(costs[0].macs, 9 * 2 * 4 * 64);
    assert_eq!(costs[0].output, Shape::new(1, 4, 8, 8));
}

#[test]
fn buffers_are_not_parameters() {
    let mut s = ParamStore::<f32>::new();
    crate::nn::BatchNorm::new("bn", 5).init(&mut s).unwrap();
    assert_eq!(count_params(&s).total_params, 10);
    s.insert("extra", ParamKind::Buffer, Tensor::zeros(Shape::vector(1, 7))).unwrap();
    assert_eq!(count_params(&s).total_params, 10);
}

#[test]
fn per_layer_sums_equal_totals() {
    let model = Model::new(ModelConfig::mlcnet()).unwrap();
    let s = model.init(0).unwrap();
    let r = count_flops(&model, &s, Phase::Training, model.input_shape(1, 64)).unwrap();
    assert_eq!(r.layers.iter().map(|l| l.params).sum::<u64>(), r.total_params);
    assert_eq!(r.layers.iter().map(|l| l.flops).sum::<u64>(), r.total_flops);
    assert_eq!(r.backbone_flops + r.head_flops, r.total_flops);
    assert_eq!(r.total_params, s.num_trainable() as u64);
    assert_eq!(r.total_params, count_params(&s).total_params);
    assert_eq!(r.head_flops, 768 * 4);
    let csv = String::from_utf8(r.to_csv().unwrap()).unwrap();
    assert!(csv.starts_with("layer,params,flops,output_shape\n"));
    assert_eq!(csv.lines().count(), r.layers.len() + 2);
}

#[test]
fn backbone_flops_scale_with_views() {
    let base = |v: usize| {
        let model = Model::new(ModelConfig::new(Arch::LctNet).with_views(v)).unwrap();
        let s = model.init(0).unwrap();
        count_flops(&model, &s, Phase::Training, model.input_shape(1, 64)).unwrap()
    };
    let (one, two, three) = (base(1), base(2), base(3));
    assert_eq!(two.backbone_flops, 2 * one.backbone_flops);
    assert_eq!(three.backbone_flops, 3 * one.backbone_flops);
    assert_eq!(one.total_params, three.total_params);
}

#[test]
fn fused_model_has_fewer_parameters() {
    let model = Model::new(ModelConfig::mlcnet()).unwrap();
    let s = model.init(0).unwrap();
    let fused = fuse_model(&model, &s).unwrap();
    let a = count_params(&s).total_params;
    let b = count_params(&fused.store).total_params;
    assert!(b < a, "{b} >= {a}");
    let f = count_flops(&model, &fused.store, Phase::Inference, model.input_shape(1, 64)).unwrap();
    assert_eq!(f.total_params, b);
}

#[test]
fn cam_of_zero_head_is_zero() {
    let model = Model::new(ModelConfig::mlcnet()).unwrap();
    let mut s = model.init(0).unwrap();
    let name = model.head_weight_name();
    let z = Tensor::zeros(s.get(&name).unwrap().shape());
    s.set(&name, z).unwrap();
    let views: Vec<Tensor<f32>> = (0..3).map(|i| randn(Shape::new(1, 1, 64, 64), i)).collect();
    let maps = cam(&model, &s, Phase::Training, &views, &[], Some(2)).unwrap();
    assert_eq!(maps.len(), 3);
    for m in &maps {
        assert_eq!(m.class, 2);
        assert!(m.heatmap.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn cam_shape_and_range() {
    for hw in [32, 64, 96] {
        let model = Model::new(ModelConfig::mlcnet()).unwrap();
        let mut s = model.init(1).unwrap();
        randomize_bn(&mut s, 3);
        let views: Vec<Tensor<f32>> = (0..3).map(|i| randn(Shape::new(1, 1, hw, hw), 10 + i)).collect();
        let tags: Vec<String> = ["a", "b", "c"].map(String::from).to_vec();
        let maps = cam(&model, &s, Phase::Training, &views, &tags, None).unwrap();
        for (i, m) in maps.iter().enumerate() {
            assert_eq!(m.heatmap.shape(), Shape::new(1, 1, hw, hw));
            assert_eq!(m.tag, tags[i]);
            assert_eq!(m.class, m.predicted);
            assert!(m.heatmap.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}

#[test]
fn cam_is_linear_in_head_weights() {
    let model = Model::new(ModelConfig::mlcnet().with_fusion(Fusion::Concat)).unwrap();
    let s = model.init(2).unwrap();
    let shape = s.get(&model.head_weight_name()).unwrap().shape();
    let w1: Tensor<f32> = randn(shape, 1);
    let w2: Tensor<f32> = randn(shape, 2);
    let sum = Tensor::from_vec(shape, w1.data().iter().zip(w2.data()).map(|(a, b)| a + b).collect()).unwrap();
    let views: Vec<Tensor<f32>> = (0..3).map(|i| randn(Shape::new(1, 1, 64, 64), 20 + i)).collect();
    let run = |w: &Tensor<f32>| cam_raw(&model, &s, Phase::Training, &views, Some(1), Some(w)).unwrap().0;
    let (a, b, c) = (run(&w1), run(&w2), run(&sum));
    for v in 0..3 {
        for ((x, y), z) in a[v].data().iter().zip(b[v].data()).zip(c[v].data()) {
            assert!((x + y - z).abs() <= 1e-4 * (1.0 + z.abs()), "{x} + {y} vs {z}");
        }
    }
}

#[test]
fn normalization_edge_cases() {
    let c = Tensor::full(Shape::new(1, 1, 2, 2), 3.0f32);
    assert!(normalize_map(&c).data().iter().all(|&v| v == 0.0));
    let r = Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![-1.0f32, 0.0, 3.0]).unwrap();
    assert_eq!(normalize_map(&r).data(), &[0.0, 0.25, 1.0]);
}

#[test]
fn colormap_runs_blue_to_red() {
    assert_eq!(COLORMAP[0], [0, 0, 255]);
    assert_eq!(COLORMAP[255], [255, 0, 0]);
    assert_eq!(COLORMAP[85], [0, 255, 255]);
    assert_eq!(COLORMAP[170], [255, 255, 0]);
}

#[test]
fn heatmap_files() {
    let dir = tempfile::tempdir().unwrap();
    let m = Tensor::from_fn(Shape::new(1, 1, 4, 6), |_, _, y, x| (y * 6 + x) as f32 / 23.0);
    write_heatmap_pgm(&dir.path().join("m.pgm"), &m).unwrap();
    write_heatmap_ppm(&dir.path().join("m.ppm"), &m).unwrap();
    let ppm = std::fs::read(dir.path().join("m.ppm")).unwrap();
    assert!(ppm.starts_with(b"P6"));
    assert!(ppm.ends_with(&[255, 0, 0]));
    assert_eq!(&ppm[ppm.len() - 72..ppm.len() - 69], &[0, 0, 255]);
}

#[test]
fn benchmark_requires_ten_runs() {
    let model = Model::new(ModelConfig::new(Arch::LctNet).with_views(1)).unwrap();
    let s = model.init(0).unwrap();
    let shape = model.input_shape(1, 32);
    assert!(benchmark_inference(&model, &s, Phase::Training, shape, 0, MIN_RUNS - 1).is_err());
    let stats = benchmark_inference(&model, &s, Phase::Training, shape, 1, MIN_RUNS).unwrap();
    assert_eq!(stats.runs, MIN_RUNS);
    assert!(stats.p50_ms <= stats.p95_ms && stats.mean_ms > 0.0);
}

#[test]
fn latency_percentiles() {
    let s = latency_stats(&(1..=20).map(f64::from).collect::<Vec<_>>()).unwrap();
    assert_eq!((s.p50_ms, s.p95_ms, s.mean_ms), (10.0, 19.0, 10.5));
    assert!(latency_stats(&[]).is_err());
}

#[test]
fn fused_benchmark_reports_both() {
    let model = Model::new(ModelConfig::mlcnet()).unwrap();
    let s = model.init(0).unwrap();
    let r = benchmark_fused_vs_unfused(&model, &s, model.input_shape(1, 64), 1, MIN_RUNS).unwrap();
    assert!(r.ratio() > 0.0);
    assert!(r.to_string().contains("ratio"));
}
