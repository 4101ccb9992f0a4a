mod common;

use dualarb::geometry::{RefMode, ScaleTask};
use dualarb::model::{init_params, Branch, DualArbNet, ModelConfig, ParameterSet};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn output_shapes_follow_the_task() {
    let net = DualArbNet::<f32>::init(ModelConfig::tiny()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (tar, hr) in [((4, 4), (10, 10)), ((6, 6), (9, 9)), ((5, 5), (5, 5))] {
        let t = common::rand_plane(tar.0, tar.1, &mut rng).cast::<f32>();
        let r = common::rand_plane(hr.0, hr.1, &mut rng).cast::<f32>();
        let task = ScaleTask::new(tar, hr, hr, RefMode::Hr).unwrap();
        let out = net.forward(&t, Some(&r), &task, true).unwrap();
        assert_eq!(out.sr_tar.dims(), hr);
        assert_eq!(out.sr_ref.unwrap().dims(), hr);
        assert!(out.sr_tar.is_finite());
    }
}

#[test]
fn region_decoding_is_a_crop_of_the_full_grid() {
    let net = DualArbNet::<f32>::init(ModelConfig::tiny()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let t = common::rand_plane(6, 6, &mut rng).cast::<f32>();
    let r = common::rand_plane(15, 15, &mut rng).cast::<f32>();
    let task = ScaleTask::new((6, 6), (15, 15), (15, 15), RefMode::Hr).unwrap();
    let prep = net.prepare(&t, Some(&r), &task).unwrap();
    let full = net.decode_region(&prep, Branch::Target, 0..15, 0..15).unwrap();
    let part = net.decode_region(&prep, Branch::Target, 3..11, 2..9).unwrap();
    assert_eq!(part.data, full.crop(3, 2, 8, 7).unwrap().data);
    let direct = net.forward(&t, Some(&r), &task, false).unwrap().sr_tar;
    assert_eq!(direct.data, full.data);
}

#[test]
fn init_is_deterministic_and_seed_dependent() {
    let cfg = ModelConfig::tiny();
    let a: ParameterSet<f32> = init_params(&cfg).unwrap();
    let b: ParameterSet<f32> = init_params(&cfg).unwrap();
    let mut other = cfg.clone();
    other.seed = 9;
    let c: ParameterSet<f32> = init_params(&other).unwrap();
    let flat = |p: &ParameterSet<f32>| p.arrays().into_iter().flat_map(|(_, d)| d.to_vec()).collect::<Vec<_>>();
    assert_eq!(flat(&a), flat(&b));
    assert_ne!(flat(&a), flat(&c));
}

#[test]
fn backward_matches_finite_differences() {
    let c = common::gradient_check(DualArbNet::init(ModelConfig::tiny()).unwrap(), 4, 4, 1e-3);
    println!(
        "{} groups, {} samples ({} crossed a kink), worst relative error {:e} in {}",
        c.groups, c.samples, c.kinked, c.worst, c.worst_group
    );
    assert!(c.worst < 1e-3, "{}: {:e}", c.worst_group, c.worst);
}

#[test]
fn frozen_replay_reproduces_the_free_pass() {
    let net = DualArbNet::<f64>::init(ModelConfig::tiny()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let t = common::rand_plane(5, 5, &mut rng);
    let r = common::rand_plane(10, 10, &mut rng);
    let task = ScaleTask::new((5, 5), (10, 10), (10, 10), RefMode::Hr).unwrap();
    let (sr, cache) = net.forward_train(&t, Some(&r), &task).unwrap();
    let pattern = cache.activation_pattern();
    let (again, _) = net.forward_train_frozen(&t, Some(&r), &task, &pattern).unwrap();
    assert_eq!(sr.data, again.data);
    assert!(net.forward_train_frozen(&t, Some(&r), &task, &pattern[1..]).is_err());
}

#[test]
fn init_bounds_and_output_range_over_seeds() {
    for seed in 0..100 {
        let mut cfg = ModelConfig::tiny();
        cfg.seed = seed;
        let net = DualArbNet::<f32>::init(cfg).unwrap();
        assert!(net.params.is_finite());
        let w0 = &net.params.idf.layers[0];
        assert!(w0.weight.iter().all(|v| v.abs() <= 30.0 / 4.0));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = common::rand_plane(6, 6, &mut rng).cast::<f32>();
        let r = common::rand_plane(12, 12, &mut rng).cast::<f32>();
        let task = ScaleTask::new((6, 6), (12, 12), (12, 12), RefMode::Hr).unwrap();
        let out = net.forward(&t, Some(&r), &task, true).unwrap();
        let max = out
            .sr_tar
            .data
            .iter()
            .chain(&out.sr_ref.unwrap().data)
            .fold(0f32, |m, v| m.max(v.abs()));
        assert!(max < 10.0, "seed {seed}: {max}");
    }
}

#[test]
fn bypassed_fusion_passes_the_concatenation_through() {
    let mut cfg = ModelConfig::tiny();
    cfg.fusion_bypass = true;
    let net = DualArbNet::<f64>::init(cfg.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let t = common::rand_plane(4, 4, &mut rng);
    let r = common::rand_plane(8, 8, &mut rng);
    let task = ScaleTask::new((4, 4), (8, 8), (8, 8), RefMode::Hr).unwrap();
    let prep = net.prepare(&t, Some(&r), &task).unwrap();
    let f0 = dualarb::tensor::FeatureMap::concat(&prep.tar_up, prep.ref_up.as_ref().unwrap()).unwrap();
    assert_eq!(prep.fused.len(), cfg.fusion_layers);
    for f in &prep.fused {
        assert_eq!(f.data, f0.data);
    }
}

#[test]
fn zero_image_with_zero_biases_encodes_to_zero() {
    let cfg = ModelConfig::tiny();
    let mut net = DualArbNet::<f64>::init(cfg).unwrap();
    for (name, a) in net.params.arrays_mut() {
        if name.starts_with("encoder.") && name.ends_with(".bias") {
            a.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let f = net.encode(&dualarb::tensor::Plane::filled(5, 5, 0.0)).unwrap();
    assert_eq!(f.c, 9 * 4);
    assert!(f.data.iter().all(|&v| v == 0.0));
}
