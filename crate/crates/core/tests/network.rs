use cascadeseg::network::{build_fcn, FcnConfig, LayerKind, NetworkInstance, Stage};
use cascadeseg::tensor::{sgd_momentum_step, Graph, Tensor};
use cascadeseg::{NUM_CLASSES, NUM_LANDMARKS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_tensor(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<f32> {
    Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
}

/// Fills every parameter (including zero-initialised score layers) with
/// random values so no path through the network is silent.
fn randomize(net: &mut NetworkInstance<f32>, seed: u64) {
    let mut r = rng(seed);
    for p in net.params_mut() {
        let t = random_tensor(p.tensor.shape(), &mut r).map(|v| v * 0.2);
        p.replace(t);
    }
}

#[test]
fn full_scale_layer_list_matches_vgg_fcn() {
    let mut cfg = FcnConfig::full(3, NUM_LANDMARKS);
    cfg.skips.pool4 = true;
    cfg.skips.pool3 = true;
    let names: Vec<String> = cfg.layers().into_iter().map(|l| l.name).collect();
    let expected = [
        "conv1_1",
        "conv1_2",
        "conv2_1",
        "conv2_2",
        "conv3_1",
        "conv3_2",
        "conv3_3",
        "conv4_1",
        "conv4_2",
        "conv4_3",
        "conv5_1",
        "conv5_2",
        "conv5_3",
        "fc6_conv",
        "fc7_conv",
        "fc8_conv",
        "deconv_32",
        "score_pool4",
        "deconv_16",
        "score_pool3",
        "deconv_8",
    ];
    assert_eq!(names, expected);
    let layers = cfg.layers();
    let find = |n: &str| layers.iter().find(|l| l.name == n).unwrap().kind.clone();
    assert_eq!(
        find("fc6_conv"),
        LayerKind::Conv {
            cin: 512,
            cout: 4096,
            k: 7
        }
    );
    assert_eq!(
        find("fc7_conv"),
        LayerKind::Conv {
            cin: 4096,
            cout: 4096,
            k: 1
        }
    );
    assert_eq!(
        find("fc8_conv"),
        LayerKind::Conv {
            cin: 4096,
            cout: 68,
            k: 1
        }
    );
    assert_eq!(
        find("deconv_32"),
        LayerKind::Deconv {
            channels: 68,
            k: 4,
            stride: 2,
            crop: 1
        }
    );
    assert_eq!(
        find("deconv_16"),
        LayerKind::Deconv {
            channels: 68,
            k: 4,
            stride: 2,
            crop: 1
        }
    );
    assert_eq!(
        find("deconv_8"),
        LayerKind::Deconv {
            channels: 68,
            k: 16,
            stride: 8,
            crop: 4
        }
    );
    assert_eq!(
        find("score_pool4"),
        LayerKind::Conv {
            cin: 512,
            cout: 68,
            k: 1
        }
    );
    assert_eq!(
        find("score_pool3"),
        LayerKind::Conv {
            cin: 256,
            cout: 68,
            k: 1
        }
    );
}

#[test]
fn full_scale_segmentation_network_builds() {
    let cfg = FcnConfig::full(3, NUM_CLASSES);
    let net = build_fcn::<f32, _>(&cfg, &mut rng(0)).unwrap();
    let fc6 = net.param("fc6_conv.weight").unwrap();
    assert_eq!(fc6.tensor.shape(), &[4096, 512, 7, 7]);
    assert_eq!(net.param("deconv_8.weight").unwrap().tensor.shape(), &[8, 8, 16, 16]);
    let expected: usize = cfg.layers().iter().map(|l| l.param_count()).sum();
    assert_eq!(net.param_count(), expected);
}

#[test]
fn mini_parameter_count_by_hand() {
    let cfg = FcnConfig::mini(3, NUM_CLASSES);
    let net = build_fcn::<f64, _>(&cfg, &mut rng(1)).unwrap();
    let conv = |cin: usize, cout: usize, k: usize| cout * cin * k * k + cout;
    let trunk = conv(3, 16, 3)
        + conv(16, 16, 3)
        + conv(16, 32, 3)
        + conv(32, 32, 3)
        + conv(32, 64, 3)
        + conv(64, 64, 3)
        + conv(64, 64, 3);
    let head = conv(64, 128, 3) + conv(128, 128, 1) + conv(128, 8, 1);
    // three 4x4 upsampling kernels over 8 channels
    let up = 3 * 8 * 8 * 16;
    assert_eq!(net.param_count(), trunk + head + up);
    assert_eq!(net.param_count(), 203_480);
}

#[test]
fn output_matches_input_resolution_for_every_stage() {
    let mut net = build_fcn::<f32, _>(&FcnConfig::mini(3, NUM_CLASSES), &mut rng(2)).unwrap();
    for stage in Stage::ALL {
        net.enable_stage(stage).unwrap();
        for (h, w) in [(64, 64), (32, 48), (8, 16)] {
            let y = net.predict(&Tensor::zeros(&[3, h, w])).unwrap();
            assert_eq!(y.shape(), &[NUM_CLASSES, h, w]);
        }
    }
}

#[test]
fn inputs_not_divisible_by_stride_are_rejected() {
    let net = build_fcn::<f32, _>(&FcnConfig::mini(3, NUM_CLASSES), &mut rng(3)).unwrap();
    assert!(net.predict(&Tensor::zeros(&[3, 60, 64])).is_err());
    assert!(net.predict(&Tensor::zeros(&[4, 64, 64])).is_err());
}

#[test]
fn invalid_configs_are_rejected() {
    let base = FcnConfig::mini(3, NUM_CLASSES);
    let mut c = base.clone();
    c.output_channels = 7;
    assert!(c.validate().is_err());
    let mut c = base.clone();
    c.blocks.truncate(2);
    c.skips.pool3 = true;
    assert!(c.validate().is_err());
    let mut c = base.clone();
    c.input_size = 60;
    assert!(c.validate().is_err());
    let mut c = base;
    c.head_kernels = (2, 1);
    assert!(c.validate().is_err());
}

#[test]
fn zero_input_gives_upsampled_fc8_bias() {
    let mut net = build_fcn::<f64, _>(&FcnConfig::mini(3, NUM_CLASSES), &mut rng(4)).unwrap();
    let bias: Vec<f64> = (0..NUM_CLASSES).map(|c| c as f64 - 3.5).collect();
    net.param_mut("fc8_conv.bias")
        .unwrap()
        .replace(Tensor::from_vec(&[NUM_CLASSES], bias.clone()).unwrap());
    let y = net.predict(&Tensor::zeros(&[3, 64, 64])).unwrap();
    // bilinear upsampling of a constant is that constant, borders included
    for (c, b) in bias.iter().enumerate() {
        for r in 0..64 {
            for col in 0..64 {
                let v = y.data()[(c * 64 + r) * 64 + col];
                assert!((v - b).abs() < 1e-12, "channel {c} at ({r},{col}): {v}");
            }
        }
    }
}

#[test]
fn enabling_a_stage_keeps_outputs_until_trained() {
    let mut net = build_fcn::<f32, _>(&FcnConfig::mini(3, NUM_CLASSES), &mut rng(5)).unwrap();
    randomize(&mut net, 6);
    let x = random_tensor(&[3, 64, 64], &mut rng(7));
    let before = net.predict(&x).unwrap();
    net.enable_stage(Stage::Stride16).unwrap();
    assert!(net
        .param("score_pool4.weight")
        .unwrap()
        .tensor
        .data()
        .iter()
        .all(|&v| v == 0.0));
    assert_eq!(net.predict(&x).unwrap(), before);
    net.enable_stage(Stage::Stride8).unwrap();
    assert_eq!(net.predict(&x).unwrap(), before);
    // once the skip carries weight, the output moves
    let w = random_tensor(net.param("score_pool4.weight").unwrap().tensor.shape(), &mut rng(8));
    net.param_mut("score_pool4.weight").unwrap().replace(w);
    assert_ne!(net.predict(&x).unwrap(), before);
}

#[test]
fn expanded_network_ignores_zero_landmark_channels() {
    let mut net = build_fcn::<f32, _>(&FcnConfig::mini(3, NUM_CLASSES), &mut rng(9)).unwrap();
    net.enable_stage(Stage::Stride8).unwrap();
    randomize(&mut net, 10);
    let guided = net.expand_first_layer(NUM_LANDMARKS).unwrap();
    assert_eq!(guided.config().input_channels, 71);
    assert_eq!(guided.param("conv1_1.weight").unwrap().tensor.shape(), &[16, 71, 3, 3]);
    let x = random_tensor(&[3, 32, 32], &mut rng(11));
    let stacked = Tensor::concat_channels(&[&x, &Tensor::zeros(&[68, 32, 32])]).unwrap();
    assert_eq!(guided.predict(&stacked).unwrap(), net.predict(&x).unwrap());
    // every other parameter is untouched
    for (a, b) in net.params().iter().zip(guided.params()).skip(1) {
        assert_eq!(a.tensor, b.tensor, "{}", a.name);
    }
    assert!(guided.expand_first_layer(NUM_LANDMARKS).is_err());
}

#[test]
fn expansion_starts_with_fresh_momentum() {
    let mut net = build_fcn::<f64, _>(&FcnConfig::mini(3, NUM_CLASSES), &mut rng(14)).unwrap();
    for p in net.params_mut() {
        let g = Tensor::filled(p.tensor.shape(), 1.0);
        p.accumulate_grad(&g).unwrap();
    }
    sgd_momentum_step(net.params_mut(), 0.1, 0.9).unwrap();
    assert!(net
        .params()
        .iter()
        .filter(|p| p.trainable)
        .all(|p| p.velocity().data().iter().all(|&v| v == 1.0)));
    let guided = net.expand_first_layer(NUM_LANDMARKS).unwrap();
    for p in guided.params() {
        assert!(p.velocity().data().iter().all(|&v| v == 0.0), "{}", p.name);
        assert!(p.grad().is_none());
    }
}

#[test]
fn set_trainable_selects_by_layer() {
    let mut net = build_fcn::<f32, _>(&FcnConfig::mini(3, NUM_CLASSES), &mut rng(12)).unwrap();
    assert_eq!(net.set_trainable(|l| l == "conv1_1"), 2);
    assert!(net.params().iter().all(|p| p.trainable == (p.layer() == "conv1_1")));
    assert_eq!(net.set_trainable(|l| l == "no_such_layer"), 0);
    assert!(net.params().iter().all(|p| !p.trainable));
}

#[test]
fn upsampling_is_fixed_unless_configured() {
    let net = build_fcn::<f32, _>(&FcnConfig::mini(3, NUM_CLASSES), &mut rng(13)).unwrap();
    for p in net.params() {
        assert_eq!(p.trainable, !p.name.starts_with("deconv_"), "{}", p.name);
    }
    let mut cfg = FcnConfig::mini(3, NUM_CLASSES);
    cfg.learn_upsampling = true;
    let net = build_fcn::<f32, _>(&cfg, &mut rng(13)).unwrap();
    assert!(net.params().iter().all(|p| p.trainable));
}

#[test]
fn frozen_parameters_get_no_gradient() {
    let mut net = build_fcn::<f64, _>(&FcnConfig::mini(3, NUM_CLASSES), &mut rng(14)).unwrap();
    net.set_trainable(|l| l == "fc8_conv");
    let mut g = Graph::new();
    let x = g.constant(random_tensor(&[3, 16, 16], &mut rng(15)).cast());
    let pass = net.forward(&mut g, x).unwrap();
    let loss = g.dot(pass.output, &Tensor::filled(&[8, 16, 16], 1.0)).unwrap();
    g.backward(loss).unwrap();
    net.accumulate_grads(&g, &pass).unwrap();
    for p in net.params() {
        assert_eq!(p.grad().is_some(), p.layer() == "fc8_conv", "{}", p.name);
    }
}

#[test]
fn checkpoint_restores_by_name() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.cseg");
    let mut cfg = FcnConfig::mini(3, NUM_LANDMARKS);
    cfg.skips.pool4 = true;
    let mut net = build_fcn::<f32, _>(&cfg, &mut rng(16)).unwrap();
    randomize(&mut net, 17);
    net.save(&path).unwrap();
    let back = NetworkInstance::<f32>::load(&cfg, &path).unwrap();
    for (a, b) in net.params().iter().zip(back.params()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.tensor, b.tensor);
    }
    // a configuration expecting more layers cannot load it
    cfg.skips.pool3 = true;
    let err = NetworkInstance::<f32>::load(&cfg, &path).unwrap_err();
    assert!(err.to_string().contains("score_pool3"), "{err}");
}

#[test]
fn config_text_round_trip() {
    let mut cfg = FcnConfig::mini(71, NUM_CLASSES);
    cfg.skips.pool4 = true;
    cfg.head_width = 96;
    cfg.learn_upsampling = true;
    assert_eq!(FcnConfig::from_text(&cfg.to_text()).unwrap(), cfg);
    assert!(FcnConfig::from_text("blocks=2x16,3").is_err());
    assert!(FcnConfig::from_text("skips=pool5").is_err());
}

#[test]
fn same_seed_same_weights() {
    let cfg = FcnConfig::mini(3, NUM_LANDMARKS);
    let a = build_fcn::<f32, _>(&cfg, &mut rng(18)).unwrap();
    let b = build_fcn::<f32, _>(&cfg, &mut rng(18)).unwrap();
    let c = build_fcn::<f32, _>(&cfg, &mut rng(19)).unwrap();
    assert!(a.params().iter().zip(b.params()).all(|(x, y)| x.tensor == y.tensor));
    assert!(a.params().iter().zip(c.params()).any(|(x, y)| x.tensor != y.tensor));
}
