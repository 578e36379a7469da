use fracdil_core::gradcheck::{check_layer, LayerCheckConfig, LayerFixture, DEFAULT_STEP};
use fracdil_core::{backward, forward, forward_integer, ConvLayerState, DilationVector, Shape4, Stream, Tensor4};

#[test]
fn random_layers_match_finite_differences() {
    let mut worst = 0.0f64;
    for seed in 100..130 {
        let cfg = LayerCheckConfig::random(seed);
        let report = check_layer(&cfg, seed, 1e-6, DEFAULT_STEP).unwrap();
        assert!(report.pass, "config {cfg:?}\n{report}");
        worst = worst.max(report.max_rel_error());
    }
    eprintln!("worst relative error over 30 configs: {worst:e}");
}

#[test]
fn batched_layer_matches_finite_differences() {
    let cfg = LayerCheckConfig {
        batch: 2,
        ..LayerCheckConfig::default()
    };
    let report = check_layer(&cfg, 3, 1e-6, DEFAULT_STEP).unwrap();
    assert!(report.pass, "{report}");
}

#[test]
fn input_gradient_is_adjoint_of_forward() {
    for seed in 0..10 {
        let mut cfg = LayerCheckConfig::random(seed + 500);
        cfg.batch = 2;
        let fx = LayerFixture::new(&cfg, seed).unwrap();
        let mut no_bias = fx.layer.clone();
        no_bias.bias_mut().fill(0.0);
        let y = forward(&fx.input, &no_bias).unwrap();
        let lhs = fx.grad_out.dot(&y).unwrap();
        let grads = backward(&fx.input, &fx.layer, &fx.grad_out).unwrap();
        let rhs = grads.d_input.dot(&fx.input).unwrap();
        assert!((lhs - rhs).abs() < 1e-8, "seed {seed}: {lhs} vs {rhs}");
    }
}

#[test]
fn integer_dilations_match_direct_lookup() {
    for seed in 0..10u64 {
        let mut rng = Stream::new(seed);
        let c_in = rng.range_inclusive(1, 4);
        let c_out = rng.range_inclusive(1, 4);
        let k = [1, 3, 5][rng.range_inclusive(0, 2)];
        let h = rng.range_inclusive(5, 12);
        let w = rng.range_inclusive(5, 12);
        let d_int: Vec<usize> = (0..c_in).map(|_| rng.range_inclusive(1, 4)).collect();
        let x = Tensor4::fill_random(Shape4::new(2, c_in, h, w), seed, -1.0, 1.0).unwrap();
        let weights = Tensor4::fill_random(Shape4::new(c_out, c_in, k, k), seed + 1, -1.0, 1.0).unwrap();
        let bias = (0..c_out).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let dil = DilationVector::new(d_int.iter().map(|&d| d as f64).collect(), 1.0, 4.0).unwrap();
        let layer = ConvLayerState::new(weights, bias, dil).unwrap();
        let a = forward(&x, &layer).unwrap();
        let b = forward_integer(&x, &layer, &d_int).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-12, "seed {seed}");
    }
}

#[test]
fn gradients_are_finite_and_shaped_like_parameters() {
    let cfg = LayerCheckConfig::random(77);
    let fx = LayerFixture::new(&cfg, 77).unwrap();
    let g = backward(&fx.input, &fx.layer, &fx.grad_out).unwrap();
    assert!(g.is_finite());
    assert_eq!(g.d_weights.shape(), fx.layer.weights().shape());
    assert_eq!(g.d_bias.len(), fx.layer.c_out());
    assert_eq!(g.d_dilation.len(), fx.layer.c_in());
    assert_eq!(g.d_input.shape(), fx.input.shape());
}
