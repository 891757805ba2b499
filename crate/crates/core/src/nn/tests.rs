use super::*;
use crate::autodiff::finite_diff_check_sampled;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::constant(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn trunk_store(config: &ResNetConfig, seed: u64) -> ParamStore {
    init_params(&resnet14_specs("trunk", config), seed).unwrap()
}

#[test]
fn trunk_shapes_follow_the_table() {
    let config = ResNetConfig::micro();
    let store = trunk_store(&config, 1);
    let c = config.channels;
    for t in [100usize, 160, 400] {
        let x = random_tensor(&[t, 40], t as u64);
        let (out, trace) =
            resnet14_forward(&mut Tape::new(), &store, "trunk", &x, &config, &mut ForwardCtx::eval()).unwrap();
        let q = t / 4;
        let expected = vec![
            ("conv1".to_string(), [t / 2, c[0], 20]),
            ("maxpool".to_string(), [q, c[0], 10]),
            ("res_conv1".to_string(), [q, c[0], 5]),
            ("res_conv2".to_string(), [q, c[1], 3]),
            ("res_conv3".to_string(), [q, c[2], 2]),
            ("res_conv4".to_string(), [q, c[3], 1]),
        ];
        assert_eq!(trace, expected);
        assert_eq!(out.shape(), &[q, c[3]]);
    }
}

#[test]
fn full_trunk_on_400_frames() {
    let config = ResNetConfig::full();
    let store = trunk_store(&config, 2);
    let x = random_tensor(&[400, 40], 3);
    let (out, trace) =
        resnet14_forward(&mut Tape::new(), &store, "trunk", &x, &config, &mut ForwardCtx::eval()).unwrap();
    assert_eq!(out.shape(), &[100, 512]);
    assert_eq!(trace[1], ("maxpool".to_string(), [100, 64, 10]));
}

#[test]
fn odd_lengths_round_up() {
    let config = ResNetConfig::micro();
    let store = trunk_store(&config, 1);
    for t in [8usize, 9, 13, 101] {
        let x = random_tensor(&[t, 40], 4);
        let (out, _) =
            resnet14_forward(&mut Tape::new(), &store, "trunk", &x, &config, &mut ForwardCtx::eval()).unwrap();
        assert_eq!(out.shape()[0], t.div_ceil(4), "T = {t}");
    }
}

#[test]
fn short_input_is_rejected() {
    let config = ResNetConfig::micro();
    let store = trunk_store(&config, 1);
    let x = random_tensor(&[7, 40], 4);
    let err = resnet14_forward(&mut Tape::new(), &store, "trunk", &x, &config, &mut ForwardCtx::eval());
    assert!(matches!(err, Err(Error::InputTooShort { frames: 7, min: 8 })));
}

fn manual_conv_count(channels: [usize; 4], blocks: [usize; 4]) -> usize {
    // Counted by hand from the layer list: weight + bias per conv.
    let conv = |cin: usize, cout: usize, k: usize| cout * cin * k * k + cout;
    let mut total = conv(1, channels[0], 7);
    let mut cin = channels[0];
    for (s, &cout) in channels.iter().enumerate() {
        total += conv(cin, cout, 3) + conv(cout, cout, 3) + conv(cin, cout, 1);
        total += (blocks[s] - 1) * 2 * conv(cout, cout, 3);
        cin = cout;
    }
    total
}

#[test]
fn full_trunk_parameter_count_near_published_figure() {
    let config = ResNetConfig {
        no_bn: true,
        ..ResNetConfig::full()
    };
    let n = count_params(&resnet14_specs("trunk", &config));
    assert_eq!(n, manual_conv_count(config.channels, config.blocks));
    assert!((n as f64 - 5.36e6).abs() / 5.36e6 < 0.03, "{n}");
    assert_eq!(n, trunk_store(&config, 0).param_count());
}

#[test]
fn micro_trunk_parameter_count_is_stable() {
    let config = ResNetConfig::micro();
    assert_eq!(count_params(&resnet14_specs("trunk", &config)), 83_464);
    let no_bn = ResNetConfig { no_bn: true, ..config };
    assert_eq!(count_params(&resnet14_specs("trunk", &no_bn)), 83_048);
    assert_eq!(83_048, manual_conv_count(no_bn.channels, no_bn.blocks));
}

#[test]
fn doubling_channels_roughly_quadruples() {
    let base = ResNetConfig {
        no_bn: true,
        ..ResNetConfig::full()
    };
    let wide = ResNetConfig {
        channels: base.channels.map(|c| 2 * c),
        ..base.clone()
    };
    let ratio = count_params(&resnet14_specs("t", &wide)) as f64 / count_params(&resnet14_specs("t", &base)) as f64;
    assert!((3.9..4.01).contains(&ratio), "{ratio}");
}

#[test]
fn eval_forward_is_deterministic_and_unaffected_by_other_utterances() {
    let config = ResNetConfig::micro();
    let store = trunk_store(&config, 5);
    let x = random_tensor(&[40, 40], 6);
    let run = |input: &Tensor| {
        resnet14_forward(&mut Tape::new(), &store, "trunk", input, &config, &mut ForwardCtx::eval())
            .unwrap()
            .0
            .to_vec()
    };
    let a = run(&x);
    let _ = resnet14_forward(
        &mut Tape::new(),
        &store,
        "trunk",
        &random_tensor(&[64, 40], 7),
        &config,
        &mut ForwardCtx::train(1),
    )
    .unwrap();
    let _ = run(&random_tensor(&[32, 40], 8));
    assert_eq!(a, run(&x));
}

#[test]
fn training_forward_reports_batch_statistics() {
    let config = ResNetConfig::micro();
    let mut store = trunk_store(&config, 5);
    let mut ctx = ForwardCtx::train(0);
    resnet14_forward(&mut Tape::new(), &store, "trunk", &random_tensor(&[32, 40], 1), &config, &mut ctx).unwrap();
    // one entry per conv layer
    let convs = resnet14_specs("trunk", &config).iter().filter(|s| s.name.ends_with(".w")).count();
    assert_eq!(ctx.bn_updates.len(), convs);
    let before = store.get("trunk.stem.bn.running_mean").unwrap().to_vec();
    apply_bn_updates(&mut store, &ctx.bn_updates, 0.1).unwrap();
    let after = store.get("trunk.stem.bn.running_mean").unwrap().to_vec();
    let batch = &ctx.bn_updates[0].mean;
    for ((b, a), m) in before.iter().zip(&after).zip(batch) {
        assert!((a - (0.9 * b + 0.1 * m)).abs() < 1e-12);
    }
}

fn zero_store(specs: &[ParamSpec]) -> ParamStore {
    let zeroed: Vec<ParamSpec> = specs
        .iter()
        .map(|s| ParamSpec {
            init: Init::Constant(0.0),
            ..s.clone()
        })
        .collect();
    init_params(&zeroed, 0).unwrap()
}

#[test]
fn zero_lstm_maps_zero_to_zero() {
    let config = RnnConfig::blstm(2, 8);
    let store = zero_store(&rnn_specs("rnn", 5, &config));
    let x = Tensor::zeros(&[6, 5]);
    let y = rnn_forward(&mut Tape::new(), &store, "rnn", &x, &config, 0.0, &mut ForwardCtx::eval()).unwrap();
    assert_eq!(y.shape(), &[6, 16]);
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn single_frame_directions_agree_with_mirrored_weights() {
    for kind in [RnnKind::Lstm, RnnKind::Gru] {
        let config = RnnConfig { kind, layers: 1, hidden: 6 };
        let mut store = init_params(&rnn_specs("rnn", 4, &config), 9).unwrap();
        let fwd: Vec<(String, Tensor)> = store
            .iter()
            .filter(|(n, _)| n.contains(".fwd."))
            .map(|(n, t)| (n.replace(".fwd.", ".bwd."), t.clone()))
            .collect();
        for (name, t) in fwd {
            store = store.with_replaced(&name, t).unwrap();
        }
        let x = random_tensor(&[1, 4], 10);
        let y = rnn_forward(&mut Tape::new(), &store, "rnn", &x, &config, 0.0, &mut ForwardCtx::eval()).unwrap();
        let (a, b) = y.data().split_at(6);
        assert_eq!(a, b, "{kind:?}");
    }
}

#[test]
fn paper_sized_blstm_is_512_wide() {
    let config = RnnConfig::blstm(2, 256);
    let store = init_params(&rnn_specs("rnn", 512, &config), 1).unwrap();
    let y = rnn_forward(
        &mut Tape::new(),
        &store,
        "rnn",
        &random_tensor(&[3, 512], 2),
        &config,
        0.0,
        &mut ForwardCtx::eval(),
    )
    .unwrap();
    assert_eq!(y.shape(), &[3, 512]);
}

#[test]
fn rnn_rejects_wrong_width() {
    let config = RnnConfig::blstm(1, 4);
    let store = init_params(&rnn_specs("rnn", 5, &config), 1).unwrap();
    let err = rnn_forward(
        &mut Tape::new(),
        &store,
        "rnn",
        &random_tensor(&[3, 6], 2),
        &config,
        0.0,
        &mut ForwardCtx::eval(),
    );
    assert!(matches!(err, Err(Error::InvalidShape(_))));
}

#[test]
fn lstm_matches_hand_computed_step() {
    // One frame, one unit, one input: h = σ(o)·tanh(σ(i)·tanh(g)).
    let config = RnnConfig::blstm(1, 1);
    let mut store = zero_store(&rnn_specs("rnn", 1, &config));
    let w = Tensor::new(&[1, 4], vec![0.5, -0.3, 0.8, 0.2], true).unwrap();
    store = store.with_replaced("rnn.l0.fwd.w_ih", w).unwrap();
    let x = Tensor::constant(&[1, 1], vec![1.5]).unwrap();
    let y = rnn_forward(&mut Tape::new(), &store, "rnn", &x, &config, 0.0, &mut ForwardCtx::eval()).unwrap();
    let s = |v: f64| 1.0 / (1.0 + (-v).exp());
    let expected = s(0.2 * 1.5) * (s(0.5 * 1.5) * (0.8f64 * 1.5).tanh()).tanh();
    assert!((y.data()[0] as f64 - expected).abs() < 1e-12);
    assert_eq!(y.data()[1], 0.0);
}

#[test]
fn init_is_deterministic_and_bounded() {
    let specs: Vec<ParamSpec> = resnet14_specs("trunk", &ResNetConfig::micro())
        .into_iter()
        .chain(rnn_specs("rnn", 64, &RnnConfig::blstm(2, 32)))
        .chain(linear_specs("out", 64, 13))
        .collect();
    let a = init_params(&specs, 11).unwrap();
    let b = init_params(&specs, 11).unwrap();
    let c = init_params(&specs, 12).unwrap();
    assert!(a.bit_equal(&b));
    assert_eq!(a.content_hash(), b.content_hash());
    assert!(!a.bit_equal(&c));
    for spec in &specs {
        let t = a.get(&spec.name).unwrap();
        assert!(t.data().iter().all(|v| v.is_finite()));
        if spec.name.ends_with(".w") || spec.name.contains(".w_") {
            let fan_in: usize = spec.shape[1..].iter().product::<usize>().max(1);
            let fan_in = if spec.shape.len() == 2 { spec.shape[0] } else { fan_in };
            let bound = (6.0 / fan_in as f64).sqrt();
            assert!(t.data().iter().all(|v| (v.abs() as f64) <= bound), "{}", spec.name);
        }
        if spec.name.ends_with("fwd.b") {
            assert_eq!(&t.data()[32..64], &[1.0; 32][..]);
            assert!(t.data()[..32].iter().all(|&v| v == 0.0));
        }
    }
}

#[test]
fn duplicate_names_are_rejected() {
    let specs = [
        ParamSpec::new("a", &[2], Init::Constant(0.0)),
        ParamSpec::new("a", &[2], Init::Constant(0.0)),
    ];
    assert!(matches!(init_params(&specs, 0), Err(Error::Config(_))));
}

#[test]
fn time_pool_examples() {
    let mut tape = Tape::new();
    let x = Tensor::constant(&[2, 2], vec![1.0, 3.0, 3.0, 1.0]).unwrap();
    assert_eq!(time_avg_pool(&mut tape, &x).unwrap().to_vec(), vec![2.0, 2.0]);
    let one = Tensor::constant(&[1, 3], vec![0.5, -1.0, 4.0]).unwrap();
    assert_eq!(time_avg_pool(&mut tape, &one).unwrap().to_vec(), one.to_vec());
    let flat = Tensor::constant(&[3], vec![1.0, 2.0, 3.0]).unwrap();
    assert!(matches!(time_avg_pool(&mut tape, &flat), Err(Error::InvalidShape(_))));
}

#[test]
fn dropout_is_identity_in_eval_and_scales_in_training() {
    let x = random_tensor(&[20, 10], 1);
    let mut tape = Tape::new();
    let same = dropout(&mut tape, &x, 0.5, &mut ForwardCtx::eval()).unwrap();
    assert_eq!(same.to_vec(), x.to_vec());
    let dropped = dropout(&mut tape, &x, 0.5, &mut ForwardCtx::train(3)).unwrap();
    let zeros = dropped.data().iter().filter(|&&v| v == 0.0).count();
    assert!((60..140).contains(&zeros), "{zeros}");
    for (d, v) in dropped.data().iter().zip(x.data()) {
        assert!(*d == 0.0 || (d - 2.0 * v).abs() < 1e-12);
    }
}

#[test]
fn trunk_and_blstm_pass_sampled_gradient_check() {
    let trunk = ResNetConfig::micro();
    let rnn = RnnConfig::blstm(2, 8);
    let specs: Vec<ParamSpec> = resnet14_specs("trunk", &trunk)
        .into_iter()
        .chain(rnn_specs("rnn", trunk.output_dim(), &rnn))
        .collect();
    let store = init_params(&specs, 21).unwrap();
    let x = random_tensor(&[16, 40], 22);
    let loss = |tape: &mut Tape, params: &ParamStore| -> Result<Tensor> {
        let mut ctx = ForwardCtx::train(0);
        let (h, _) = resnet14_forward(tape, params, "trunk", &x, &trunk, &mut ctx)?;
        let y = rnn_forward(tape, params, "rnn", &h, &rnn, 0.0, &mut ctx)?;
        let sq = tape.mul(&y, &y)?;
        tape.sum(&sq, None)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for name in [
        "trunk.stem.w",
        "trunk.s1.b0.conv1.w",
        "trunk.s2.b1.conv2.bn.gamma",
        "trunk.s4.b0.proj.w",
        "rnn.l0.fwd.w_ih",
        "rnn.l1.bwd.w_hh",
        "rnn.l1.fwd.b",
    ] {
        let p = store.get(name).unwrap();
        let coords: Vec<usize> = (0..4).map(|_| rng.gen_range(0..p.numel())).collect();
        let err = finite_diff_check_sampled(
            |tape, probe| loss(tape, &store.with_replaced(name, probe.clone())?),
            p,
            1e-6,
            &coords,
        )
        .unwrap();
        assert!(err < 1e-4, "{name}: {err}");
    }
}

#[test]
fn gru_passes_gradient_check() {
    let config = RnnConfig { kind: RnnKind::Gru, layers: 2, hidden: 3 };
    let store = init_params(&rnn_specs("rnn", 4, &config), 31).unwrap();
    let x = random_tensor(&[5, 4], 32);
    for name in ["rnn.l0.fwd.w_ih", "rnn.l0.bwd.b_hh", "rnn.l1.fwd.w_hh"] {
        let p = store.get(name).unwrap();
        let err = crate::autodiff::finite_diff_check(
            |tape, probe| {
                let params = store.with_replaced(name, probe.clone())?;
                let y = rnn_forward(tape, &params, "rnn", &x, &config, 0.0, &mut ForwardCtx::eval())?;
                let sq = tape.mul(&y, &y)?;
                tape.sum(&sq, None)
            },
            p,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "{name}: {err}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn pooling_ignores_frame_order(t in 1usize..12, n in 1usize..6, seed in 0u64..1000) {
        let x = random_tensor(&[t, n], seed);
        let mut order: Vec<usize> = (0..t).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        for i in (1..t).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let shuffled: Vec<Real> = order.iter().flat_map(|&r| x.data()[r * n..(r + 1) * n].to_vec()).collect();
        let y = Tensor::constant(&[t, n], shuffled).unwrap();
        let mut tape = Tape::new();
        let a = time_avg_pool(&mut tape, &x).unwrap();
        let b = time_avg_pool(&mut tape, &y).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            prop_assert!((p - q).abs() < 1e-12);
        }
    }
}
