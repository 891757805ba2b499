use super::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::constant(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Values bounded away from zero, for relu.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: Real = rng.gen_range(0.05..1.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::constant(shape, data).unwrap()
}

/// Distinct values at least 0.01 apart, for max-pooling.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut data: Vec<Real> = (0..n).map(|i| i as Real * 0.01).collect();
    data.shuffle(rng);
    Tensor::constant(shape, data).unwrap()
}

/// `Σ w ⊙ y` with fixed pseudo-random weights, so every output coordinate
/// contributes a distinct cotangent.
fn weighted_sum(tape: &mut Tape, y: &Tensor) -> Result<Tensor> {
    let w: Vec<Real> = (0..y.numel()).map(|i| ((i * 7 + 3) % 11) as Real / 5.0 - 1.0).collect();
    let w = Tensor::constant(y.shape(), w)?;
    let p = tape.mul(y, &w)?;
    tape.sum(&p, None)
}

const EPS: Real = 1e-6;
const TOL: Real = 1e-5;

fn check_unary(prim: Primitive, x: &Tensor) -> Real {
    finite_diff_check(
        |tape, x| {
            let y = tape.apply(prim.clone(), &[x])?;
            weighted_sum(tape, &y)
        },
        x,
        EPS,
    )
    .unwrap()
}

/// Checks input `which` of a multi-input primitive, holding the rest fixed.
fn check_input(prim: Primitive, inputs: &[Tensor], which: usize) -> Real {
    finite_diff_check(
        |tape, x| {
            let mut args: Vec<&Tensor> = inputs.iter().collect();
            args[which] = x;
            let y = tape.apply(prim.clone(), &args)?;
            weighted_sum(tape, &y)
        },
        &inputs[which],
        EPS,
    )
    .unwrap()
}

#[test]
fn tensor_new_examples() {
    let eye = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0], false).unwrap();
    assert_eq!(eye.shape(), &[2, 2]);
    assert_eq!(eye.data(), &[1.0, 0.0, 0.0, 1.0]);

    let z = Tensor::new(&[3], vec![0.0; 3], true).unwrap();
    let g = Gradients::default().get(&z);
    assert_eq!(g.data(), &[0.0; 3]);

    assert!(matches!(
        Tensor::new(&[2], vec![1.0, 2.0, 3.0], false),
        Err(Error::InvalidShape(_))
    ));
}

#[test]
fn apply_examples() {
    let mut tape = Tape::new();
    let a = Tensor::constant(&[2, 3], vec![1.0; 6]).unwrap();
    let b = Tensor::constant(&[3, 2], vec![1.0; 6]).unwrap();
    assert_eq!(tape.matmul(&a, &b).unwrap().shape(), &[2, 2]);

    let x = Tensor::constant(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
    assert_eq!(tape.relu(&x).unwrap().data(), &[0.0, 0.0, 2.0]);

    let x = Tensor::constant(&[2], vec![0.0, 0.0]).unwrap();
    let y = tape.log_softmax(&x, 0).unwrap();
    let ln2 = std::f64::consts::LN_2 as Real;
    assert!(y.data().iter().all(|v| (v + ln2).abs() < 1e-12));

    assert!(matches!(tape.matmul(&a, &a), Err(Error::InvalidShape(_))));
    assert!(matches!(
        tape.log_softmax(&x, 1),
        Err(Error::InvalidAxis { axis: 1, rank: 1 })
    ));
    assert!(matches!(tape.mean(&a, Some(2)), Err(Error::InvalidAxis { .. })));
}

#[test]
fn backward_examples() {
    let x = Tensor::new(&[2], vec![1.0, 2.0], true).unwrap();
    let mut tape = Tape::new();
    let sq = tape.mul(&x, &x).unwrap();
    let loss = tape.sum(&sq, None).unwrap();
    assert_eq!(tape.backward(&loss).unwrap().get(&x).data(), &[2.0, 4.0]);

    let x = Tensor::new(&[4], vec![3.0, -1.0, 0.5, 7.0], true).unwrap();
    let mut tape = Tape::new();
    let loss = tape.mean(&x, None).unwrap();
    assert_eq!(tape.backward(&loss).unwrap().get(&x).data(), &[0.25; 4]);

    let mut tape = Tape::new();
    let two = tape.affine(&x, 1.0, 0.0).unwrap();
    let two = tape.slice(&two, vec![0..2]).unwrap();
    assert!(matches!(tape.backward(&two), Err(Error::NotScalar(_))));
}

#[test]
fn non_participating_leaf_gets_zero_gradient() {
    let x = Tensor::new(&[2], vec![1.0, 2.0], true).unwrap();
    let unused = Tensor::new(&[3], vec![1.0; 3], true).unwrap();
    let mut tape = Tape::new();
    let loss = tape.sum(&x, None).unwrap();
    let g = tape.backward(&loss).unwrap();
    assert!(!g.contains(&unused));
    assert_eq!(g.get(&unused).data(), &[0.0; 3]);
}

#[test]
fn finite_diff_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = away_from_zero(&mut rng, &[6]);
    let err = finite_diff_check(
        |tape, x| {
            let r = tape.relu(x)?;
            tape.sum(&r, None)
        },
        &x,
        EPS,
    )
    .unwrap();
    assert!(err < 1e-6, "relu {err}");

    let x = rand_tensor(&mut rng, &[5]);
    let err = finite_diff_check(
        |tape, x| {
            let r = tape.log_softmax(x, 0)?;
            tape.sum(&r, None)
        },
        &x,
        EPS,
    )
    .unwrap();
    assert!(err < 1e-6, "log_softmax {err}");

    let a = Tensor::constant(&[3, 1], vec![0.5, -2.0, 3.0]).unwrap();
    let x = rand_tensor(&mut rng, &[1, 3]);
    let err = finite_diff_check(
        |tape, x| {
            let y = tape.matmul(x, &a)?;
            tape.sum(&y, None)
        },
        &x,
        EPS,
    )
    .unwrap();
    assert!(err < 1e-10, "linear {err}");
}

#[test]
fn every_primitive_passes_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut worst: Vec<(&str, Real)> = Vec::new();

    let a = rand_tensor(&mut rng, &[3, 4]);
    let b = rand_tensor(&mut rng, &[3, 4]);
    for which in 0..2 {
        worst.push(("add", check_input(Primitive::Add, &[a.clone(), b.clone()], which)));
        worst.push(("mul", check_input(Primitive::Mul, &[a.clone(), b.clone()], which)));
    }
    let m = rand_tensor(&mut rng, &[4, 5]);
    for which in 0..2 {
        worst.push(("matmul", check_input(Primitive::MatMul, &[a.clone(), m.clone()], which)));
    }

    let x = rand_tensor(&mut rng, &[2, 2, 7, 6]);
    let w = rand_tensor(&mut rng, &[3, 2, 3, 3]);
    let bias = rand_tensor(&mut rng, &[3]);
    let conv = Primitive::Conv2d {
        stride: (2, 1),
        pad: (1, 1),
    };
    for which in 0..3 {
        worst.push((
            "conv2d",
            check_input(conv.clone(), &[x.clone(), w.clone(), bias.clone()], which),
        ));
    }

    let pool = Primitive::MaxPool2d {
        kernel: (3, 3),
        stride: (2, 2),
        pad: (1, 1),
    };
    worst.push(("maxpool2d", check_unary(pool, &distinct(&mut rng, &[1, 2, 6, 5]))));
    worst.push(("relu", check_unary(Primitive::Relu, &away_from_zero(&mut rng, &[3, 5]))));
    worst.push(("sigmoid", check_unary(Primitive::Sigmoid, &rand_tensor(&mut rng, &[7]))));
    worst.push(("tanh", check_unary(Primitive::Tanh, &rand_tensor(&mut rng, &[7]))));
    let c = rand_tensor(&mut rng, &[2, 3, 4]);
    for axis in 0..3 {
        worst.push(("log_softmax", check_unary(Primitive::LogSoftmax { axis }, &c)));
    }
    for axis in [None, Some(0), Some(1), Some(2)] {
        worst.push(("mean", check_unary(Primitive::Mean { axis }, &c)));
        worst.push(("sum", check_unary(Primitive::Sum { axis }, &c)));
    }
    let d = rand_tensor(&mut rng, &[2, 2, 4]);
    for which in 0..2 {
        worst.push((
            "concat",
            check_input(Primitive::Concat { axis: 1 }, &[c.clone(), d.clone()], which),
        ));
    }
    worst.push((
        "slice",
        check_unary(
            Primitive::Slice {
                ranges: vec![1..2, 0..2, 1..4],
            },
            &c,
        ),
    ));
    let mask = Tensor::constant(&[3, 4], vec![1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 0.0]).unwrap();
    worst.push((
        "dropout",
        check_input(Primitive::Dropout { rate: 0.5 }, &[a.clone(), mask], 0),
    ));
    worst.push(("affine", check_unary(Primitive::Affine { mul: -1.5, add: 0.3 }, &a)));
    worst.push(("reshape", check_unary(Primitive::Reshape { shape: vec![6, 2] }, &a)));
    worst.push(("transpose", check_unary(Primitive::Transpose, &a)));
    let row_bias = rand_tensor(&mut rng, &[4]);
    for which in 0..2 {
        worst.push(("add_bias", check_input(Primitive::AddBias, &[a.clone(), row_bias.clone()], which)));
    }
    worst.push(("channel_norm", check_unary(Primitive::ChannelNorm { eps: 1e-5 }, &x)));
    let lat = rand_tensor(&mut rng, &[5, 4]);
    worst.push((
        "ctc_loss",
        finite_diff_check(
            |tape, x| {
                let lp = tape.log_softmax(x, 1)?;
                tape.apply(Primitive::CtcLoss { labels: vec![1, 3, 3] }, &[&lp])
            },
            &lat,
            EPS,
        )
        .unwrap(),
    ));

    for (name, err) in &worst {
        assert!(*err < TOL, "{name}: relative error {err}");
    }
}

#[test]
fn affine_channel_gradients_for_scale_and_shift() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = rand_tensor(&mut rng, &[2, 3, 2, 2]);
    let scale = rand_tensor(&mut rng, &[3]);
    let shift = rand_tensor(&mut rng, &[3]);
    for which in 0..3 {
        let err = check_input(Primitive::AffineChannel, &[x.clone(), scale.clone(), shift.clone()], which);
        assert!(err < TOL);
    }
}

#[test]
fn maxpool_ties_go_to_lowest_index() {
    let x = Tensor::new(&[1, 1, 2, 2], vec![5.0; 4], true).unwrap();
    let mut tape = Tape::new();
    let y = tape
        .apply(
            Primitive::MaxPool2d {
                kernel: (2, 2),
                stride: (2, 2),
                pad: (0, 0),
            },
            &[&x],
        )
        .unwrap();
    let loss = tape.sum(&y, None).unwrap();
    let g = tape.backward(&loss).unwrap();
    assert_eq!(g.get(&x).data(), &[1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn conv_output_shape_rule() {
    let mut tape = Tape::new();
    let x = Tensor::zeros(&[1, 1, 400, 40]);
    let w = Tensor::zeros(&[4, 1, 7, 7]);
    let y = tape
        .apply(
            Primitive::Conv2d {
                stride: (2, 2),
                pad: (3, 3),
            },
            &[&x, &w],
        )
        .unwrap();
    assert_eq!(y.shape(), &[1, 4, 200, 20]);
}

#[test]
fn leaf_shared_by_two_tapes() {
    let p = Tensor::new(&[2], vec![1.0, -3.0], true).unwrap();
    let run = || {
        let mut tape = Tape::new();
        let y = tape.mul(&p, &p).unwrap();
        let l = tape.sum(&y, None).unwrap();
        tape.backward(&l).unwrap().get(&p).to_vec()
    };
    assert_eq!(run(), run());
}

#[test]
fn foreign_tensor_is_rejected() {
    let x = Tensor::new(&[2], vec![1.0, 2.0], true).unwrap();
    let mut t1 = Tape::new();
    let y = t1.relu(&x).unwrap();
    let mut t2 = Tape::new();
    assert!(matches!(t2.relu(&y), Err(Error::ForeignTensor)));
}

#[test]
fn tape_is_topologically_ordered() {
    let x = Tensor::new(&[3], vec![1.0, 2.0, 3.0], true).unwrap();
    let mut tape = Tape::new();
    let a = tape.tanh(&x).unwrap();
    let b = tape.mul(&a, &x).unwrap();
    let _ = tape.sum(&b, None).unwrap();
    for i in 0..tape.len() {
        let (_, inputs) = tape.node_info(i).unwrap();
        assert!(inputs.iter().flatten().all(|&j| j < i));
    }
}

mod props {
    use super::*;
    use proptest::prelude::*;

    fn loss_a(tape: &mut Tape, x: &Tensor) -> Tensor {
        let t = tape.tanh(x).unwrap();
        let s = tape.mul(&t, x).unwrap();
        tape.sum(&s, None).unwrap()
    }

    fn loss_b(tape: &mut Tape, x: &Tensor) -> Tensor {
        let l = tape.log_softmax(x, 0).unwrap();
        tape.mean(&l, None).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn vjp_accumulation_is_linear(values in prop::collection::vec(-2.0f64..2.0, 1..8)) {
            let values: Vec<Real> = values.into_iter().map(|v| v as Real).collect();
            let x = Tensor::new(&[values.len()], values, true).unwrap();

            let mut tape = Tape::new();
            let a = loss_a(&mut tape, &x);
            let b = loss_b(&mut tape, &x);
            let total = tape.add(&a, &b).unwrap();
            let joint = tape.backward(&total).unwrap().get(&x);

            let mut ta = Tape::new();
            let la = loss_a(&mut ta, &x);
            let ga = ta.backward(&la).unwrap().get(&x);
            let mut tb = Tape::new();
            let lb = loss_b(&mut tb, &x);
            let gb = tb.backward(&lb).unwrap().get(&x);

            for i in 0..x.numel() {
                prop_assert!((joint.data()[i] - ga.data()[i] - gb.data()[i]).abs() < 1e-12);
            }
        }

        #[test]
        fn apply_leaves_inputs_untouched(values in prop::collection::vec(-3.0f64..3.0, 4..=4)) {
            let values: Vec<Real> = values.into_iter().map(|v| v as Real).collect();
            let x = Tensor::new(&[2, 2], values.clone(), true).unwrap();
            let mut tape = Tape::new();
            let y = tape.log_softmax(&x, 1).unwrap();
            let z = tape.mul(&y, &x).unwrap();
            let t = tape.transpose(&z).unwrap();
            let l = tape.sum(&t, None).unwrap();
            let _ = tape.backward(&l).unwrap();
            prop_assert_eq!(x.data(), values.as_slice());
        }

        #[test]
        fn forward_replay_is_bit_identical(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = rand_tensor(&mut rng, &[1, 2, 5, 4]);
            let w = rand_tensor(&mut rng, &[3, 2, 3, 3]);
            let run = || {
                let mut tape = Tape::new();
                let y = tape.apply(Primitive::Conv2d { stride: (1, 2), pad: (1, 1) }, &[&x, &w]).unwrap();
                let y = tape.apply(Primitive::ChannelNorm { eps: 1e-5 }, &[&y]).unwrap();
                tape.tanh(&y).unwrap().to_vec()
            };
            prop_assert_eq!(run(), run());
        }
    }
}
