use std::rc::Rc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Random tensor whose entries are at least `margin` away from zero.
fn random_away_from_zero(shape: &[usize], seed: u64, margin: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(margin..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// `sum(v ⊙ r)` for a fixed random `r`, so every output element matters.
fn weighted_sum<'t>(v: Var<'t>, seed: u64) -> Result<Var<'t>, Error> {
    let r = v.tape().constant(random(&v.shape(), seed));
    Ok(v.mul(r)?.sum())
}

#[test]
fn matmul_examples() {
    let tape = Tape::no_grad();
    let a = tape.constant(t(&[2, 2], &[1., 0., 0., 1.]));
    let b = tape.constant(t(&[2, 2], &[3., 4., 5., 6.]));
    assert_eq!(a.matmul(b).unwrap().value().data(), &[3., 4., 5., 6.]);
    let a = tape.constant(t(&[1, 2], &[1., 2.]));
    let b = tape.constant(t(&[2, 1], &[3., 4.]));
    assert_eq!(a.matmul(b).unwrap().value().data(), &[11.]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let tape = Tape::no_grad();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    let err = a.matmul(b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]"), "{err}");
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let b = random(&[4, 3], 2);
    let err = grad_check(
        |tape, a| {
            let b = tape.constant(b.clone());
            Ok(a.matmul(b)?.sum())
        },
        &random(&[2, 4], 1),
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
    let a = random(&[2, 4], 3);
    let err = grad_check(
        |tape, b| {
            let a = tape.constant(a.clone());
            weighted_sum(a.matmul(b)?, 9)
        },
        &random(&[4, 3], 4),
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn conv2d_identity_kernel() {
    let tape = Tape::no_grad();
    let x = random(&[1, 1, 5, 4], 5);
    let mut k = vec![0.0; 9];
    k[4] = 1.0;
    let y = tape
        .constant(x.clone())
        .conv2d(tape.constant(t(&[1, 1, 3, 3], &k)), None, 1, 1)
        .unwrap();
    assert_eq!(*y.value(), x);
}

#[test]
fn conv2d_all_ones() {
    let tape = Tape::no_grad();
    let x = tape.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
    let w = tape.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
    let y = x.conv2d(w, None, 1, 0).unwrap();
    assert_eq!(y.shape(), vec![1, 1, 1, 1]);
    assert_eq!(y.value().data(), &[4.0]);
}

#[test]
fn conv2d_rejects_oversized_kernel() {
    let tape = Tape::no_grad();
    let x = tape.constant(Tensor::zeros(&[1, 1, 2, 2]));
    let w = tape.constant(Tensor::zeros(&[1, 1, 5, 5]));
    assert!(matches!(x.conv2d(w, None, 1, 1), Err(Error::Dimension(_))));
}

#[test]
fn conv2d_gradients() {
    let w = random(&[3, 2, 3, 3], 11);
    let b = random(&[3], 12);
    let x = random(&[1, 2, 5, 5], 10);
    for (stride, pad) in [(1, 1), (2, 1), (2, 0)] {
        let err = grad_check(
            |tape, x| {
                let y = x.conv2d(
                    tape.constant(w.clone()),
                    Some(tape.constant(b.clone())),
                    stride,
                    pad,
                )?;
                weighted_sum(y, 13)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "input grad stride {stride} pad {pad}: {err}");
        let err = grad_check(
            |tape, w| {
                let y = tape.constant(x.clone()).conv2d(
                    w,
                    Some(tape.constant(b.clone())),
                    stride,
                    pad,
                )?;
                weighted_sum(y, 13)
            },
            &w,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "weight grad stride {stride} pad {pad}: {err}");
        let err = grad_check(
            |tape, b| {
                let y = tape.constant(x.clone()).conv2d(
                    tape.constant(w.clone()),
                    Some(b),
                    stride,
                    pad,
                )?;
                weighted_sum(y, 13)
            },
            &b,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "bias grad stride {stride} pad {pad}: {err}");
    }
}

#[test]
fn conv_transpose_single_pixel() {
    let tape = Tape::no_grad();
    let x = tape.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
    let w = tape.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
    let y = x.conv_transpose2d(w, None, 1, 0).unwrap();
    assert_eq!(y.shape(), vec![1, 1, 2, 2]);
    assert_eq!(y.value().data(), &[1.0; 4]);
}

#[test]
fn conv_transpose_is_adjoint_of_conv() {
    for (seed, stride, pad) in [(0u64, 1, 0), (1, 2, 1), (2, 1, 1)] {
        let a = random(&[2, 3, 4, 4], 100 + seed);
        let w = random(&[5, 3, 3, 3], 200 + seed);
        let tape = Tape::no_grad();
        let conv = tape
            .constant(a.clone())
            .conv2d(tape.constant(w.clone()), None, stride, pad)
            .unwrap();
        let b = random(&conv.shape(), 300 + seed);
        let back =
            tape.constant(b.clone())
                .conv_transpose2d(tape.constant(w.clone()), None, stride, pad);
        // Stride-2 transposed outputs can be smaller than the original when
        // the forward conv discarded trailing rows; only compare exact fits.
        let Ok(back) = back else { continue };
        if back.shape() != a.shape() {
            continue;
        }
        let lhs: f64 = conv
            .value()
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| x * y)
            .sum();
        let rhs: f64 = back
            .value()
            .data()
            .iter()
            .zip(a.data())
            .map(|(x, y)| x * y)
            .sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }
}

#[test]
fn conv_transpose_gradients() {
    let x = random(&[2, 3, 3, 3], 20);
    let w = random(&[3, 2, 4, 4], 21);
    let b = random(&[2], 22);
    let err = grad_check(
        |tape, x| {
            let y = x.conv_transpose2d(
                tape.constant(w.clone()),
                Some(tape.constant(b.clone())),
                2,
                1,
            )?;
            weighted_sum(y, 23)
        },
        &x,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
    let err = grad_check(
        |tape, w| {
            let y = tape.constant(x.clone()).conv_transpose2d(
                w,
                Some(tape.constant(b.clone())),
                2,
                1,
            )?;
            weighted_sum(y, 23)
        },
        &w,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
    let err = grad_check(
        |tape, b| {
            let y = tape.constant(x.clone()).conv_transpose2d(
                tape.constant(w.clone()),
                Some(b),
                2,
                1,
            )?;
            weighted_sum(y, 23)
        },
        &b,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn elementwise_examples() {
    let tape = Tape::no_grad();
    let x = tape.constant(t(&[3], &[-1., 0., 2.]));
    assert_eq!(x.relu().value().data(), &[0., 0., 2.]);
    assert_eq!(
        tape.constant(Tensor::scalar(0.0)).sigmoid().value().data(),
        &[0.5]
    );
}

#[test]
fn relu_subgradient() {
    let tape = Tape::new();
    let x = tape.leaf(t(&[2], &[3., -2.]));
    let y = x.relu().sum();
    let g = tape.backward(y, &mut ParamStore::new()).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1., 0.]);
}

#[test]
fn log_of_non_positive_is_domain_error() {
    let tape = Tape::no_grad();
    let x = tape.constant(t(&[2], &[1., 0.]));
    assert!(matches!(x.log(), Err(Error::Domain(_))));
}

#[test]
fn incompatible_broadcast_is_dimension_error() {
    let tape = Tape::no_grad();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[3, 2]));
    assert!(matches!(a.add(b), Err(Error::Dimension(_))));
}

#[test]
fn broadcast_binary_gradients() {
    let b = random(&[1, 3, 1], 31);
    for which in 0..4 {
        let err = grad_check(
            |tape, a| {
                let b = tape.constant(b.map(|v| v + 2.0));
                let y = match which {
                    0 => a.add(b)?,
                    1 => a.sub(b)?,
                    2 => a.mul(b)?,
                    _ => a.div(b)?,
                };
                weighted_sum(y, 32)
            },
            &random(&[2, 3, 4], 30),
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "op {which} lhs: {err}");
        let a = random(&[2, 3, 4], 33);
        let err = grad_check(
            |tape, b| {
                let a = tape.constant(a.clone());
                let b = b.add_scalar(2.0);
                let y = match which {
                    0 => a.add(b)?,
                    1 => a.sub(b)?,
                    2 => a.mul(b)?,
                    _ => a.div(b)?,
                };
                weighted_sum(y, 34)
            },
            &b,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "op {which} rhs: {err}");
    }
}

#[test]
fn group_norm_constant_input_is_zero() {
    let tape = Tape::no_grad();
    let x = tape.constant(Tensor::full(&[2, 4, 3, 3], 5.0));
    let g = tape.constant(Tensor::full(&[4], 1.0));
    let b = tape.constant(Tensor::zeros(&[4]));
    let y = x.group_norm(2, g, b, 1e-5).unwrap();
    assert!(y.value().data().iter().all(|&v| v == 0.0));
}

#[test]
fn group_norm_zero_gamma_gives_beta() {
    let tape = Tape::no_grad();
    let x = tape.constant(random(&[2, 4, 3, 3], 40));
    let g = tape.constant(Tensor::zeros(&[4]));
    let b = tape.constant(Tensor::full(&[4], 7.0));
    let y = x.group_norm(4, g, b, 1e-5).unwrap();
    assert!(y.value().data().iter().all(|&v| v == 7.0));
}

#[test]
fn group_norm_standardizes_each_group() {
    let tape = Tape::no_grad();
    let x = tape.constant(random(&[2, 4, 3, 3], 41).map(|v| 3.0 * v + 1.0));
    let g = tape.constant(Tensor::full(&[4], 1.0));
    let b = tape.constant(Tensor::zeros(&[4]));
    let y = x.group_norm(2, g, b, 1e-5).unwrap();
    for chunk in y.value().data().chunks(18) {
        let mean = chunk.iter().sum::<f64>() / 18.0;
        let var = chunk.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 18.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-3);
    }
}

#[test]
fn group_norm_rejects_indivisible_channels() {
    let tape = Tape::no_grad();
    let x = tape.constant(Tensor::zeros(&[1, 3, 2, 2]));
    let g = tape.constant(Tensor::zeros(&[3]));
    let b = tape.constant(Tensor::zeros(&[3]));
    assert!(matches!(x.group_norm(2, g, b, 1e-5), Err(Error::Config(_))));
}

#[test]
fn group_norm_gradients() {
    let x = random(&[1, 4, 2, 2], 50);
    let gamma = random(&[4], 51);
    let beta = random(&[4], 52);
    let err = grad_check(
        |tape, x| {
            let y = x.group_norm(
                2,
                tape.constant(gamma.clone()),
                tape.constant(beta.clone()),
                1e-5,
            )?;
            weighted_sum(y, 53)
        },
        &x,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
    let err = grad_check(
        |tape, g| {
            let y = tape
                .constant(x.clone())
                .group_norm(2, g, tape.constant(beta.clone()), 1e-5)?;
            weighted_sum(y, 53)
        },
        &gamma,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
    let err = grad_check(
        |tape, b| {
            let y =
                tape.constant(x.clone())
                    .group_norm(2, tape.constant(gamma.clone()), b, 1e-5)?;
            weighted_sum(y, 53)
        },
        &beta,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn pooling_filter_concat_reshape_gradients() {
    let k: Rc<[f64]> = Rc::from(vec![0.2, 0.5, 0.3]);
    let x = random(&[2, 1, 6, 5], 60);
    let err = grad_check(|_, x| weighted_sum(x.avg_pool2()?, 61), &x, 1e-6).unwrap();
    assert!(err < 1e-4, "{err}");
    let err = grad_check(
        |_, x| weighted_sum(x.separable_filter(k.clone())?, 62),
        &x,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
    let other = random(&[2, 2, 6, 5], 63);
    let err = grad_check(
        |tape, x| weighted_sum(Var::concat(&[tape.constant(other.clone()), x], 1)?, 64),
        &x,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
    let err = grad_check(|_, x| weighted_sum(x.reshape(&[2, 30])?, 65), &x, 1e-6).unwrap();
    assert!(err < 1e-4, "{err}");
    let err = grad_check(|_, x| weighted_sum(x.sum_to(&[1, 1, 6, 1])?, 66), &x, 1e-6).unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn grad_check_contract() {
    let err = grad_check(|_, x| Ok(x.square().sum()), &t(&[2], &[1., 2.]), 1e-5).unwrap();
    assert!(err < 1e-6, "{err}");
    let err = grad_check(|_, x| Ok(x.sigmoid().sum()), &random(&[6], 70), 1e-5).unwrap();
    assert!(err < 1e-4, "{err}");
    let x = random_away_from_zero(&[8], 71, 0.1);
    let err = grad_check(|_, x| Ok(x.relu().sum()), &x, 1e-5).unwrap();
    assert!(err < 1e-4, "{err}");
    assert!(matches!(
        grad_check(|_, x| Ok(x.relu()), &x, 1e-5),
        Err(Error::Contract(_))
    ));
    assert!(grad_check(|_, x| Ok(x.sum()), &x, 0.0).is_err());
}

#[test]
fn backward_accumulates_additively() {
    let mut store = ParamStore::new();
    let id = store.add("w", random(&[3, 2], 80));
    let x = random(&[4, 3], 81);
    let tape = Tape::new();
    let w = tape.param(&store, id);
    let loss = tape.constant(x).matmul(w).unwrap().square().sum();
    tape.backward(loss, &mut store).unwrap();
    let once = store.get(id).grad.clone();
    tape.backward(loss, &mut store).unwrap();
    let twice = store.get(id).grad.clone();
    for (a, b) in once.data().iter().zip(twice.data()) {
        assert_eq!(2.0 * a, *b);
    }
    store.zero_grad();
    assert!(store.get(id).grad.data().iter().all(|&v| v == 0.0));
}

#[test]
fn forward_is_pure() {
    let x = random(&[2, 3, 6, 6], 90);
    let w = random(&[4, 3, 3, 3], 91);
    let run = || {
        let tape = Tape::no_grad();
        let y = tape
            .constant(x.clone())
            .conv2d(tape.constant(w.clone()), None, 2, 1)
            .unwrap()
            .relu()
            .sigmoid();
        (*y.value()).clone()
    };
    assert_eq!(run().data(), run().data());
}

#[test]
fn no_grad_tape_records_nothing_differentiable() {
    let tape = Tape::no_grad();
    let x = tape.leaf(random(&[3], 1));
    assert!(!x.requires_grad());
    assert!(!x.exp().requires_grad());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn unary_ops_pass_grad_check(seed in any::<u64>(), op in 0usize..8) {
        let x = random_away_from_zero(&[3, 4], seed, 1e-3 * 10.0 + 0.05);
        let err = grad_check(
            |_, x| {
                let y = match op {
                    0 => x.relu(),
                    1 => x.sigmoid(),
                    2 => x.exp(),
                    3 => x.abs().add_scalar(0.5).log()?,
                    4 => x.abs(),
                    5 => x.square(),
                    6 => x.abs().powf_pos(0.7),
                    _ => x.clamp(-0.5, 0.5).scale(3.0),
                };
                Ok(y.mean())
            },
            &x,
            1e-6,
        )
        .unwrap();
        // clamp has kinks at ±0.5; keep inputs away from them.
        let near_kink = op == 7 && x.data().iter().any(|v| (v.abs() - 0.5).abs() < 1e-4);
        prop_assert!(near_kink || err < 1e-4, "op {} err {}", op, err);
    }

    #[test]
    fn conv2d_random_geometry_grad(seed in any::<u64>(), k in 1usize..4, stride in 1usize..3, pad in 0usize..2) {
        let x = random(&[1, 2, 5, 5], seed);
        let w = random(&[2, 2, k, k], seed ^ 1);
        let err = grad_check(
            |tape, x| weighted_sum(x.conv2d(tape.constant(w.clone()), None, stride, pad)?, seed ^ 2),
            &x,
            1e-6,
        )
        .unwrap();
        prop_assert!(err < 1e-4);
    }
}
