use super::*;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t(shape: Vec<usize>, values: Vec<f64>) -> Tensor {
    Tensor::new(shape, values).unwrap()
}

#[test]
fn conv2d_sum_of_ones() {
    let mut tape = Tape::new();
    let input = tape.constant(t(vec![1, 1, 3, 3], vec![1.0; 9]));
    let kernel = tape.constant(t(vec![1, 1, 3, 3], vec![1.0; 9]));
    let bias = tape.constant(t(vec![1], vec![0.0]));
    let y = tape.conv2d(input, kernel, bias, 1, 0).unwrap();
    assert_eq!(tape.value(y).shape, vec![1, 1, 1, 1]);
    assert_eq!(tape.value(y).values, vec![9.0]);
}

#[test]
fn conv2d_scalar_scale_shift() {
    let mut tape = Tape::new();
    let input = tape.constant(t(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]));
    let kernel = tape.constant(t(vec![1, 1, 1, 1], vec![2.0]));
    let bias = tape.constant(t(vec![1], vec![1.0]));
    let y = tape.conv2d(input, kernel, bias, 1, 0).unwrap();
    assert_eq!(tape.value(y).values, vec![3.0, 5.0, 7.0, 9.0]);
}

#[test]
fn conv2d_padded_shape() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut tape = Tape::new();
    let input = tape.constant(t(
        vec![2, 4, 8, 8],
        (0..2 * 4 * 64).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    ));
    let kernel = tape.constant(t(
        vec![8, 4, 3, 3],
        (0..8 * 4 * 9).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    ));
    let bias = tape.constant(t(vec![8], vec![0.0; 8]));
    let y = tape.conv2d(input, kernel, bias, 1, 1).unwrap();
    assert_eq!(tape.value(y).shape, vec![2, 8, 8, 8]);
}

#[test]
fn conv2d_channel_mismatch_rejected() {
    let mut tape = Tape::new();
    let input = tape.constant(Tensor::zeros(vec![1, 3, 4, 4]));
    let kernel = tape.constant(Tensor::zeros(vec![2, 4, 3, 3]));
    let bias = tape.constant(Tensor::zeros(vec![2]));
    assert!(matches!(
        tape.conv2d(input, kernel, bias, 1, 0),
        Err(crate::error::Error::InvalidShape(_))
    ));
}

#[test]
fn conv2d_output_shape_formula() {
    // H' = floor((H + 2p - k) / s) + 1 for all valid stride/padding combos.
    for h in [4usize, 5, 7, 9] {
        for k in [1usize, 2, 3] {
            for s in [1usize, 2, 3] {
                for p in [0usize, 1, 2] {
                    if k > h + 2 * p {
                        continue;
                    }
                    let mut tape = Tape::new();
                    let input = tape.constant(Tensor::zeros(vec![1, 1, h, h]));
                    let kernel = tape.constant(Tensor::zeros(vec![1, 1, k, k]));
                    let bias = tape.constant(Tensor::zeros(vec![1]));
                    let y = tape.conv2d(input, kernel, bias, s, p).unwrap();
                    let expect = (h + 2 * p - k) / s + 1;
                    assert_eq!(tape.value(y).shape, vec![1, 1, expect, expect]);
                }
            }
        }
    }
}

#[test]
fn elementwise_examples() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
    let b = tape.constant(Tensor::from_vec(vec![4.0, 5.0, 6.0]));
    let h = tape.hadamard(a, b).unwrap();
    assert_eq!(tape.value(h).values, vec![4.0, 10.0, 18.0]);

    let c = tape.constant(Tensor::from_vec(vec![-1.0, 2.0]));
    let r = tape.leaky_relu(c, 0.2).unwrap();
    assert_eq!(tape.value(r).values, vec![-0.2, 2.0]);

    let z = tape.constant(Tensor::from_vec(vec![0.0]));
    let s = tape.softplus(z).unwrap();
    assert!((tape.value(s).values[0] - 2.0f64.ln()).abs() < 1e-12);
}

#[test]
fn elementwise_shape_mismatch_rejected() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::from_vec(vec![1.0, 2.0]));
    let b = tape.constant(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
    assert!(tape.add(a, b).is_err());
}

#[test]
fn outer_product_examples() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::from_vec(vec![1.0, 2.0]));
    let b = tape.constant(Tensor::from_vec(vec![3.0, 4.0, 5.0]));
    let o = tape.outer(a, b).unwrap();
    assert_eq!(tape.value(o).shape, vec![2, 3]);
    assert_eq!(tape.value(o).values, vec![3.0, 4.0, 5.0, 6.0, 8.0, 10.0]);

    let z = tape.constant(Tensor::from_vec(vec![0.0, 0.0]));
    let c = tape.constant(Tensor::from_vec(vec![7.0]));
    let o2 = tape.outer(z, c).unwrap();
    assert_eq!(tape.value(o2).values, vec![0.0, 0.0]);

    let i = tape.constant(Tensor::from_vec(vec![1.0]));
    let j = tape.constant(Tensor::from_vec(vec![1.0]));
    let o3 = tape.outer(i, j).unwrap();
    assert_eq!(tape.value(o3).values, vec![1.0]);

    let m = tape.constant(Tensor::zeros(vec![2, 2]));
    assert!(tape.outer(m, i).is_err());
}

#[test]
fn bce_examples() {
    let mut tape = Tape::new();
    let l0 = tape.constant(Tensor::from_vec(vec![0.0]));
    let ln2 = 2.0f64.ln();
    let loss1 = tape.bce_with_logits(l0, &[1.0]).unwrap();
    assert!((tape.value(loss1).values[0] - ln2).abs() < 1e-12);
    let loss0 = tape.bce_with_logits(l0, &[0.0]).unwrap();
    assert!((tape.value(loss0).values[0] - ln2).abs() < 1e-12);

    // softplus(10) - 10 = ln(1 + e^-10), evaluated numerically.
    let l10 = tape.constant(Tensor::from_vec(vec![10.0]));
    let loss = tape.bce_with_logits(l10, &[1.0]).unwrap();
    let expect = (-10.0f64).exp().ln_1p();
    assert!((tape.value(loss).values[0] - expect).abs() < 1e-15);
    assert!((tape.value(loss).values[0] - 4.54e-5).abs() < 1e-6);

    let empty = tape.constant(Tensor::from_vec(vec![]));
    assert!(tape.bce_with_logits(empty, &[]).is_err());

    let bad = tape.constant(Tensor::from_vec(vec![0.0]));
    assert!(tape.bce_with_logits(bad, &[0.5]).is_err());
}

#[test]
fn backward_square() {
    let mut tape = Tape::new();
    let w = tape.leaf("w", Tensor::from_vec(vec![3.0]));
    let sq = tape.hadamard(w, w).unwrap();
    let loss = tape.sum(sq).unwrap();
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.get("w").unwrap(), &vec![6.0]);
}

#[test]
fn backward_hadamard_constant() {
    let mut tape = Tape::new();
    let w = tape.leaf("w", Tensor::from_vec(vec![1.0, 2.0, 3.0]));
    let c = tape.constant(Tensor::from_vec(vec![4.0, 5.0, 6.0]));
    let h = tape.hadamard(w, c).unwrap();
    let loss = tape.sum(h).unwrap();
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.get("w").unwrap(), &vec![4.0, 5.0, 6.0]);
}

#[test]
fn backward_requires_scalar() {
    let mut tape = Tape::new();
    let w = tape.leaf("w", Tensor::from_vec(vec![1.0, 2.0]));
    assert!(tape.backward(w).is_err());
}

#[test]
fn backward_zero_factor_gives_exact_zero() {
    let mut tape = Tape::new();
    let w = tape.leaf("w", Tensor::from_vec(vec![1.5, -2.5]));
    let zero = tape.constant(Tensor::from_vec(vec![0.0, 0.0]));
    let h = tape.hadamard(w, zero).unwrap();
    let loss = tape.sum(h).unwrap();
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.get("w").unwrap(), &vec![0.0, 0.0]);
}

#[test]
fn backward_unreached_leaf_gets_zeros() {
    let mut tape = Tape::new();
    let w = tape.leaf("w", Tensor::from_vec(vec![3.0]));
    let unused = tape.leaf("unused", Tensor::from_vec(vec![1.0, 2.0]));
    let _ = unused;
    let sq = tape.hadamard(w, w).unwrap();
    let loss = tape.sum(sq).unwrap();
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.get("unused").unwrap(), &vec![0.0, 0.0]);
}

#[test]
fn grad_check_square() {
    let err = grad_check(
        |tape, x| {
            let sq = tape.hadamard(x, x)?;
            tape.sum(sq)
        },
        &Tensor::from_vec(vec![3.0]),
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "err = {err}");
}

#[test]
fn grad_check_tanh() {
    let err = grad_check(
        |tape, x| {
            let y = tape.tanh(x)?;
            tape.sum(y)
        },
        &Tensor::from_vec(vec![0.5]),
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "err = {err}");
}

#[test]
fn grad_check_constant_function() {
    let err = grad_check(
        |tape, _x| {
            let c = tape.constant(Tensor::from_vec(vec![2.0]));
            tape.sum(c)
        },
        &Tensor::from_vec(vec![1.0, 2.0]),
        1e-5,
    )
    .unwrap();
    assert_eq!(err, 0.0);
}

#[test]
fn grad_check_composite_conv_relu_bce() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let kernel: Vec<f64> = (0..2 * 2 * 9).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let input: Vec<f64> = (0..2 * 2 * 25).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let input = t(vec![2, 2, 5, 5], input);
    let err = grad_check(
        |tape, k| {
            let x = tape.constant(input.clone());
            let k4 = tape.reshape(k, vec![2, 2, 3, 3])?;
            let b = tape.constant(Tensor::zeros(vec![2]));
            let y = tape.conv2d(x, k4, b, 2, 1)?;
            let a = tape.leaky_relu(y, 0.2)?;
            let pooled = tape.mean_pool_spatial(a)?;
            let flat = tape.reshape(pooled, vec![4])?;
            tape.bce_with_logits(flat, &[1.0, 0.0, 1.0, 0.0])
        },
        &Tensor::from_vec(kernel),
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "err = {err}");
}

/// Finite-difference sweep over every differentiable op on random small
/// tensors. This is the independent oracle for the whole gradient suite.
#[test]
fn grad_check_all_ops_random() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for trial in 0..4 {
        let seed_vals: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let point = Tensor::from_vec(seed_vals);
        let other: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.5..1.5)).collect();

        let cases: Vec<Box<dyn Fn(&mut Tape, Var) -> crate::error::Result<Var>>> = vec![
            Box::new({
                let o = other.clone();
                move |tp, x| {
                    let c = tp.constant(Tensor::from_vec(o.clone()));
                    let y = tp.add(x, c)?;
                    let y = tp.hadamard(y, y)?;
                    tp.sum(y)
                }
            }),
            Box::new({
                let o = other.clone();
                move |tp, x| {
                    let c = tp.constant(Tensor::from_vec(o.clone()));
                    let y = tp.sub(x, c)?;
                    let z = tp.tanh(y)?;
                    tp.mean(z)
                }
            }),
            Box::new(move |tp, x| {
                let y = tp.leaky_relu(x, 0.2)?;
                let z = tp.sigmoid(y)?;
                tp.sum(z)
            }),
            Box::new(move |tp, x| {
                let y = tp.softplus(x)?;
                let s = tp.scale(y, 1.7)?;
                tp.sum(s)
            }),
            Box::new(move |tp, x| {
                let head = tp.reshape(x, vec![2, 3])?;
                let rows = tp.concat_rows(&[(head, 1), (head, 0), (head, 1)])?;
                let sq = tp.hadamard(rows, rows)?;
                tp.sum(sq)
            }),
            Box::new(move |tp, x| {
                let m = tp.reshape(x, vec![6, 1])?;
                let r = tp.repeat_inner(m, 4, vec![6, 4])?;
                let t = tp.tanh(r)?;
                tp.mean(t)
            }),
            Box::new(move |tp, x| tp.bce_with_logits(x, &[1.0, 0.0, 1.0, 1.0, 0.0, 0.0])),
            Box::new({
                let o = other.clone();
                move |tp, x| {
                    let a = tp.reshape(x, vec![6])?;
                    let b = tp.constant(Tensor::from_vec(o[0..3].to_vec()));
                    let op = tp.outer(a, b)?;
                    let sq = tp.hadamard(op, op)?;
                    tp.sum(sq)
                }
            }),
        ];
        for (i, f) in cases.iter().enumerate() {
            let err = grad_check(f, &point, 1e-5).unwrap();
            assert!(err < 1e-4, "trial {trial} case {i}: err = {err}");
        }
    }
}

#[test]
fn grad_check_linear_and_upsample() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let w: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let x: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let x = t(vec![2, 4], x);
    let err = grad_check(
        |tp, wv| {
            let xin = tp.constant(x.clone());
            let w2 = tp.reshape(wv, vec![3, 4])?;
            let b = tp.constant(Tensor::zeros(vec![3]));
            let y = tp.linear(xin, w2, b)?;
            let act = tp.tanh(y)?;
            tp.sum(act)
        },
        &Tensor::from_vec(w),
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "linear err = {err}");

    let img: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let err = grad_check(
        |tp, v| {
            let x4 = tp.reshape(v, vec![1, 1, 4, 4])?;
            let up = tp.upsample2x(x4)?;
            let sq = tp.hadamard(up, up)?;
            tp.sum(sq)
        },
        &Tensor::from_vec(img),
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "upsample err = {err}");
}
