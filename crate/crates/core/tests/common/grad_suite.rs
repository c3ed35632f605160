//! Gradient checks for every differentiable tape operation, shared between
//! the per-op tests and the acceptance suite. Each check compares the
//! reverse sweep against central finite differences (h = 1e-5) on seeded
//! random inputs chosen away from kinks.

#![allow(dead_code)]

use rand::Rng;
use simba_core::{Padding, Tape, Tensor, TensorId};

use super::{check_gradients, rand_tensor, seeded_rng};

const RTOL: f64 = 1e-4;
const ATOL: f64 = 1e-7;

/// Reduce an arbitrary op output to a scalar through a fixed random weight
/// tensor so every output element influences the loss.
fn weighted_sum(tape: &mut Tape, out: TensorId, seed: u64) -> TensorId {
    let shape = tape.shape(out).to_vec();
    let mut rng = seeded_rng(seed);
    let w = rand_tensor(&mut rng, &shape, -1.0, 1.0);
    let wid = tape.constant(w);
    let prod = tape.mul(out, wid).expect("same shape");
    tape.sum_all(prod)
}

pub fn matmul_2d() -> Result<(), String> {
    let mut rng = seeded_rng(11);
    let a = rand_tensor(&mut rng, &[3, 4], -2.0, 2.0);
    let b = rand_tensor(&mut rng, &[4, 2], -2.0, 2.0);
    check_gradients("matmul_2d", &[a, b], RTOL, ATOL, |tape, ids| {
        let y = tape.matmul(ids[0], ids[1]).unwrap();
        weighted_sum(tape, y, 101)
    })
}

pub fn matmul_random_shapes() -> Result<(), String> {
    for seed in 0..20u64 {
        let mut rng = seeded_rng(1000 + seed);
        let m = rng.random_range(1..6);
        let k = rng.random_range(1..6);
        let n = rng.random_range(1..6);
        let a = rand_tensor(&mut rng, &[m, k], -2.0, 2.0);
        let b = rand_tensor(&mut rng, &[k, n], -2.0, 2.0);
        check_gradients("matmul_random", &[a, b], RTOL, ATOL, |tape, ids| {
            let y = tape.matmul(ids[0], ids[1]).unwrap();
            weighted_sum(tape, y, 2000 + seed)
        })?;
    }
    Ok(())
}

pub fn matmul_shared_rhs() -> Result<(), String> {
    let mut rng = seeded_rng(12);
    let a = rand_tensor(&mut rng, &[3, 2, 4], -2.0, 2.0);
    let b = rand_tensor(&mut rng, &[4, 3], -2.0, 2.0);
    check_gradients("matmul_shared_rhs", &[a, b], RTOL, ATOL, |tape, ids| {
        let y = tape.matmul(ids[0], ids[1]).unwrap();
        weighted_sum(tape, y, 102)
    })
}

pub fn matmul_shared_lhs() -> Result<(), String> {
    let mut rng = seeded_rng(13);
    let a = rand_tensor(&mut rng, &[2, 4], -2.0, 2.0);
    let b = rand_tensor(&mut rng, &[3, 4, 2], -2.0, 2.0);
    check_gradients("matmul_shared_lhs", &[a, b], RTOL, ATOL, |tape, ids| {
        let y = tape.matmul(ids[0], ids[1]).unwrap();
        weighted_sum(tape, y, 103)
    })
}

pub fn matmul_batched() -> Result<(), String> {
    let mut rng = seeded_rng(14);
    let a = rand_tensor(&mut rng, &[3, 2, 4], -2.0, 2.0);
    let b = rand_tensor(&mut rng, &[3, 4, 5], -2.0, 2.0);
    check_gradients("matmul_batched", &[a, b], RTOL, ATOL, |tape, ids| {
        let y = tape.matmul(ids[0], ids[1]).unwrap();
        weighted_sum(tape, y, 104)
    })
}

pub fn elementwise_binary() -> Result<(), String> {
    let mut rng = seeded_rng(15);
    let a = rand_tensor(&mut rng, &[2, 3], -2.0, 2.0);
    let b = rand_tensor(&mut rng, &[2, 3], -2.0, 2.0);
    check_gradients("add_sub_mul", &[a, b], RTOL, ATOL, |tape, ids| {
        let s = tape.add(ids[0], ids[1]).unwrap();
        let d = tape.sub(s, ids[1]).unwrap();
        let p = tape.mul(d, ids[0]).unwrap();
        weighted_sum(tape, p, 105)
    })
}

pub fn scalar_ops() -> Result<(), String> {
    let mut rng = seeded_rng(16);
    let a = rand_tensor(&mut rng, &[4], -2.0, 2.0);
    check_gradients("scalar_ops", &[a], RTOL, ATOL, |tape, ids| {
        let y = tape.mul_scalar(ids[0], -1.7);
        let z = tape.add_scalar(y, 0.3);
        weighted_sum(tape, z, 106)
    })
}

pub fn broadcast_ops() -> Result<(), String> {
    let mut rng = seeded_rng(17);
    let x = rand_tensor(&mut rng, &[2, 3, 4], -2.0, 2.0);
    let row = rand_tensor(&mut rng, &[4], -1.0, 1.0);
    let plane = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
    check_gradients("broadcast_ops", &[x, row, plane], RTOL, ATOL, |tape, ids| {
        let a = tape.add_bcast(ids[0], ids[1]).unwrap();
        let b = tape.mul_bcast(a, ids[2]).unwrap();
        weighted_sum(tape, b, 107)
    })
}

pub fn tanh_op() -> Result<(), String> {
    let mut rng = seeded_rng(18);
    let x = rand_tensor(&mut rng, &[3, 3], -2.0, 2.0);
    check_gradients("tanh", &[x], RTOL, ATOL, |tape, ids| {
        let y = tape.tanh(ids[0]);
        weighted_sum(tape, y, 108)
    })
}

pub fn sigmoid_op() -> Result<(), String> {
    let mut rng = seeded_rng(19);
    let x = rand_tensor(&mut rng, &[3, 3], -3.0, 3.0);
    check_gradients("sigmoid", &[x], RTOL, ATOL, |tape, ids| {
        let y = tape.sigmoid(ids[0]);
        weighted_sum(tape, y, 109)
    })
}

pub fn relu_op() -> Result<(), String> {
    // Inputs kept away from the kink at zero so the finite difference is valid.
    let mut rng = seeded_rng(20);
    let data: Vec<f64> = (0..9)
        .map(|_| {
            let mag = rng.random_range(0.2..1.5);
            if rng.random::<f64>() < 0.5 {
                mag
            } else {
                -mag
            }
        })
        .collect();
    let x = Tensor::new(&[3, 3], data).unwrap();
    check_gradients("relu", &[x], RTOL, ATOL, |tape, ids| {
        let y = tape.relu(ids[0]);
        weighted_sum(tape, y, 110)
    })
}

pub fn rsqrt_op() -> Result<(), String> {
    let mut rng = seeded_rng(21);
    let x = rand_tensor(&mut rng, &[5], 0.5, 3.0);
    check_gradients("rsqrt", &[x], RTOL, ATOL, |tape, ids| {
        let y = tape.rsqrt(ids[0]).unwrap();
        weighted_sum(tape, y, 111)
    })
}

pub fn shape_ops() -> Result<(), String> {
    let mut rng = seeded_rng(22);
    let a = rand_tensor(&mut rng, &[2, 3, 4], -2.0, 2.0);
    let b = rand_tensor(&mut rng, &[2, 4, 2], -2.0, 2.0);
    check_gradients("shape_ops", &[a, b], RTOL, ATOL, |tape, ids| {
        let t = tape.transpose_last(ids[0]).unwrap(); // [2,4,3]
        let r = tape.reshape(t, &[2, 4, 3]).unwrap();
        let c = tape.concat_last(&[r, ids[1]]).unwrap(); // [2,4,5]
        weighted_sum(tape, c, 112)
    })
}

pub fn index_and_reduce_ops() -> Result<(), String> {
    let mut rng = seeded_rng(23);
    let x = rand_tensor(&mut rng, &[2, 3, 4], -2.0, 2.0);
    check_gradients("index_and_reduce", &[x], RTOL, ATOL, |tape, ids| {
        let sliced = tape.index_axis(ids[0], 1, 2).unwrap(); // [2,4]
        let pooled = tape.mean_axis(ids[0], 1).unwrap(); // [2,4]
        let joined = tape.add(sliced, pooled).unwrap();
        weighted_sum(tape, joined, 113)
    })
}

pub fn softmax_op() -> Result<(), String> {
    let mut rng = seeded_rng(24);
    let x = rand_tensor(&mut rng, &[3, 4], -2.0, 2.0);
    check_gradients("softmax", &[x], RTOL, ATOL, |tape, ids| {
        let y = tape.softmax(ids[0]).unwrap();
        weighted_sum(tape, y, 114)
    })
}

pub fn conv1d_valid() -> Result<(), String> {
    let mut rng = seeded_rng(25);
    let x = rand_tensor(&mut rng, &[2, 6], -2.0, 2.0);
    let w = rand_tensor(&mut rng, &[3, 2, 3], -1.0, 1.0);
    check_gradients("conv1d_valid", &[x, w], RTOL, ATOL, |tape, ids| {
        let y = tape.conv1d(ids[0], ids[1], None, Padding::Valid).unwrap();
        weighted_sum(tape, y, 115)
    })
}

pub fn conv1d_same_bias() -> Result<(), String> {
    let mut rng = seeded_rng(26);
    let x = rand_tensor(&mut rng, &[2, 5], -2.0, 2.0);
    let w = rand_tensor(&mut rng, &[4, 2, 2], -1.0, 1.0);
    let b = rand_tensor(&mut rng, &[4], -0.5, 0.5);
    check_gradients("conv1d_same_bias", &[x, w, b], RTOL, ATOL, |tape, ids| {
        let y = tape
            .conv1d(ids[0], ids[1], Some(ids[2]), Padding::Same)
            .unwrap();
        weighted_sum(tape, y, 116)
    })
}

pub fn conv1d_batched() -> Result<(), String> {
    let mut rng = seeded_rng(27);
    let x = rand_tensor(&mut rng, &[3, 2, 8], -2.0, 2.0);
    let w = rand_tensor(&mut rng, &[4, 2, 7], -1.0, 1.0);
    check_gradients("conv1d_batched", &[x, w], RTOL, ATOL, |tape, ids| {
        let y = tape.conv1d(ids[0], ids[1], None, Padding::Valid).unwrap();
        weighted_sum(tape, y, 117)
    })
}

pub fn batch_norm_train_op() -> Result<(), String> {
    let mut rng = seeded_rng(28);
    let x = rand_tensor(&mut rng, &[6, 3], -2.0, 2.0);
    let gamma = rand_tensor(&mut rng, &[3], 0.5, 1.5);
    let beta = rand_tensor(&mut rng, &[3], -0.5, 0.5);
    // Batch-norm compositions carry the looser 1e-3 bound.
    check_gradients("batch_norm_train", &[x, gamma, beta], 1e-3, 1e-6, |tape, ids| {
        let (y, _, _) = tape.batch_norm_train(ids[0], ids[1], ids[2], 1e-5).unwrap();
        let z = tape.tanh(y);
        weighted_sum(tape, z, 118)
    })
}

pub fn batch_norm_eval_op() -> Result<(), String> {
    let mut rng = seeded_rng(29);
    let x = rand_tensor(&mut rng, &[4, 3], -2.0, 2.0);
    let gamma = rand_tensor(&mut rng, &[3], 0.5, 1.5);
    let beta = rand_tensor(&mut rng, &[3], -0.5, 0.5);
    check_gradients("batch_norm_eval", &[x, gamma, beta], RTOL, ATOL, |tape, ids| {
        let y = tape
            .batch_norm_eval(ids[0], ids[1], ids[2], &[0.1, -0.2, 0.3], &[1.1, 0.9, 1.4], 1e-5)
            .unwrap();
        weighted_sum(tape, y, 119)
    })
}

pub fn mul_mask_op() -> Result<(), String> {
    let mut rng = seeded_rng(30);
    let x = rand_tensor(&mut rng, &[3, 4], -2.0, 2.0);
    check_gradients("mul_mask", &[x], RTOL, ATOL, |tape, ids| {
        let mask = vec![1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 1.0, 1.0, 1.0, 0.0, 1.0];
        let y = tape.mul_mask(ids[0], mask).unwrap();
        weighted_sum(tape, y, 120)
    })
}

pub fn weighted_ce_op() -> Result<(), String> {
    let mut rng = seeded_rng(31);
    let logits = rand_tensor(&mut rng, &[5, 3], -2.0, 2.0);
    check_gradients("weighted_ce", &[logits], RTOL, ATOL, |tape, ids| {
        tape.weighted_cross_entropy(ids[0], &[0, 2, 1, 1, 0], &[0.5, 1.0, 2.5])
            .unwrap()
    })
}

/// Fan-out: x feeds both factors of x*x plus a direct skip, so the leaf
/// gradient must accumulate to exactly 2x + 1.
pub fn fanout_accumulation() -> Result<(), String> {
    let mut rng = seeded_rng(32);
    let x = rand_tensor(&mut rng, &[6], -2.0, 2.0);
    let mut tape = Tape::new();
    let id = tape.leaf(x.clone(), true);
    let sq = tape.mul(id, id).unwrap();
    let tot = tape.add(sq, id).unwrap();
    let loss = tape.sum_all(tot);
    tape.backward(loss).map_err(|e| e.to_string())?;
    let grad = tape.grad(id).expect("leaf gradient");
    for (i, (g, xv)) in grad.iter().zip(x.data()).enumerate() {
        let expect = 2.0 * xv + 1.0;
        if (g - expect).abs() > 1e-12 {
            return Err(format!("fanout[{i}]: got {g}, expected {expect}"));
        }
    }
    Ok(())
}

type Check = fn() -> Result<(), String>;

/// Every differentiable operation paired with its finite-difference check.
pub fn all_checks() -> Vec<(&'static str, Check)> {
    vec![
        ("matmul_2d", matmul_2d as Check),
        ("matmul_random_shapes_x20", matmul_random_shapes),
        ("matmul_shared_rhs", matmul_shared_rhs),
        ("matmul_shared_lhs", matmul_shared_lhs),
        ("matmul_batched", matmul_batched),
        ("elementwise_binary", elementwise_binary),
        ("scalar_ops", scalar_ops),
        ("broadcast_ops", broadcast_ops),
        ("tanh", tanh_op),
        ("sigmoid", sigmoid_op),
        ("relu", relu_op),
        ("rsqrt", rsqrt_op),
        ("shape_ops", shape_ops),
        ("index_and_reduce", index_and_reduce_ops),
        ("softmax", softmax_op),
        ("conv1d_valid", conv1d_valid),
        ("conv1d_same_bias", conv1d_same_bias),
        ("conv1d_batched", conv1d_batched),
        ("batch_norm_train", batch_norm_train_op),
        ("batch_norm_eval", batch_norm_eval_op),
        ("mul_mask", mul_mask_op),
        ("weighted_cross_entropy", weighted_ce_op),
        ("fanout_accumulation", fanout_accumulation),
    ]
}
