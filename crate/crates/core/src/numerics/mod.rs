//! Dense f32 tensors, a reverse-mode tape, parameter storage, and AdamW.
//!
//! Conventions shared by every module built on top of this one:
//! population (biased) variance, `EPS = 1e-5` in variance denominators,
//! row-major storage, images as `c×h×w`, token sequences as `[len, width]`.

pub mod kernels;
mod optim;
mod params;
mod tape;
mod tensor;

pub use optim::{adam_update, AdamConfig, AdamState};
pub use params::{Conv2d, LayerNorm, Linear, ParamId, ParamStore};
pub use tape::{Tape, Unary, Var};
pub use tensor::Tensor;

use crate::error::Result;

/// Variance guard used by every normalization.
pub const EPS: f32 = 1e-5;

/// Single-head `softmax(q·kᵀ/√d)·v`.
pub fn scaled_dot_attention(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<Var> {
    tape.attention(q, k, v, 1)
}

/// Row-wise attention weights `softmax(q·kᵀ/√d)` computed without a tape.
pub fn attention_weights(q: &Tensor, k: &Tensor) -> Result<Tensor> {
    let (lq, d, lk) = (q.shape()[0], q.shape()[1], k.shape()[0]);
    if k.shape()[1] != d {
        return Err(crate::error::shape_mismatch(
            "attention_weights",
            q.shape(),
            k.shape(),
        ));
    }
    let mut p = vec![0.0; lq * lk];
    kernels::gemm(lq, d, lk, q.data(), false, k.data(), true, &mut p, 0.0);
    let scale = 1.0 / (d as f32).sqrt();
    for row in p.chunks_mut(lk) {
        row.iter_mut().for_each(|x| *x *= scale);
        kernels::softmax_row(row);
    }
    Tensor::new(&[lq, lk], p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn leaf(tape: &mut Tape, shape: &[usize], data: Vec<f32>) -> Var {
        tape.leaf(Tensor::new(shape, data).unwrap().with_requires_grad(true))
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::eye(2));
        let m = leaf(&mut tape, &[2, 2], vec![1., 2., 3., 4.]);
        let y = tape.matmul(i, m).unwrap();
        assert_eq!(tape.value(y).data(), &[1., 2., 3., 4.]);
        let a = leaf(&mut tape, &[1, 2], vec![1., 2.]);
        let b = leaf(&mut tape, &[2, 1], vec![3., 4.]);
        let y = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(y).data(), &[11.]);
    }

    #[test]
    fn matmul_shape_error_reports_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let msg = tape.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn sum_of_matmul_gradient_is_broadcast_column_sums() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, &[2, 3], vec![0.5; 6]);
        let b = tape.constant(Tensor::new(&[3, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let y = tape.matmul(a, b).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[3., 7., 11., 3., 7., 11.]);
    }

    #[test]
    fn conv2d_identity_and_box_sum() {
        let mut tape = Tape::new();
        let x =
            tape.constant(Tensor::new(&[1, 3, 3], (1..=9).map(|v| v as f32).collect()).unwrap());
        let k = tape.constant(Tensor::ones(&[1, 1, 1, 1]));
        let y = tape.conv2d(x, k, None, 1, 0).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
        let ones = tape.constant(Tensor::ones(&[1, 3, 3]));
        let k3 = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
        let y = tape.conv2d(ones, k3, None, 1, 0).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 1]);
        assert_eq!(tape.value(y).data(), &[9.0]);
    }

    #[test]
    fn conv2d_rejects_kernel_larger_than_input() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 2]));
        let k = tape.constant(Tensor::zeros(&[1, 1, 3, 3]));
        assert!(tape.conv2d(x, k, None, 1, 0).is_err());
    }

    #[test]
    fn layer_norm_closed_form() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[3], vec![1., 2., 3.]).unwrap());
        let y = tape.layer_norm(x, None, None, EPS).unwrap();
        let want = [-1.2247, 0.0, 1.2247];
        for (a, b) in tape.value(y).data().iter().zip(want) {
            assert!((a - b).abs() < 1e-4);
        }
        let c = tape.constant(Tensor::full(&[4], 7.0));
        let bias = tape.constant(Tensor::full(&[4], 0.25));
        let gain = tape.constant(Tensor::full(&[4], 3.0));
        let y = tape.layer_norm(c, Some(gain), Some(bias), EPS).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.25));
        let zero = tape.constant(Tensor::zeros(&[3]));
        let bias3 = tape.constant(Tensor::new(&[3], vec![1., -1., 2.]).unwrap());
        let y = tape.layer_norm(x, Some(zero), Some(bias3), EPS).unwrap();
        assert_eq!(tape.value(y).data(), &[1., -1., 2.]);
    }

    #[test]
    fn attention_single_key_returns_value_row() {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::new(&[3, 2], vec![1., -4., 0.3, 9., 2., 2.]).unwrap());
        let k = tape.constant(Tensor::new(&[1, 2], vec![0.7, 0.1]).unwrap());
        let v = tape.constant(Tensor::new(&[1, 2], vec![5., -6.]).unwrap());
        let y = scaled_dot_attention(&mut tape, q, k, v).unwrap();
        assert_eq!(tape.value(y).data(), &[5., -6., 5., -6., 5., -6.]);
    }

    #[test]
    fn attention_sharp_identity_approaches_values() {
        let mut tape = Tape::new();
        let eye = Tensor::eye(4).map(|x| x * 50.0);
        let q = tape.constant(eye.clone());
        let k = tape.constant(eye);
        let v = tape.constant(Tensor::eye(4));
        let y = scaled_dot_attention(&mut tape, q, k, v).unwrap();
        assert!(tape.value(y).max_abs_diff(&Tensor::eye(4)) < 1e-3);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let q = Tensor::randn(&[4, 8], 1.0, &mut rng);
        let k = Tensor::randn(&[4, 8], 1.0, &mut rng);
        let p = attention_weights(&q, &k).unwrap();
        for row in p.data().chunks(4) {
            let s: f64 = row.iter().map(|&x| x as f64).sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn backward_simple_cases() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[3], vec![1., -2., 3.]);
        let sq = tape.square(x);
        let l = tape.sum(sq);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2., -4., 6.]);
        // accumulation on a second call
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[4., -8., 12.]);

        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[3], vec![1., -2., 3.]);
        let c = tape.constant(Tensor::scalar(5.0));
        let l = tape.sum(c);
        tape.backward(l).unwrap();
        assert!(tape.grad(x).map_or(true, |g| g.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[3], vec![1., 2., 3.]);
        assert!(tape.backward(x).is_err());
    }
}
