//! Dense `f64` tensors and a reverse-mode gradient tape.
//!
//! The tape records primitives in evaluation order: affine maps, embedding
//! lookup, convolution with max-pooling, LSTM steps and scans, concatenation,
//! elementwise arithmetic and activations, softmax, log-sum-exp, dropout with
//! an external mask, and masked reductions. Heavier structured objectives
//! (the CRF likelihood) plug in through [`CustomOp`].
//!
//! No broadcasting is performed except for bias addition.

mod gradcheck;
mod param;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckReport};
pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{CustomOp, Gradients, Tape, Var};
pub use tensor::{log_sum_exp, softmax, Tensor};

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

/// Samples a tensor with entries from `N(0, std²)`.
pub fn normal_tensor<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite standard deviation");
    let n = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape, data).expect("length matches shape")
}

/// Samples a tensor uniformly from `[-bound, bound]`.
pub fn uniform_tensor<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor {
    let dist = Uniform::new_inclusive(-bound, bound).expect("valid bounds");
    let n = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape, data).expect("length matches shape")
}

/// Inverted-dropout mask: each entry is `0` with probability `rate`, else
/// `1 / (1 - rate)`.
pub fn dropout_mask<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], rate: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let keep = 1.0 - rate;
    let data = (0..n)
        .map(|_| {
            if rng.random::<f64>() < rate {
                0.0
            } else {
                1.0 / keep
            }
        })
        .collect();
    Tensor::new(shape, data).expect("length matches shape")
}
