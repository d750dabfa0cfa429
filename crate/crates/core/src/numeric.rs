//! Scalar trait, deterministic reductions and seeded RNG streams.
//!
//! Every random stream in the crate comes from [`ChaCha8Rng`], which produces the
//! same sequence on every platform for a given `(seed, stream)` pair.

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssign};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Floating point type the kernels are generic over (`f32` for training, `f64` for gradient checks).
pub trait Scalar:
    Float
    + FromPrimitive
    + NumAssign
    + LinalgScalar
    + ScalarOperand
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    fn from_f64_lossy(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64_lossy(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64_lossy(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Named streams so that initialization, shuffling and dropout never share state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init = 0,
    Shuffle = 1,
    Dropout = 2,
    Split = 3,
    Data = 4,
}

pub fn rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

const PAIRWISE_BLOCK: usize = 8;

/// Pairwise summation with a fixed split order; the result depends only on the slice contents and order.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    if values.len() <= PAIRWISE_BLOCK {
        let mut acc = 0.0;
        for v in values {
            acc += v;
        }
        return acc;
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

pub fn pairwise_mean(values: &[f64]) -> f64 {
    pairwise_sum(values) / values.len() as f64
}

/// Order-independent sum: the terms are sorted before a pairwise reduction, so any
/// permutation of `values` gives a bitwise identical result.
pub fn sorted_sum(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    pairwise_sum(values)
}

/// Numerically stable softmax whose normalizer is permutation invariant.
pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x.as_f64()));
    let exps: Vec<f64> = logits.iter().map(|&x| (x.as_f64() - max).exp()).collect();
    let mut scratch = exps.clone();
    let total = sorted_sum(&mut scratch);
    exps.iter().map(|&e| T::from_f64_lossy(e / total)).collect()
}

/// Binary entropy in nats.
pub fn binary_entropy(p: f64) -> f64 {
    if p <= 0.0 || p >= 1.0 {
        return 0.0;
    }
    -p * p.ln() - (1.0 - p) * (1.0 - p).ln()
}
