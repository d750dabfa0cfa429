//! Hand-written differentiable building blocks with analytic gradients.

use std::sync::atomic::{AtomicU64, Ordering};

mod attention;
mod gradcheck;
mod loss;
mod optim;
mod probe;
mod wsum;

pub use attention::{batch_layer_weights, AttentionCache, AttentionGrads, LayerAttention};
pub use gradcheck::{finite_diff_check, numeric_gradient, relative_error, GradCheckReport, ParamBlock};
pub use loss::{cross_entropy, per_sample_nll};
pub use optim::{AdamConfig, AdamState};
pub use probe::{Affine, Mode, Probe, ProbeCache, ProbeGrads};
pub use wsum::WeightedSum;

use ndarray::{Array2, ArrayView2, ArrayView3};

use crate::error::Result;
use crate::numeric::Scalar;

static STAMP: AtomicU64 = AtomicU64::new(1);

/// Fresh identity for a parameter state; caches remember the stamp they were built under.
pub(crate) fn next_stamp() -> u64 {
    STAMP.fetch_add(1, Ordering::Relaxed)
}

/// A named, mutable parameter buffer handed to the optimizer.
pub struct ParamMut<'a, T> {
    pub name: String,
    pub values: &'a mut [T],
}

impl<'a, T> ParamMut<'a, T> {
    pub fn new(name: impl Into<String>, values: &'a mut [T]) -> Self {
        Self {
            name: name.into(),
            values,
        }
    }
}

/// A layer-fusion module mapping `B x L x D` frame stacks to `B x D` fused vectors.
pub trait Fusion<T: Scalar> {
    type Cache;

    fn fuse_batch(&self, frames: ArrayView3<'_, T>) -> Result<(Array2<T>, Self::Cache)>;

    /// Parameter gradients in the order of [`Fusion::params_mut`].
    fn fuse_backward(&self, cache: &Self::Cache, d_fused: ArrayView2<'_, T>) -> Result<Vec<Vec<T>>>;

    fn params_mut(&mut self) -> Vec<ParamMut<'_, T>>;
}
