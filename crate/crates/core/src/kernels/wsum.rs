use ndarray::{Array1, Array2, ArrayView2, ArrayView3, Axis};

use super::{next_stamp, Fusion, ParamMut};
use crate::error::{Error, Result};
use crate::numeric::{pairwise_sum, softmax, sorted_sum, Scalar};

/// Static weighted sum of layers with softmax-parameterized weights, `sum_i softmax(theta)_i L_i`.
///
/// Each fused element is an order-independent sum, so permuting layers together with
/// their logits reproduces the output bit for bit.
#[derive(Debug, Clone)]
pub struct WeightedSum<T: Scalar> {
    pub logits: Array1<T>,
    stamp: u64,
}

impl<T: Scalar> PartialEq for WeightedSum<T> {
    fn eq(&self, other: &Self) -> bool {
        self.logits == other.logits
    }
}

pub struct WeightedSumCache<T> {
    stamp: u64,
    frames: ndarray::Array3<T>,
    weights: Vec<T>,
}

impl<T: Scalar> WeightedSum<T> {
    /// Zero logits, i.e. uniform weights.
    pub fn uniform(layers: usize) -> Self {
        Self::from_logits(Array1::zeros(layers))
    }

    pub fn from_logits(logits: Array1<T>) -> Self {
        Self {
            logits,
            stamp: next_stamp(),
        }
    }

    pub fn layers(&self) -> usize {
        self.logits.len()
    }

    pub fn weights(&self) -> Vec<T> {
        softmax(self.logits.as_slice().expect("contiguous"))
    }

    /// Fuses one `L x D` frame stack.
    pub fn fuse_frame(&self, frame: ArrayView2<'_, T>, weights: &[T], out: &mut [T]) {
        let mut terms = vec![0.0; weights.len()];
        for (d, o) in out.iter_mut().enumerate() {
            for (l, t) in terms.iter_mut().enumerate() {
                *t = weights[l].as_f64() * frame[[l, d]].as_f64();
            }
            *o = T::from_f64_lossy(sorted_sum(&mut terms));
        }
    }

    fn check(&self, frames: &ArrayView3<'_, T>) -> Result<()> {
        if frames.len_of(Axis(1)) != self.layers() {
            return Err(Error::Shape(format!(
                "frames carry {} layers, weighted sum has {}",
                frames.len_of(Axis(1)),
                self.layers()
            )));
        }
        Ok(())
    }
}

impl<T: Scalar> Fusion<T> for WeightedSum<T> {
    type Cache = WeightedSumCache<T>;

    fn fuse_batch(&self, frames: ArrayView3<'_, T>) -> Result<(Array2<T>, Self::Cache)> {
        self.check(&frames)?;
        let (batch, _, dim) = frames.dim();
        let weights = self.weights();
        let mut fused = Array2::zeros((batch, dim));
        for (frame, mut row) in frames.outer_iter().zip(fused.rows_mut()) {
            self.fuse_frame(frame, &weights, row.as_slice_mut().expect("contiguous"));
        }
        Ok((
            fused,
            WeightedSumCache {
                stamp: self.stamp,
                frames: frames.to_owned(),
                weights,
            },
        ))
    }

    fn fuse_backward(&self, cache: &Self::Cache, d_fused: ArrayView2<'_, T>) -> Result<Vec<Vec<T>>> {
        if cache.stamp != self.stamp {
            return Err(Error::StaleCache);
        }
        let (batch, layers, dim) = cache.frames.dim();
        if d_fused.dim() != (batch, dim) {
            return Err(Error::Shape("upstream gradient does not match cached batch".into()));
        }
        // dL/dw_l = sum_{b,d} g_bd x_bld, accumulated per layer in the same order for every l.
        let mut d_weights = vec![0.0; layers];
        let mut terms = vec![0.0; batch * dim];
        for (l, dw) in d_weights.iter_mut().enumerate() {
            for b in 0..batch {
                for d in 0..dim {
                    terms[b * dim + d] = d_fused[[b, d]].as_f64() * cache.frames[[b, l, d]].as_f64();
                }
            }
            *dw = pairwise_sum(&terms);
        }
        let w: Vec<f64> = cache.weights.iter().map(|w| w.as_f64()).collect();
        let mut weighted: Vec<f64> = w.iter().zip(&d_weights).map(|(w, g)| w * g).collect();
        let inner = sorted_sum(&mut weighted);
        let d_logits = w
            .iter()
            .zip(&d_weights)
            .map(|(w, g)| T::from_f64_lossy(w * (g - inner)))
            .collect();
        Ok(vec![d_logits])
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_, T>> {
        self.stamp = next_stamp();
        vec![ParamMut::new("ws.logits", self.logits.as_slice_mut().unwrap())]
    }
}
