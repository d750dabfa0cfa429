use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayView3, Axis};

use super::{next_stamp, Affine, Fusion, ParamMut};
use crate::error::{Error, Result};
use crate::numeric::{self, Scalar, Stream};

/// Single-head self-attention across the layer axis of one frame.
///
/// For a frame stack `X` (`L x D`): `S = (X W_Q)(X W_K)^T / sqrt(D) + 1 b^T`,
/// `A = softmax_rows(S)`, output rows `A X`, fused vector = mean of the output rows.
/// The values are the stack itself, so the fused vector is `sum_j c_j x_j` with
/// `c_j` the mean of column `j` of `A`.
#[derive(Debug, Clone)]
pub struct LayerAttention<T: Scalar> {
    pub w_q: Array2<T>,
    pub w_k: Array2<T>,
    pub bias: Array1<T>,
    stamp: u64,
}

impl<T: Scalar> PartialEq for LayerAttention<T> {
    fn eq(&self, other: &Self) -> bool {
        self.w_q == other.w_q && self.w_k == other.w_k && self.bias == other.bias
    }
}

pub struct AttentionCache<T> {
    stamp: u64,
    x: Array2<T>,
    q: Array2<T>,
    k: Array2<T>,
    attn: Array2<T>,
}

impl<T> AttentionCache<T> {
    pub fn attention(&self) -> &Array2<T> {
        &self.attn
    }
}

#[derive(Debug, Clone)]
pub struct AttentionGrads<T> {
    pub w_q: Array2<T>,
    pub w_k: Array2<T>,
    pub bias: Array1<T>,
    pub input: Array2<T>,
}

impl<T: Scalar> LayerAttention<T> {
    /// Glorot-uniform projections and a zero bias (uniform prior over layers).
    pub fn new(layers: usize, dim: usize, d_k: usize, seed: u64) -> Result<Self> {
        if layers == 0 || dim == 0 || d_k == 0 {
            return Err(Error::InvalidArgument("attention dimensions must be positive".into()));
        }
        let mut rng = numeric::rng(seed, Stream::Init);
        let w_q = Affine::<T>::glorot(dim, d_k, &mut rng).weight;
        let w_k = Affine::<T>::glorot(dim, d_k, &mut rng).weight;
        Self::from_parts(w_q, w_k, Array1::zeros(layers))
    }

    pub fn from_parts(w_q: Array2<T>, w_k: Array2<T>, bias: Array1<T>) -> Result<Self> {
        if w_q.dim() != w_k.dim() {
            return Err(Error::Shape(format!(
                "W_Q is {:?} but W_K is {:?}",
                w_q.dim(),
                w_k.dim()
            )));
        }
        if bias.is_empty() || w_q.is_empty() {
            return Err(Error::Shape("empty attention parameters".into()));
        }
        Ok(Self {
            w_q,
            w_k,
            bias,
            stamp: next_stamp(),
        })
    }

    pub fn layers(&self) -> usize {
        self.bias.len()
    }
    pub fn dim(&self) -> usize {
        self.w_q.nrows()
    }
    pub fn d_k(&self) -> usize {
        self.w_q.ncols()
    }

    pub fn is_finite(&self) -> bool {
        self.w_q
            .iter()
            .chain(self.w_k.iter())
            .chain(self.bias.iter())
            .all(|x| x.is_finite())
    }

    fn check_frame(&self, x: &ArrayView2<'_, T>) -> Result<()> {
        if x.dim() != (self.layers(), self.dim()) {
            return Err(Error::Shape(format!(
                "frame stack is {:?}, attention expects ({}, {})",
                x.dim(),
                self.layers(),
                self.dim()
            )));
        }
        Ok(())
    }

    /// Returns the fused `D` vector, the `L x L` attention matrix and the cache.
    pub fn forward(&self, x: ArrayView2<'_, T>) -> Result<(Array1<T>, Array2<T>, AttentionCache<T>)> {
        self.check_frame(&x)?;
        let scale = T::one() / T::from_usize(self.dim()).unwrap().sqrt();
        let q = x.dot(&self.w_q);
        let k = x.dot(&self.w_k);
        let mut attn = q.dot(&k.t()) * scale;
        for mut row in attn.rows_mut() {
            row += &self.bias;
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - max).exp());
            let total = row.sum();
            row /= total;
        }
        let output = attn.dot(&x);
        let fused = output.mean_axis(Axis(0)).expect("at least one layer");
        let cache = AttentionCache {
            stamp: self.stamp,
            x: x.to_owned(),
            q,
            k,
            attn: attn.clone(),
        };
        Ok((fused, attn, cache))
    }

    pub fn backward(&self, cache: &AttentionCache<T>, d_fused: ArrayView1<'_, T>) -> Result<AttentionGrads<T>> {
        if cache.stamp != self.stamp {
            return Err(Error::StaleCache);
        }
        if d_fused.len() != self.dim() {
            return Err(Error::Shape(format!(
                "upstream gradient has {} entries, expected {}",
                d_fused.len(),
                self.dim()
            )));
        }
        let layers = self.layers();
        let scale = T::one() / T::from_usize(self.dim()).unwrap().sqrt();
        let inv_l = T::one() / T::from_usize(layers).unwrap();
        let a = &cache.attn;
        let x = &cache.x;

        // fused = mean_i (A X)_i  =>  d(A X)_i = d_fused / L for every row i.
        let d_out = Array2::from_shape_fn((layers, self.dim()), |(_, d)| d_fused[d] * inv_l);
        let d_attn = d_out.dot(&x.t());
        let mut d_input = a.t().dot(&d_out);

        let mut d_scores = Array2::zeros((layers, layers));
        for i in 0..layers {
            let dot = a.row(i).dot(&d_attn.row(i));
            for j in 0..layers {
                d_scores[[i, j]] = a[[i, j]] * (d_attn[[i, j]] - dot);
            }
        }
        let bias = d_scores.sum_axis(Axis(0));
        let d_scaled = &d_scores * scale;
        let d_q = d_scaled.dot(&cache.k);
        let d_k = d_scaled.t().dot(&cache.q);
        let w_q = x.t().dot(&d_q);
        let w_k = x.t().dot(&d_k);
        d_input = d_input + d_q.dot(&self.w_q.t()) + d_k.dot(&self.w_k.t());
        Ok(AttentionGrads {
            w_q,
            w_k,
            bias,
            input: d_input,
        })
    }

    /// Column mass `c_j = mean_i A_ij`: the share of layer `j` in the fused vector.
    pub fn layer_weights(attn: &Array2<T>) -> Array1<T> {
        attn.mean_axis(Axis(0)).expect("at least one row")
    }
}

impl<T: Scalar> Fusion<T> for LayerAttention<T> {
    type Cache = Vec<AttentionCache<T>>;

    fn fuse_batch(&self, frames: ArrayView3<'_, T>) -> Result<(Array2<T>, Self::Cache)> {
        let batch = frames.len_of(Axis(0));
        let mut fused = Array2::zeros((batch, self.dim()));
        let mut caches = Vec::with_capacity(batch);
        for (b, frame) in frames.outer_iter().enumerate() {
            let (f, _, cache) = self.forward(frame)?;
            fused.row_mut(b).assign(&f);
            caches.push(cache);
        }
        Ok((fused, caches))
    }

    fn fuse_backward(&self, cache: &Self::Cache, d_fused: ArrayView2<'_, T>) -> Result<Vec<Vec<T>>> {
        if cache.len() != d_fused.nrows() {
            return Err(Error::Shape("batch size differs from cached forward".into()));
        }
        let mut w_q = Array2::zeros(self.w_q.raw_dim());
        let mut w_k = Array2::zeros(self.w_k.raw_dim());
        let mut bias = Array1::zeros(self.layers());
        for (c, d) in cache.iter().zip(d_fused.outer_iter()) {
            let g = self.backward(c, d)?;
            w_q += &g.w_q;
            w_k += &g.w_k;
            bias += &g.bias;
        }
        Ok(vec![
            w_q.into_raw_vec_and_offset().0,
            w_k.into_raw_vec_and_offset().0,
            bias.to_vec(),
        ])
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_, T>> {
        self.stamp = next_stamp();
        vec![
            ParamMut::new("attention.W_Q", self.w_q.as_slice_mut().unwrap()),
            ParamMut::new("attention.W_K", self.w_k.as_slice_mut().unwrap()),
            ParamMut::new("attention.bias", self.bias.as_slice_mut().unwrap()),
        ]
    }
}

/// Per-frame column masses for a batch, `B x L`.
pub fn batch_layer_weights<T: Scalar>(att: &LayerAttention<T>, frames: ArrayView3<'_, T>) -> Result<Array2<T>> {
    let mut out = Array2::zeros((frames.len_of(Axis(0)), att.layers()));
    for (b, frame) in frames.outer_iter().enumerate() {
        let (_, attn, _) = att.forward(frame)?;
        out.row_mut(b).assign(&LayerAttention::layer_weights(&attn));
    }
    Ok(out)
}
