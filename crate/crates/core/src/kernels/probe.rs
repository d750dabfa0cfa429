use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use super::{next_stamp, ParamMut};
use crate::error::{Error, Result};
use crate::numeric::{self, Scalar, Stream};

/// Affine map `y = x W + b` with `W` stored as `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Scalar> Affine<T> {
    /// Glorot-uniform weights, zero bias.
    pub fn glorot(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let weight = Array2::from_shape_fn((fan_in, fan_out), |_| {
            T::from_f64_lossy(rng.random_range(-limit..limit))
        });
        Self {
            weight,
            bias: Array1::zeros(fan_out),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Array2::zeros((fan_in, fan_out)),
            bias: Array1::zeros(fan_out),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.ncols()
    }
}

/// Forward mode. Training applies inverted dropout with masks drawn from `seed`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train { seed: u64 },
    Eval,
}

/// MLP classifier `q(y|z)`: affine layers with ReLU and dropout between them.
///
/// With no hidden layers this is a linear (softmax regression) probe.
#[derive(Debug, Clone)]
pub struct Probe<T: Scalar> {
    layers: Vec<Affine<T>>,
    dropout: f64,
    stamp: u64,
}

impl<T: Scalar> PartialEq for Probe<T> {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers && self.dropout == other.dropout
    }
}

pub struct ProbeCache<T> {
    stamp: u64,
    inputs: Vec<Array2<T>>,
    pre_activations: Vec<Array2<T>>,
    masks: Vec<Option<Array2<T>>>,
}

#[derive(Debug, Clone)]
pub struct ProbeGrads<T> {
    pub layers: Vec<Affine<T>>,
    pub input: Array2<T>,
}

impl<T: Scalar> ProbeGrads<T> {
    /// Gradient buffers in the order of [`Probe::params_mut`].
    pub fn flat(&self) -> Vec<&[T]> {
        self.layers
            .iter()
            .flat_map(|l| {
                [
                    l.weight.as_slice().expect("standard layout"),
                    l.bias.as_slice().expect("standard layout"),
                ]
            })
            .collect()
    }
}

fn check_dropout(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!("dropout rate {rate} outside [0, 1)")));
    }
    Ok(())
}

impl<T: Scalar> Probe<T> {
    /// `in_dim -> hidden[0] -> ... -> classes`, Glorot init from the `Init` stream of `seed`.
    pub fn new(in_dim: usize, hidden: &[usize], classes: usize, dropout: f64, seed: u64) -> Result<Self> {
        check_dropout(dropout)?;
        if in_dim == 0 || classes == 0 || hidden.contains(&0) {
            return Err(Error::InvalidArgument("probe dimensions must be positive".into()));
        }
        let mut rng = numeric::rng(seed, Stream::Init);
        let dims: Vec<usize> = std::iter::once(in_dim)
            .chain(hidden.iter().copied())
            .chain(std::iter::once(classes))
            .collect();
        let layers = dims.windows(2).map(|w| Affine::glorot(w[0], w[1], &mut rng)).collect();
        Ok(Self {
            layers,
            dropout,
            stamp: next_stamp(),
        })
    }

    /// Builds a probe from explicit layers; shapes must chain.
    pub fn from_layers(layers: Vec<Affine<T>>, dropout: f64) -> Result<Self> {
        check_dropout(dropout)?;
        if layers.is_empty() {
            return Err(Error::Shape("probe needs at least one layer".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::Shape(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    pair[0].out_dim(),
                    i + 1,
                    pair[1].in_dim()
                )));
            }
        }
        if layers.iter().any(|l| l.bias.len() != l.out_dim()) {
            return Err(Error::Shape("bias length differs from layer width".into()));
        }
        Ok(Self {
            layers,
            dropout,
            stamp: next_stamp(),
        })
    }

    pub fn layers(&self) -> &[Affine<T>] {
        &self.layers
    }
    pub fn dropout(&self) -> f64 {
        self.dropout
    }
    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }
    pub fn classes(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|x| x.is_finite()))
    }

    /// Mutable views of every parameter; invalidates outstanding caches.
    pub fn params_mut(&mut self) -> Vec<ParamMut<'_, T>> {
        self.stamp = next_stamp();
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(i, l)| {
                [
                    ParamMut::new(format!("probe.{i}.weight"), l.weight.as_slice_mut().unwrap()),
                    ParamMut::new(format!("probe.{i}.bias"), l.bias.as_slice_mut().unwrap()),
                ]
            })
            .collect()
    }

    pub fn forward(&self, x: ArrayView2<'_, T>, mode: Mode) -> Result<(Array2<T>, ProbeCache<T>)> {
        if x.ncols() != self.in_dim() {
            return Err(Error::Shape(format!(
                "probe expects {} input features, got {}",
                self.in_dim(),
                x.ncols()
            )));
        }
        let mut dropout_rng = match mode {
            Mode::Train { seed } if self.dropout > 0.0 => Some(numeric::rng(seed, Stream::Dropout)),
            _ => None,
        };
        let keep = 1.0 - self.dropout;
        let scale = T::from_f64_lossy(1.0 / keep);
        let last = self.layers.len() - 1;

        let mut cache = ProbeCache {
            stamp: self.stamp,
            inputs: Vec::with_capacity(self.layers.len()),
            pre_activations: Vec::with_capacity(last),
            masks: Vec::with_capacity(last),
        };
        let mut h = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = h.dot(&layer.weight) + &layer.bias;
            cache.inputs.push(h);
            if i == last {
                return Ok((z, cache));
            }
            let mut a = z.mapv(|v| if v > T::zero() { v } else { T::zero() });
            let mask = dropout_rng.as_mut().map(|rng| {
                Array2::from_shape_fn(
                    a.raw_dim(),
                    |_| {
                        if rng.random::<f64>() < keep {
                            scale
                        } else {
                            T::zero()
                        }
                    },
                )
            });
            if let Some(m) = &mask {
                a *= m;
            }
            cache.pre_activations.push(z);
            cache.masks.push(mask);
            h = a;
        }
        unreachable!("loop returns at the output layer")
    }

    /// Eval-mode logits without keeping a cache.
    pub fn logits(&self, x: ArrayView2<'_, T>) -> Result<Array2<T>> {
        Ok(self.forward(x, Mode::Eval)?.0)
    }

    pub fn backward(&self, cache: &ProbeCache<T>, d_logits: ArrayView2<'_, T>) -> Result<ProbeGrads<T>> {
        if cache.stamp != self.stamp || cache.inputs.len() != self.layers.len() {
            return Err(Error::StaleCache);
        }
        let batch = cache.inputs[0].nrows();
        if d_logits.dim() != (batch, self.classes()) {
            return Err(Error::Shape(format!(
                "upstream gradient {:?} does not match logits ({batch}, {})",
                d_logits.dim(),
                self.classes()
            )));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut g = d_logits.to_owned();
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let weight = cache.inputs[i].t().dot(&g);
            let bias = g.sum_axis(Axis(0));
            let mut g_in = g.dot(&layer.weight.t());
            if i > 0 {
                if let Some(mask) = &cache.masks[i - 1] {
                    g_in *= mask;
                }
                ndarray::Zip::from(&mut g_in)
                    .and(&cache.pre_activations[i - 1])
                    .for_each(|g, &z| {
                        if z <= T::zero() {
                            *g = T::zero();
                        }
                    });
            }
            grads.push(Affine { weight, bias });
            g = g_in;
        }
        grads.reverse();
        Ok(ProbeGrads {
            layers: grads,
            input: g,
        })
    }
}
