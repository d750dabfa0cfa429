//! Synthetic layered datasets with known or ordered information content.
//!
//! All randomness comes from the `Data` stream of a ChaCha8 generator seeded with
//! `SynthSpec::seed`, consumed in a fixed order: codebook, marker direction, then
//! frame by frame (label, then layers in index order).

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lfa::{LayeredDataset, Metadata};
use crate::numeric::{self, Stream};

/// The level grid of the noisy-mixture analysis, in dB.
pub const SNR_GRID_DB: [f64; 7] = [-10.0, -5.0, 0.0, 5.0, 10.0, 15.0, 20.0];

/// Minimum pairwise distance between class embeddings.
pub const MIN_CODEBOOK_SEPARATION: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    /// One layer holds a class embedding, the rest are noise: MI = ln K on that layer, 0 elsewhere.
    Deterministic,
    /// Labels and features drawn independently.
    Independent,
    /// A +-1 channel carrying the label bit flipped with probability p: MI = ln 2 - H_b(p).
    BinaryChannel,
    /// Class embedding plus per-frame noise at scheduled SNRs, gain decaying away from a peak layer.
    NoisySnr,
    /// The informative layer rotates between segments.
    LayerSwitching,
}

impl std::str::FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.replace('-', "_")))
            .map_err(|_| Error::InvalidArgument(format!("unknown synthetic family `{s}`")))
    }
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Deterministic => "deterministic",
            Family::Independent => "independent",
            Family::BinaryChannel => "binary_channel",
            Family::NoisySnr => "noisy_snr",
            Family::LayerSwitching => "layer_switching",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub family: Family,
    pub n: usize,
    pub layers: usize,
    pub dim: usize,
    pub classes: usize,
    pub seed: u64,
    /// Flip probability of the binary channel.
    pub flip_p: f64,
    /// Informative layer (deterministic, binary channel), peak layer (noisy SNR) or the
    /// rotation of active layers (layer switching).
    pub informative: Vec<usize>,
    pub snr_levels: Vec<f64>,
    /// Frames per SNR segment (noisy SNR) or per active-layer segment (layer switching).
    pub segment: usize,
    /// Per-layer signal gain `decay^|l - peak|` of the noisy SNR family.
    pub layer_decay: f64,
    /// Standard deviation of non-informative layers.
    pub noise_std: f64,
    /// Shift along a fixed unit direction added to every layer.
    pub offset: f64,
    /// Extra shift along the same direction on the informative layer only.
    pub marker: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            family: Family::Deterministic,
            n: 10_000,
            layers: 4,
            dim: 16,
            classes: 10,
            seed: 0,
            flip_p: 0.1,
            informative: vec![1],
            snr_levels: SNR_GRID_DB.to_vec(),
            segment: 50,
            layer_decay: 0.6,
            noise_std: 1.0,
            offset: 0.0,
            marker: 0.0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.n == 0 || self.layers == 0 || self.dim == 0 {
            return bad("n, layers and dim must be positive".into());
        }
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        if let Some(&l) = self.informative.iter().find(|&&l| l >= self.layers) {
            return bad(format!("informative layer {l} >= layer count {}", self.layers));
        }
        if !(self.noise_std > 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise_std {} must be positive", self.noise_std));
        }
        if !self.offset.is_finite() || !self.marker.is_finite() {
            return bad("offset and marker must be finite".into());
        }
        match self.family {
            Family::Independent => {}
            Family::Deterministic => {
                if self.informative.len() != 1 {
                    return bad("deterministic family takes exactly one informative layer".into());
                }
            }
            Family::BinaryChannel => {
                if self.classes != 2 {
                    return bad(format!("binary channel needs 2 classes, got {}", self.classes));
                }
                if !(self.flip_p > 0.0 && self.flip_p <= 0.5) {
                    return bad(format!("flip probability {} outside (0, 0.5]", self.flip_p));
                }
                if self.informative.len() != 1 {
                    return bad("binary channel takes exactly one informative layer".into());
                }
            }
            Family::NoisySnr => {
                if self.snr_levels.is_empty() {
                    return bad("empty SNR schedule".into());
                }
                if self.snr_levels.iter().any(|s| !s.is_finite()) {
                    return bad("SNR levels must be finite".into());
                }
                if self.informative.len() != 1 {
                    return bad("noisy SNR family takes exactly one peak layer".into());
                }
                if self.segment == 0 {
                    return bad("segment length must be >= 1".into());
                }
                if !(self.layer_decay > 0.0 && self.layer_decay <= 1.0) {
                    return bad(format!("layer decay {} outside (0, 1]", self.layer_decay));
                }
            }
            Family::LayerSwitching => {
                let mut distinct = self.informative.clone();
                distinct.sort_unstable();
                distinct.dedup();
                if distinct.len() < 2 {
                    return bad("layer switching needs at least 2 distinct informative layers".into());
                }
                if self.segment == 0 {
                    return bad("segment length must be >= 1".into());
                }
                if self.segment > self.n {
                    return bad(format!("segment length {} exceeds N = {}", self.segment, self.n));
                }
            }
        }
        Ok(())
    }
}

/// Generates the dataset described by `spec`.
pub fn generate(spec: &SynthSpec) -> Result<LayeredDataset> {
    spec.validate()?;
    match spec.family {
        Family::Deterministic => gen_deterministic(spec),
        Family::Independent => gen_independent(spec),
        Family::BinaryChannel => gen_binary_channel(spec),
        Family::NoisySnr => gen_noisy_snr(spec),
        Family::LayerSwitching => gen_layer_switching(spec),
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// `classes x dim` embeddings with pairwise distance >= [`MIN_CODEBOOK_SEPARATION`].
fn codebook(classes: usize, dim: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
    const MAX_TRIES: usize = 1000;
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(classes);
    for _ in 0..classes {
        let mut accepted = false;
        for _ in 0..MAX_TRIES {
            let cand: Vec<f64> = (0..dim).map(|_| normal(rng)).collect();
            let far = rows.iter().all(|r| {
                r.iter().zip(&cand).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() >= MIN_CODEBOOK_SEPARATION
            });
            if far {
                rows.push(cand);
                accepted = true;
                break;
            }
        }
        if !accepted {
            return Err(Error::InvalidArgument(format!(
                "codebook collision: cannot place {classes} embeddings {MIN_CODEBOOK_SEPARATION} apart in {dim} dims; use a larger dim"
            )));
        }
    }
    Ok(rows)
}

fn unit_direction(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| normal(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    v.into_iter().map(|x| x / norm).collect()
}

/// Rescales `noise` so that `10 log10(|signal|^2 / |noise|^2) = snr_db` holds exactly.
pub fn noise_at_snr(signal: &[f64], noise: &[f64], snr_db: f64) -> Vec<f64> {
    let signal_power: f64 = signal.iter().map(|x| x * x).sum();
    let noise_power: f64 = noise.iter().map(|x| x * x).sum();
    let target = signal_power * 10f64.powf(-snr_db / 10.0);
    let scale = (target / noise_power.max(f64::MIN_POSITIVE)).sqrt();
    noise.iter().map(|x| x * scale).collect()
}

fn metadata(spec: &SynthSpec, snr_levels: Vec<f64>) -> Result<Metadata> {
    let mut extra = serde_json::Map::new();
    extra.insert("synth".into(), serde_json::to_value(spec)?);
    Ok(Metadata {
        vocab: (0..spec.classes).map(|k| format!("c{k}")).collect(),
        model: format!("synthetic:{}", spec.family.name()),
        layers: (0..spec.layers).map(|l| format!("layer_{l}")).collect(),
        snr_levels,
        utt_bounds: None,
        extra,
    })
}

/// Shared generator for the planted families: frame `i` has its informative layer at `active(i)`.
fn gen_planted(spec: &SynthSpec, active: impl Fn(usize) -> usize) -> Result<(Vec<f32>, Vec<u32>)> {
    let mut rng = numeric::rng(spec.seed, Stream::Data);
    let book = codebook(spec.classes, spec.dim, &mut rng)?;
    let dir = unit_direction(spec.dim, &mut rng);
    let mut features = Vec::with_capacity(spec.n * spec.layers * spec.dim);
    let mut labels = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let y = rng.random_range(0..spec.classes);
        labels.push(y as u32);
        let k = active(i);
        for l in 0..spec.layers {
            for d in 0..spec.dim {
                let v = if l == k {
                    book[y][d] + (spec.offset + spec.marker) * dir[d]
                } else {
                    spec.noise_std * normal(&mut rng) + spec.offset * dir[d]
                };
                features.push(v as f32);
            }
        }
    }
    Ok((features, labels))
}

pub fn gen_deterministic(spec: &SynthSpec) -> Result<LayeredDataset> {
    let k = spec.informative[0];
    let (features, labels) = gen_planted(spec, |_| k)?;
    LayeredDataset::new(spec.layers, spec.dim, features, labels, None, metadata(spec, vec![])?)
}

pub fn gen_independent(spec: &SynthSpec) -> Result<LayeredDataset> {
    let (features, labels) = gen_planted(spec, |_| usize::MAX)?;
    LayeredDataset::new(spec.layers, spec.dim, features, labels, None, metadata(spec, vec![])?)
}

pub fn gen_binary_channel(spec: &SynthSpec) -> Result<LayeredDataset> {
    let k = spec.informative[0];
    let mut rng = numeric::rng(spec.seed, Stream::Data);
    let mut features = Vec::with_capacity(spec.n * spec.layers * spec.dim);
    let mut labels = Vec::with_capacity(spec.n);
    for _ in 0..spec.n {
        let y = rng.random_range(0..2u32);
        let flipped = rng.random::<f64>() < spec.flip_p;
        let bit = y ^ flipped as u32;
        labels.push(y);
        for l in 0..spec.layers {
            for d in 0..spec.dim {
                let v = if l == k && d == 0 {
                    if bit == 1 {
                        1.0
                    } else {
                        -1.0
                    }
                } else {
                    normal(&mut rng)
                };
                features.push(v as f32);
            }
        }
    }
    LayeredDataset::new(spec.layers, spec.dim, features, labels, None, metadata(spec, vec![])?)
}

pub fn gen_noisy_snr(spec: &SynthSpec) -> Result<LayeredDataset> {
    let peak = spec.informative[0];
    let mut rng = numeric::rng(spec.seed, Stream::Data);
    let book = codebook(spec.classes, spec.dim, &mut rng)?;
    let dir = unit_direction(spec.dim, &mut rng);
    let gains: Vec<f64> = (0..spec.layers)
        .map(|l| spec.layer_decay.powi(l.abs_diff(peak) as i32))
        .collect();
    let mut features = Vec::with_capacity(spec.n * spec.layers * spec.dim);
    let mut labels = Vec::with_capacity(spec.n);
    let mut snr = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let level = spec.snr_levels[(i / spec.segment) % spec.snr_levels.len()];
        snr.push(level as f32);
        let y = rng.random_range(0..spec.classes);
        labels.push(y as u32);
        let signal = &book[y];
        for gain in &gains {
            let raw: Vec<f64> = (0..spec.dim).map(|_| normal(&mut rng)).collect();
            let noise = noise_at_snr(signal, &raw, level);
            for d in 0..spec.dim {
                features.push((gain * signal[d] + noise[d] + spec.offset * dir[d]) as f32);
            }
        }
    }
    LayeredDataset::new(
        spec.layers,
        spec.dim,
        features,
        labels,
        Some(snr),
        metadata(spec, spec.snr_levels.clone())?,
    )
}

pub fn gen_layer_switching(spec: &SynthSpec) -> Result<LayeredDataset> {
    let rotation = spec.informative.clone();
    let active = |i: usize| rotation[(i / spec.segment) % rotation.len()];
    let (features, labels) = gen_planted(spec, active)?;
    let mut meta = metadata(spec, vec![])?;
    let trace: Vec<usize> = (0..spec.n).map(active).collect();
    meta.extra.insert("active_layer".into(), serde_json::to_value(trace)?);
    LayeredDataset::new(spec.layers, spec.dim, features, labels, None, meta)
}

/// The per-frame active layer recorded by [`gen_layer_switching`].
pub fn active_layers(ds: &LayeredDataset) -> Option<Vec<usize>> {
    serde_json::from_value(ds.meta().extra.get("active_layer")?.clone()).ok()
}

/// Closed-form MI of the binary channel, `ln 2 - H_b(p)`, in nats.
pub fn binary_channel_mi(p: f64) -> f64 {
    std::f64::consts::LN_2 - numeric::binary_entropy(p)
}
