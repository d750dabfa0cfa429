//! Layered Feature Archive (LFA v1) and dataset utilities.
//!
//! Byte layout, all integers little-endian:
//!
//! ```text
//! "LFA1" | u32 version=1 | u32 N | u32 L | u32 D | u8 flags (bit0 = snr present)
//!        | u32 json_len | JSON metadata (json_len bytes, UTF-8)
//!        | N*L*D x f32 features (frame, layer, dim) | N x u32 labels | [N x f32 snr]
//! ```

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numeric::{self, Stream};

pub const MAGIC: &[u8; 4] = b"LFA1";
pub const VERSION: u32 = 1;
const FLAG_SNR: u8 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 4 + 4 + 1 + 4;

/// JSON metadata block. Unknown keys are preserved in `extra`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Metadata {
    pub vocab: Vec<String>,
    #[serde(default)]
    pub model: String,
    #[serde(default)]
    pub layers: Vec<String>,
    #[serde(default)]
    pub snr_levels: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub utt_bounds: Option<Vec<u64>>,
    #[serde(flatten)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

/// N frames x L layers x D dims of features with a categorical label per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct LayeredDataset {
    n_frames: usize,
    n_layers: usize,
    dim: usize,
    features: Vec<f32>,
    labels: Vec<u32>,
    snr_db: Option<Vec<f32>>,
    meta: Metadata,
}

/// Outcome of one named invariant check, as printed by `validate`.
#[derive(Debug, Clone, PartialEq)]
pub struct InvariantCheck {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl LayeredDataset {
    /// Builds a dataset and validates every invariant.
    pub fn new(
        n_layers: usize,
        dim: usize,
        features: Vec<f32>,
        labels: Vec<u32>,
        snr_db: Option<Vec<f32>>,
        meta: Metadata,
    ) -> Result<Self> {
        let ds = Self::new_unchecked(n_layers, dim, features, labels, snr_db, meta)?;
        ds.validate()?;
        Ok(ds)
    }

    /// Checks only that the buffers have consistent sizes.
    fn new_unchecked(
        n_layers: usize,
        dim: usize,
        features: Vec<f32>,
        labels: Vec<u32>,
        snr_db: Option<Vec<f32>>,
        meta: Metadata,
    ) -> Result<Self> {
        let n_frames = labels.len();
        if n_layers == 0 || dim == 0 {
            return Err(Error::Validation("n_layers and dim must be positive".into()));
        }
        if features.len() != n_frames * n_layers * dim {
            return Err(Error::Shape(format!(
                "features hold {} values, expected N*L*D = {}*{}*{}",
                features.len(),
                n_frames,
                n_layers,
                dim
            )));
        }
        Ok(Self {
            n_frames,
            n_layers,
            dim,
            features,
            labels,
            snr_db,
            meta,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }
    pub fn n_layers(&self) -> usize {
        self.n_layers
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn vocab_size(&self) -> usize {
        self.meta.vocab.len()
    }
    pub fn features(&self) -> &[f32] {
        &self.features
    }
    pub fn labels(&self) -> &[u32] {
        &self.labels
    }
    pub fn snr_db(&self) -> Option<&[f32]> {
        self.snr_db.as_deref()
    }
    pub fn meta(&self) -> &Metadata {
        &self.meta
    }
    pub fn meta_mut(&mut self) -> &mut Metadata {
        &mut self.meta
    }

    /// The `L x D` stack of layer vectors for one frame.
    pub fn frame(&self, i: usize) -> ArrayView2<'_, f32> {
        let stride = self.n_layers * self.dim;
        ArrayView2::from_shape((self.n_layers, self.dim), &self.features[i * stride..(i + 1) * stride])
            .expect("frame slice has L*D elements")
    }

    pub fn layer_vector(&self, frame: usize, layer: usize) -> &[f32] {
        let start = (frame * self.n_layers + layer) * self.dim;
        &self.features[start..start + self.dim]
    }

    /// Gathers `features[rows, layer, :]` into an owned matrix.
    pub fn layer_matrix(&self, layer: usize, rows: &[usize]) -> Array2<f32> {
        let mut out = Array2::zeros((rows.len(), self.dim));
        for (r, &i) in rows.iter().enumerate() {
            out.row_mut(r)
                .as_slice_mut()
                .expect("standard layout")
                .copy_from_slice(self.layer_vector(i, layer));
        }
        out
    }

    pub fn labels_at(&self, rows: &[usize]) -> Vec<u32> {
        rows.iter().map(|&i| self.labels[i]).collect()
    }

    /// Runs every invariant and returns one entry per check.
    pub fn check_invariants(&self) -> Vec<InvariantCheck> {
        let k = self.vocab_size();
        let mut checks = Vec::new();

        let bad_label = self.labels.iter().enumerate().find(|(_, &y)| y as usize >= k);
        checks.push(InvariantCheck {
            name: "labels_in_vocab",
            passed: bad_label.is_none() && k > 0,
            detail: match bad_label {
                Some((i, y)) => format!("frame {i} has label {y} but vocab_size is {k}"),
                None if k == 0 => "vocab is empty".into(),
                None => format!("all {} labels < {k}", self.n_frames),
            },
        });

        let bad_feature = self.features.iter().position(|x| !x.is_finite());
        checks.push(InvariantCheck {
            name: "features_finite",
            passed: bad_feature.is_none(),
            detail: match bad_feature {
                Some(pos) => {
                    let (frame, layer, dim) = self.unflatten(pos);
                    format!("non-finite value at frame {frame}, layer {layer}, dim {dim}")
                }
                None => format!("{} values finite", self.features.len()),
            },
        });

        let snr_ok = match &self.snr_db {
            None => (true, "absent".to_string()),
            Some(s) if s.len() != self.n_frames => (false, format!("length {} but N = {}", s.len(), self.n_frames)),
            Some(s) => match s.iter().position(|x| !x.is_finite()) {
                Some(i) => (false, format!("non-finite SNR at frame {i}")),
                None => (true, format!("{} values", s.len())),
            },
        };
        checks.push(InvariantCheck {
            name: "snr_length",
            passed: snr_ok.0,
            detail: snr_ok.1,
        });

        let layers_ok = self.meta.layers.is_empty() || self.meta.layers.len() == self.n_layers;
        checks.push(InvariantCheck {
            name: "layer_names",
            passed: layers_ok,
            detail: format!("{} names for {} layers", self.meta.layers.len(), self.n_layers),
        });

        let bounds_ok = match &self.meta.utt_bounds {
            None => (true, "absent".to_string()),
            Some(b) => {
                let sorted = b.windows(2).all(|w| w[0] <= w[1]);
                let in_range = b.iter().all(|&x| x as usize <= self.n_frames);
                (sorted && in_range, format!("{} boundaries", b.len()))
            }
        };
        checks.push(InvariantCheck {
            name: "utt_bounds",
            passed: bounds_ok.0,
            detail: bounds_ok.1,
        });
        checks
    }

    /// Returns the first failing invariant as an error.
    pub fn validate(&self) -> Result<()> {
        if let Some(pos) = self.features.iter().position(|x| !x.is_finite()) {
            let (frame, layer, dim) = self.unflatten(pos);
            return Err(Error::NonFiniteFeature { frame, layer, dim });
        }
        let k = self.vocab_size();
        if let Some(&label) = self.labels.iter().find(|&&y| y as usize >= k) {
            return Err(Error::LabelOutOfRange { label, classes: k });
        }
        match self.check_invariants().into_iter().find(|c| !c.passed) {
            Some(c) => Err(Error::Validation(format!("{}: {}", c.name, c.detail))),
            None => Ok(()),
        }
    }

    fn unflatten(&self, pos: usize) -> (usize, usize, usize) {
        let frame = pos / (self.n_layers * self.dim);
        let rem = pos % (self.n_layers * self.dim);
        (frame, rem / self.dim, rem % self.dim)
    }

    /// New dataset holding the given frames, in the given order. Utterance bounds are dropped.
    pub fn subset(&self, rows: &[usize]) -> Self {
        let stride = self.n_layers * self.dim;
        let mut features = Vec::with_capacity(rows.len() * stride);
        for &i in rows {
            features.extend_from_slice(&self.features[i * stride..(i + 1) * stride]);
        }
        let mut meta = self.meta.clone();
        meta.utt_bounds = None;
        Self {
            n_frames: rows.len(),
            n_layers: self.n_layers,
            dim: self.dim,
            features,
            labels: self.labels_at(rows),
            snr_db: self.snr_db.as_ref().map(|s| rows.iter().map(|&i| s[i]).collect()),
            meta,
        }
    }

    /// Hex SHA-256 of the LFA encoding; equals the hash of the file `write_lfa` produces.
    pub fn content_hash(&self) -> String {
        let bytes = encode(self).expect("validated datasets encode");
        hex_digest(&bytes)
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Serializes a dataset to LFA v1 bytes.
pub fn encode(ds: &LayeredDataset) -> Result<Vec<u8>> {
    ds.validate()?;
    let json = serde_json::to_vec(&ds.meta)?;
    let snr = ds.snr_db.is_some();
    let mut out =
        Vec::with_capacity(HEADER_LEN + json.len() + ds.features.len() * 4 + ds.n_frames * if snr { 8 } else { 4 });
    out.extend_from_slice(MAGIC);
    for v in [VERSION, ds.n_frames as u32, ds.n_layers as u32, ds.dim as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.push(if snr { FLAG_SNR } else { 0 });
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for x in &ds.features {
        out.extend_from_slice(&x.to_le_bytes());
    }
    for y in &ds.labels {
        out.extend_from_slice(&y.to_le_bytes());
    }
    if let Some(s) = &ds.snr_db {
        for x in s {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn write_lfa(ds: &LayeredDataset, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode(ds)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, section: &'static str) -> Result<&'a [u8]> {
        let available = self.bytes.len() - self.pos;
        if available < n {
            return Err(Error::Truncated {
                section,
                expected: n as u64,
                actual: available as u64,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, section: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, section)?.try_into().unwrap()))
    }
}

/// Parses LFA bytes without running the dataset invariants (used by `validate`).
pub fn decode_unchecked(bytes: &[u8]) -> Result<LayeredDataset> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic: [u8; 4] = cur.take(4, "magic")?.try_into().unwrap();
    if &magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let version = cur.u32("header")?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let n = cur.u32("header")? as usize;
    let l = cur.u32("header")? as usize;
    let d = cur.u32("header")? as usize;
    let flags = cur.take(1, "header")?[0];
    let json_len = cur.u32("header")? as usize;
    let meta: Metadata = serde_json::from_slice(cur.take(json_len, "metadata")?)?;

    let n_values = n
        .checked_mul(l)
        .and_then(|x| x.checked_mul(d))
        .ok_or_else(|| Error::Validation("N*L*D overflows".into()))?;
    let features = cur
        .take(n_values * 4, "features")?
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let labels = cur
        .take(n * 4, "labels")?
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let snr_db = if flags & FLAG_SNR != 0 {
        Some(
            cur.take(n * 4, "snr")?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        )
    } else {
        None
    };
    if cur.pos != bytes.len() {
        return Err(Error::Validation(format!(
            "{} trailing bytes after payload",
            bytes.len() - cur.pos
        )));
    }
    LayeredDataset::new_unchecked(l, d, features, labels, snr_db, meta)
}

pub fn decode(bytes: &[u8]) -> Result<LayeredDataset> {
    let ds = decode_unchecked(bytes)?;
    ds.validate()?;
    Ok(ds)
}

pub fn read_lfa(path: impl AsRef<Path>) -> Result<LayeredDataset> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}

/// Frame-level train/eval split parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub eval_fraction: f64,
    pub seed: u64,
}

/// Sorted frame indices of each side of a split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub eval: Vec<usize>,
}

/// Deterministic partition of `0..n`; eval size is `round(n * eval_fraction)`.
pub fn split_indices(n: usize, spec: SplitSpec) -> Result<SplitIndices> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!("cannot split {n} frames")));
    }
    if !(spec.eval_fraction > 0.0 && spec.eval_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "eval fraction {} outside (0, 1)",
            spec.eval_fraction
        )));
    }
    let n_eval = (n as f64 * spec.eval_fraction).round() as usize;
    if n_eval == 0 {
        return Err(Error::InvalidArgument(format!(
            "eval fraction {} leaves the eval split empty for N = {n}",
            spec.eval_fraction
        )));
    }
    if n_eval == n {
        return Err(Error::InvalidArgument(format!(
            "eval fraction {} leaves the train split empty for N = {n}",
            spec.eval_fraction
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut numeric::rng(spec.seed, Stream::Split));
    let mut eval = perm[..n_eval].to_vec();
    let mut train = perm[n_eval..].to_vec();
    eval.sort_unstable();
    train.sort_unstable();
    Ok(SplitIndices { train, eval })
}

pub fn split(ds: &LayeredDataset, spec: SplitSpec) -> Result<(LayeredDataset, LayeredDataset)> {
    let idx = split_indices(ds.n_frames(), spec)?;
    Ok((ds.subset(&idx.train), ds.subset(&idx.eval)))
}

/// Frames whose SNR maps to one level of the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SnrBin {
    pub level_db: f64,
    pub frames: Vec<usize>,
}

/// Assigns every frame to the nearest grid level (ties go to the lower level).
///
/// Returns one bin per edge in ascending order; bins may be empty.
pub fn group_by_snr(ds: &LayeredDataset, bin_edges: &[f64]) -> Result<Vec<SnrBin>> {
    let snr = ds.snr_db().ok_or(Error::MissingSnr)?;
    if bin_edges.is_empty() {
        return Err(Error::InvalidArgument("empty SNR grid".into()));
    }
    let mut edges = bin_edges.to_vec();
    edges.sort_by(f64::total_cmp);
    if edges.windows(2).any(|w| w[0] == w[1]) || edges.iter().any(|e| !e.is_finite()) {
        return Err(Error::InvalidArgument(
            "SNR grid must hold distinct finite values".into(),
        ));
    }
    let mut bins: Vec<SnrBin> = edges
        .iter()
        .map(|&level_db| SnrBin {
            level_db,
            frames: Vec::new(),
        })
        .collect();
    for (i, &s) in snr.iter().enumerate() {
        let s = s as f64;
        let mut best = 0;
        for (b, &e) in edges.iter().enumerate().skip(1) {
            if (s - e).abs() < (s - edges[best]).abs() {
                best = b;
            }
        }
        bins[best].frames.push(i);
    }
    Ok(bins)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta(k: usize) -> Metadata {
        Metadata {
            vocab: (0..k).map(|i| format!("c{i}")).collect(),
            model: "test".into(),
            ..Default::default()
        }
    }

    fn small(snr: bool) -> LayeredDataset {
        let (n, l, d) = (2, 3, 4);
        let features = (0..n * l * d).map(|i| i as f32 * 0.5 - 3.0).collect();
        let snr_db = snr.then(|| vec![5.0, -10.0]);
        LayeredDataset::new(l, d, features, vec![0, 2], snr_db, meta(3)).unwrap()
    }

    #[test]
    fn encoded_size_follows_layout() {
        for snr in [false, true] {
            let ds = small(snr);
            let json_len = serde_json::to_vec(ds.meta()).unwrap().len();
            let expected = 25 + json_len + 2 * 3 * 4 * 4 + 2 * 4 + if snr { 2 * 4 } else { 0 };
            assert_eq!(encode(&ds).unwrap().len(), expected);
        }
    }

    #[test]
    fn header_fields_are_little_endian() {
        let bytes = encode(&small(true)).unwrap();
        assert_eq!(&bytes[..4], b"LFA1");
        assert_eq!(&bytes[4..8], &[1, 0, 0, 0]);
        assert_eq!(&bytes[8..12], &[2, 0, 0, 0]);
        assert_eq!(&bytes[12..16], &[3, 0, 0, 0]);
        assert_eq!(&bytes[16..20], &[4, 0, 0, 0]);
        assert_eq!(bytes[20], 1);
    }

    #[test]
    fn round_trip_is_exact() {
        let ds = small(true);
        assert_eq!(decode(&encode(&ds).unwrap()).unwrap(), ds);
    }

    #[test]
    fn label_outside_vocab_is_rejected() {
        let err = LayeredDataset::new(1, 1, vec![0.0; 2], vec![0, 5], None, meta(3)).unwrap_err();
        assert!(matches!(err, Error::LabelOutOfRange { label: 5, classes: 3 }));
    }

    #[test]
    fn bad_magic() {
        let mut bytes = encode(&small(false)).unwrap();
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode(&bytes), Err(Error::BadMagic(m)) if &m == b"XXXX"));
    }

    #[test]
    fn unsupported_version() {
        let mut bytes = encode(&small(false)).unwrap();
        bytes[4] = 2;
        assert!(matches!(decode(&bytes), Err(Error::UnsupportedVersion(2))));
    }

    #[test]
    fn truncated_features_report_lengths() {
        let bytes = encode(&small(false)).unwrap();
        let json_len = serde_json::to_vec(small(false).meta()).unwrap().len();
        let cut = 25 + json_len + 10;
        match decode(&bytes[..cut]) {
            Err(Error::Truncated {
                section,
                expected,
                actual,
            }) => {
                assert_eq!(section, "features");
                assert_eq!(expected, 96);
                assert_eq!(actual, 10);
            }
            other => panic!("expected truncation, got {other:?}"),
        }
    }

    #[test]
    fn nan_feature_is_a_distinct_error() {
        let ds = small(false);
        let mut bytes = encode(&ds).unwrap();
        let json_len = serde_json::to_vec(ds.meta()).unwrap().len();
        let off = 25 + json_len + 4 * 7;
        bytes[off..off + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(
            decode(&bytes),
            Err(Error::NonFiniteFeature {
                frame: 0,
                layer: 1,
                dim: 3
            })
        ));
        let checks = decode_unchecked(&bytes).unwrap().check_invariants();
        assert!(!checks.iter().find(|c| c.name == "features_finite").unwrap().passed);
    }

    #[test]
    fn split_sizes_and_determinism() {
        let spec = SplitSpec {
            eval_fraction: 0.2,
            seed: 7,
        };
        let a = split_indices(10, spec).unwrap();
        assert_eq!((a.train.len(), a.eval.len()), (8, 2));
        assert_eq!(a, split_indices(10, spec).unwrap());
        let mut all: Vec<usize> = a.train.iter().chain(&a.eval).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn degenerate_split_is_an_error() {
        let spec = SplitSpec {
            eval_fraction: 0.999,
            seed: 1,
        };
        let err = split_indices(2, spec).unwrap_err();
        assert!(err.to_string().contains("train split empty"), "{err}");
    }

    #[test]
    fn snr_bins_on_paper_grid() {
        let grid = [-10.0, -5.0, 0.0, 5.0, 10.0, 15.0, 20.0];
        let mut features = vec![0.0f32; 3];
        features[0] = 1.0;
        let ds = LayeredDataset::new(1, 1, features, vec![0, 1, 0], Some(vec![-10.0, 0.0, 20.0]), meta(2)).unwrap();
        let bins = group_by_snr(&ds, &grid).unwrap();
        let non_empty: Vec<f64> = bins
            .iter()
            .filter(|b| !b.frames.is_empty())
            .map(|b| b.level_db)
            .collect();
        assert_eq!(non_empty, vec![-10.0, 0.0, 20.0]);
        assert_eq!(bins.len(), 7);
    }

    #[test]
    fn single_snr_fills_one_bin() {
        let ds = LayeredDataset::new(1, 1, vec![0.0; 4], vec![0; 4], Some(vec![5.0; 4]), meta(1)).unwrap();
        let bins = group_by_snr(&ds, &[0.0, 5.0, 10.0]).unwrap();
        assert_eq!(bins[1].frames, vec![0, 1, 2, 3]);
        assert!(bins[0].frames.is_empty() && bins[2].frames.is_empty());
    }

    #[test]
    fn grouping_requires_snr() {
        assert!(matches!(group_by_snr(&small(false), &[0.0]), Err(Error::MissingSnr)));
    }
}
