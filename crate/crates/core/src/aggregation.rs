//! Layer aggregators (static weighted sum and per-frame attention), their MI-driven
//! training, and the `ling-agg/1` JSON exchange format.

use ndarray::{Array1, Array2, ArrayView3, Axis};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;

use crate::error::{Error, Result};
use crate::kernels::{cross_entropy, AdamState, Fusion, LayerAttention, Mode, Probe, WeightedSum};
use crate::lfa::{hex_digest, split_indices, LayeredDataset, SplitIndices};
use crate::mi::{self, check_two_classes, divergence, epoch_batches, fit_and_bound, Context, MIEstimate, TrainConfig};
use crate::numeric::{self, pairwise_sum, softmax, Stream};

pub const FORMAT: &str = "ling-agg/1";

/// Logit used for a zero entry of an imported raw weight vector.
const ZERO_WEIGHT_LOGIT: f64 = -1e30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggMode {
    Acoustic,
    Linguistic,
    Hybrid,
}

impl std::fmt::Display for AggMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AggMode::Acoustic => "acoustic",
            AggMode::Linguistic => "linguistic",
            AggMode::Hybrid => "hybrid",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Provenance {
    pub seed: u64,
    pub dataset_hash: String,
}

/// Static weighted sum, `w = softmax(logits)`.
#[derive(Debug, Clone, PartialEq)]
pub struct WsAggregator {
    pub logits: Vec<f64>,
    /// Feature width, when known.
    pub dim: Option<usize>,
    pub mode: AggMode,
    pub trainable_mask: Vec<bool>,
    pub frozen: bool,
    pub provenance: Provenance,
    /// Set when the logits were derived from an imported raw weight vector.
    pub normalized_from_raw: bool,
}

impl WsAggregator {
    pub fn uniform(layers: usize, dim: Option<usize>, mode: AggMode) -> Self {
        Self {
            logits: vec![0.0; layers],
            dim,
            mode,
            trainable_mask: vec![true; layers],
            frozen: false,
            provenance: Provenance::default(),
            normalized_from_raw: false,
        }
    }

    /// Logits `ln(w / sum w)` from a non-negative raw weight vector.
    pub fn from_raw_weights(weights: &[f64], mode: AggMode) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Aggregator("empty weight vector".into()));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Aggregator("raw weights must be finite and non-negative".into()));
        }
        let total = pairwise_sum(weights);
        if total <= 0.0 {
            return Err(Error::Aggregator("raw weights sum to zero".into()));
        }
        let logits = weights
            .iter()
            .map(|&w| if w == 0.0 { ZERO_WEIGHT_LOGIT } else { (w / total).ln() })
            .collect();
        Ok(Self {
            logits,
            normalized_from_raw: true,
            ..Self::uniform(weights.len(), None, mode)
        })
    }

    pub fn layers(&self) -> usize {
        self.logits.len()
    }

    pub fn weights(&self) -> Vec<f64> {
        softmax(&self.logits)
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
        self.trainable_mask.iter_mut().for_each(|m| *m = false);
    }

    /// Hybrid hand-off: only `w_0` stays trainable downstream.
    pub fn into_hybrid(mut self) -> Self {
        self.mode = AggMode::Hybrid;
        self.frozen = false;
        self.trainable_mask = (0..self.layers()).map(|i| i == 0).collect();
        self
    }

    fn kernel(&self) -> WeightedSum<f32> {
        WeightedSum::from_logits(self.logits.iter().map(|&x| x as f32).collect())
    }

    fn validate(&self) -> Result<()> {
        if self.logits.is_empty() {
            return Err(Error::Aggregator("weighted sum has no layers".into()));
        }
        if self.logits.iter().any(|x| !x.is_finite()) {
            return Err(Error::Aggregator("non-finite logits".into()));
        }
        if self.trainable_mask.len() != self.layers() {
            return Err(Error::Shape(format!(
                "trainable mask has {} entries for {} layers",
                self.trainable_mask.len(),
                self.layers()
            )));
        }
        if self.mode == AggMode::Hybrid && self.trainable_mask.iter().enumerate().any(|(i, &m)| m != (i == 0)) {
            return Err(Error::Aggregator(
                "hybrid weighted sum must mark exactly index 0 trainable".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DwsMask {
    #[serde(rename = "W_Q")]
    pub w_q: bool,
    #[serde(rename = "W_K")]
    pub w_k: bool,
    pub bias: Vec<bool>,
}

impl DwsMask {
    fn all(layers: usize, value: bool) -> Self {
        Self {
            w_q: value,
            w_k: value,
            bias: vec![value; layers],
        }
    }
}

/// Per-frame attention over layers with a global layer bias.
#[derive(Debug, Clone, PartialEq)]
pub struct DwsAggregator {
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub bias: Array1<f64>,
    pub mode: AggMode,
    pub trainable_mask: DwsMask,
    pub frozen: bool,
    pub provenance: Provenance,
}

impl DwsAggregator {
    pub fn from_parts(w_q: Array2<f64>, w_k: Array2<f64>, bias: Array1<f64>, mode: AggMode) -> Result<Self> {
        let layers = bias.len();
        let mut agg = Self {
            w_q,
            w_k,
            bias,
            mode,
            trainable_mask: DwsMask::all(layers, true),
            frozen: false,
            provenance: Provenance::default(),
        };
        if mode == AggMode::Hybrid {
            agg = agg.into_hybrid();
        }
        agg.validate()?;
        Ok(agg)
    }

    fn from_kernel(att: &LayerAttention<f32>, mode: AggMode) -> Result<Self> {
        Self::from_parts(
            att.w_q.mapv(f64::from),
            att.w_k.mapv(f64::from),
            att.bias.mapv(f64::from),
            mode,
        )
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

    pub fn freeze(&mut self) {
        self.frozen = true;
        self.trainable_mask = DwsMask::all(self.layers(), false);
    }

    /// Hybrid hand-off: only `b_0` stays trainable downstream.
    pub fn into_hybrid(mut self) -> Self {
        self.mode = AggMode::Hybrid;
        self.frozen = false;
        self.trainable_mask = DwsMask {
            w_q: false,
            w_k: false,
            bias: (0..self.layers()).map(|i| i == 0).collect(),
        };
        self
    }

    pub fn kernel(&self) -> Result<LayerAttention<f32>> {
        LayerAttention::from_parts(
            self.w_q.mapv(|x| x as f32),
            self.w_k.mapv(|x| x as f32),
            self.bias.mapv(|x| x as f32),
        )
    }

    fn validate(&self) -> Result<()> {
        if self.w_q.dim() != self.w_k.dim() || self.w_q.is_empty() || self.bias.is_empty() {
            return Err(Error::Shape(format!(
                "W_Q {:?}, W_K {:?}, bias {}",
                self.w_q.dim(),
                self.w_k.dim(),
                self.bias.len()
            )));
        }
        if self
            .w_q
            .iter()
            .chain(self.w_k.iter())
            .chain(self.bias.iter())
            .any(|x| !x.is_finite())
        {
            return Err(Error::Aggregator("non-finite attention parameters".into()));
        }
        if self.trainable_mask.bias.len() != self.layers() {
            return Err(Error::Shape(format!(
                "bias mask has {} entries for {} layers",
                self.trainable_mask.bias.len(),
                self.layers()
            )));
        }
        if self.mode == AggMode::Hybrid {
            let m = &self.trainable_mask;
            if m.w_q || m.w_k || m.bias.iter().enumerate().any(|(i, &b)| b != (i == 0)) {
                return Err(Error::Aggregator(
                    "hybrid attention must mark exactly b_0 trainable".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Aggregator {
    Ws(WsAggregator),
    Dws(DwsAggregator),
}

impl Aggregator {
    pub fn kind(&self) -> &'static str {
        match self {
            Aggregator::Ws(_) => "ws",
            Aggregator::Dws(_) => "dws",
        }
    }

    pub fn mode(&self) -> AggMode {
        match self {
            Aggregator::Ws(a) => a.mode,
            Aggregator::Dws(a) => a.mode,
        }
    }

    pub fn layers(&self) -> usize {
        match self {
            Aggregator::Ws(a) => a.layers(),
            Aggregator::Dws(a) => a.layers(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Aggregator::Ws(a) => a.validate(),
            Aggregator::Dws(a) => a.validate(),
        }
    }

    /// SHA-256 of the exported JSON.
    pub fn param_hash(&self) -> Result<String> {
        Ok(hex_digest(self.to_json()?.as_bytes()))
    }

    /// `<type>-<mode>-<first 8 hex digits of the parameter hash>`.
    pub fn id(&self) -> Result<String> {
        Ok(format!("{}-{}-{}", self.kind(), self.mode(), &self.param_hash()?[..8]))
    }

    pub fn to_json(&self) -> Result<String> {
        self.validate()?;
        let text = match self {
            Aggregator::Ws(a) => serde_json::to_string_pretty(&WsOut {
                format: FORMAT,
                kind: "ws",
                mode: a.mode,
                l: a.layers(),
                d: a.dim,
                logits: raw_vec(&a.logits)?,
                trainable_mask: WsMask {
                    logits: a.trainable_mask.clone(),
                },
                frozen: a.frozen,
                provenance: &a.provenance,
                normalized_from_raw: a.normalized_from_raw,
            })?,
            Aggregator::Dws(a) => serde_json::to_string_pretty(&DwsOut {
                format: FORMAT,
                kind: "dws",
                mode: a.mode,
                l: a.layers(),
                d: a.dim(),
                d_k: a.d_k(),
                w_q: a
                    .w_q
                    .rows()
                    .into_iter()
                    .map(|r| raw_vec(&r.to_vec()))
                    .collect::<Result<_>>()?,
                w_k: a
                    .w_k
                    .rows()
                    .into_iter()
                    .map(|r| raw_vec(&r.to_vec()))
                    .collect::<Result<_>>()?,
                bias: raw_vec(&a.bias.to_vec())?,
                trainable_mask: &a.trainable_mask,
                frozen: a.frozen,
                provenance: &a.provenance,
            })?,
        };
        Ok(text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let format = value.get("format").and_then(|f| f.as_str());
        if format != Some(FORMAT) {
            return Err(Error::Aggregator(format!(
                "expected format `{FORMAT}`, found {format:?}"
            )));
        }
        let agg = match value.get("type").and_then(|t| t.as_str()) {
            Some("ws") => Aggregator::Ws(ws_from_json(serde_json::from_value(value)?)?),
            Some("dws") => Aggregator::Dws(dws_from_json(serde_json::from_value(value)?)?),
            other => return Err(Error::Aggregator(format!("unknown aggregator type {other:?}"))),
        };
        agg.validate()?;
        Ok(agg)
    }
}

fn raw_vec(values: &[f64]) -> Result<Vec<Box<RawValue>>> {
    values
        .iter()
        .map(|x| Ok(RawValue::from_string(format!("{x:.16e}"))?))
        .collect()
}

fn is_false(b: &bool) -> bool {
    !*b
}

#[derive(Serialize, Deserialize)]
struct WsMask {
    logits: Vec<bool>,
}

#[derive(Serialize)]
struct WsOut<'a> {
    format: &'static str,
    #[serde(rename = "type")]
    kind: &'static str,
    mode: AggMode,
    #[serde(rename = "L")]
    l: usize,
    #[serde(rename = "D", skip_serializing_if = "Option::is_none")]
    d: Option<usize>,
    logits: Vec<Box<RawValue>>,
    trainable_mask: WsMask,
    frozen: bool,
    provenance: &'a Provenance,
    #[serde(skip_serializing_if = "is_false")]
    normalized_from_raw: bool,
}

#[derive(Serialize)]
struct DwsOut<'a> {
    format: &'static str,
    #[serde(rename = "type")]
    kind: &'static str,
    mode: AggMode,
    #[serde(rename = "L")]
    l: usize,
    #[serde(rename = "D")]
    d: usize,
    d_k: usize,
    #[serde(rename = "W_Q")]
    w_q: Vec<Vec<Box<RawValue>>>,
    #[serde(rename = "W_K")]
    w_k: Vec<Vec<Box<RawValue>>>,
    bias: Vec<Box<RawValue>>,
    trainable_mask: &'a DwsMask,
    frozen: bool,
    provenance: &'a Provenance,
}

#[derive(Deserialize)]
struct WsIn {
    mode: AggMode,
    #[serde(rename = "L")]
    l: Option<usize>,
    #[serde(rename = "D")]
    d: Option<usize>,
    logits: Option<Vec<f64>>,
    /// Raw, possibly unnormalized weights (externally trained aggregators).
    weights: Option<Vec<f64>>,
    trainable_mask: Option<WsMask>,
    #[serde(default)]
    frozen: bool,
    #[serde(default)]
    provenance: Provenance,
    #[serde(default)]
    normalized_from_raw: bool,
}

#[derive(Deserialize)]
struct DwsIn {
    mode: AggMode,
    #[serde(rename = "L")]
    l: usize,
    #[serde(rename = "D")]
    d: usize,
    d_k: usize,
    #[serde(rename = "W_Q")]
    w_q: Vec<Vec<f64>>,
    #[serde(rename = "W_K")]
    w_k: Vec<Vec<f64>>,
    bias: Vec<f64>,
    trainable_mask: Option<DwsMask>,
    #[serde(default)]
    frozen: bool,
    #[serde(default)]
    provenance: Provenance,
}

fn ws_from_json(j: WsIn) -> Result<WsAggregator> {
    let mut agg = match (j.logits, j.weights) {
        (Some(logits), None) => WsAggregator {
            logits,
            normalized_from_raw: j.normalized_from_raw,
            ..WsAggregator::uniform(0, None, j.mode)
        },
        (None, Some(weights)) => WsAggregator::from_raw_weights(&weights, j.mode)?,
        _ => {
            return Err(Error::Aggregator(
                "weighted sum needs exactly one of `logits` or `weights`".into(),
            ))
        }
    };
    if let Some(l) = j.l {
        if l != agg.layers() {
            return Err(Error::Shape(format!("L = {l} but {} weights given", agg.layers())));
        }
    }
    agg.dim = j.d;
    agg.frozen = j.frozen;
    agg.provenance = j.provenance;
    agg.trainable_mask = match j.trainable_mask {
        Some(m) => m.logits,
        None if j.mode == AggMode::Hybrid => (0..agg.layers()).map(|i| i == 0).collect(),
        None => vec![!j.frozen; agg.layers()],
    };
    Ok(agg)
}

fn matrix(rows: Vec<Vec<f64>>, shape: (usize, usize), name: &str) -> Result<Array2<f64>> {
    if rows.len() != shape.0 || rows.iter().any(|r| r.len() != shape.1) {
        return Err(Error::Shape(format!("{name} must be {} x {}", shape.0, shape.1)));
    }
    Ok(Array2::from_shape_vec(shape, rows.into_iter().flatten().collect()).expect("checked shape"))
}

fn dws_from_json(j: DwsIn) -> Result<DwsAggregator> {
    if j.bias.len() != j.l {
        return Err(Error::Shape(format!(
            "L = {} but bias has {} entries",
            j.l,
            j.bias.len()
        )));
    }
    let w_q = matrix(j.w_q, (j.d, j.d_k), "W_Q")?;
    let w_k = matrix(j.w_k, (j.d, j.d_k), "W_K")?;
    let mut agg = DwsAggregator::from_parts(w_q, w_k, Array1::from(j.bias), j.mode)?;
    agg.frozen = j.frozen;
    agg.provenance = j.provenance;
    agg.trainable_mask = match j.trainable_mask {
        Some(m) => m,
        None if j.mode == AggMode::Hybrid => agg.clone().into_hybrid().trainable_mask,
        None => DwsMask::all(j.l, !j.frozen),
    };
    Ok(agg)
}

pub fn export_aggregator(agg: &Aggregator, path: impl AsRef<std::path::Path>) -> Result<()> {
    std::fs::write(path, agg.to_json()? + "\n")?;
    Ok(())
}

pub fn import_aggregator(path: impl AsRef<std::path::Path>) -> Result<Aggregator> {
    Aggregator::from_json(&std::fs::read_to_string(path)?)
}

/// Fused `N x D` features with their provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedView {
    pub features: Array2<f32>,
    pub aggregator_id: String,
    pub dataset_hash: String,
}

/// The dataset's features as an `N x L x D` view.
pub fn frames(ds: &LayeredDataset) -> ArrayView3<'_, f32> {
    ArrayView3::from_shape((ds.n_frames(), ds.n_layers(), ds.dim()), ds.features()).expect("validated dataset shape")
}

fn check_layers(agg_layers: usize, ds: &LayeredDataset) -> Result<()> {
    if agg_layers != ds.n_layers() {
        return Err(Error::Shape(format!(
            "aggregator has {agg_layers} layers, dataset has {}",
            ds.n_layers()
        )));
    }
    Ok(())
}

/// `sum_i softmax(logits)_i L_i` for every frame.
pub fn ws_fuse(agg: &WsAggregator, ds: &LayeredDataset) -> Result<FusedView> {
    check_layers(agg.layers(), ds)?;
    if let Some(d) = agg.dim {
        if d != ds.dim() {
            return Err(Error::Shape(format!(
                "aggregator width {d}, dataset width {}",
                ds.dim()
            )));
        }
    }
    let kernel = agg.kernel();
    let weights = kernel.weights();
    let mut out = Array2::zeros((ds.n_frames(), ds.dim()));
    for (frame, mut row) in frames(ds).outer_iter().zip(out.rows_mut()) {
        kernel.fuse_frame(frame, &weights, row.as_slice_mut().expect("contiguous"));
    }
    Ok(FusedView {
        features: out,
        aggregator_id: Aggregator::Ws(agg.clone()).id()?,
        dataset_hash: ds.content_hash(),
    })
}

/// Attention fusion per frame; also returns the `N x L` per-frame layer weights.
pub fn dws_fuse(agg: &DwsAggregator, ds: &LayeredDataset) -> Result<(FusedView, Array2<f32>)> {
    check_layers(agg.layers(), ds)?;
    if agg.dim() != ds.dim() {
        return Err(Error::Shape(format!(
            "aggregator width {}, dataset width {}",
            agg.dim(),
            ds.dim()
        )));
    }
    let kernel = agg.kernel()?;
    let mut out = Array2::zeros((ds.n_frames(), ds.dim()));
    let mut weights = Array2::zeros((ds.n_frames(), ds.n_layers()));
    for (i, frame) in frames(ds).outer_iter().enumerate() {
        let (fused, attn, _) = kernel.forward(frame)?;
        out.row_mut(i).assign(&fused);
        weights.row_mut(i).assign(&LayerAttention::layer_weights(&attn));
    }
    let view = FusedView {
        features: out,
        aggregator_id: Aggregator::Dws(agg.clone()).id()?,
        dataset_hash: ds.content_hash(),
    };
    Ok((view, weights))
}

pub fn fuse(agg: &Aggregator, ds: &LayeredDataset) -> Result<FusedView> {
    match agg {
        Aggregator::Ws(a) => ws_fuse(a, ds),
        Aggregator::Dws(a) => Ok(dws_fuse(a, ds)?.0),
    }
}

/// Result of MI-driven aggregator training.
#[derive(Debug, Clone)]
pub struct LinguisticFit<A> {
    /// Frozen aggregator.
    pub aggregator: A,
    /// Probe trained jointly with the aggregator.
    pub probe: Probe<f32>,
    /// Per-epoch mean training CE.
    pub history: Vec<f64>,
    /// Held-out bound of the joint probe on the fused eval split.
    pub estimate: MIEstimate,
}

fn prepare(ds: &LayeredDataset, cfg: &TrainConfig) -> Result<SplitIndices> {
    cfg.validate()?;
    if ds.n_layers() < 2 {
        return Err(Error::InvalidArgument(
            "layer aggregation needs at least 2 layers".into(),
        ));
    }
    let split = split_indices(ds.n_frames(), cfg.split_spec())?;
    check_two_classes(&ds.labels_at(&split.train))?;
    Ok(split)
}

/// One Adam over aggregator and probe parameters, minimizing probe CE on the train split.
fn joint_train<F: Fusion<f32>>(
    fusion: &mut F,
    ds: &LayeredDataset,
    split: &SplitIndices,
    cfg: &TrainConfig,
) -> Result<(Probe<f32>, Vec<f64>)> {
    let all = frames(ds);
    let labels = ds.labels();
    let mut probe = Probe::<f32>::new(ds.dim(), &cfg.hidden, ds.vocab_size(), cfg.dropout, cfg.seed)?;
    let mut adam = AdamState::new(cfg.adam());
    let mut shuffle = numeric::rng(cfg.seed, Stream::Shuffle);
    let mut dropout = numeric::rng(cfg.seed, Stream::Dropout);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut weighted = Vec::new();
        for batch in epoch_batches(split.train.len(), cfg.batch_size, &mut shuffle) {
            let ids: Vec<usize> = batch.iter().map(|&i| split.train[i]).collect();
            let xb = all.select(Axis(0), &ids);
            let yb: Vec<u32> = ids.iter().map(|&i| labels[i]).collect();
            let (fused, fusion_cache) = fusion.fuse_batch(xb.view())?;
            let (logits, probe_cache) = probe.forward(
                fused.view(),
                Mode::Train {
                    seed: dropout.next_u64(),
                },
            )?;
            let (loss, d_logits) = cross_entropy(logits.view(), &yb).map_err(|e| divergence(e, epoch))?;
            let probe_grads = probe.backward(&probe_cache, d_logits.view())?;
            let fusion_grads = fusion.fuse_backward(&fusion_cache, probe_grads.input.view())?;
            let mut grads: Vec<&[f32]> = fusion_grads.iter().map(|g| g.as_slice()).collect();
            grads.extend(probe_grads.flat());
            let mut params = fusion.params_mut();
            params.extend(probe.params_mut());
            adam.step(&mut params, &grads)?;
            weighted.push(loss * ids.len() as f64);
        }
        let epoch_loss = pairwise_sum(&weighted) / split.train.len() as f64;
        if !epoch_loss.is_finite() || !probe.is_finite() {
            return Err(Error::Divergence {
                epoch,
                loss: epoch_loss,
            });
        }
        history.push(epoch_loss);
    }
    Ok((probe, history))
}

fn joint_estimate(
    probe: &Probe<f32>,
    fused: &FusedView,
    ds: &LayeredDataset,
    split: &SplitIndices,
) -> Result<MIEstimate> {
    let xe = fused.features.select(Axis(0), &split.eval);
    mi::mi_bound_disjoint(
        probe,
        xe.view(),
        &ds.labels_at(&split.eval),
        &split.eval,
        &split.train,
        Context::Aggregator {
            id: fused.aggregator_id.clone(),
        },
    )
}

fn provenance(ds: &LayeredDataset, cfg: &TrainConfig) -> Provenance {
    Provenance {
        seed: cfg.seed,
        dataset_hash: ds.content_hash(),
    }
}

/// Trains softmax layer weights (from uniform) jointly with a probe; returns them frozen.
pub fn train_linguistic_ws(ds: &LayeredDataset, cfg: &TrainConfig) -> Result<LinguisticFit<WsAggregator>> {
    let split = prepare(ds, cfg)?;
    let mut kernel = WeightedSum::<f32>::uniform(ds.n_layers());
    let (probe, history) = joint_train(&mut kernel, ds, &split, cfg)?;
    let mut agg = WsAggregator {
        logits: kernel.logits.iter().map(|&x| f64::from(x)).collect(),
        provenance: provenance(ds, cfg),
        ..WsAggregator::uniform(ds.n_layers(), Some(ds.dim()), AggMode::Linguistic)
    };
    agg.freeze();
    let fused = ws_fuse(&agg, ds)?;
    let estimate = joint_estimate(&probe, &fused, ds, &split)?;
    Ok(LinguisticFit {
        aggregator: agg,
        probe,
        history,
        estimate,
    })
}

/// Seed offset that keeps the attention initialization independent of the probe's.
const ATTENTION_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// Trains attention projections and layer bias jointly with a probe; returns them frozen.
///
/// `d_k` defaults to the feature width.
pub fn train_linguistic_dws(
    ds: &LayeredDataset,
    cfg: &TrainConfig,
    d_k: Option<usize>,
) -> Result<LinguisticFit<DwsAggregator>> {
    let split = prepare(ds, cfg)?;
    let d_k = d_k.unwrap_or(ds.dim());
    let mut kernel = LayerAttention::<f32>::new(ds.n_layers(), ds.dim(), d_k, cfg.seed ^ ATTENTION_SEED_SALT)?;
    let (probe, history) = joint_train(&mut kernel, ds, &split, cfg)?;
    if !kernel.is_finite() {
        return Err(Error::Divergence {
            epoch: cfg.epochs - 1,
            loss: f64::NAN,
        });
    }
    let mut agg = DwsAggregator::from_kernel(&kernel, AggMode::Linguistic)?;
    agg.provenance = provenance(ds, cfg);
    agg.freeze();
    let (fused, _) = dws_fuse(&agg, ds)?;
    let estimate = joint_estimate(&probe, &fused, ds, &split)?;
    Ok(LinguisticFit {
        aggregator: agg,
        probe,
        history,
        estimate,
    })
}

/// Fuses the dataset, trains a fresh probe on the train split and bounds on the eval split.
///
/// Takes the aggregator by shared reference: no parameter is written.
pub fn evaluate_aggregator(agg: &Aggregator, ds: &LayeredDataset, cfg: &TrainConfig) -> Result<MIEstimate> {
    cfg.validate()?;
    let fused = fuse(agg, ds)?;
    let split = split_indices(ds.n_frames(), cfg.split_spec())?;
    fit_and_bound(
        &fused.features,
        ds.labels(),
        ds.vocab_size(),
        &split,
        cfg,
        Context::Aggregator {
            id: fused.aggregator_id,
        },
    )
}

/// Normalized per-layer weights of one aggregator: softmax weights for WS, mean
/// per-frame weights on `reference` for DWS.
pub fn layer_profile(agg: &Aggregator, reference: Option<&LayeredDataset>) -> Result<Vec<f64>> {
    match agg {
        Aggregator::Ws(a) => Ok(a.weights()),
        Aggregator::Dws(a) => {
            let ds = reference.ok_or_else(|| {
                Error::InvalidArgument("comparing an attention aggregator needs a reference dataset".into())
            })?;
            let (_, w) = dws_fuse(a, ds)?;
            Ok((0..w.ncols())
                .map(|j| {
                    pairwise_sum(&w.column(j).iter().map(|&x| f64::from(x)).collect::<Vec<_>>()) / w.nrows() as f64
                })
                .collect())
        }
    }
}

/// CSV `label,type,mode,normalized,w_0,...` with one row per aggregator.
pub fn compare_weights(aggs: &[(String, Aggregator)], reference: Option<&LayeredDataset>) -> Result<String> {
    let layers = aggs
        .first()
        .map(|(_, a)| a.layers())
        .ok_or_else(|| Error::InvalidArgument("no aggregators to compare".into()))?;
    if let Some((label, a)) = aggs.iter().find(|(_, a)| a.layers() != layers) {
        return Err(Error::Shape(format!(
            "`{label}` has {} layers, expected {layers}",
            a.layers()
        )));
    }
    let mut out = String::from("label,type,mode,normalized");
    for l in 0..layers {
        out.push_str(&format!(",w_{l}"));
    }
    out.push('\n');
    for (label, agg) in aggs {
        let normalized = matches!(agg, Aggregator::Ws(a) if a.normalized_from_raw);
        out.push_str(&format!(
            "{},{},{},{normalized}",
            csv_label(label),
            agg.kind(),
            agg.mode()
        ));
        for w in layer_profile(agg, reference)? {
            out.push_str(&format!(",{w}"));
        }
        out.push('\n');
    }
    Ok(out)
}

fn csv_label(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// CSV `frame,snr_db,w_0,...` of per-frame attention column masses.
pub fn dump_dynamic(agg: &DwsAggregator, ds: &LayeredDataset) -> Result<String> {
    let (_, weights) = dws_fuse(agg, ds)?;
    let mut out = String::from("frame,snr_db");
    for l in 0..ds.n_layers() {
        out.push_str(&format!(",w_{l}"));
    }
    out.push('\n');
    for (i, row) in weights.rows().into_iter().enumerate() {
        let snr = ds.snr_db().map(|s| s[i].to_string()).unwrap_or_default();
        out.push_str(&format!("{i},{snr}"));
        for w in row {
            out.push_str(&format!(",{w}"));
        }
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lfa::Metadata;
    use crate::synth::{generate, Family, SynthSpec};
    use ndarray::array;

    fn dataset(n: usize, layers: usize, dim: usize, f: impl Fn(usize, usize, usize) -> f32) -> LayeredDataset {
        let mut feats = Vec::with_capacity(n * layers * dim);
        for i in 0..n {
            for l in 0..layers {
                for d in 0..dim {
                    feats.push(f(i, l, d));
                }
            }
        }
        let meta = Metadata {
            vocab: vec!["a".into(), "b".into()],
            model: "test".into(),
            ..Default::default()
        };
        LayeredDataset::new(layers, dim, feats, (0..n).map(|i| (i % 2) as u32).collect(), None, meta).unwrap()
    }

    fn quick() -> TrainConfig {
        TrainConfig {
            epochs: 4,
            hidden: vec![16],
            batch_size: 32,
            lr: 1e-2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn one_hot_logits_select_a_layer() {
        let ds = dataset(5, 3, 4, |i, l, d| (i * 31 + l * 7 + d) as f32 * 0.1 - 2.0);
        let mut agg = WsAggregator::uniform(3, Some(4), AggMode::Acoustic);
        agg.logits = vec![-40.0, -40.0, 40.0];
        let fused = ws_fuse(&agg, &ds).unwrap();
        for i in 0..5 {
            for d in 0..4 {
                assert!((fused.features[[i, d]] - ds.layer_vector(i, 2)[d]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn two_layer_uniform_arithmetic() {
        let ds = dataset(1, 2, 2, |_, l, d| [[1.0, 1.0], [3.0, 5.0]][l][d]);
        let fused = ws_fuse(&WsAggregator::uniform(2, None, AggMode::Acoustic), &ds).unwrap();
        assert_eq!(fused.features, array![[2.0f32, 3.0]]);
    }

    #[test]
    fn permuting_layers_and_logits_is_bitwise_equivariant() {
        let ds = dataset(6, 4, 3, |i, l, d| ((i * 13 + l * 5 + d * 3) as f32).sin());
        let perm = [2usize, 0, 3, 1];
        let permuted = dataset(6, 4, 3, |i, l, d| ((i * 13 + perm[l] * 5 + d * 3) as f32).sin());
        let mut agg = WsAggregator::uniform(4, None, AggMode::Acoustic);
        agg.logits = vec![0.3, -1.1, 2.0, 0.7];
        let mut agg_p = agg.clone();
        agg_p.logits = perm.iter().map(|&p| agg.logits[p]).collect();
        let a = ws_fuse(&agg, &ds).unwrap().features;
        let b = ws_fuse(&agg_p, &permuted).unwrap().features;
        assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn layer_count_mismatch() {
        let ds = dataset(2, 3, 2, |_, _, _| 0.0);
        assert!(matches!(
            ws_fuse(&WsAggregator::uniform(2, None, AggMode::Acoustic), &ds),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn zero_attention_is_mean_over_layers() {
        let ds = dataset(3, 4, 2, |i, l, d| (i + l * l + d) as f32);
        let agg = DwsAggregator::from_parts(
            Array2::zeros((2, 2)),
            Array2::zeros((2, 2)),
            Array1::zeros(4),
            AggMode::Acoustic,
        )
        .unwrap();
        let (fused, w) = dws_fuse(&agg, &ds).unwrap();
        assert!(w.iter().all(|&x| (x - 0.25).abs() < 1e-7));
        for i in 0..3 {
            for d in 0..2 {
                let mean: f32 = (0..4).map(|l| ds.layer_vector(i, l)[d]).sum::<f32>() / 4.0;
                assert!((fused.features[[i, d]] - mean).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn bias_saturates_per_frame_weights() {
        let ds = dataset(3, 3, 2, |i, l, d| (i * 3 + l + d) as f32 * 0.2);
        let agg = DwsAggregator::from_parts(
            Array2::zeros((2, 2)),
            Array2::zeros((2, 2)),
            array![30.0, 0.0, 0.0],
            AggMode::Acoustic,
        )
        .unwrap();
        let (_, w) = dws_fuse(&agg, &ds).unwrap();
        for row in w.rows() {
            assert!((row[0] - 1.0).abs() < 1e-6 && row[1] < 1e-6 && row[2] < 1e-6);
        }
    }

    #[test]
    fn identical_layers_keep_uniform_weights() {
        let ds = dataset(200, 3, 4, |i, _, d| {
            ((i * 7 + d) as f32 * 0.37).sin() + if i % 2 == 0 { 0.5 } else { -0.5 }
        });
        let fit = train_linguistic_ws(&ds, &quick()).unwrap();
        let logits = &fit.aggregator.logits;
        assert!(logits.iter().all(|x| x.to_bits() == logits[0].to_bits()), "{logits:?}");
    }

    #[test]
    fn single_layer_is_rejected() {
        let ds = dataset(50, 1, 2, |i, _, _| i as f32);
        assert!(train_linguistic_ws(&ds, &quick()).is_err());
        assert!(train_linguistic_dws(&ds, &quick(), None).is_err());
    }

    #[test]
    fn trained_exports_are_frozen_and_hybrid_masks() {
        let spec = SynthSpec {
            n: 400,
            layers: 3,
            dim: 4,
            ..SynthSpec::default()
        };
        let ds = generate(&spec).unwrap();
        let ws = train_linguistic_ws(&ds, &quick()).unwrap().aggregator;
        assert!(ws.frozen && ws.trainable_mask.iter().all(|m| !m));
        let hybrid = ws.into_hybrid();
        assert_eq!(hybrid.trainable_mask, vec![true, false, false]);
        let text = Aggregator::Ws(hybrid.clone()).to_json().unwrap();
        assert!(text.contains("\"hybrid\""));
        assert_eq!(Aggregator::from_json(&text).unwrap(), Aggregator::Ws(hybrid));

        let dws = train_linguistic_dws(&ds, &quick(), Some(2)).unwrap().aggregator;
        assert_eq!(dws.trainable_mask, DwsMask::all(3, false));
        let h = dws.into_hybrid();
        assert_eq!(h.trainable_mask.bias, vec![true, false, false]);
        assert!(!h.trainable_mask.w_q && !h.trainable_mask.w_k);
        let h = Aggregator::Dws(h);
        assert_eq!(Aggregator::from_json(&h.to_json().unwrap()).unwrap(), h);
    }

    #[test]
    fn dws_training_is_deterministic() {
        let spec = SynthSpec {
            n: 300,
            layers: 3,
            dim: 4,
            ..SynthSpec::default()
        };
        let ds = generate(&spec).unwrap();
        let a = train_linguistic_dws(&ds, &quick(), None).unwrap();
        let b = train_linguistic_dws(&ds, &quick(), None).unwrap();
        assert_eq!(a.aggregator, b.aggregator);
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn json_round_trip_is_exact() {
        let mut ws = WsAggregator::uniform(3, Some(5), AggMode::Linguistic);
        ws.logits = vec![0.1, -1.0 / 3.0, std::f64::consts::PI * 1e-7];
        ws.provenance = Provenance {
            seed: 42,
            dataset_hash: "abc".into(),
        };
        let ws = Aggregator::Ws(ws);
        assert_eq!(Aggregator::from_json(&ws.to_json().unwrap()).unwrap(), ws);

        let dws = DwsAggregator::from_parts(
            Array2::from_shape_fn((3, 2), |(i, j)| (i as f64 + 0.1) / (j as f64 + 3.0)),
            Array2::from_shape_fn((3, 2), |(i, j)| -((i * j) as f64).exp() / 7.0),
            array![1e-300, -0.0, 2.5e10],
            AggMode::Acoustic,
        )
        .unwrap();
        let dws = Aggregator::Dws(dws);
        let text = dws.to_json().unwrap();
        assert!(text.contains("\"W_Q\"") && text.contains("\"d_k\": 2"));
        assert_eq!(Aggregator::from_json(&text).unwrap(), dws);
    }

    #[test]
    fn numbers_have_seventeen_significant_digits() {
        let mut ws = WsAggregator::uniform(1, None, AggMode::Acoustic);
        ws.logits = vec![0.1];
        let text = Aggregator::Ws(ws).to_json().unwrap();
        assert!(text.contains("1.0000000000000001e-1"), "{text}");
    }

    #[test]
    fn malformed_json_is_rejected() {
        assert!(matches!(Aggregator::from_json("{"), Err(Error::Json(_))));
        let unknown = r#"{"format":"ling-agg/1","type":"mlp","mode":"acoustic"}"#;
        assert!(Aggregator::from_json(unknown)
            .unwrap_err()
            .to_string()
            .contains("unknown aggregator type"));
        let mismatch = r#"{"format":"ling-agg/1","type":"ws","mode":"acoustic","L":3,"logits":[0,0]}"#;
        assert!(matches!(Aggregator::from_json(mismatch), Err(Error::Shape(_))));
        let bad_hybrid = r#"{"format":"ling-agg/1","type":"ws","mode":"hybrid","L":2,"logits":[0,0],"trainable_mask":{"logits":[true,true]}}"#;
        assert!(Aggregator::from_json(bad_hybrid).is_err());
        let wrong_format = r#"{"format":"other","type":"ws","mode":"acoustic","logits":[0]}"#;
        assert!(Aggregator::from_json(wrong_format).is_err());
    }

    #[test]
    fn raw_acoustic_weights_are_normalized_and_flagged() {
        let text = r#"{"format":"ling-agg/1","type":"ws","mode":"acoustic","L":4,"weights":[2,0,1,1]}"#;
        let agg = Aggregator::from_json(text).unwrap();
        let Aggregator::Ws(ws) = &agg else { panic!() };
        assert!(ws.normalized_from_raw);
        let w = ws.weights();
        for (a, b) in w.iter().zip([0.5, 0.0, 0.25, 0.25]) {
            assert!((a - b).abs() < 1e-12);
        }
        let csv = compare_weights(&[("acoustic".into(), agg.clone()), ("copy".into(), agg)], None).unwrap();
        let rows: Vec<&str> = csv.lines().collect();
        assert_eq!(rows[0], "label,type,mode,normalized,w_0,w_1,w_2,w_3");
        assert!(rows[1].starts_with("acoustic,ws,acoustic,true,"));
        assert_eq!(rows[1].split_once(',').unwrap().1, rows[2].split_once(',').unwrap().1);
    }

    #[test]
    fn compare_rejects_mixed_layer_counts() {
        let a = Aggregator::Ws(WsAggregator::uniform(2, None, AggMode::Acoustic));
        let b = Aggregator::Ws(WsAggregator::uniform(3, None, AggMode::Acoustic));
        assert!(compare_weights(&[("a".into(), a), ("b".into(), b)], None).is_err());
    }

    #[test]
    fn evaluation_does_not_touch_parameters() {
        let spec = SynthSpec {
            n: 300,
            layers: 2,
            dim: 4,
            ..SynthSpec::default()
        };
        let ds = generate(&spec).unwrap();
        let mut ws = WsAggregator::uniform(2, Some(4), AggMode::Linguistic);
        ws.freeze();
        let agg = Aggregator::Ws(ws);
        let before = agg.param_hash().unwrap();
        let est = evaluate_aggregator(&agg, &ds, &quick()).unwrap();
        assert!(est.bound <= est.h_y);
        assert_eq!(agg.param_hash().unwrap(), before);
    }

    #[test]
    fn dump_has_one_row_per_frame() {
        let spec = SynthSpec {
            family: Family::NoisySnr,
            n: 20,
            layers: 3,
            dim: 4,
            informative: vec![1],
            segment: 5,
            ..SynthSpec::default()
        };
        let ds = generate(&spec).unwrap();
        let agg = DwsAggregator::from_parts(
            Array2::zeros((4, 4)),
            Array2::zeros((4, 4)),
            Array1::zeros(3),
            AggMode::Linguistic,
        )
        .unwrap();
        let csv = dump_dynamic(&agg, &ds).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 21);
        assert_eq!(lines[0], "frame,snr_db,w_0,w_1,w_2");
        assert!(lines[1].starts_with("0,-10,"));
    }
}
