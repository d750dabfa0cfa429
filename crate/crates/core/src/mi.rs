//! Probe training and held-out MI lower bounds `I(Z;Y) >= H(Y) - CE`.

use std::fmt;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::RngCore;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{cross_entropy, per_sample_nll, AdamConfig, AdamState, Mode, Probe};
use crate::lfa::{group_by_snr, split_indices, LayeredDataset, SplitIndices, SplitSpec};
use crate::numeric::{self, pairwise_mean, pairwise_sum, Scalar, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub eval_fraction: f64,
    /// Hidden widths of the probe; empty gives a linear probe.
    pub hidden: Vec<usize>,
    pub dropout: f64,
    pub precision: Precision,
    /// Worker threads for per-layer analyses; results do not depend on it.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            lr: 1e-3,
            batch_size: 256,
            seed: 0,
            eval_fraction: 0.2,
            hidden: vec![256, 256],
            dropout: 0.1,
            precision: Precision::F32,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate {} must be positive",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            eval_fraction: self.eval_fraction,
            seed: self.seed,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

/// What an estimate was measured on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Context {
    Layer {
        layer: usize,
    },
    LayerSnr {
        layer: usize,
        snr_db: f64,
    },
    /// Per-layer mean over the SNR bins that have eval frames.
    SnrMean {
        layer: usize,
    },
    Aggregator {
        id: String,
    },
    Features,
}

impl Context {
    fn tag(&self) -> String {
        match self {
            Context::Layer { .. } => "layer".into(),
            Context::LayerSnr { .. } => "layer_snr".into(),
            Context::SnrMean { .. } => "snr_mean".into(),
            Context::Aggregator { id } => format!("agg:{id}"),
            Context::Features => "features".into(),
        }
    }

    pub fn layer(&self) -> Option<usize> {
        match self {
            Context::Layer { layer } | Context::LayerSnr { layer, .. } | Context::SnrMean { layer } => Some(*layer),
            _ => None,
        }
    }

    pub fn snr_db(&self) -> Option<f64> {
        match self {
            Context::LayerSnr { snr_db, .. } => Some(*snr_db),
            _ => None,
        }
    }
}

impl fmt::Display for Context {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.tag())?;
        if let Some(l) = self.layer() {
            write!(f, "[{l}]")?;
        }
        if let Some(s) = self.snr_db() {
            write!(f, "@{s}dB")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MIEstimate {
    pub context: Context,
    pub h_y: f64,
    pub ce: f64,
    pub bound: f64,
    pub n_eval: usize,
}

impl MIEstimate {
    /// Builds an estimate; `bound = h_y - ce` with `ce >= 0` so `bound <= h_y` holds exactly.
    pub fn new(context: Context, h_y: f64, ce: f64, n_eval: usize) -> Result<Self> {
        if !h_y.is_finite() || !ce.is_finite() {
            return Err(Error::NonFiniteLoss);
        }
        if ce < 0.0 {
            return Err(Error::Validation(format!("negative cross-entropy {ce}")));
        }
        Ok(Self {
            context,
            h_y,
            ce,
            bound: h_y - ce,
            n_eval,
        })
    }

    pub fn bound_bits(&self) -> f64 {
        self.bound / std::f64::consts::LN_2
    }
}

/// One requested cell of a report; `estimate` is `None` when the cell had no eval frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportEntry {
    pub context: Context,
    pub estimate: Option<MIEstimate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MIReport {
    pub entries: Vec<ReportEntry>,
    /// How aggregate rows were formed, if any.
    pub averaging: Option<String>,
}

impl MIReport {
    pub fn estimates(&self) -> impl Iterator<Item = &MIEstimate> {
        self.entries.iter().filter_map(|e| e.estimate.as_ref())
    }

    /// Bounds of the `Layer` rows, ordered by layer.
    pub fn layer_bounds(&self) -> Vec<f64> {
        self.estimates()
            .filter(|e| matches!(e.context, Context::Layer { .. }))
            .map(|e| e.bound)
            .collect()
    }

    /// Bound of the `(layer, snr)` cell.
    pub fn cell(&self, layer: usize, snr_db: f64) -> Option<&MIEstimate> {
        self.entries
            .iter()
            .find(|e| e.context == Context::LayerSnr { layer, snr_db })
            .and_then(|e| e.estimate.as_ref())
    }

    /// CSV with header `context,layer,snr_bin,h_y_nats,ce_nats,mi_nats[,mi_bits],n_eval`.
    ///
    /// Absent cells keep their context columns and leave the numbers empty with `n_eval` 0.
    pub fn to_csv(&self, bits: bool) -> String {
        let mut out = String::from("context,layer,snr_bin,h_y_nats,ce_nats,mi_nats");
        if bits {
            out.push_str(",mi_bits");
        }
        out.push_str(",n_eval\n");
        for entry in &self.entries {
            let ctx = &entry.context;
            let layer = ctx.layer().map(|l| l.to_string()).unwrap_or_default();
            let snr = ctx.snr_db().map(|s| s.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{layer},{snr}", csv_field(&ctx.tag())));
            match &entry.estimate {
                Some(e) => {
                    out.push_str(&format!(",{},{},{}", e.h_y, e.ce, e.bound));
                    if bits {
                        out.push_str(&format!(",{}", e.bound_bits()));
                    }
                    out.push_str(&format!(",{}\n", e.n_eval));
                }
                None => {
                    out.push_str(",,,");
                    if bits {
                        out.push(',');
                    }
                    out.push_str(",0\n");
                }
            }
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Plug-in entropy `-sum p ln p` of the observed label distribution, in nats.
pub fn empirical_entropy(labels: &[u32]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::InvalidArgument("entropy of an empty label set".into()));
    }
    let mut sorted = labels.to_vec();
    sorted.sort_unstable();
    let n = labels.len() as f64;
    let terms: Vec<f64> = sorted
        .chunk_by(|a, b| a == b)
        .map(|run| {
            let p = run.len() as f64 / n;
            -p * p.ln()
        })
        .collect();
    // Exact zero for a single class rather than -0.0.
    Ok(pairwise_sum(&terms).max(0.0))
}

/// Shuffled minibatches of `0..n` for one epoch.
pub(crate) fn epoch_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

pub(crate) fn gather_rows<T: Scalar>(x: &ArrayView2<'_, T>, rows: &[usize]) -> Array2<T> {
    x.select(Axis(0), rows)
}

pub(crate) fn check_two_classes(labels: &[u32]) -> Result<()> {
    let first = labels
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty training set".into()))?;
    if labels.iter().all(|y| y == first) {
        return Err(Error::Validation(format!(
            "training labels contain a single class ({first}); need at least 2"
        )));
    }
    Ok(())
}

/// Trains a fresh probe on `(x, labels)` with seeded-shuffle minibatch Adam.
///
/// Returns the probe and the per-epoch mean training CE.
pub fn train_probe<T: Scalar>(
    x: ArrayView2<'_, T>,
    labels: &[u32],
    classes: usize,
    cfg: &TrainConfig,
) -> Result<(Probe<T>, Vec<f64>)> {
    cfg.validate()?;
    if x.nrows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} feature rows but {} labels",
            x.nrows(),
            labels.len()
        )));
    }
    check_two_classes(labels)?;
    if let Some(&label) = labels.iter().find(|&&y| y as usize >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    let mut probe = Probe::new(x.ncols(), &cfg.hidden, classes, cfg.dropout, cfg.seed)?;
    let mut adam = AdamState::new(cfg.adam());
    let mut shuffle = numeric::rng(cfg.seed, Stream::Shuffle);
    let mut dropout = numeric::rng(cfg.seed, Stream::Dropout);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut weighted = Vec::new();
        for batch in epoch_batches(labels.len(), cfg.batch_size, &mut shuffle) {
            let xb = gather_rows(&x, &batch);
            let yb: Vec<u32> = batch.iter().map(|&i| labels[i]).collect();
            let (logits, cache) = probe.forward(
                xb.view(),
                Mode::Train {
                    seed: dropout.next_u64(),
                },
            )?;
            let (loss, d_logits) = cross_entropy(logits.view(), &yb).map_err(|e| divergence(e, epoch))?;
            let grads = probe.backward(&cache, d_logits.view())?;
            let flat: Vec<Vec<T>> = grads.flat().into_iter().map(|g| g.to_vec()).collect();
            let refs: Vec<&[T]> = flat.iter().map(|g| g.as_slice()).collect();
            adam.step(&mut probe.params_mut(), &refs)?;
            weighted.push(loss * batch.len() as f64);
        }
        let epoch_loss = pairwise_sum(&weighted) / labels.len() as f64;
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

pub(crate) fn divergence(e: Error, epoch: usize) -> Error {
    match e {
        Error::NonFiniteLoss => Error::Divergence { epoch, loss: f64::NAN },
        other => other,
    }
}

const EVAL_CHUNK: usize = 4096;

/// Held-out mean CE of `probe` in eval mode.
pub fn held_out_ce<T: Scalar>(probe: &Probe<T>, x: ArrayView2<'_, T>, labels: &[u32]) -> Result<f64> {
    if x.nrows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} feature rows but {} labels",
            x.nrows(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::InvalidArgument("empty eval set".into()));
    }
    let mut nll = Vec::with_capacity(labels.len());
    for (start, chunk) in labels.chunks(EVAL_CHUNK).enumerate() {
        let lo = start * EVAL_CHUNK;
        let xb = x.slice(ndarray::s![lo..lo + chunk.len(), ..]);
        let logits = probe.forward(xb, Mode::Eval)?.0;
        nll.extend(per_sample_nll(logits.view(), chunk)?);
    }
    Ok(pairwise_mean(&nll))
}

/// `H(Y_eval) - CE_eval` with the probe in eval mode.
pub fn mi_bound<T: Scalar>(
    probe: &Probe<T>,
    x: ArrayView2<'_, T>,
    labels: &[u32],
    context: Context,
) -> Result<MIEstimate> {
    let ce = held_out_ce(probe, x, labels)?;
    MIEstimate::new(context, empirical_entropy(labels)?, ce, labels.len())
}

/// [`mi_bound`] after asserting that the eval frame ids are disjoint from the training ids.
pub fn mi_bound_disjoint<T: Scalar>(
    probe: &Probe<T>,
    x: ArrayView2<'_, T>,
    labels: &[u32],
    eval_ids: &[usize],
    train_ids: &[usize],
    context: Context,
) -> Result<MIEstimate> {
    if eval_ids.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} eval ids but {} labels",
            eval_ids.len(),
            labels.len()
        )));
    }
    assert_disjoint(eval_ids, train_ids)?;
    mi_bound(probe, x, labels, context)
}

fn assert_disjoint(a: &[usize], b: &[usize]) -> Result<()> {
    let mut b_sorted = b.to_vec();
    b_sorted.sort_unstable();
    if let Some(id) = a.iter().find(|id| b_sorted.binary_search(id).is_ok()) {
        return Err(Error::Validation(format!(
            "frame {id} is in both the train and eval sets"
        )));
    }
    Ok(())
}

/// A probe trained on the train side of a split, ready to be evaluated on any eval subset.
pub struct FittedProbe<T: Scalar> {
    pub probe: Probe<T>,
    pub history: Vec<f64>,
    pub train_ids: Vec<usize>,
}

impl<T: Scalar> FittedProbe<T> {
    /// Trains on rows `split.train` of `x`.
    pub fn fit(
        x: ArrayView2<'_, T>,
        labels: &[u32],
        classes: usize,
        split: &SplitIndices,
        cfg: &TrainConfig,
    ) -> Result<Self> {
        let xt = gather_rows(&x, &split.train);
        let yt: Vec<u32> = split.train.iter().map(|&i| labels[i]).collect();
        let (probe, history) = train_probe(xt.view(), &yt, classes, cfg)?;
        Ok(Self {
            probe,
            history,
            train_ids: split.train.clone(),
        })
    }

    /// Bound on rows `eval_ids` of `x`; `None` if `eval_ids` is empty.
    pub fn bound_on(
        &self,
        x: ArrayView2<'_, T>,
        labels: &[u32],
        eval_ids: &[usize],
        context: Context,
    ) -> Result<Option<MIEstimate>> {
        if eval_ids.is_empty() {
            return Ok(None);
        }
        let xe = gather_rows(&x, eval_ids);
        let ye: Vec<u32> = eval_ids.iter().map(|&i| labels[i]).collect();
        mi_bound_disjoint(&self.probe, xe.view(), &ye, eval_ids, &self.train_ids, context).map(Some)
    }
}

/// Trains on the train split of `x` and bounds on its eval split.
pub fn fit_and_bound(
    x: &Array2<f32>,
    labels: &[u32],
    classes: usize,
    split: &SplitIndices,
    cfg: &TrainConfig,
    context: Context,
) -> Result<MIEstimate> {
    fn go<T: Scalar>(
        x: ArrayView2<'_, T>,
        labels: &[u32],
        classes: usize,
        split: &SplitIndices,
        cfg: &TrainConfig,
        context: Context,
    ) -> Result<MIEstimate> {
        let fit = FittedProbe::fit(x, labels, classes, split, cfg)?;
        Ok(fit
            .bound_on(x, labels, &split.eval, context)?
            .expect("split eval side is non-empty"))
    }
    match cfg.precision {
        Precision::F32 => go(x.view(), labels, classes, split, cfg, context),
        Precision::F64 => go(x.mapv(f64::from).view(), labels, classes, split, cfg, context),
    }
}

/// Probe seed of layer `l`: the run seed xor the layer index.
pub fn layer_seed(seed: u64, layer: usize) -> u64 {
    seed ^ layer as u64
}

fn layer_config(cfg: &TrainConfig, layer: usize) -> TrainConfig {
    TrainConfig {
        seed: layer_seed(cfg.seed, layer),
        ..cfg.clone()
    }
}

/// Runs `f` for each layer, in parallel when enabled, returning results in layer order.
fn per_layer<R: Send>(layers: usize, threads: usize, f: impl Fn(usize) -> Result<R> + Sync + Send) -> Result<Vec<R>> {
    #[cfg(feature = "parallel")]
    if threads > 1 {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
        return pool.install(|| (0..layers).into_par_iter().map(&f).collect());
    }
    let _ = threads;
    (0..layers).map(f).collect()
}

/// One probe per layer on a shared split (fixed by `cfg.seed`), seeds `cfg.seed ^ layer`.
pub fn layerwise_analysis(ds: &LayeredDataset, cfg: &TrainConfig) -> Result<MIReport> {
    cfg.validate()?;
    let split = split_indices(ds.n_frames(), cfg.split_spec())?;
    let all: Vec<usize> = (0..ds.n_frames()).collect();
    let entries = per_layer(ds.n_layers(), cfg.threads, |layer| {
        let x = ds.layer_matrix(layer, &all);
        let est = fit_and_bound(
            &x,
            ds.labels(),
            ds.vocab_size(),
            &split,
            &layer_config(cfg, layer),
            Context::Layer { layer },
        )?;
        Ok(ReportEntry {
            context: Context::Layer { layer },
            estimate: Some(est),
        })
    })?;
    Ok(MIReport {
        entries,
        averaging: None,
    })
}

/// Layer x SNR matrix: each layer's probe is trained on all SNRs pooled and evaluated per bin.
///
/// Entries are ordered layer-major; each layer's bins are followed by a `SnrMean` row
/// averaging `h_y` and `ce` over the bins that have eval frames.
pub fn snr_analysis(ds: &LayeredDataset, bin_edges: &[f64], cfg: &TrainConfig) -> Result<MIReport> {
    cfg.validate()?;
    let bins = group_by_snr(ds, bin_edges)?;
    let split = split_indices(ds.n_frames(), cfg.split_spec())?;
    let eval_bins: Vec<(f64, Vec<usize>)> = bins
        .iter()
        .map(|b| {
            let ids = b
                .frames
                .iter()
                .copied()
                .filter(|i| split.eval.binary_search(i).is_ok())
                .collect();
            (b.level_db, ids)
        })
        .collect();
    let all: Vec<usize> = (0..ds.n_frames()).collect();
    let rows = per_layer(ds.n_layers(), cfg.threads, |layer| {
        let x = ds.layer_matrix(layer, &all);
        let lcfg = layer_config(cfg, layer);
        let cells = match cfg.precision {
            Precision::F32 => layer_cells(x.view(), ds, layer, &split, &eval_bins, &lcfg)?,
            Precision::F64 => layer_cells(x.mapv(f64::from).view(), ds, layer, &split, &eval_bins, &lcfg)?,
        };
        Ok(cells)
    })?;
    Ok(MIReport {
        entries: rows.into_iter().flatten().collect(),
        averaging: Some("snr_mean: per-layer arithmetic mean of h_y and ce over SNR bins with eval frames".into()),
    })
}

fn layer_cells<T: Scalar>(
    x: ArrayView2<'_, T>,
    ds: &LayeredDataset,
    layer: usize,
    split: &SplitIndices,
    eval_bins: &[(f64, Vec<usize>)],
    cfg: &TrainConfig,
) -> Result<Vec<ReportEntry>> {
    let fit = FittedProbe::fit(x, ds.labels(), ds.vocab_size(), split, cfg)?;
    let mut out = Vec::with_capacity(eval_bins.len() + 1);
    for (snr_db, ids) in eval_bins {
        let context = Context::LayerSnr { layer, snr_db: *snr_db };
        let estimate = fit.bound_on(x, ds.labels(), ids, context.clone())?;
        out.push(ReportEntry { context, estimate });
    }
    let present: Vec<&MIEstimate> = out.iter().filter_map(|e| e.estimate.as_ref()).collect();
    let mean = if present.is_empty() {
        None
    } else {
        let h: Vec<f64> = present.iter().map(|e| e.h_y).collect();
        let ce: Vec<f64> = present.iter().map(|e| e.ce).collect();
        let n = present.iter().map(|e| e.n_eval).sum();
        Some(MIEstimate::new(
            Context::SnrMean { layer },
            pairwise_mean(&h),
            pairwise_mean(&ce),
            n,
        )?)
    };
    out.push(ReportEntry {
        context: Context::SnrMean { layer },
        estimate: mean,
    });
    Ok(out)
}
