//! Gradient-check composites shared by the gradient tests and the acceptance runner.
#![allow(dead_code)]

use lingagg::kernels::{
    cross_entropy, finite_diff_check, Affine, Fusion, GradCheckReport, LayerAttention, Mode, ParamBlock, Probe,
    ProbeGrads, WeightedSum,
};
use lingagg::numeric::{rng, Stream};
use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const EPS: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
pub const SEEDS: u64 = 20;

const BATCH: usize = 3;
const DIM: usize = 4;
const LAYERS: usize = 3;
const CLASSES: usize = 4;

fn normal(rng: &mut ChaCha8Rng, shape: usize) -> Vec<f64> {
    (0..shape).map(|_| rng.sample(StandardNormal)).collect()
}

fn labels(rng: &mut ChaCha8Rng) -> Vec<u32> {
    (0..BATCH).map(|_| rng.random_range(0..CLASSES as u32)).collect()
}

fn probe_blocks(probe: &Probe<f64>, grads: &ProbeGrads<f64>) -> Vec<ParamBlock> {
    probe
        .layers()
        .iter()
        .zip(&grads.layers)
        .enumerate()
        .flat_map(|(i, (p, g))| {
            [
                ParamBlock {
                    name: format!("probe.{i}.weight"),
                    values: p.weight.iter().copied().collect(),
                    analytic: g.weight.iter().copied().collect(),
                },
                ParamBlock {
                    name: format!("probe.{i}.bias"),
                    values: p.bias.to_vec(),
                    analytic: g.bias.to_vec(),
                },
            ]
        })
        .collect()
}

/// A probe with Glorot weights and random biases; zero biases would put samples whose
/// previous layer is fully inactive exactly on the ReLU kink.
fn random_probe(hidden: &[usize], dropout: f64, seed: u64, r: &mut ChaCha8Rng) -> Probe<f64> {
    let init = Probe::<f64>::new(DIM, hidden, CLASSES, dropout, seed).unwrap();
    let layers = init
        .layers()
        .iter()
        .map(|l| Affine {
            weight: l.weight.clone(),
            bias: Array1::from(normal(r, l.out_dim())) * 0.5,
        })
        .collect();
    Probe::from_layers(layers, dropout).unwrap()
}

fn probe_from_blocks(blocks: &[ParamBlock], template: &Probe<f64>) -> Probe<f64> {
    let layers = template
        .layers()
        .iter()
        .enumerate()
        .map(|(i, l)| Affine {
            weight: Array2::from_shape_vec(l.weight.raw_dim(), blocks[2 * i].values.clone()).unwrap(),
            bias: Array1::from(blocks[2 * i + 1].values.clone()),
        })
        .collect();
    Probe::from_layers(layers, template.dropout()).unwrap()
}

/// Softmax cross-entropy with the logits as parameters.
pub fn check_cross_entropy(seed: u64) -> GradCheckReport {
    let mut r = rng(seed, Stream::Data);
    let logits = Array2::from_shape_vec((BATCH, CLASSES), normal(&mut r, BATCH * CLASSES)).unwrap() * 2.0;
    let y = labels(&mut r);
    let (_, grad) = cross_entropy(logits.view(), &y).unwrap();
    let mut blocks = vec![ParamBlock {
        name: "logits".into(),
        values: logits.iter().copied().collect(),
        analytic: grad.iter().copied().collect(),
    }];
    finite_diff_check(
        |b| {
            let l = Array2::from_shape_vec((BATCH, CLASSES), b[0].values.clone()).unwrap();
            cross_entropy(l.view(), &y).unwrap().0
        },
        &mut blocks,
        EPS,
    )
    .unwrap()
}

/// MLP probe (with a fixed dropout mask) into cross-entropy; parameters and input.
pub fn check_probe(seed: u64) -> GradCheckReport {
    let mut r = rng(seed, Stream::Data);
    let x = Array2::from_shape_vec((BATCH, DIM), normal(&mut r, BATCH * DIM)).unwrap();
    let y = labels(&mut r);
    let probe = random_probe(&[7, 6], 0.1, seed, &mut r);
    let mode = Mode::Train { seed: seed + 1000 };
    let (logits, cache) = probe.forward(x.view(), mode).unwrap();
    let (_, d_logits) = cross_entropy(logits.view(), &y).unwrap();
    let grads = probe.backward(&cache, d_logits.view()).unwrap();
    let mut blocks = probe_blocks(&probe, &grads);
    blocks.push(ParamBlock {
        name: "input".into(),
        values: x.iter().copied().collect(),
        analytic: grads.input.iter().copied().collect(),
    });
    let n = blocks.len();
    finite_diff_check(
        |b| {
            let p = probe_from_blocks(b, &probe);
            let xi = Array2::from_shape_vec((BATCH, DIM), b[n - 1].values.clone()).unwrap();
            let logits = p.forward(xi.view(), mode).unwrap().0;
            cross_entropy(logits.view(), &y).unwrap().0
        },
        &mut blocks,
        EPS,
    )
    .unwrap()
}

fn frames(r: &mut ChaCha8Rng) -> Array3<f64> {
    Array3::from_shape_vec((BATCH, LAYERS, DIM), normal(r, BATCH * LAYERS * DIM)).unwrap()
}

/// Weighted sum of layers into a probe into cross-entropy.
pub fn check_weighted_sum(seed: u64) -> GradCheckReport {
    let mut r = rng(seed, Stream::Data);
    let x = frames(&mut r);
    let y = labels(&mut r);
    let ws = WeightedSum::from_logits(Array1::from(normal(&mut r, LAYERS)));
    let probe = random_probe(&[5], 0.0, seed, &mut r);
    let (fused, ws_cache) = ws.fuse_batch(x.view()).unwrap();
    let (logits, cache) = probe.forward(fused.view(), Mode::Eval).unwrap();
    let (_, d_logits) = cross_entropy(logits.view(), &y).unwrap();
    let pg = probe.backward(&cache, d_logits.view()).unwrap();
    let wg = ws.fuse_backward(&ws_cache, pg.input.view()).unwrap();
    let mut blocks = vec![ParamBlock {
        name: "ws.logits".into(),
        values: ws.logits.to_vec(),
        analytic: wg[0].clone(),
    }];
    blocks.extend(probe_blocks(&probe, &pg));
    finite_diff_check(
        |b| {
            let w = WeightedSum::from_logits(Array1::from(b[0].values.clone()));
            let p = probe_from_blocks(&b[1..], &probe);
            let fused = w.fuse_batch(x.view()).unwrap().0;
            let logits = p.forward(fused.view(), Mode::Eval).unwrap().0;
            cross_entropy(logits.view(), &y).unwrap().0
        },
        &mut blocks,
        EPS,
    )
    .unwrap()
}

/// Layer attention into a probe into cross-entropy; projections, bias, probe and input frames.
pub fn check_attention(seed: u64) -> GradCheckReport {
    let d_k = 3;
    let mut r = rng(seed, Stream::Data);
    let x = frames(&mut r);
    let y = labels(&mut r);
    let w_q = Array2::from_shape_vec((DIM, d_k), normal(&mut r, DIM * d_k)).unwrap();
    let w_k = Array2::from_shape_vec((DIM, d_k), normal(&mut r, DIM * d_k)).unwrap();
    let bias = Array1::from(normal(&mut r, LAYERS));
    let att = LayerAttention::from_parts(w_q, w_k, bias).unwrap();
    let probe = random_probe(&[5], 0.0, seed, &mut r);
    let (fused, caches) = att.fuse_batch(x.view()).unwrap();
    let (logits, cache) = probe.forward(fused.view(), Mode::Eval).unwrap();
    let (_, d_logits) = cross_entropy(logits.view(), &y).unwrap();
    let pg = probe.backward(&cache, d_logits.view()).unwrap();
    let ag = att.fuse_backward(&caches, pg.input.view()).unwrap();
    let mut d_frames = Vec::new();
    for (c, d) in caches.iter().zip(pg.input.rows()) {
        d_frames.extend(att.backward(c, d).unwrap().input.iter().copied());
    }
    let mut blocks = vec![
        ParamBlock {
            name: "attention.W_Q".into(),
            values: att.w_q.iter().copied().collect(),
            analytic: ag[0].clone(),
        },
        ParamBlock {
            name: "attention.W_K".into(),
            values: att.w_k.iter().copied().collect(),
            analytic: ag[1].clone(),
        },
        ParamBlock {
            name: "attention.bias".into(),
            values: att.bias.to_vec(),
            analytic: ag[2].clone(),
        },
        ParamBlock {
            name: "frames".into(),
            values: x.iter().copied().collect(),
            analytic: d_frames,
        },
    ];
    blocks.extend(probe_blocks(&probe, &pg));
    finite_diff_check(
        |b| {
            let a = LayerAttention::from_parts(
                Array2::from_shape_vec((DIM, d_k), b[0].values.clone()).unwrap(),
                Array2::from_shape_vec((DIM, d_k), b[1].values.clone()).unwrap(),
                Array1::from(b[2].values.clone()),
            )
            .unwrap();
            let xf = Array3::from_shape_vec((BATCH, LAYERS, DIM), b[3].values.clone()).unwrap();
            let p = probe_from_blocks(&b[4..], &probe);
            let fused = a.fuse_batch(xf.view()).unwrap().0;
            let logits = p.forward(fused.view(), Mode::Eval).unwrap().0;
            cross_entropy(logits.view(), &y).unwrap().0
        },
        &mut blocks,
        EPS,
    )
    .unwrap()
}

pub type Composite = (&'static str, fn(u64) -> GradCheckReport);

pub const COMPOSITES: [Composite; 4] = [
    ("cross_entropy", check_cross_entropy),
    ("probe", check_probe),
    ("weighted_sum", check_weighted_sum),
    ("attention", check_attention),
];
