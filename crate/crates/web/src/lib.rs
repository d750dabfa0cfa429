//! wasm-bindgen entry points for the static demo page.
//!
//! Each export takes plain numbers and returns a JSON string. The `*_json` functions
//! behind them are ordinary Rust so they can be tested natively.

use lingagg::aggregation::{dws_fuse, train_linguistic_dws, train_linguistic_ws};
use lingagg::mi::{layerwise_analysis, snr_analysis, TrainConfig};
use lingagg::synth::{active_layers, binary_channel_mi, generate, Family, SynthSpec, SNR_GRID_DB};
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

/// Frames of per-frame attention weights returned to the page.
const MAX_TRACE: usize = 300;

/// Small probes keep each call to a few seconds in the browser.
fn demo_config(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        hidden: vec![64, 64],
        eval_fraction: 0.5,
        ..TrainConfig::default()
    }
}

/// Probe bound on a binary symmetric channel next to its closed-form MI.
pub fn binary_channel_json(p: f64, n: usize, seed: u64) -> lingagg::Result<Value> {
    let ds = generate(&SynthSpec {
        family: Family::BinaryChannel,
        n,
        layers: 1,
        dim: 1,
        classes: 2,
        flip_p: p,
        informative: vec![0],
        seed,
        ..SynthSpec::default()
    })?;
    let report = layerwise_analysis(&ds, &demo_config(seed))?;
    let est = report.estimates().next().expect("one layer");
    Ok(json!({
        "p": p,
        "n": n,
        "closed_form_nats": binary_channel_mi(p),
        "bound_nats": est.bound,
        "h_y_nats": est.h_y,
        "ce_nats": est.ce,
    }))
}

/// Layer x SNR bound matrix on noisy data with a planted peak layer.
pub fn snr_matrix_json(layers: usize, peak: usize, n: usize, seed: u64) -> lingagg::Result<Value> {
    let ds = generate(&SynthSpec {
        family: Family::NoisySnr,
        n,
        layers,
        dim: 8,
        informative: vec![peak],
        layer_decay: 0.5,
        segment: 20,
        seed,
        ..SynthSpec::default()
    })?;
    let report = snr_analysis(&ds, &SNR_GRID_DB, &demo_config(seed))?;
    let matrix: Vec<Vec<Option<f64>>> = (0..layers)
        .map(|l| {
            SNR_GRID_DB
                .iter()
                .map(|&s| report.cell(l, s).map(|e| e.bound))
                .collect()
        })
        .collect();
    Ok(json!({
        "snr_db": SNR_GRID_DB,
        "peak": peak,
        "bounds_nats": matrix,
    }))
}

/// Static versus dynamic aggregation on data whose informative layer switches over time.
pub fn switching_json(n: usize, seed: u64) -> lingagg::Result<Value> {
    let ds = generate(&SynthSpec {
        family: Family::LayerSwitching,
        n,
        layers: 4,
        dim: 16,
        informative: vec![0, 2],
        noise_std: 3.0,
        offset: 10.0,
        marker: 10.0,
        segment: 50,
        seed,
        ..SynthSpec::default()
    })?;
    let cfg = demo_config(seed);
    let ws = train_linguistic_ws(&ds, &cfg)?;
    let dws = train_linguistic_dws(&ds, &cfg, None)?;
    let (_, weights) = dws_fuse(&dws.aggregator, &ds)?;
    let active = active_layers(&ds).expect("switching data records the active layer");
    let trace: Vec<Vec<f32>> = weights.rows().into_iter().take(MAX_TRACE).map(|r| r.to_vec()).collect();
    Ok(json!({
        "ws_bound_nats": ws.estimate.bound,
        "dws_bound_nats": dws.estimate.bound,
        "ws_weights": ws.aggregator.weights(),
        "frame_weights": trace,
        "active_layer": &active[..active.len().min(MAX_TRACE)],
    }))
}

fn to_js(v: lingagg::Result<Value>) -> Result<String, JsError> {
    v.map(|v| v.to_string()).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
pub fn binary_channel(p: f64, n: u32, seed: u32) -> Result<String, JsError> {
    to_js(binary_channel_json(p, n as usize, seed.into()))
}

#[wasm_bindgen]
pub fn snr_matrix(layers: u32, peak: u32, n: u32, seed: u32) -> Result<String, JsError> {
    to_js(snr_matrix_json(layers as usize, peak as usize, n as usize, seed.into()))
}

#[wasm_bindgen]
pub fn switching(n: u32, seed: u32) -> Result<String, JsError> {
    to_js(switching_json(n as usize, seed.into()))
}
