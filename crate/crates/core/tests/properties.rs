use lingagg::aggregation::{dws_fuse, ws_fuse, AggMode, Aggregator, DwsAggregator, WsAggregator};
use lingagg::kernels::{per_sample_nll, Affine, Probe};
use lingagg::lfa::{decode, encode, group_by_snr, split_indices, LayeredDataset, Metadata, SplitSpec};
use lingagg::mi::{empirical_entropy, mi_bound, Context};
use lingagg::numeric::softmax;
use ndarray::{Array1, Array2};
use proptest::prelude::*;

fn meta(k: usize, layers: usize, snr_levels: Vec<f64>) -> Metadata {
    Metadata {
        vocab: (0..k).map(|i| format!("p{i}")).collect(),
        model: "prop".into(),
        layers: (0..layers).map(|l| format!("l{l}")).collect(),
        snr_levels,
        ..Default::default()
    }
}

fn ws_with(logits: Vec<f64>) -> WsAggregator {
    WsAggregator {
        logits: logits.clone(),
        ..WsAggregator::uniform(logits.len(), None, AggMode::Acoustic)
    }
}

prop_compose! {
    fn dataset()(n in 1usize..12, layers in 1usize..4, dim in 1usize..5, k in 1usize..6, with_snr in any::<bool>())
        (features in prop::collection::vec(-1e3f32..1e3, n * layers * dim),
         labels in prop::collection::vec(0..k as u32, n),
         snr in prop::collection::vec(-20f32..30.0, n),
         layers in Just(layers), dim in Just(dim), k in Just(k), with_snr in Just(with_snr))
        -> LayeredDataset {
        let snr = with_snr.then_some(snr);
        LayeredDataset::new(layers, dim, features, labels, snr, meta(k, layers, vec![])).unwrap()
    }
}

proptest! {
    #[test]
    fn lfa_round_trip_is_exact(ds in dataset()) {
        let bytes = encode(&ds).unwrap();
        let back = decode(&bytes).unwrap();
        prop_assert_eq!(&back, &ds);
        prop_assert_eq!(encode(&back).unwrap(), bytes);
    }

    #[test]
    fn snr_bins_partition_the_frames(ds in dataset(), grid in prop::collection::btree_set(-20i32..30, 1..8)) {
        prop_assume!(ds.snr_db().is_some());
        let grid: Vec<f64> = grid.into_iter().map(f64::from).collect();
        let bins = group_by_snr(&ds, &grid).unwrap();
        prop_assert_eq!(bins.len(), grid.len());
        let mut all: Vec<usize> = bins.iter().flat_map(|b| b.frames.clone()).collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..ds.n_frames()).collect::<Vec<_>>());
    }

    #[test]
    fn split_is_a_disjoint_cover(n in 2usize..500, frac in 0.01f64..0.99, seed in any::<u64>()) {
        if let Ok(s) = split_indices(n, SplitSpec { eval_fraction: frac, seed }) {
            prop_assert!(!s.train.is_empty() && !s.eval.is_empty());
            let mut all = [s.train.clone(), s.eval.clone()].concat();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        }
    }

    #[test]
    fn softmax_weights_lie_on_the_simplex(logits in prop::collection::vec(-50f64..50.0, 1..12)) {
        let ws = ws_with(logits);
        let w = ws.weights();
        prop_assert!(w.iter().all(|&x| x >= 0.0));
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        let exported = Aggregator::from_json(&Aggregator::Ws(ws.clone()).to_json().unwrap()).unwrap();
        prop_assert_eq!(exported, Aggregator::Ws(ws));
    }

    #[test]
    fn ws_fuse_is_linear(
        logits in prop::collection::vec(-3f64..3.0, 3),
        a in prop::collection::vec(-10f32..10.0, 4 * 3 * 2),
        b in prop::collection::vec(-10f32..10.0, 4 * 3 * 2),
        alpha in -2f32..2.0,
        beta in -2f32..2.0,
    ) {
        let mk = |f: Vec<f32>| LayeredDataset::new(3, 2, f, vec![0; 4], None, meta(1, 3, vec![])).unwrap();
        let combo: Vec<f32> = a.iter().zip(&b).map(|(x, y)| alpha * x + beta * y).collect();
        let ws = ws_with(logits);
        let fa = ws_fuse(&ws, &mk(a)).unwrap().features;
        let fb = ws_fuse(&ws, &mk(b)).unwrap().features;
        let fc = ws_fuse(&ws, &mk(combo)).unwrap().features;
        for ((x, y), z) in fa.iter().zip(fb.iter()).zip(fc.iter()) {
            let expected = alpha as f64 * *x as f64 + beta as f64 * *y as f64;
            let scale = (alpha.abs() as f64 * x.abs() as f64 + beta.abs() as f64 * y.abs() as f64).max(1.0);
            prop_assert!((*z as f64 - expected).abs() <= 1e-5 * scale, "{} vs {}", z, expected);
        }
    }

    #[test]
    fn attention_frame_weights_sum_to_one(
        q in prop::collection::vec(-2f64..2.0, 6),
        k in prop::collection::vec(-2f64..2.0, 6),
        bias in prop::collection::vec(-5f64..5.0, 4),
        f in prop::collection::vec(-5f32..5.0, 5 * 4 * 3),
    ) {
        let ds = LayeredDataset::new(4, 3, f, vec![0; 5], None, meta(1, 4, vec![])).unwrap();
        let agg = DwsAggregator::from_parts(
            Array2::from_shape_vec((3, 2), q).unwrap(),
            Array2::from_shape_vec((3, 2), k).unwrap(),
            Array1::from(bias),
            AggMode::Linguistic,
        ).unwrap();
        let (_, w) = dws_fuse(&agg, &ds).unwrap();
        for row in w.rows() {
            prop_assert!(row.iter().all(|&x| x >= 0.0));
            prop_assert!((row.iter().map(|&x| x as f64).sum::<f64>() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn bound_never_exceeds_label_entropy(
        weight in prop::collection::vec(-30f64..30.0, 3 * 4),
        x in prop::collection::vec(-10f64..10.0, 8 * 3),
        labels in prop::collection::vec(0u32..4, 8),
    ) {
        let layer = Affine { weight: Array2::from_shape_vec((3, 4), weight).unwrap(), bias: Array1::zeros(4) };
        let probe = Probe::from_layers(vec![layer], 0.0).unwrap();
        let x = Array2::from_shape_vec((8, 3), x).unwrap();
        let est = mi_bound(&probe, x.view(), &labels, Context::Features).unwrap();
        prop_assert!(est.bound <= est.h_y);
        prop_assert!(est.ce >= 0.0);
        let logits = probe.logits(x.view()).unwrap();
        prop_assert!(per_sample_nll(logits.view(), &labels).unwrap().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn entropy_is_between_zero_and_ln_k(labels in prop::collection::vec(0u32..7, 1..200)) {
        let h = empirical_entropy(&labels).unwrap();
        prop_assert!(h >= 0.0);
        prop_assert!(h <= 7f64.ln() + 1e-12);
    }

    #[test]
    fn softmax_is_permutation_invariant(logits in prop::collection::vec(-20f64..20.0, 2..8), rot in 0usize..8) {
        let w = softmax(&logits);
        let r = rot % logits.len();
        let mut rotated = logits.clone();
        rotated.rotate_left(r);
        let mut wr = softmax(&rotated);
        wr.rotate_right(r);
        prop_assert!(w.iter().zip(&wr).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
