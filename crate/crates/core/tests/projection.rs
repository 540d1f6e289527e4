use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Barrier};

use ncdkit_core::dataset::{load_csv, ClassStatus, SelectionState};
use ncdkit_core::nn::seeded_rng;
use ncdkit_core::pipeline::{tsne_input, tsne_payload, TsneJob};
use ncdkit_core::projection::{
    conditional_affinities, feature_fingerprint, tsne_embed, tsne_fit, RowFilter, TsneCache, TsneParams,
    TsneRequest, TsneSource,
};
use ncdkit_core::synthetic::four_gaussians_csv;
use ndarray::Array2;
use proptest::prelude::*;
use rand::Rng as _;

fn random_points(n: usize, d: usize, seed: u64) -> Array2<f64> {
    let mut rng = seeded_rng(seed);
    Array2::from_shape_fn((n, d), |_| rng.random_range(-3.0..3.0))
}

fn entropy_bits(row: impl Iterator<Item = f64>) -> f64 {
    row.filter(|&p| p > 0.0).map(|p| -p * p.log2()).sum()
}

#[test]
fn bandwidth_search_hits_the_entropy_target() {
    let x = random_points(100, 5, 1);
    for perplexity in [5.0, 30.0] {
        let aff = conditional_affinities(&x, perplexity).unwrap();
        for i in 0..100 {
            let h = entropy_bits(aff.conditional.row(i).iter().copied());
            assert!((h - perplexity.log2()).abs() < 1e-4, "row {i}: {h}");
            assert_eq!(aff.conditional[[i, i]], 0.0);
        }
        assert!((aff.joint.sum() - 1.0).abs() < 1e-9);
        assert_eq!(aff.joint, aff.joint.t());
        assert!(aff.joint.diag().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn duplicate_rows_get_identical_affinities() {
    let mut x = random_points(20, 3, 2);
    let first = x.row(0).to_owned();
    x.row_mut(7).assign(&first);
    let aff = conditional_affinities(&x, 4.0).unwrap();
    for j in 0..20 {
        if j != 0 && j != 7 {
            assert!((aff.joint[[0, j]] - aff.joint[[7, j]]).abs() < 1e-15);
        }
    }
}

#[test]
fn tight_pairs_stay_together() {
    let x = Array2::from_shape_vec((4, 2), vec![0.0, 0.0, 0.1, 0.0, 10.0, 10.0, 10.1, 10.0]).unwrap();
    for seed in 0..10 {
        // four points need a far smaller step than the default heuristic
        let params = TsneParams {
            perplexity: 1.1,
            n_iter: 1000,
            seed,
            learning_rate: Some(1.0),
            ..TsneParams::default()
        };
        let c = tsne_embed(&x, &params).unwrap().coords;
        let d = |i: usize, j: usize| ((c[[i, 0]] - c[[j, 0]]).powi(2) + (c[[i, 1]] - c[[j, 1]]).powi(2)).sqrt();
        let within = d(0, 1).max(d(2, 3));
        let between = d(0, 2).min(d(0, 3)).min(d(1, 2)).min(d(1, 3));
        assert!(within / between < 0.2, "seed {seed}: {within} / {between}");
    }
}

fn request(perplexity: f64, n_iter: usize, seed: u64) -> TsneRequest {
    TsneRequest {
        dataset_id: "d".into(),
        source: TsneSource::RawFeatures,
        feature_fingerprint: feature_fingerprint(&["a".to_string()]),
        row_filter: RowFilter::AllIncluded,
        perplexity,
        n_iter,
        seed,
    }
}

#[test]
fn fit_is_bit_reproducible_and_kl_settles() {
    let x = random_points(60, 4, 4);
    let rows: Vec<usize> = (0..60).collect();
    let req = request(10.0, 600, 5);
    let a = tsne_fit(&x, &rows, &req).unwrap();
    let b = tsne_fit(&x, &rows, &req).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.kl_history.len(), 600);
    let windows: Vec<f64> = a.kl_history[250..].chunks(50).map(|w| w.iter().sum::<f64>() / w.len() as f64).collect();
    assert!(windows.windows(2).all(|w| w[1] <= w[0] + 1e-9), "{windows:?}");
    let other = tsne_fit(&x, &rows, &request(10.0, 600, 6)).unwrap();
    assert_ne!(a.coords, other.coords);
}

#[test]
fn request_rules_apply_to_fit() {
    let x = random_points(10, 2, 7);
    let rows: Vec<usize> = (0..10).collect();
    assert_eq!(tsne_fit(&x, &rows, &request(3.0, 10, 0)).unwrap_err().code(), "BadPerplexity");
    assert!(tsne_fit(&x, &rows, &request(2.9, 10, 0)).is_ok());
    assert_eq!(tsne_fit(&x, &rows[..9], &request(2.0, 10, 0)).unwrap_err().code(), "ShapeError");
}

#[test]
fn concurrent_identical_misses_compute_once() {
    let cache = Arc::new(TsneCache::new(4));
    let computed = Arc::new(AtomicUsize::new(0));
    let barrier = Arc::new(Barrier::new(6));
    let x = random_points(30, 2, 8);
    let rows: Vec<usize> = (0..30).collect();
    let req = request(5.0, 100, 1);
    let key = req.key(&rows);
    let handles: Vec<_> = (0..6)
        .map(|_| {
            let (cache, computed, barrier) = (cache.clone(), computed.clone(), barrier.clone());
            let (x, rows, req, key) = (x.clone(), rows.clone(), req.clone(), key.clone());
            std::thread::spawn(move || {
                barrier.wait();
                cache
                    .get_or_compute(&key, || {
                        computed.fetch_add(1, Ordering::SeqCst);
                        tsne_fit(&x, &rows, &req)
                    })
                    .unwrap()
                    .0
            })
        })
        .collect();
    let results: Vec<_> = handles.into_iter().map(|h| h.join().unwrap()).collect();
    assert_eq!(computed.load(Ordering::SeqCst), 1);
    assert!(results.windows(2).all(|w| w[0].coords == w[1].coords));
}

fn selection(statuses: &[(&str, ClassStatus)]) -> SelectionState {
    SelectionState {
        dataset_id: String::new(),
        selected_features: vec!["f0".into(), "f1".into()],
        target_column: "class".into(),
        class_status: statuses.iter().map(|(c, s)| (c.to_string(), *s)).collect::<BTreeMap<_, _>>(),
    }
}

#[test]
fn recoloring_reuses_and_filtering_shrinks() {
    let ds = load_csv(four_gaussians_csv(15, 10.0, 2, 0).as_bytes(), true).unwrap();
    use ClassStatus::*;
    let sel_a = selection(&[("A", Known), ("B", Known), ("C", Unknown), ("D", Unknown)]);
    let sel_b = selection(&[("A", Known), ("B", Unknown), ("C", Unknown), ("D", Known)]);
    let job = |sel: &SelectionState, filter| TsneJob {
        selection: sel.clone(),
        source: TsneSource::RawFeatures,
        row_filter: filter,
        perplexity: 5.0,
        n_iter: 300,
        seed: 2,
        color_by: None,
    };
    let cache = TsneCache::default();
    let run = |j: &TsneJob| {
        let (req, x, rows) = tsne_input(&ds, j, None).unwrap();
        let key = req.key(&rows);
        cache.get_or_compute(&key, || tsne_fit(&x, &rows, &req)).unwrap()
    };
    let (first, hit) = run(&job(&sel_a, RowFilter::AllIncluded));
    assert!(!hit);
    let (second, hit) = run(&job(&sel_b, RowFilter::AllIncluded));
    assert!(hit);
    assert_eq!(first.coords, second.coords);
    let pa = tsne_payload(&ds, &first, &sel_a, None).unwrap();
    let pb = tsne_payload(&ds, &second, &sel_b, None).unwrap();
    assert_eq!(pa.points.len(), 60);
    assert!(pa.points.iter().zip(&pb.points).all(|(a, b)| a.x == b.x && a.y == b.y && a.row == b.row));

    let (unknown, hit) = run(&job(&sel_a, RowFilter::UnknownOnly));
    assert!(!hit);
    assert_eq!(unknown.coords.nrows(), 30);
    let payload = tsne_payload(&ds, &unknown, &sel_a, None).unwrap();
    assert!(payload.points.iter().all(|p| p.label == "C" || p.label == "D"));

    let sel_c = selection(&[("A", Known), ("B", Excluded), ("C", Unknown), ("D", Unknown)]);
    let (_, hit) = run(&job(&sel_c, RowFilter::AllIncluded));
    assert!(!hit);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn request_keys_are_injective(
        a in (0u8..3, 0u8..2, 0u8..2, 1u32..200, 1usize..4, 0u64..3, 0usize..3),
        b in (0u8..3, 0u8..2, 0u8..2, 1u32..200, 1usize..4, 0u64..3, 0usize..3),
    ) {
        let build = |(ds, src, filter, perp, iters, seed, rows): (u8, u8, u8, u32, usize, u64, usize)| {
            let req = TsneRequest {
                dataset_id: format!("ds{ds}"),
                source: if src == 0 { TsneSource::RawFeatures } else { TsneSource::Latent { model_id: format!("m{ds}") } },
                feature_fingerprint: feature_fingerprint(&[format!("f{ds}")]),
                row_filter: if filter == 0 { RowFilter::AllIncluded } else { RowFilter::UnknownOnly },
                perplexity: perp as f64 / 7.0,
                n_iter: iters * 100,
                seed,
            };
            let rows: Vec<usize> = (0..rows + 4).collect();
            (req.key(&rows), (req, rows))
        };
        let (ka, fa) = build(a);
        let (kb, fb) = build(b);
        prop_assert_eq!(ka == kb, fa == fb);
    }
}
