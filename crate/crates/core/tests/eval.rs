mod common;

use std::collections::BTreeMap;

use edgebridge::bridge::BridgeMode;
use edgebridge::data::{Dataset, DomainCatalog, DomainSample};
use edgebridge::eval::{
    dataset_features, eval_fuda_with_features, eval_udg_with_features, retrieval_grid, shot_sample, stratified_sample, EmbeddingIndex, Probe,
};
use edgebridge::image::Image;
use edgebridge::train::{self, BackboneExport, TrainConfig};
use edgebridge::Error;
use edgebridge_tensor::Tensor;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use common::checks::{self, knn_oracle};
use common::*;

#[test]
fn knn_matches_an_exhaustive_scan_on_200_queries() {
    checks::knn_vs_oracle(200);
}

#[test]
fn linear_probe_separates_a_toy_set_and_is_at_chance_on_permuted_labels() {
    let (separable, permuted) = checks::linear_probe_toys();
    assert_eq!(separable, 1.0);
    assert!((permuted - 0.25).abs() <= 0.05, "permuted-label accuracy {permuted}");
}

/// Domains of uneven size with 1×1 images; features are supplied directly.
fn toy_dataset(sizes: &[usize], classes: usize) -> Dataset {
    let mut samples = Vec::new();
    for (d, &n) in sizes.iter().enumerate() {
        for i in 0..n {
            samples.push(DomainSample {
                image: Image::filled(3, 1, 1, 0.5),
                domain_id: d,
                class_id: Some(i % classes),
                sample_id: format!("d{d}_{i}"),
            });
        }
    }
    let catalog = DomainCatalog {
        domains: (0..sizes.len()).map(|d| format!("dom{d}")).collect(),
        per_domain_counts: sizes.to_vec(),
        class_names: Some((0..classes).map(|c| format!("c{c}")).collect()),
    };
    Dataset::new(catalog, samples, 1).unwrap()
}

/// Class centroid plus noise, with a domain offset that shifts every class.
fn toy_features(ds: &Dataset, rng: &mut StdRng, noise: f32) -> Tensor<f32> {
    let d = 6;
    let data = ds
        .samples()
        .iter()
        .flat_map(|s| {
            let c = s.class_id.unwrap();
            (0..d)
                .map(|j| (if j == c { 1.0 } else { 0.0 }) + if j == 5 { 0.3 * s.domain_id as f32 } else { 0.0 } + noise * (rng.random::<f32>() - 0.5))
                .collect::<Vec<f32>>()
        })
        .collect();
    Tensor::new(&[ds.len(), d], data)
}

#[test]
fn stratified_sampling_respects_fraction_and_classes() {
    let ds = toy_dataset(&[37, 23], 4);
    let pool: Vec<usize> = (0..ds.len()).collect();
    for (fraction, seed) in [(0.1, 0), (0.01, 1), (0.5, 2), (1.0, 3)] {
        let picked = stratified_sample(&ds, &pool, fraction, seed).unwrap();
        let want = ((fraction * 60.0_f64).ceil() as usize).max(4);
        assert_eq!(picked.len(), want, "fraction {fraction}");
        let (mut per, mut sizes) = ([0usize; 4], [0usize; 4]);
        for &i in &picked {
            per[ds.sample(i).class_id.unwrap()] += 1;
        }
        for s in ds.samples() {
            sizes[s.class_id.unwrap()] += 1;
        }
        assert!(per.iter().all(|&c| c >= 1), "{per:?}");
        for k in 0..4 {
            let share = want as f64 * sizes[k] as f64 / 60.0;
            assert!((per[k] as f64 - share).abs() <= 1.0, "fraction {fraction}: {per:?}");
        }
        assert_eq!(picked, stratified_sample(&ds, &pool, fraction, seed).unwrap());
    }
    assert!(stratified_sample(&ds, &pool, 0.0, 0).is_err());
    let one_class: Vec<usize> = (0..ds.len()).filter(|&i| ds.sample(i).class_id == Some(0)).collect();
    assert!(matches!(stratified_sample(&ds, &one_class, 0.5, 0), Err(Error::ClassWithoutImages(_))));
}

#[test]
fn shot_sampling_takes_exactly_n_per_class() {
    let ds = toy_dataset(&[12, 8], 4);
    let pool = ds.domain_indices(1);
    let picked = shot_sample(&ds, &pool, 2, 9).unwrap();
    assert_eq!(picked.len(), 8);
    assert!(picked.iter().all(|&i| ds.sample(i).domain_id == 1));
    assert!(matches!(shot_sample(&ds, &pool, 3, 9), Err(Error::InsufficientShots { have: 2, need: 3, .. })));
}

fn report_oracle(ds: &Dataset, feats: &Tensor<f32>, labeled_ids: &[String], targets: &[usize], k: usize) -> (BTreeMap<String, f64>, f64, f64) {
    let labeled: Vec<usize> = labeled_ids.iter().map(|id| ds.samples().iter().position(|s| &s.sample_id == id).unwrap()).collect();
    let rows: Vec<Vec<f32>> = labeled.iter().map(|&i| feats.row(i).to_vec()).collect();
    let labels: Vec<usize> = labeled.iter().map(|&i| ds.sample(i).class_id.unwrap()).collect();
    let (mut per, mut hits, mut total) = (BTreeMap::new(), 0, 0);
    for &d in targets {
        let items = ds.domain_indices(d);
        let h = items
            .iter()
            .filter(|&&i| {
                let own = labeled.iter().position(|&l| l == i);
                knn_oracle(&rows, &labels, own, feats.row(i), k) == ds.sample(i).class_id.unwrap()
            })
            .count();
        per.insert(ds.catalog().domains[d].clone(), h as f64 / items.len() as f64);
        hits += h;
        total += items.len();
    }
    let avg = per.values().sum::<f64>() / per.len() as f64;
    (per, hits as f64 / total as f64, avg)
}

#[test]
fn udg_report_matches_an_independent_recount() {
    let mut rng = StdRng::seed_from_u64(2);
    let ds = toy_dataset(&[40, 30, 10, 26], 5);
    let feats = toy_features(&ds, &mut rng, 3.0);
    let sources = vec!["dom0".to_string(), "dom1".to_string()];
    let targets = vec!["dom2".to_string(), "dom3".to_string()];
    let r = eval_udg_with_features(&ds, &feats, &sources, &targets, 0.2, Probe::Knn { k: 3 }, 4).unwrap();
    let (per, overall, average) = report_oracle(&ds, &feats, &r.labeled_sample_ids, &[2, 3], 3);
    assert_eq!(r.per_domain_accuracy, per);
    assert_eq!((r.overall, r.average), (overall, average));
    // Uneven target sizes: the pooled and per-domain means differ.
    assert!((r.overall - r.average).abs() > 1e-9, "{} vs {}", r.overall, r.average);
    assert_eq!(r.per_domain_count["dom2"], 10);
    assert_eq!(r.labeled_sample_ids.len(), 14);
    assert!(r.labeled_sample_ids.iter().all(|id| id.starts_with("d0_") || id.starts_with("d1_")));
}

#[test]
fn fuda_report_matches_an_independent_recount() {
    let mut rng = StdRng::seed_from_u64(8);
    let ds = toy_dataset(&[20, 25], 5);
    let feats = toy_features(&ds, &mut rng, 2.0);
    for seed in 0..4 {
        let r = eval_fuda_with_features(&ds, &feats, "dom0", "dom1", 1, Probe::Knn { k: 1 }, seed).unwrap();
        assert_eq!(r.labeled_sample_ids.len(), 5);
        let (per, overall, _) = report_oracle(&ds, &feats, &r.labeled_sample_ids, &[1], 1);
        assert_eq!((r.per_domain_accuracy.clone(), r.overall), (per, overall));
    }
    // Same-domain scoring never lets a labeled shot vote for itself.
    let r = eval_fuda_with_features(&ds, &feats, "dom0", "dom0", 1, Probe::Knn { k: 1 }, 0).unwrap();
    let (_, overall, _) = report_oracle(&ds, &feats, &r.labeled_sample_ids, &[0], 1);
    assert_eq!(r.overall, overall);
    // Noise-free features: one shot per class is enough.
    let clean = toy_features(&ds, &mut rng, 0.0);
    let r = eval_fuda_with_features(&ds, &clean, "dom0", "dom1", 3, Probe::Linear, 1).unwrap();
    assert_eq!(r.overall, 1.0);
}

#[test]
fn eval_on_an_unseen_style_needs_only_the_exported_backbone() {
    checks::unseen_domain_export();
}

#[test]
fn retrieval_grid_has_one_row_per_domain() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        synth_domains: 4,
        ..small_config(BridgeMode::None)
    };
    let ds = dataset(&cfg);
    let st = train::TrainState::<f32>::new(cfg.clone(), ds.catalog().domains.clone(), ds.catalog().per_domain_counts.clone(), None, 1).unwrap();
    let export = BackboneExport::from_state(&st);
    let feats = dataset_features(&export, &ds).unwrap();
    let index = EmbeddingIndex::new(
        &feats,
        ds.samples().iter().map(|s| s.class_id.unwrap()).collect(),
        ds.samples().iter().map(|s| s.domain_id).collect(),
        ds.samples().iter().map(|s| s.sample_id.clone()).collect(),
    )
    .unwrap();
    let images: Vec<&Image> = ds.samples().iter().map(|s| &s.image).collect();
    let path = dir.path().join("grid.png");
    let rows = retrieval_grid(&export, &ds.sample(0).image, &index, &images, 4, 5, &path).unwrap();
    assert_eq!(rows.len(), 4);
    for (d, row) in rows.iter().enumerate() {
        assert_eq!(row.len(), 5);
        assert!(row.iter().all(|&i| index.domain(i) == d));
    }
    // The query's own item is its best match within its domain.
    assert_eq!(rows[ds.sample(0).domain_id][0], 0);
    let (w, h) = image::image_dimensions(&path).unwrap();
    let cell = cfg.image_size as u32 + 2;
    assert_eq!((h, w), (4 * cell + 2, 6 * cell + 2));
}
