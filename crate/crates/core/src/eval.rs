//! Frozen-feature evaluation: kNN and linear probes, the label-fraction and
//! few-shot protocols, and retrieval grids.

use std::collections::BTreeMap;
use std::path::Path;

use edgebridge_tensor::Tensor;
use log::warn;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::encoder::encode_all;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng;
use crate::train::BackboneExport;

const ENCODE_CHUNK: usize = 64;
const NORM_GUARD: f64 = 1e-12;

/// Rows of frozen features with their labels, domains and ids.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingIndex {
    features: Vec<f32>,
    dim: usize,
    labels: Vec<usize>,
    domains: Vec<usize>,
    sample_ids: Vec<String>,
    /// Per-row inverse norms, cached for cosine scoring.
    inv_norms: Vec<f64>,
}

fn inv_norm(v: &[f32]) -> f64 {
    1.0 / (v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt() + NORM_GUARD)
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

impl EmbeddingIndex {
    pub fn new(features: &Tensor<f32>, labels: Vec<usize>, domains: Vec<usize>, sample_ids: Vec<String>) -> Result<Self> {
        let n = labels.len();
        if features.rank() != 2 || features.dim(0) != n || domains.len() != n || sample_ids.len() != n {
            return Err(Error::InvalidArgument(format!(
                "index fields disagree: features {:?}, {} labels, {} domains, {} ids",
                features.shape(),
                n,
                domains.len(),
                sample_ids.len()
            )));
        }
        let dim = features.dim(1);
        let inv_norms = (0..n).map(|i| inv_norm(features.row(i))).collect();
        Ok(Self {
            features: features.data().to_vec(),
            dim,
            labels,
            domains,
            sample_ids,
            inv_norms,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn feature(&self, i: usize) -> &[f32] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn domain(&self, i: usize) -> usize {
        self.domains[i]
    }

    pub fn sample_id(&self, i: usize) -> &str {
        &self.sample_ids[i]
    }

    /// Cosine similarity of `query` to every row.
    pub fn similarities(&self, query: &[f32]) -> Vec<f64> {
        assert_eq!(query.len(), self.dim, "query dim");
        let qn = inv_norm(query);
        (0..self.len())
            .map(|i| dot(query, self.feature(i)) * qn * self.inv_norms[i])
            .collect()
    }

    /// Rows by decreasing similarity, ties by lower row index. Rows whose
    /// sample id equals `exclude_id` are skipped.
    pub fn ranked(&self, query: &[f32], exclude_id: Option<&str>, filter: impl Fn(usize) -> bool) -> Vec<(usize, f64)> {
        let sims = self.similarities(query);
        let mut rows: Vec<(usize, f64)> = sims
            .into_iter()
            .enumerate()
            .filter(|&(i, _)| filter(i) && exclude_id.is_none_or(|id| self.sample_ids[i] != id))
            .collect();
        rows.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        rows
    }
}

/// Majority vote over the `k` most similar rows. Ties go to the class with
/// the smaller summed cosine distance, then to the lower class index.
pub fn knn_classify(index: &EmbeddingIndex, query: &[f32], k: usize) -> Result<usize> {
    knn_classify_excluding(index, query, k, None)
}

pub fn knn_classify_excluding(index: &EmbeddingIndex, query: &[f32], k: usize, exclude_id: Option<&str>) -> Result<usize> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let ranked = index.ranked(query, exclude_id, |_| true);
    if ranked.is_empty() {
        return Err(Error::InvalidArgument("kNN index is empty".into()));
    }
    let k = if k > ranked.len() {
        warn!("k = {k} exceeds the {} indexed items; using {}", ranked.len(), ranked.len());
        ranked.len()
    } else {
        k
    };
    let mut votes: BTreeMap<usize, (usize, f64)> = BTreeMap::new();
    for &(i, s) in &ranked[..k] {
        let e = votes.entry(index.labels[i]).or_insert((0, 0.0));
        e.0 += 1;
        e.1 += 1.0 - s;
    }
    let best = votes
        .iter()
        .min_by(|a, b| b.1 .0.cmp(&a.1 .0).then(a.1 .1.total_cmp(&b.1 .1)).then(a.0.cmp(b.0)))
        .expect("at least one vote");
    Ok(*best.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearProbeConfig {
    pub max_epochs: usize,
    pub grad_tol: f64,
    pub l2: f64,
}

impl Default for LinearProbeConfig {
    fn default() -> Self {
        Self {
            max_epochs: 500,
            grad_tol: 1e-5,
            l2: 1e-4,
        }
    }
}

/// Multinomial logistic regression on standardized features.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// `[classes, dim + 1]`, bias last.
    weights: Vec<f64>,
    n_classes: usize,
    pub epochs_run: usize,
}

fn softmax_in_place(z: &mut [f64]) {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in z.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    z.iter_mut().for_each(|v| *v /= s);
}

impl LinearProbe {
    /// Full-batch accelerated gradient descent with step `1/L` from a power
    /// iteration bound, stopping at `max_epochs` or when the gradient norm
    /// falls under `grad_tol`.
    pub fn fit(features: &Tensor<f32>, labels: &[usize], cfg: &LinearProbeConfig) -> Result<Self> {
        let n = labels.len();
        if features.rank() != 2 || features.dim(0) != n || n == 0 {
            return Err(Error::InvalidArgument(format!("probe got features {:?} for {n} labels", features.shape())));
        }
        let n_classes = labels.iter().max().map_or(0, |m| m + 1);
        let mut distinct: Vec<usize> = labels.to_vec();
        distinct.sort_unstable();
        distinct.dedup();
        if distinct.len() < 2 {
            return Err(Error::SingleClass);
        }
        let d = features.dim(1);
        let mut mean = vec![0.0; d];
        let mut scale = vec![0.0; d];
        for i in 0..n {
            for (m, &v) in mean.iter_mut().zip(features.row(i)) {
                *m += v as f64 / n as f64;
            }
        }
        for i in 0..n {
            for ((s, &m), &v) in scale.iter_mut().zip(&mean).zip(features.row(i)) {
                *s += (v as f64 - m).powi(2) / n as f64;
            }
        }
        scale.iter_mut().for_each(|s| *s = 1.0 / (s.sqrt() + 1e-8));
        let dp = d + 1;
        let x: Vec<f64> = (0..n)
            .flat_map(|i| {
                let row = features.row(i);
                let (mean, scale) = (&mean, &scale);
                (0..dp).map(move |j| if j == d { 1.0 } else { (row[j] as f64 - mean[j]) * scale[j] })
            })
            .collect();

        // Largest eigenvalue of X^T X / n bounds the curvature of the mean CE by half of it.
        let mut v = vec![1.0 / (dp as f64).sqrt(); dp];
        let mut lam = 0.0;
        for _ in 0..50 {
            let xv: Vec<f64> = (0..n).map(|i| (0..dp).map(|j| x[i * dp + j] * v[j]).sum()).collect();
            let mut w = vec![0.0; dp];
            for i in 0..n {
                for j in 0..dp {
                    w[j] += x[i * dp + j] * xv[i] / n as f64;
                }
            }
            lam = w.iter().map(|a| a * a).sum::<f64>().sqrt();
            if lam == 0.0 {
                break;
            }
            v = w.iter().map(|a| a / lam).collect();
        }
        let step = 1.0 / (0.5 * lam + cfg.l2 + 1e-12);

        let c = n_classes;
        let grad = |w: &[f64]| -> Vec<f64> {
            let mut g = vec![0.0; c * dp];
            let mut z = vec![0.0; c];
            for i in 0..n {
                let xi = &x[i * dp..(i + 1) * dp];
                for (k, zk) in z.iter_mut().enumerate() {
                    *zk = (0..dp).map(|j| w[k * dp + j] * xi[j]).sum();
                }
                softmax_in_place(&mut z);
                z[labels[i]] -= 1.0;
                for k in 0..c {
                    let r = z[k] / n as f64;
                    for j in 0..dp {
                        g[k * dp + j] += r * xi[j];
                    }
                }
            }
            for k in 0..c {
                for j in 0..d {
                    g[k * dp + j] += cfg.l2 * w[k * dp + j];
                }
            }
            g
        };
        let mut w = vec![0.0; c * dp];
        let mut y = w.clone();
        let mut t = 1.0f64;
        let mut epochs_run = 0;
        for e in 0..cfg.max_epochs {
            let g = grad(&y);
            epochs_run = e + 1;
            if g.iter().map(|a| a * a).sum::<f64>().sqrt() < cfg.grad_tol {
                w = y;
                break;
            }
            let w_next: Vec<f64> = y.iter().zip(&g).map(|(a, b)| a - step * b).collect();
            let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
            let mom = (t - 1.0) / t_next;
            y = w_next.iter().zip(&w).map(|(a, b)| a + mom * (a - b)).collect();
            w = w_next;
            t = t_next;
        }
        Ok(Self {
            mean,
            scale,
            weights: w,
            n_classes,
            epochs_run,
        })
    }

    pub fn predict(&self, feature: &[f32]) -> usize {
        let d = self.mean.len();
        let dp = d + 1;
        let xi: Vec<f64> = (0..d)
            .map(|j| (feature[j] as f64 - self.mean[j]) * self.scale[j])
            .chain(std::iter::once(1.0))
            .collect();
        (0..self.n_classes)
            .map(|k| (k, (0..dp).map(|j| self.weights[k * dp + j] * xi[j]).sum::<f64>()))
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
            .expect("at least two classes")
            .0
    }

    pub fn accuracy(&self, features: &Tensor<f32>, labels: &[usize]) -> f64 {
        if labels.is_empty() {
            return 0.0;
        }
        let hits = (0..labels.len()).filter(|&i| self.predict(features.row(i)) == labels[i]).count();
        hits as f64 / labels.len() as f64
    }
}

/// Fits a probe on the training set and returns its test accuracy.
pub fn linear_probe(train_feats: &Tensor<f32>, train_labels: &[usize], test_feats: &Tensor<f32>, test_labels: &[usize]) -> Result<f64> {
    let probe = LinearProbe::fit(train_feats, train_labels, &LinearProbeConfig::default())?;
    Ok(probe.accuracy(test_feats, test_labels))
}

/// How labeled source features are turned into a classifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Probe {
    Knn { k: usize },
    Linear,
}

impl Probe {
    pub fn name(&self) -> String {
        match self {
            Probe::Knn { k } => format!("knn(k={k})"),
            Probe::Linear => "linear".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: String,
    pub probe: Probe,
    pub label_fraction: Option<f64>,
    pub shots: Option<usize>,
    pub seed: u64,
    pub source_domains: Vec<String>,
    pub per_domain_accuracy: BTreeMap<String, f64>,
    pub per_domain_count: BTreeMap<String, usize>,
    /// Correct over total across every target item.
    pub overall: f64,
    /// Unweighted mean of the per-domain accuracies.
    pub average: f64,
    pub labeled_sample_ids: Vec<String>,
}

impl EvalReport {
    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let csv_err = |e: csv::Error| Error::Config(format!("report csv: {e}"));
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(["domain", "count", "accuracy"]).map_err(csv_err)?;
        for (d, acc) in &self.per_domain_accuracy {
            w.write_record([d.clone(), self.per_domain_count[d].to_string(), format!("{acc:.6}")])
                .map_err(csv_err)?;
        }
        w.write_record(["overall".to_string(), String::new(), format!("{:.6}", self.overall)])
            .map_err(csv_err)?;
        w.write_record(["average".to_string(), String::new(), format!("{:.6}", self.average)])
            .map_err(csv_err)?;
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Frozen features for every sample of `ds`, in dataset order.
pub fn dataset_features(backbone: &BackboneExport, ds: &Dataset) -> Result<Tensor<f32>> {
    let images: Vec<&Image> = ds.samples().iter().map(|s| &s.image).collect();
    encode_all(&backbone.arch, &backbone.params, &images, ENCODE_CHUNK)
}

fn gather(features: &Tensor<f32>, rows: &[usize]) -> Tensor<f32> {
    let d = features.dim(1);
    let data = rows.iter().flat_map(|&i| features.row(i).iter().copied()).collect();
    Tensor::new(&[rows.len(), d], data)
}

fn class_of(ds: &Dataset, i: usize) -> Result<usize> {
    ds.sample(i)
        .class_id
        .ok_or_else(|| Error::InvalidArgument(format!("sample `{}` has no class label", ds.sample(i).sample_id)))
}

fn class_name(ds: &Dataset, c: usize) -> String {
    ds.catalog()
        .class_names
        .as_ref()
        .and_then(|n| n.get(c).cloned())
        .unwrap_or_else(|| c.to_string())
}

/// Groups `pool` (dataset row indices) by class, every class present.
fn by_class(ds: &Dataset, pool: &[usize]) -> Result<Vec<Vec<usize>>> {
    let mut groups = vec![Vec::new(); ds.catalog().n_classes()];
    for &i in pool {
        groups[class_of(ds, i)?].push(i);
    }
    if let Some(c) = groups.iter().position(Vec::is_empty) {
        return Err(Error::ClassWithoutImages(class_name(ds, c)));
    }
    Ok(groups)
}

/// `⌈fraction · |pool|⌉` rows stratified by class with at least one per
/// class; the remainder is shared out by largest remainder.
pub fn stratified_sample(ds: &Dataset, pool: &[usize], fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("label fraction {fraction} outside (0, 1]")));
    }
    let groups = by_class(ds, pool)?;
    let n = pool.len();
    let c = groups.len();
    let total = ((fraction * n as f64).ceil() as usize).clamp(c, n);
    let mut quota: Vec<usize> = vec![1; c];
    let spare = total - c;
    let ideal: Vec<f64> = groups
        .iter()
        .map(|g| spare as f64 * (g.len() - 1) as f64 / (n - c).max(1) as f64)
        .collect();
    let mut given = 0;
    for (q, &x) in quota.iter_mut().zip(&ideal) {
        *q += x.floor() as usize;
        given += x.floor() as usize;
    }
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| (ideal[b] - ideal[b].floor()).total_cmp(&(ideal[a] - ideal[a].floor())).then(a.cmp(&b)));
    for &k in order.iter().cycle().take(4 * c) {
        if given == spare {
            break;
        }
        if quota[k] < groups[k].len() {
            quota[k] += 1;
            given += 1;
        }
    }
    let mut out = Vec::with_capacity(total);
    for (k, g) in groups.into_iter().enumerate() {
        let mut g = g;
        g.shuffle(&mut rng::stream(&[seed, 0x57A, k as u64]));
        out.extend_from_slice(&g[..quota[k]]);
    }
    out.sort_unstable();
    Ok(out)
}

/// `shots` rows per class drawn from `pool`.
pub fn shot_sample(ds: &Dataset, pool: &[usize], shots: usize, seed: u64) -> Result<Vec<usize>> {
    if shots == 0 {
        return Err(Error::InvalidArgument("shots must be at least 1".into()));
    }
    let groups = by_class(ds, pool)?;
    let mut out = Vec::new();
    for (k, mut g) in groups.into_iter().enumerate() {
        if g.len() < shots {
            return Err(Error::InsufficientShots {
                class: class_name(ds, k),
                have: g.len(),
                need: shots,
            });
        }
        g.shuffle(&mut rng::stream(&[seed, 0x5407, k as u64]));
        out.extend_from_slice(&g[..shots]);
    }
    out.sort_unstable();
    Ok(out)
}

/// Scores `labeled` rows as the classifier's training set against every
/// target domain in `targets`.
fn score(ds: &Dataset, feats: &Tensor<f32>, labeled: &[usize], targets: &[usize], probe: Probe) -> Result<(BTreeMap<String, f64>, BTreeMap<String, usize>, f64, f64)> {
    let labels: Vec<usize> = labeled.iter().map(|&i| class_of(ds, i)).collect::<Result<_>>()?;
    let train = gather(feats, labeled);
    let classify: Box<dyn Fn(usize) -> Result<usize>> = match probe {
        Probe::Knn { k } => {
            let index = EmbeddingIndex::new(
                &train,
                labels.clone(),
                labeled.iter().map(|&i| ds.sample(i).domain_id).collect(),
                labeled.iter().map(|&i| ds.sample(i).sample_id.clone()).collect(),
            )?;
            Box::new(move |i| knn_classify_excluding(&index, feats.row(i), k, Some(&ds.sample(i).sample_id)))
        }
        Probe::Linear => {
            let p = LinearProbe::fit(&train, &labels, &LinearProbeConfig::default())?;
            Box::new(move |i| Ok(p.predict(feats.row(i))))
        }
    };
    let (mut per, mut counts) = (BTreeMap::new(), BTreeMap::new());
    let (mut hits, mut total) = (0usize, 0usize);
    for &d in targets {
        let rows = ds.domain_indices(d);
        let mut h = 0;
        for &i in &rows {
            if classify(i)? == class_of(ds, i)? {
                h += 1;
            }
        }
        let name = ds.catalog().domains[d].clone();
        per.insert(name.clone(), if rows.is_empty() { 0.0 } else { h as f64 / rows.len() as f64 });
        counts.insert(name, rows.len());
        hits += h;
        total += rows.len();
    }
    let overall = if total == 0 { 0.0 } else { hits as f64 / total as f64 };
    let average = if per.is_empty() { 0.0 } else { per.values().sum::<f64>() / per.len() as f64 };
    Ok((per, counts, overall, average))
}

fn domain_ids(ds: &Dataset, names: &[String]) -> Result<Vec<usize>> {
    names
        .iter()
        .map(|n| {
            ds.catalog()
                .domain_index(n)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown domain `{n}`; have {:?}", ds.catalog().domains)))
        })
        .collect()
}

/// Label-fraction protocol: a stratified labeled subset of the source
/// domains fits the probe, each target domain is scored separately. A
/// query's own sample is never its own neighbour.
pub fn eval_udg(
    backbone: &BackboneExport,
    ds: &Dataset,
    sources: &[String],
    targets: &[String],
    label_fraction: f64,
    probe: Probe,
    seed: u64,
) -> Result<EvalReport> {
    let feats = dataset_features(backbone, ds)?;
    eval_udg_with_features(ds, &feats, sources, targets, label_fraction, probe, seed)
}

pub fn eval_udg_with_features(
    ds: &Dataset,
    feats: &Tensor<f32>,
    sources: &[String],
    targets: &[String],
    label_fraction: f64,
    probe: Probe,
    seed: u64,
) -> Result<EvalReport> {
    let src = domain_ids(ds, sources)?;
    let tgt = domain_ids(ds, targets)?;
    let pool: Vec<usize> = src.iter().flat_map(|&d| ds.domain_indices(d)).collect();
    let labeled = stratified_sample(ds, &pool, label_fraction, seed)?;
    let (per, counts, overall, average) = score(ds, feats, &labeled, &tgt, probe)?;
    Ok(EvalReport {
        protocol: "udg".into(),
        probe,
        label_fraction: Some(label_fraction),
        shots: None,
        seed,
        source_domains: sources.to_vec(),
        per_domain_accuracy: per,
        per_domain_count: counts,
        overall,
        average,
        labeled_sample_ids: labeled.iter().map(|&i| ds.sample(i).sample_id.clone()).collect(),
    })
}

/// Few-shot protocol: `shots` labeled source images per class, scored on
/// the target domain.
pub fn eval_fuda(backbone: &BackboneExport, ds: &Dataset, source: &str, target: &str, shots: usize, probe: Probe, seed: u64) -> Result<EvalReport> {
    let feats = dataset_features(backbone, ds)?;
    eval_fuda_with_features(ds, &feats, source, target, shots, probe, seed)
}

pub fn eval_fuda_with_features(
    ds: &Dataset,
    feats: &Tensor<f32>,
    source: &str,
    target: &str,
    shots: usize,
    probe: Probe,
    seed: u64,
) -> Result<EvalReport> {
    let src = domain_ids(ds, &[source.to_string()])?[0];
    let tgt = domain_ids(ds, &[target.to_string()])?[0];
    let labeled = shot_sample(ds, &ds.domain_indices(src), shots, seed)?;
    let (per, counts, overall, average) = score(ds, feats, &labeled, &[tgt], probe)?;
    Ok(EvalReport {
        protocol: "fuda".into(),
        probe,
        label_fraction: None,
        shots: Some(shots),
        seed,
        source_domains: vec![source.to_string()],
        per_domain_accuracy: per,
        per_domain_count: counts,
        overall,
        average,
        labeled_sample_ids: labeled.iter().map(|&i| ds.sample(i).sample_id.clone()).collect(),
    })
}

/// Held-out accuracy of a linear probe predicting the domain from
/// `features`, on a class-agnostic 50/50 split stratified by domain.
pub fn domain_probe_accuracy(features: &Tensor<f32>, domains: &[usize], seed: u64) -> Result<f64> {
    let n_domains = domains.iter().max().map_or(0, |m| m + 1);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for d in 0..n_domains {
        let mut rows: Vec<usize> = (0..domains.len()).filter(|&i| domains[i] == d).collect();
        rows.shuffle(&mut rng::stream(&[seed, 0xD0, d as u64]));
        let half = rows.len() / 2;
        train.extend_from_slice(&rows[..half]);
        test.extend_from_slice(&rows[half..]);
    }
    let tl: Vec<usize> = train.iter().map(|&i| domains[i]).collect();
    let el: Vec<usize> = test.iter().map(|&i| domains[i]).collect();
    linear_probe(&gather(features, &train), &tl, &gather(features, &test), &el)
}

/// Neighbour rows per domain for a retrieval grid.
pub fn retrieval_rows(index: &EmbeddingIndex, query: &[f32], n_domains: usize, top_k: usize) -> Vec<Vec<usize>> {
    (0..n_domains)
        .map(|d| {
            index
                .ranked(query, None, |i| index.domain(i) == d)
                .into_iter()
                .take(top_k)
                .map(|(i, _)| i)
                .collect()
        })
        .collect()
}

/// Renders one row per domain: the query leftmost, then its `top_k`
/// nearest neighbours from that domain. `images` is aligned with `index`.
pub fn retrieval_grid(
    backbone: &BackboneExport,
    query: &Image,
    index: &EmbeddingIndex,
    images: &[&Image],
    n_domains: usize,
    top_k: usize,
    out_path: &Path,
) -> Result<Vec<Vec<usize>>> {
    assert_eq!(images.len(), index.len(), "one image per index row");
    let q = encode_all(&backbone.arch, &backbone.params, &[query], 1)?;
    let rows = retrieval_rows(index, q.row(0), n_domains, top_k);
    let size = query.height();
    let pad = 2;
    let cell = size + pad;
    let (gw, gh) = ((top_k + 1) * cell + pad, n_domains * cell + pad);
    let mut grid = Image::filled(3, gh, gw, 1.0);
    let mut blit = |img: &Image, r: usize, c: usize| {
        let img = if img.height() == size && img.width() == size { img.clone() } else { img.resized(size, size) };
        for ch in 0..3 {
            for y in 0..size {
                for x in 0..size {
                    grid.set(ch, pad + r * cell + y, pad + c * cell + x, img.get(ch, y, x));
                }
            }
        }
    };
    for (r, row) in rows.iter().enumerate() {
        blit(query, r, 0);
        for (c, &i) in row.iter().enumerate() {
            blit(images[i], r, c + 1);
        }
    }
    grid.save_png(out_path)?;
    Ok(rows)
}
