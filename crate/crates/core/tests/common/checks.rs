//! Checks shared by the focused test files and the acceptance runner. Each
//! one panics on a violation and returns a short summary otherwise.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

use edgebridge::bridge::{bridge_loss, bridge_loss_graph, bridge_targets, BridgeLossConfig, BridgeMode, BridgeVariant};
use edgebridge::contrastive::{info_nce, queue_capacity, QueueBank};
use edgebridge::data::{make_batch, BatchPlan};
use edgebridge::eval::{dataset_features, eval_fuda, eval_udg, knn_classify, linear_probe, EmbeddingIndex, Probe};
use edgebridge::train::{self, BackboneExport, Phase, RunPaths, TrainConfig, TrainState};
use edgebridge::encoder::EncoderState;
use edgebridge::Error;
use edgebridge_tensor::{Graph, ParamSet, Tensor};
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};

use super::*;

fn unit(rng: &mut StdRng, dim: usize) -> Vec<f32> {
    let v: Vec<f64> = (0..dim).map(|_| rng.random::<f64>() - 0.5 + 1e-3).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| (x / n) as f32).collect()
}

type Row = (Vec<f32>, String, usize);

/// Bounded FIFO reference.
struct Model {
    cap: usize,
    rows: VecDeque<Row>,
}

impl Model {
    fn push(&mut self, r: Row) {
        if self.rows.len() == self.cap {
            self.rows.pop_front();
        }
        self.rows.push_back(r);
    }
}

/// Random enqueues into a queue bank against a FIFO model: order, eviction,
/// capacity, isolation and the own-cached mask after every step.
pub fn queue_fuzz(multi: bool, seed: u64, steps: usize) -> String {
    let mut rng = StdRng::seed_from_u64(seed);
    let dim = 5;
    let sizes: Vec<usize> = (0..4).map(|_| rng.random_range(2..30)).collect();
    let cap_max = rng.random_range(8..50);
    let mut bank = QueueBank::new(&sizes, cap_max, dim, multi);
    let mut models: Vec<Model> = if multi {
        sizes.iter().map(|&n| Model { cap: queue_capacity(cap_max, n), rows: VecDeque::new() }).collect()
    } else {
        vec![Model { cap: queue_capacity(cap_max, sizes.iter().sum()), rows: VecDeque::new() }]
    };
    for (q, m) in bank.queues().iter().zip(&models) {
        assert_eq!(q.capacity(), m.cap);
    }
    let mut evictions = 0;
    for step in 0..steps {
        let batch = rng.random_range(1..12);
        let mut ids = Vec::new();
        for _ in 0..batch {
            let d = rng.random_range(0..sizes.len());
            let id = format!("d{d}/{}", rng.random_range(0..sizes[d]));
            let (b, r) = (unit(&mut rng, dim), unit(&mut rng, dim));
            let qi = bank.queue_index(d);
            bank.queue_for_mut(d).enqueue_pair(&b, &r, &id, d).unwrap();
            evictions += usize::from(models[qi].rows.len() == models[qi].cap);
            models[qi].push((b, id.clone(), d));
            evictions += usize::from(models[qi].rows.len() == models[qi].cap);
            models[qi].push((r, id.clone(), d));
            ids.push((d, id));
        }
        if multi {
            // A foreign row is refused and leaves the queue untouched.
            let d = rng.random_range(0..sizes.len());
            let other = (d + 1 + rng.random_range(0..sizes.len() - 1)) % sizes.len();
            let before = bank.queues()[d].clone();
            let v = unit(&mut rng, dim);
            let err = bank.queue_for_mut(d).enqueue_pair(&v, &v, "intruder", other).unwrap_err();
            assert!(matches!(err, Error::QueueIsolation { .. }), "step {step}");
            assert_eq!(bank.queues()[d], before);
        }
        for (qi, (q, m)) in bank.queues().iter().zip(&models).enumerate() {
            assert_eq!(q.fill(), m.rows.len(), "step {step} queue {qi}");
            let rows: Vec<Vec<f32>> = q.rows().into_iter().map(<[f32]>::to_vec).collect();
            let want: Vec<Vec<f32>> = m.rows.iter().map(|r| r.0.clone()).collect();
            assert_eq!(rows, want, "step {step} queue {qi} order");
            let want_ids: Vec<&str> = m.rows.iter().map(|r| r.1.as_str()).collect();
            assert_eq!(q.row_source_ids(), want_ids);
            if multi {
                assert!(q.row_source_domains().iter().all(|&d| d == qi));
            }
        }
        for (d, id) in &ids {
            let q = bank.queue_for(*d);
            let m = &models[bank.queue_index(*d)];
            let mask = q.exclusion_mask(&[id.as_str()], true);
            let want: Vec<bool> = m.rows.iter().map(|r| r.1 != *id).collect();
            assert_eq!(mask, want, "step {step}");
            assert!(q.exclusion_mask(&[id.as_str()], false).iter().all(|&k| k));
        }
    }
    assert!(evictions > 0, "the fuzz never filled a queue");
    format!("{steps} steps, {} queue(s), {evictions} evictions", models.len())
}

/// Through the real training step: each queue holds exactly the model's
/// source ids, two per batch item of its domain, in batch order.
pub fn training_queue_fuzz(steps: usize) -> String {
    let cfg = TrainConfig {
        cap_max: 12,
        ..mini_config(BridgeMode::Learned)
    };
    let ds = dataset(&cfg);
    let mut st = TrainState::<f32>::new(
        cfg.clone(),
        ds.catalog().domains.clone(),
        ds.catalog().per_domain_counts.clone(),
        oracle_for(&cfg),
        steps,
    )
    .unwrap();
    let caps: Vec<usize> = ds.catalog().per_domain_counts.iter().map(|&n| queue_capacity(cfg.cap_max, n)).collect();
    let mut models: Vec<VecDeque<String>> = vec![VecDeque::new(); caps.len()];
    let mut rng = StdRng::seed_from_u64(3);
    for step in 0..steps {
        // Randomised batch sizes and orders, drawn from a per-step plan.
        let size = rng.random_range(2..=cfg.batch_size);
        let plan = BatchPlan::new(ds.len(), size, rng.random());
        let b = make_batch(&ds, &plan, &cfg.augment(), step, 1);
        for p in &b.pairs {
            for _ in 0..2 {
                let m = &mut models[p.domain_id];
                if m.len() == caps[p.domain_id] {
                    m.pop_front();
                }
                m.push_back(p.sample_id.clone());
            }
        }
        st.train_step(&b).unwrap();
        for (d, q) in st.queues.queues().iter().enumerate() {
            assert_eq!(q.capacity(), caps[d]);
            assert_eq!(q.row_source_ids(), models[d].iter().map(String::as_str).collect::<Vec<_>>(), "step {step} queue {d}");
            assert!(q.row_source_domains().iter().all(|&x| x == d));
        }
    }
    format!("{steps} training steps, capacities {caps:?}")
}

fn snapshot(st: &TrainState<f32>, names: &[&str]) -> Vec<ParamSet<f32>> {
    st.param_groups()
        .into_iter()
        .filter(|(n, _)| names.iter().any(|p| n.starts_with(p)))
        .map(|(_, p)| p.clone())
        .collect()
}

/// Phase 1 moves only the discriminator, phase 2 only {B, P, Ψ}, checked
/// bit for bit after every step.
pub fn phase_isolation(steps: usize) -> String {
    let cfg = small_config(BridgeMode::Learned);
    let ds = dataset(&cfg);
    let mut st = TrainState::<f32>::new(
        cfg.clone(),
        ds.catalog().domains.clone(),
        ds.catalog().per_domain_counts.clone(),
        oracle_for(&cfg),
        steps,
    )
    .unwrap();
    let generator = ["backbone", "projector", "mapper."];
    for s in 0..steps {
        let gen_before = snapshot(&st, &generator);
        let adv_before = snapshot(&st, &["adversary"]);
        let mut adv_after_phase1 = None;
        let mut violations = Vec::new();
        st.train_step_observed(&batch(&cfg, &ds, s), &mut |phase, state| match phase {
            Phase::Discriminator => {
                if snapshot(state, &generator) != gen_before {
                    violations.push("phase 1 moved the generator");
                }
                let a = snapshot(state, &["adversary"]);
                if a == adv_before {
                    violations.push("phase 1 left the discriminator unchanged");
                }
                adv_after_phase1 = Some(a);
            }
            Phase::Generator => {
                if Some(snapshot(state, &["adversary"])) != adv_after_phase1 {
                    violations.push("phase 2 moved the discriminator");
                }
                if snapshot(state, &generator) == gen_before {
                    violations.push("phase 2 left the generator unchanged");
                }
            }
        })
        .unwrap();
        assert!(violations.is_empty(), "step {s}: {violations:?}");
    }
    format!("{steps} steps, both phases isolated")
}

/// Identical 20-step traces for one seed, a different trace for another.
pub fn determinism() -> String {
    let cfg = small_config(BridgeMode::Learned);
    let ds = dataset(&cfg);
    let run = |cfg: &TrainConfig| {
        let out = train::train(cfg, ds.clone(), oracle_for(cfg), &RunPaths::default()).unwrap();
        out.metrics.iter().map(|m| (m.l_cont, m.l_omega, m.l_adv, m.l_f)).collect::<Vec<_>>()
    };
    let a = run(&cfg);
    assert_eq!(a.len(), 20);
    assert_eq!(a, run(&cfg));
    let other = run(&TrainConfig { seed: 1, ..cfg.clone() });
    assert_ne!(a.last(), other.last());
    "20-step trace repeats exactly".into()
}

/// Resuming from the step-10 checkpoint reproduces steps 10..20 and the
/// final state of an uninterrupted run.
pub fn resumption() -> String {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        checkpoint_every: 10,
        ..small_config(BridgeMode::Learned)
    };
    let ds = dataset(&cfg);
    let full_dir = dir.path().join("full");
    let full = train::train(
        &cfg,
        ds.clone(),
        oracle_for(&cfg),
        &RunPaths {
            out: Some(full_dir.clone()),
            resume: None,
        },
    )
    .unwrap();
    let resumed = train::train(
        &cfg,
        ds,
        None,
        &RunPaths {
            out: Some(dir.path().join("resumed")),
            resume: Some(full_dir.join("checkpoint_000010.ebw")),
        },
    )
    .unwrap();
    assert_eq!(resumed.metrics.len(), 10);
    assert_eq!(resumed.metrics, full.metrics[10..]);
    assert_eq!(resumed.state.to_store(), full.state.to_store());
    "resume at 10 matches the uninterrupted run at 20".into()
}

/// Trains on three styles, then scores the fourth from the exported
/// backbone alone and from the in-memory state: every number must agree.
pub fn unseen_domain_export() -> String {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        synth_domains: 4,
        max_steps: 4,
        train_domains: vec!["photo".into(), "clipart".into(), "noisy-gray".into()],
        ..small_config(BridgeMode::Learned)
    };
    let full = dataset(&cfg);
    let held = vec!["sketch".to_string()];
    let train_ds = Arc::new(train::training_split(&full, &cfg).unwrap());
    let out = train::train(
        &cfg,
        train_ds,
        oracle_for(&cfg),
        &RunPaths {
            out: Some(dir.path().to_path_buf()),
            resume: None,
        },
    )
    .unwrap();
    // Mappers exist only for the three training styles.
    assert_eq!(out.state.mappers.len(), 3);

    let path = dir.path().join(train::BACKBONE_FILE);
    let in_memory = BackboneExport::from_state(&out.state);
    let loaded = BackboneExport::load(&path).unwrap();
    assert_eq!(loaded.params, in_memory.params);
    let store = edgebridge::store::Store::load(&path).unwrap();
    assert!(store.names().all(|n| n.starts_with("backbone")), "{:?}", store.names().collect::<Vec<_>>());

    assert_eq!(dataset_features(&loaded, &full).unwrap(), dataset_features(&in_memory, &full).unwrap());
    let mut n = 0;
    for probe in [Probe::Knn { k: 5 }, Probe::Linear] {
        let a = eval_udg(&in_memory, &full, &cfg.train_domains, &held, 0.25, probe, 3).unwrap();
        let b = eval_udg(&loaded, &full, &cfg.train_domains, &held, 0.25, probe, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.per_domain_accuracy.keys().collect::<Vec<_>>(), vec!["sketch"]);
        n += 1;
    }
    for source in &cfg.train_domains {
        let a = eval_fuda(&in_memory, &full, source, "sketch", 1, Probe::Knn { k: 1 }, 0).unwrap();
        assert_eq!(a, eval_fuda(&loaded, &full, source, "sketch", 1, Probe::Knn { k: 1 }, 0).unwrap());
        n += 1;
    }
    format!("{n} reports on sketch identical from a backbone-only file with 3 mappers")
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Exhaustive scan: sort every row, vote over the top k, break count ties by
/// smaller summed distance then lower class.
pub fn knn_oracle(rows: &[Vec<f32>], labels: &[usize], skip: Option<usize>, q: &[f32], k: usize) -> usize {
    let mut scored: Vec<(f64, usize)> = (0..rows.len())
        .filter(|&i| Some(i) != skip)
        .map(|i| (cosine(q, &rows[i]), i))
        .collect();
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let k = k.min(scored.len());
    let mut tally: BTreeMap<usize, (usize, f64)> = BTreeMap::new();
    for &(s, i) in &scored[..k] {
        let t = tally.entry(labels[i]).or_default();
        t.0 += 1;
        t.1 += 1.0 - s;
    }
    let top = tally.values().map(|t| t.0).max().unwrap();
    let mut best: Option<(usize, f64)> = None;
    for (&c, &(n, dist)) in &tally {
        if n == top && best.is_none_or(|(_, bd)| dist < bd - 1e-12) {
            best = Some((c, dist));
        }
    }
    best.unwrap().0
}

pub fn uniform_rows(rng: &mut StdRng, n: usize, d: usize) -> Vec<f32> {
    (0..n * d).map(|_| rng.random::<f32>() * 2.0 - 1.0).collect()
}

pub fn knn_vs_oracle(queries: usize) -> String {
    let mut rng = StdRng::seed_from_u64(11);
    let (n, d) = (80, 6);
    let data = uniform_rows(&mut rng, n, d);
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..5)).collect();
    let feats = Tensor::new(&[n, d], data.clone());
    let index = EmbeddingIndex::new(&feats, labels.clone(), vec![0; n], (0..n).map(|i| i.to_string()).collect()).unwrap();
    let rows: Vec<Vec<f32>> = data.chunks(d).map(<[f32]>::to_vec).collect();
    for _ in 0..queries {
        let q: Vec<f32> = uniform_rows(&mut rng, 1, d);
        let k = rng.random_range(1..=9);
        assert_eq!(knn_classify(&index, &q, k).unwrap(), knn_oracle(&rows, &labels, None, &q, k), "k = {k}");
    }
    // k beyond the index size falls back to every row.
    let q = uniform_rows(&mut rng, 1, d);
    assert_eq!(knn_classify(&index, &q, 500).unwrap(), knn_oracle(&rows, &labels, None, &q, n));
    assert!(knn_classify(&index, &q, 0).is_err());
    format!("{queries} queries agree, k in 1..=9")
}

/// `(separable accuracy, permuted-label accuracy)` with 4 classes.
pub fn linear_probe_toys() -> (f64, f64) {
    let mut rng = StdRng::seed_from_u64(5);
    let (classes, d) = (4, 8);
    let blob = |rng: &mut StdRng, n: usize| {
        let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
        let data = labels
            .iter()
            .flat_map(|&c| (0..d).map(move |j| if j == c { 3.0 } else { 0.0 }).collect::<Vec<f32>>())
            .zip(uniform_rows(rng, n, d))
            .map(|(a, e)| a + 0.3 * e)
            .collect();
        (Tensor::new(&[n, d], data), labels)
    };
    let (tx, ty) = blob(&mut rng, 200);
    let (ex, ey) = blob(&mut rng, 400);
    let separable = linear_probe(&tx, &ty, &ex, &ey).unwrap();

    // Labels independent of the features: held-out accuracy sits at chance.
    let (n_train, n_test) = (400, 2000);
    let rx = Tensor::new(&[n_train, d], uniform_rows(&mut rng, n_train, d));
    let mut ry: Vec<usize> = (0..n_train).map(|i| i % classes).collect();
    ry.shuffle(&mut rng);
    let sx = Tensor::new(&[n_test, d], uniform_rows(&mut rng, n_test, d));
    let mut sy: Vec<usize> = (0..n_test).map(|i| i % classes).collect();
    sy.shuffle(&mut rng);
    (separable, linear_probe(&rx, &ry, &sx, &sy).unwrap())
}

fn gaussian_unit(rng: &mut StdRng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// `info_nce` against the softmax cross-entropy written out term by term,
/// over random dimensions, queue lengths and temperatures.
pub fn info_nce_vs_brute_force(instances: usize) -> String {
    let mut rng = StdRng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let d = rng.random_range(2..64);
        let n = rng.random_range(0..256);
        let tau = rng.random_range(0.03..1.0);
        let q = gaussian_unit(&mut rng, d);
        let kp = gaussian_unit(&mut rng, d);
        let negs: Vec<Vec<f64>> = (0..n).map(|_| gaussian_unit(&mut rng, d)).collect();

        let dot = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(x, y)| x * y).sum() };
        let mut logits = vec![dot(&q, &kp) / tau];
        logits.extend(negs.iter().map(|k| dot(&q, k) / tau));
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        let want = -((logits[0] - m).exp() / z).ln();

        let refs: Vec<&[f64]> = negs.iter().map(Vec::as_slice).collect();
        let got = info_nce(&q, &kp, &refs, tau).unwrap();
        worst = worst.max((got - want).abs());
    }
    assert!(worst <= 1e-6, "worst abs error {worst:e}");
    format!("{instances} instances, worst abs error {worst:.1e}")
}

/// k EMA steps toward a fixed θ against `m^k θ₀ + (1 − m^k) θ`, plus the
/// exact m = 1 and m = 0 endpoints.
pub fn ema_algebra() -> String {
    let cfg = TrainConfig {
        backbone: "conv".into(),
        backbone_widths: vec![4, 4],
        norm_groups: 2,
        proj_hidden: 4,
        proj_dim: 3,
        ..TrainConfig::default()
    }
    .encoder();
    let mut rng = StdRng::seed_from_u64(2);
    let fresh = |rng: &mut StdRng| {
        let mut enc: EncoderState<f64> = EncoderState::new(cfg.clone(), rng);
        // Decouple the momentum copy from θ.
        let other: EncoderState<f64> = EncoderState::new(cfg.clone(), rng);
        enc.momentum_backbone = other.backbone;
        enc.momentum_projector = other.projector;
        enc
    };
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for &m in &[0.0, 0.3, 0.9, 0.99, 0.999, 1.0] {
        for k in [1, 7, 30] {
            let mut enc = fresh(&mut rng);
            let (theta, theta0) = (enc.backbone.clone(), enc.momentum_backbone.clone());
            for _ in 0..k {
                enc.ema_update(m);
            }
            let mk = f64::powi(m, k);
            for ((got, t0), t) in enc.momentum_backbone.tensors().iter().zip(theta0.tensors()).zip(theta.tensors()) {
                for ((&g, &a), &b) in got.data().iter().zip(t0.data()).zip(t.data()) {
                    worst = worst.max((g - (mk * a + (1.0 - mk) * b)).abs());
                }
            }
            cases += 1;
        }
    }
    assert!(worst < 1e-6, "closed form off by {worst:e}");

    let mut enc = fresh(&mut rng);
    let before = (enc.momentum_backbone.clone(), enc.momentum_projector.clone());
    enc.ema_update(1.0);
    assert_eq!((enc.momentum_backbone.clone(), enc.momentum_projector.clone()), before, "m = 1 must freeze");
    enc.ema_update(0.0);
    assert_eq!(enc.momentum_backbone, enc.backbone, "m = 0 must copy");
    assert_eq!(enc.momentum_projector, enc.projector, "m = 0 must copy");
    format!("{cases} (m, k) cases within {worst:.1e}, endpoints exact")
}

/// A mapper output equal to the variant's target scores exactly zero, through
/// both the scalar loss and the batched graph used in training.
pub fn bridge_loss_zero() -> String {
    let cfg = small_config(BridgeMode::Learned);
    let ds = dataset(&cfg);
    let oracle = edge_net(&cfg);
    let views: Vec<&edgebridge::image::Image> = (0..ds.catalog().domains.len())
        .map(|d| &ds.sample(ds.domain_indices(d)[0]).image)
        .collect();
    for variant in BridgeVariant::ALL {
        let lc = BridgeLossConfig {
            variant,
            ..cfg.bridge_loss()
        };
        let targets = bridge_targets(&views, &lc, Some(&oracle)).unwrap();
        for (v, t) in views.iter().zip(&targets) {
            assert_eq!(bridge_loss(t, v, &lc, Some(&oracle)).unwrap(), 0.0, "{variant:?}");
        }
        let (h, w) = (targets[0].height(), targets[0].width());
        let mut g = Graph::<f32>::new();
        let data = targets.iter().flat_map(|t| t.values().to_vec()).collect();
        let out = g.constant(Tensor::new(&[targets.len(), 1, h, w], data));
        let refs: Vec<&_> = targets.iter().collect();
        let l = bridge_loss_graph(&mut g, out, &refs, variant);
        assert_eq!(g.value(l).item(), 0.0, "{variant:?} graph");
    }
    format!("{} variants exactly zero on {} views", BridgeVariant::ALL.len(), views.len())
}
