#![allow(dead_code)]

pub mod checks;

use std::sync::Arc;

use edgebridge::bridge::{BridgeMode, HedOracle};
use edgebridge::data::{make_batch, render_synthetic, Batch, BatchPlan, Dataset};
use edgebridge::rng;
use edgebridge::train::{TrainConfig, TrainState};
use edgebridge_tensor::ParamSet;
use rand::Rng;

/// 8×8 images, 2 domains, p = 4, two-layer nets everywhere.
pub fn mini_config(bridge: BridgeMode) -> TrainConfig {
    TrainConfig {
        batch_size: 6,
        max_steps: 20,
        base_lr: 0.05,
        ema_m: 0.9,
        cap_max: 4096,
        use_bridge: bridge,
        mapper_widths: vec![2, 3],
        mapper_convs: vec![1, 1],
        backbone: "resnet".into(),
        backbone_widths: vec![4, 6],
        stem_stride: 2,
        norm_groups: 2,
        proj_hidden: 5,
        proj_dim: 4,
        adv_hidden: vec![6],
        image_size: 8,
        synth_domains: 2,
        synth_classes: 3,
        synth_per_class: 4,
        ..TrainConfig::default()
    }
}

/// A slightly larger but still fast config for multi-step behaviour.
pub fn small_config(bridge: BridgeMode) -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        image_size: 16,
        synth_domains: 3,
        synth_classes: 3,
        synth_per_class: 4,
        backbone_widths: vec![4, 8],
        proj_hidden: 8,
        proj_dim: 6,
        adv_hidden: vec![8, 8],
        ..mini_config(bridge)
    }
}

pub fn dataset(cfg: &TrainConfig) -> Arc<Dataset> {
    Arc::new(render_synthetic(&cfg.synthetic()).unwrap())
}

pub fn edge_net(cfg: &TrainConfig) -> HedOracle {
    let arch = cfg.mapper_arch();
    HedOracle::new(arch.clone(), arch.init(&mut rng::stream(&[99])))
}

pub fn oracle_for(cfg: &TrainConfig) -> Option<HedOracle> {
    edgebridge::train::needs_edge_net(cfg).then(|| edge_net(cfg))
}

pub fn batch(cfg: &TrainConfig, ds: &Dataset, step: usize) -> Batch {
    let plan = BatchPlan::new(ds.len(), cfg.batch_size, cfg.seed);
    make_batch(ds, &plan, &cfg.augment(), step, 1)
}

fn group_mut<'a>(st: &'a mut TrainState<f64>, name: &str) -> &'a mut ParamSet<f64> {
    st.param_group_mut(name).unwrap()
}

/// Worst relative error of the tape gradient of L_f against central
/// differences on `samples` parameters, with the momentum keys held fixed.
pub fn fd_worst_rel_err(cfg: TrainConfig, samples: usize, seed: u64) -> f64 {
    let ds = dataset(&cfg);
    let mut st = TrainState::<f64>::new(
        cfg.clone(),
        ds.catalog().domains.clone(),
        ds.catalog().per_domain_counts.clone(),
        oracle_for(&cfg),
        20,
    )
    .unwrap();
    // Fill the queues so the negatives term is live.
    for s in 0..3 {
        st.train_step(&batch(&cfg, &ds, s)).unwrap();
    }
    let b = batch(&cfg, &ds, 3);
    let analytic = st.objective_gradients(&b).unwrap();
    let keys = st.keys(&b).unwrap();
    let mut r = edgebridge::rng::stream(&[seed]);
    // Round-robin over parameter groups so every group is exercised.
    let groups: Vec<Vec<(String, usize, usize)>> = analytic
        .iter()
        .filter(|(name, _)| name != "adversary")
        .map(|(name, gs)| {
            gs.iter()
                .enumerate()
                .flat_map(|(ti, g)| {
                    let n = g.as_ref().map_or(0, |t| t.data().len());
                    (0..n).map(move |e| (name.clone(), ti, e))
                })
                .collect()
        })
        .collect();
    let mut worst: f64 = 0.0;
    for i in 0..samples {
        let group = &groups[i % groups.len()];
        let (name, ti, e) = group[r.random_range(0..group.len())].clone();
        let a = analytic.iter().find(|(n, _)| *n == name).unwrap().1[ti].as_ref().unwrap().data()[e];
        let h = 1e-5;
        let orig = group_mut(&mut st, &name).tensors()[ti].data()[e];
        group_mut(&mut st, &name).tensors_mut()[ti].data_mut()[e] = orig + h;
        let up = st.objective_value_with_keys(&b, &keys).unwrap();
        group_mut(&mut st, &name).tensors_mut()[ti].data_mut()[e] = orig - h;
        let down = st.objective_value_with_keys(&b, &keys).unwrap();
        group_mut(&mut st, &name).tensors_mut()[ti].data_mut()[e] = orig;
        let numeric = (up - down) / (2.0 * h);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    worst
}
