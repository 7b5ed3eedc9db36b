//! Whole training runs: data, edge network, loop, artifacts.

use std::fs::OpenOptions;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::info;

use super::config::TrainConfig;
use super::state::{StepMetrics, TrainState};
use crate::bridge::{distill_from_canny, BridgeMode, BridgeVariant, HedOracle};
use crate::data::{ingest_directory, render_synthetic, BatchPlan, BatchStream, Dataset};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng;

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.ebw";
pub const BACKBONE_FILE: &str = "backbone.ebw";
pub const EDGE_NET_FILE: &str = "edge_net.ebw";
const DISTILL_IMAGES: usize = 512;
const DISTILL_BATCH: usize = 16;
/// Blur used for the distillation targets; wider than the L_Ω target blur
/// so the network learns soft, thick contours.
const DISTILL_SIGMA: f64 = 1.0;

/// The full corpus named by the config: a directory tree or the synthetic set.
pub fn load_dataset(cfg: &TrainConfig) -> Result<Dataset> {
    if cfg.data_root.is_empty() {
        render_synthetic(&cfg.synthetic())
    } else {
        ingest_directory(Path::new(&cfg.data_root), cfg.image_size)
    }
}

/// The domains training may see.
pub fn training_split(ds: &Dataset, cfg: &TrainConfig) -> Result<Dataset> {
    if cfg.train_domains.is_empty() {
        Ok(ds.clone())
    } else {
        ds.subset(&cfg.train_domains)
    }
}

pub fn total_steps(cfg: &TrainConfig, n_samples: usize) -> usize {
    if cfg.max_steps > 0 {
        cfg.max_steps
    } else {
        cfg.epochs * BatchPlan::new(n_samples, cfg.batch_size, cfg.seed).steps_per_epoch()
    }
}

/// Whether the configured bridge needs a pretrained edge network.
pub fn needs_edge_net(cfg: &TrainConfig) -> bool {
    matches!(cfg.use_bridge, BridgeMode::HedFixed | BridgeMode::Learned)
        || (cfg.use_bridge.is_learned() && cfg.bridge_variant == BridgeVariant::L2Hed)
}

/// Loads the configured edge weights, or distills a stand-in from Canny maps
/// of the training images when no file is named.
pub fn resolve_edge_net(cfg: &TrainConfig, train: &Dataset) -> Result<Option<HedOracle>> {
    if !needs_edge_net(cfg) {
        return Ok(None);
    }
    let path = if !cfg.mapper_init.is_empty() && cfg.use_bridge == BridgeMode::Learned {
        &cfg.mapper_init
    } else {
        &cfg.hed_weights
    };
    if !path.is_empty() {
        return HedOracle::load(Path::new(path)).map(Some);
    }
    Ok(Some(distill_edge_net(cfg, train)?))
}

pub fn distill_edge_net(cfg: &TrainConfig, train: &Dataset) -> Result<HedOracle> {
    let mut idx: Vec<usize> = (0..train.len()).collect();
    rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), &mut rng::stream(&[cfg.seed, 0xD15, 2]));
    idx.truncate(DISTILL_IMAGES);
    let images: Vec<&Image> = idx.iter().map(|&i| &train.sample(i).image).collect();
    let arch = cfg.mapper_arch();
    let loss_cfg = crate::bridge::BridgeLossConfig {
        blur_sigma: DISTILL_SIGMA,
        ..cfg.bridge_loss()
    };
    info!("distilling edge network from Canny maps of {} images", images.len());
    let params = distill_from_canny(
        &arch,
        &images,
        &loss_cfg,
        cfg.edge_distill_steps,
        DISTILL_BATCH,
        cfg.edge_distill_lr,
        cfg.seed,
    )?;
    Ok(HedOracle::new(arch, params))
}

/// Output of [`train`].
pub struct RunOutcome {
    pub state: TrainState<f32>,
    pub metrics: Vec<StepMetrics>,
}

/// Where a run writes its artifacts.
#[derive(Clone, Debug, Default)]
pub struct RunPaths {
    pub out: Option<PathBuf>,
    pub resume: Option<PathBuf>,
}

fn write_metrics_header(w: &mut csv::Writer<std::fs::File>) -> Result<()> {
    w.write_record(["step", "lr", "l_cont", "l_omega", "l_adv", "l_f"])
        .map_err(|e| Error::Config(format!("metrics csv: {e}")))
}

fn write_metrics_row(w: &mut csv::Writer<std::fs::File>, m: &StepMetrics) -> Result<()> {
    w.write_record([
        m.step.to_string(),
        format!("{:.6e}", m.lr),
        format!("{:.8}", m.l_cont),
        format!("{:.8}", m.l_omega),
        format!("{:.8}", m.l_adv),
        format!("{:.8}", m.l_f),
    ])
    .and_then(|_| w.flush().map_err(Into::into))
    .map_err(|e| Error::Config(format!("metrics csv: {e}")))
}

/// Trains on `train` and, when `paths.out` is set, writes metrics,
/// periodic checkpoints, the final checkpoint and the backbone export.
pub fn train(cfg: &TrainConfig, train: Arc<Dataset>, edge_net: Option<HedOracle>, paths: &RunPaths) -> Result<RunOutcome> {
    cfg.validate()?;
    let total = total_steps(cfg, train.len());
    let mut state = match &paths.resume {
        Some(p) => {
            let s = TrainState::load(p)?;
            if s.domains != train.catalog().domains {
                return Err(Error::InvalidArgument(format!(
                    "checkpoint domains {:?} differ from training domains {:?}",
                    s.domains,
                    train.catalog().domains
                )));
            }
            info!("resuming from {} at step {}", p.display(), s.step);
            s
        }
        None => TrainState::new(
            cfg.clone(),
            train.catalog().domains.clone(),
            train.catalog().per_domain_counts.clone(),
            edge_net.clone(),
            total,
        )?,
    };
    let start = state.step;

    let mut writer = match &paths.out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            if let Some(net) = &edge_net {
                if cfg.hed_weights.is_empty() && cfg.mapper_init.is_empty() {
                    net.save(&dir.join(EDGE_NET_FILE))?;
                }
            }
            let path = dir.join(METRICS_FILE);
            let fresh = start == 0 || !path.exists();
            let file = OpenOptions::new()
                .create(true)
                .write(true)
                .append(!fresh)
                .truncate(fresh)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            let mut w = csv::Writer::from_writer(file);
            if fresh {
                write_metrics_header(&mut w)?;
            }
            Some(w)
        }
        None => None,
    };

    let plan = BatchPlan::new(train.len(), cfg.batch_size, cfg.seed);
    let stream = BatchStream::spawn(train, plan, cfg.augment(), start..total, cfg.workers, cfg.prefetch);
    let mut metrics = Vec::with_capacity(total - start);
    for batch in stream {
        let m = state.train_step(&batch)?;
        if let Some(w) = writer.as_mut() {
            write_metrics_row(w, &m)?;
        }
        if m.step % 50 == 0 || m.step + 1 == total {
            info!(
                "step {}/{} lr {:.4} l_cont {:.4} l_omega {:.4} l_adv {:.4} l_f {:.4}",
                m.step + 1,
                total,
                m.lr,
                m.l_cont,
                m.l_omega,
                m.l_adv,
                m.l_f
            );
        }
        metrics.push(m);
        if let Some(dir) = &paths.out {
            if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 && state.step < total {
                state.save(&dir.join(format!("checkpoint_{:06}.ebw", state.step)))?;
            }
        }
    }
    if let Some(dir) = &paths.out {
        state.save(&dir.join(CHECKPOINT_FILE))?;
        state.export_backbone(&dir.join(BACKBONE_FILE))?;
    }
    Ok(RunOutcome { state, metrics })
}
