//! The ablation ladder: rows are pure config diffs over one base config.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::info;
use serde::{Deserialize, Serialize};

use crate::bridge::{BridgeMode, HedOracle};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::{dataset_features, domain_probe_accuracy, eval_fuda_with_features, eval_udg_with_features, Probe};
use crate::image::Image;
use crate::train::{self, needs_edge_net, BackboneExport, RunPaths, TrainConfig};

/// Rows of the default ladder, in table order.
pub const DEFAULT_LADDER: [&str; 8] = [
    "none",
    "none+dd",
    "none+mq",
    "none+dd+mq",
    "canny_fixed+dd+mq",
    "hed_fixed+dd+mq",
    "learned+dd+mq",
    "learned_no_pretrain+dd+mq",
];

/// `<bridge>[+dd][+mq]`: `dd` turns on the domain discriminator, `mq` the
/// per-domain queues.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub bridge: BridgeMode,
    pub adversary: bool,
    pub multi_queue: bool,
}

impl AblationRow {
    pub fn parse(spec: &str) -> Result<Self> {
        let mut parts = spec.trim().split('+');
        let head = parts.next().unwrap_or_default();
        let bridge = BridgeMode::parse(head)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown bridge `{head}` in ablation row `{spec}`")))?;
        let (mut adversary, mut multi_queue) = (false, false);
        for flag in parts {
            match flag {
                "dd" if !adversary => adversary = true,
                "mq" if !multi_queue => multi_queue = true,
                _ => return Err(Error::InvalidArgument(format!("bad flag `{flag}` in ablation row `{spec}`"))),
            }
        }
        Ok(Self {
            name: spec.trim().to_string(),
            bridge,
            adversary,
            multi_queue,
        })
    }

    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        TrainConfig {
            use_bridge: self.bridge,
            use_adversary: self.adversary,
            multi_queue: self.multi_queue,
            ..base.clone()
        }
    }
}

pub fn parse_rows(list: &str) -> Result<Vec<AblationRow>> {
    list.split(',').filter(|s| !s.trim().is_empty()).map(AblationRow::parse).collect()
}

/// How each trained backbone is scored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationEval {
    /// Domains withheld from training and scored with the UDG kNN probe.
    pub held_out: Vec<String>,
    pub label_fraction: f64,
    pub udg_k: usize,
    /// Shot-sampling seeds averaged in the 1-shot FUDA score.
    pub fuda_seeds: usize,
}

impl Default for AblationEval {
    fn default() -> Self {
        Self {
            held_out: vec!["sketch".into()],
            label_fraction: 0.1,
            udg_k: 5,
            fuda_seeds: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub row: String,
    pub seed: u64,
    /// Mean UDG kNN accuracy over the held-out domains.
    pub udg_knn: f64,
    /// 1-shot kNN accuracy averaged over ordered training-domain pairs.
    pub fuda_1shot: f64,
    /// Post-hoc domain classifier accuracy on training bridge features.
    pub domain_probe: f64,
    pub final_l_cont: f64,
}

/// Scores one trained state.
pub fn score_run(state: &train::TrainState<f32>, full: &Dataset, train_ds: &Dataset, eval: &AblationEval, seed: u64) -> Result<(f64, f64, f64)> {
    let export = BackboneExport::from_state(state);
    let feats = dataset_features(&export, full)?;
    let sources = train_ds.catalog().domains.clone();
    let udg = eval_udg_with_features(full, &feats, &sources, &eval.held_out, eval.label_fraction, Probe::Knn { k: eval.udg_k }, seed)?;
    let (mut fuda, mut count) = (0.0, 0);
    for s in &sources {
        for t in sources.iter().filter(|t| *t != s) {
            for shot_seed in 0..eval.fuda_seeds as u64 {
                fuda += eval_fuda_with_features(full, &feats, s, t, 1, Probe::Knn { k: 1 }, seed * 1000 + shot_seed)?.overall;
                count += 1;
            }
        }
    }
    let images: Vec<&Image> = train_ds.samples().iter().map(|s| &s.image).collect();
    let domains: Vec<usize> = train_ds.samples().iter().map(|s| s.domain_id).collect();
    let bridge = state.bridge_features(&images, &domains, 64)?;
    let probe = domain_probe_accuracy(&bridge, &domains, seed)?;
    Ok((udg.average, if count == 0 { 0.0 } else { fuda / count as f64 }, probe))
}

/// Runs every row for every seed sequentially. `edge_net` is shared by all
/// rows that need one; when absent it is resolved once from `base`.
pub fn run_ablation(
    base: &TrainConfig,
    full: &Dataset,
    rows: &[AblationRow],
    seeds: &[u64],
    eval: &AblationEval,
    edge_net: Option<HedOracle>,
    out_dir: Option<&Path>,
) -> Result<Vec<AblationResult>> {
    let train_names: Vec<String> = if base.train_domains.is_empty() {
        full.catalog()
            .domains
            .iter()
            .filter(|d| !eval.held_out.contains(d))
            .cloned()
            .collect()
    } else {
        base.train_domains.clone()
    };
    if let Some(d) = train_names.iter().find(|d| eval.held_out.contains(d)) {
        return Err(Error::InvalidArgument(format!("domain `{d}` is both trained on and held out")));
    }
    let train_ds = Arc::new(full.subset(&train_names)?);
    let needs = rows.iter().any(|r| needs_edge_net(&r.apply(base)));
    let edge_net = match edge_net {
        Some(n) => Some(n),
        None if needs => {
            let probe_cfg = AblationRow::parse("learned")?.apply(base);
            train::resolve_edge_net(&probe_cfg, &train_ds)?
        }
        None => None,
    };
    if let (Some(dir), Some(net)) = (out_dir, &edge_net) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        net.save(&dir.join(train::EDGE_NET_FILE))?;
    }
    let mut results = Vec::new();
    for row in rows {
        for &seed in seeds {
            let cfg = TrainConfig {
                seed,
                train_domains: train_names.clone(),
                ..row.apply(base)
            };
            let net = needs_edge_net(&cfg).then(|| edge_net.clone()).flatten();
            let paths = RunPaths {
                out: out_dir.map(|d| row_dir(d, &row.name, seed)),
                resume: None,
            };
            info!("ablation row {} seed {seed}", row.name);
            let outcome = train::train(&cfg, train_ds.clone(), net, &paths)?;
            let (udg_knn, fuda_1shot, domain_probe) = score_run(&outcome.state, full, &train_ds, eval, seed)?;
            let r = AblationResult {
                row: row.name.clone(),
                seed,
                udg_knn,
                fuda_1shot,
                domain_probe,
                final_l_cont: outcome.metrics.last().map_or(0.0, |m| m.l_cont),
            };
            info!("{r:?}");
            results.push(r);
        }
    }
    if let Some(dir) = out_dir {
        write_table(&dir.join("ablation.csv"), &results)?;
    }
    Ok(results)
}

fn row_dir(root: &Path, row: &str, seed: u64) -> PathBuf {
    root.join(row.replace('+', "_")).join(format!("seed_{seed}"))
}

/// Seed-mean results per row, in first-seen row order.
pub fn row_means(results: &[AblationResult]) -> Vec<AblationResult> {
    let mut names: Vec<&str> = Vec::new();
    for r in results {
        if !names.contains(&r.row.as_str()) {
            names.push(&r.row);
        }
    }
    names
        .into_iter()
        .map(|name| {
            let rs: Vec<&AblationResult> = results.iter().filter(|r| r.row == name).collect();
            let n = rs.len() as f64;
            let mean = |f: fn(&AblationResult) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / n;
            AblationResult {
                row: name.to_string(),
                seed: 0,
                udg_knn: mean(|r| r.udg_knn),
                fuda_1shot: mean(|r| r.fuda_1shot),
                domain_probe: mean(|r| r.domain_probe),
                final_l_cont: mean(|r| r.final_l_cont),
            }
        })
        .collect()
}

/// Per-seed lines followed by one `mean` line per row.
pub fn write_table(path: &Path, results: &[AblationResult]) -> Result<()> {
    let csv_err = |e: csv::Error| Error::Config(format!("ablation csv: {e}"));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["row", "seed", "udg_knn", "fuda_1shot", "domain_probe", "final_l_cont"])
        .map_err(csv_err)?;
    let fmt = |r: &AblationResult, seed: String| {
        vec![
            r.row.clone(),
            seed,
            format!("{:.4}", r.udg_knn),
            format!("{:.4}", r.fuda_1shot),
            format!("{:.4}", r.domain_probe),
            format!("{:.4}", r.final_l_cont),
        ]
    };
    for r in results {
        w.write_record(fmt(r, r.seed.to_string())).map_err(csv_err)?;
    }
    for r in row_means(results) {
        w.write_record(fmt(&r, "mean".into())).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_grammar() {
        let r = AblationRow::parse("learned+dd+mq").unwrap();
        assert_eq!((r.bridge, r.adversary, r.multi_queue), (BridgeMode::Learned, true, true));
        let r = AblationRow::parse("canny_fixed").unwrap();
        assert_eq!((r.bridge, r.adversary, r.multi_queue), (BridgeMode::CannyFixed, false, false));
        assert!(AblationRow::parse("learned+xx").is_err());
        assert!(AblationRow::parse("learned+dd+dd").is_err());
        assert!(AblationRow::parse("bogus").is_err());
        assert_eq!(parse_rows(&DEFAULT_LADDER.join(",")).unwrap().len(), 8);
    }

    #[test]
    fn rows_only_touch_their_flags() {
        let base = TrainConfig::default();
        let cfg = AblationRow::parse("none+mq").unwrap().apply(&base);
        assert_eq!(
            cfg,
            TrainConfig {
                use_bridge: BridgeMode::None,
                use_adversary: false,
                multi_queue: true,
                ..base
            }
        );
    }
}
