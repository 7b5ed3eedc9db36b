mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use edgebridge::ablation::{self, AblationEval, DEFAULT_LADDER};
use edgebridge::bridge::{map_to_bridge, BridgeMapper, HedOracle};
use edgebridge::data::{make_synthetic, Dataset, SyntheticSpec};
use edgebridge::edges::canny;
use edgebridge::eval::{self, EmbeddingIndex, EvalReport, Probe};
use edgebridge::image::Image;
use edgebridge::train::{self, BackboneExport, RunPaths, TrainConfig, TrainState};
use log::info;

use manifest::RunManifest;

const OUT_ROOT_ENV: &str = "EDGEBRIDGE_OUT_ROOT";
const WORKERS_ENV: &str = "EDGEBRIDGE_WORKERS";

#[derive(Parser, Debug)]
#[command(name = "edgebridge", version, about = "Edge-bridged contrastive domain adaptation on the desk")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic multi-domain shape corpus to disk.
    MakeSynthetic(SyntheticArgs),
    /// Train an encoder from a config.
    Train(TrainArgs),
    /// Label-fraction evaluation on unseen target domains.
    EvalUdg(UdgArgs),
    /// Few-shot evaluation from one source domain to one target domain.
    EvalFuda(FudaArgs),
    /// Nearest-neighbour retrieval grid for one query image.
    KnnDemo(KnnArgs),
    /// Side-by-side Canny, edge-network and mapper outputs.
    EdgePreview(PreviewArgs),
    /// Run the ablation ladder from one base config.
    Ablate(AblateArgs),
}

/// Config file plus `key=value` overrides. Later sources win: file, then
/// environment, then `--set`.
#[derive(Args, Debug, Clone, Default)]
struct ConfigArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set base_lr=0.01`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<TrainConfig> {
        let base = match &self.config {
            Some(p) => TrainConfig::from_file(p)?,
            None => TrainConfig::default(),
        };
        self.apply(base)
    }

    /// For commands reading an existing artifact: its embedded config is the
    /// base unless a file is named.
    fn load_or(&self, embedded: Option<TrainConfig>) -> Result<TrainConfig> {
        match (&self.config, embedded) {
            (None, Some(c)) => self.apply(c),
            _ => self.load(),
        }
    }

    fn apply(&self, base: TrainConfig) -> Result<TrainConfig> {
        let mut sets = Vec::new();
        if let Ok(w) = std::env::var(WORKERS_ENV) {
            sets.push(format!("workers={w}"));
        }
        sets.extend(self.overrides.iter().cloned());
        let cfg = base.with_overrides(&sets)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct SyntheticArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    domains: usize,
    #[arg(long, default_value_t = 7)]
    classes: usize,
    #[arg(long, default_value_t = 50)]
    per_class: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    out: PathBuf,
    /// Continue from a full checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ProbeKind {
    Knn,
    Linear,
}

#[derive(Args, Debug)]
struct ProbeArgs {
    #[arg(long, value_enum, default_value_t = ProbeKind::Knn)]
    probe: ProbeKind,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl ProbeArgs {
    fn probe(&self) -> Probe {
        match self.probe {
            ProbeKind::Knn => Probe::Knn { k: self.k },
            ProbeKind::Linear => Probe::Linear,
        }
    }
}

#[derive(Args, Debug)]
struct UdgArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Backbone export or full checkpoint.
    #[arg(long)]
    backbone: PathBuf,
    /// Labeled source domains; defaults to the domains the backbone trained on.
    #[arg(long, value_delimiter = ',')]
    sources: Vec<String>,
    /// Defaults to every domain not in `sources`.
    #[arg(long, value_delimiter = ',')]
    targets: Vec<String>,
    #[arg(long, default_value_t = 0.1)]
    fraction: f64,
    #[command(flatten)]
    probe: ProbeArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct FudaArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    backbone: PathBuf,
    #[arg(long)]
    source: String,
    #[arg(long)]
    target: String,
    #[arg(long, default_value_t = 1)]
    shots: usize,
    #[command(flatten)]
    probe: ProbeArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct KnnArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    backbone: PathBuf,
    /// A PNG path, or the sample_id of an image in the corpus.
    #[arg(long)]
    query: String,
    #[arg(long, default_value_t = 5)]
    top_k: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PreviewArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Training checkpoint whose mappers and edge network are shown.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Edge network file, used when no checkpoint carries one.
    #[arg(long)]
    edge_net: Option<PathBuf>,
    /// Images per domain.
    #[arg(long, default_value_t = 4)]
    count: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Comma-separated `<bridge>[+dd][+mq]` rows; defaults to the full ladder.
    #[arg(long)]
    rows: Option<String>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    #[arg(long, value_delimiter = ',', default_value = "sketch")]
    held_out: Vec<String>,
    #[arg(long, default_value_t = 0.1)]
    fraction: f64,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value_t = 5)]
    fuda_seeds: usize,
    /// Shared edge network; distilled once when absent.
    #[arg(long)]
    edge_net: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

/// Relative output paths land under `$EDGEBRIDGE_OUT_ROOT` when it is set.
fn out_dir(p: &Path) -> PathBuf {
    match std::env::var_os(OUT_ROOT_ENV) {
        Some(root) if p.is_relative() => PathBuf::from(root).join(p),
        _ => p.to_path_buf(),
    }
}

fn run(cmd: Command) -> Result<()> {
    let argv: Vec<String> = std::env::args().collect();
    match cmd {
        Command::MakeSynthetic(a) => {
            let out = out_dir(&a.out);
            let spec = SyntheticSpec {
                n_domains: a.domains,
                n_classes: a.classes,
                per_class: a.per_class,
                image_size: a.size,
                seed: a.seed,
            };
            RunManifest::new("make-synthetic", argv, None, a.seed, vec![out.clone()]).write(&out)?;
            let ds = make_synthetic(&out, &spec)?;
            info!("wrote {} images in {} domains to {}", ds.len(), ds.catalog().n_domains(), out.display());
        }
        Command::Train(a) => {
            let cfg = a.cfg.load()?;
            let out = out_dir(&a.out);
            RunManifest::new("train", argv, Some(cfg.clone()), cfg.seed, vec![out.clone()]).write(&out)?;
            std::fs::write(out.join("config.toml"), cfg.to_toml()).context("writing config.toml")?;
            let full = train::load_dataset(&cfg)?;
            let split = Arc::new(train::training_split(&full, &cfg)?);
            let edge_net = if a.resume.is_some() { None } else { train::resolve_edge_net(&cfg, &split)? };
            let outcome = train::train(
                &cfg,
                split,
                edge_net,
                &RunPaths {
                    out: Some(out.clone()),
                    resume: a.resume,
                },
            )?;
            info!("trained {} steps into {}", outcome.state.step, out.display());
        }
        Command::EvalUdg(a) => {
            let backbone = BackboneExport::load(&a.backbone)?;
            let cfg = a.cfg.load_or(backbone.config.clone())?;
            let ds = train::load_dataset(&cfg)?;
            let sources = if !a.sources.is_empty() {
                a.sources.clone()
            } else if !cfg.train_domains.is_empty() {
                cfg.train_domains.clone()
            } else {
                bail!("--sources is required when the backbone does not record its training domains");
            };
            let targets = if a.targets.is_empty() {
                ds.catalog().domains.iter().filter(|d| !sources.contains(d)).cloned().collect()
            } else {
                a.targets.clone()
            };
            if targets.is_empty() {
                bail!("no target domains left; pass --targets");
            }
            let out = out_dir(&a.out);
            RunManifest::new("eval-udg", argv, Some(cfg), a.probe.seed, vec![out.clone()]).write(&out)?;
            let report = eval::eval_udg(&backbone, &ds, &sources, &targets, a.fraction, a.probe.probe(), a.probe.seed)?;
            save_report(&report, &out)?;
        }
        Command::EvalFuda(a) => {
            let backbone = BackboneExport::load(&a.backbone)?;
            let cfg = a.cfg.load_or(backbone.config.clone())?;
            let ds = train::load_dataset(&cfg)?;
            let out = out_dir(&a.out);
            RunManifest::new("eval-fuda", argv, Some(cfg), a.probe.seed, vec![out.clone()]).write(&out)?;
            let report = eval::eval_fuda(&backbone, &ds, &a.source, &a.target, a.shots, a.probe.probe(), a.probe.seed)?;
            save_report(&report, &out)?;
        }
        Command::KnnDemo(a) => {
            let backbone = BackboneExport::load(&a.backbone)?;
            let cfg = a.cfg.load_or(backbone.config.clone())?;
            let ds = train::load_dataset(&cfg)?;
            let query = resolve_query(&a.query, &ds)?;
            let out = out_dir(&a.out);
            RunManifest::new("knn-demo", argv, Some(cfg), 0, vec![out.join("grid.png")]).write(&out)?;
            let feats = eval::dataset_features(&backbone, &ds)?;
            let s = ds.samples();
            let index = EmbeddingIndex::new(
                &feats,
                s.iter().map(|x| x.class_id.unwrap_or(usize::MAX)).collect(),
                s.iter().map(|x| x.domain_id).collect(),
                s.iter().map(|x| x.sample_id.clone()).collect(),
            )?;
            let images: Vec<&Image> = s.iter().map(|x| &x.image).collect();
            let rows = eval::retrieval_grid(&backbone, &query, &index, &images, ds.catalog().n_domains(), a.top_k, &out.join("grid.png"))?;
            let named: Vec<serde_json::Value> = rows
                .iter()
                .enumerate()
                .map(|(d, r)| {
                    serde_json::json!({
                        "domain": ds.catalog().domains[d],
                        "neighbours": r.iter().map(|&i| index.sample_id(i)).collect::<Vec<_>>(),
                    })
                })
                .collect();
            write_json(&out.join("neighbours.json"), &named)?;
        }
        Command::EdgePreview(a) => {
            let state = a.checkpoint.as_deref().map(TrainState::<f32>::load).transpose()?;
            let cfg = a.cfg.load_or(state.as_ref().map(|s| s.config.clone()))?;
            let ds = train::load_dataset(&cfg)?;
            let edge_net = match (&state, &a.edge_net) {
                (Some(s), _) if s.edge_net.is_some() => s.edge_net.clone(),
                (_, Some(p)) => Some(HedOracle::load(p)?),
                _ => None,
            };
            let out = out_dir(&a.out);
            RunManifest::new("edge-preview", argv, Some(cfg.clone()), cfg.seed, vec![out.clone()]).write(&out)?;
            edge_preview(&ds, &cfg, state.as_ref(), edge_net.as_ref(), a.count, &out)?;
        }
        Command::Ablate(a) => {
            let base = a.cfg.load()?;
            let rows = ablation::parse_rows(a.rows.as_deref().unwrap_or(&DEFAULT_LADDER.join(",")))?;
            let out = out_dir(&a.out);
            RunManifest::new("ablate", argv, Some(base.clone()), base.seed, vec![out.join("ablation.csv")]).write(&out)?;
            let full = train::load_dataset(&base)?;
            let edge_net = a.edge_net.as_deref().map(HedOracle::load).transpose()?;
            let settings = AblationEval {
                held_out: a.held_out,
                label_fraction: a.fraction,
                udg_k: a.k,
                fuda_seeds: a.fuda_seeds,
            };
            let results = ablation::run_ablation(&base, &full, &rows, &a.seeds, &settings, edge_net, Some(&out))?;
            println!("{:<28} {:>8} {:>10} {:>12}", "row", "udg_knn", "fuda_1shot", "domain_probe");
            for r in ablation::row_means(&results) {
                println!("{:<28} {:>8.4} {:>10.4} {:>12.4}", r.row, r.udg_knn, r.fuda_1shot, r.domain_probe);
            }
        }
    }
    Ok(())
}

fn save_report(report: &EvalReport, out: &Path) -> Result<()> {
    report.save_json(&out.join("report.json"))?;
    report.save_csv(&out.join("report.csv"))?;
    println!("{} {}: average {:.4}, overall {:.4}", report.protocol, report.probe.name(), report.average, report.overall);
    for (d, acc) in &report.per_domain_accuracy {
        println!("  {d}: {acc:.4}");
    }
    Ok(())
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn resolve_query(query: &str, ds: &Dataset) -> Result<Image> {
    if let Some(s) = ds.samples().iter().find(|s| s.sample_id == query) {
        return Ok(s.image.clone());
    }
    let p = Path::new(query);
    if p.exists() {
        return Ok(Image::load(p, ds.image_size())?);
    }
    bail!("query `{query}` is neither a sample_id nor an image file")
}

/// One strip per image: input, Canny, edge network, then the domain's
/// mapper when the checkpoint has learned ones.
fn edge_preview(
    ds: &Dataset,
    cfg: &TrainConfig,
    state: Option<&TrainState<f32>>,
    edge_net: Option<&HedOracle>,
    count: usize,
    out: &Path,
) -> Result<()> {
    for (d, name) in ds.catalog().domains.iter().enumerate() {
        let mapper = state.and_then(|s| {
            let i = s.domains.iter().position(|n| n == name)?;
            let params = s.mappers.get(i)?.clone();
            Some((i, BridgeMapper::new(i, s.mapper_arch.clone(), params, false)))
        });
        for (n, &i) in ds.domain_indices(d).iter().take(count).enumerate() {
            let img = &ds.sample(i).image;
            let mut panels = vec![img.clone(), canny(img, cfg.canny_low, cfg.canny_high).to_image().gray_to_rgb()];
            if let Some(net) = edge_net {
                panels.push(net.edge_map(img)?.to_image().gray_to_rgb());
            }
            if let Some((md, m)) = &mapper {
                panels.push(map_to_bridge(m, img, *md)?.to_image().gray_to_rgb());
            }
            strip(&panels).save_png(&out.join(format!("{name}_{n}.png")))?;
        }
    }
    Ok(())
}

fn strip(panels: &[Image]) -> Image {
    let (h, w) = (panels[0].height(), panels[0].width());
    let pad = 2;
    let mut canvas = Image::filled(3, h + 2 * pad, panels.len() * (w + pad) + pad, 1.0);
    for (k, p) in panels.iter().enumerate() {
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    canvas.set(c, pad + y, pad + k * (w + pad) + x, p.get(c, y, x));
                }
            }
        }
    }
    canvas
}
