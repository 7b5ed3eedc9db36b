//! Full training checkpoints and backbone-only inference exports.

use std::path::Path;

use edgebridge_tensor::{ParamSet, SgdState, Tensor};
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::config::TrainConfig;
use super::state::{Adversary, TrainState};
use crate::adversary::DiscriminatorArch;
use crate::bridge::{EdgeNetArch, HedOracle};
use crate::contrastive::{NegativeQueue, QueueBank, QueueMeta};
use crate::encoder::{BackboneArch, EncoderConfig, EncoderState};
use crate::error::{Error, Result};
use crate::rng;
use crate::store::Store;

const TRAIN_KIND: &str = "train_state";
const BACKBONE_KIND: &str = "backbone";

#[derive(Serialize, Deserialize)]
struct TrainMeta {
    kind: String,
    config: TrainConfig,
    domains: Vec<String>,
    domain_sizes: Vec<usize>,
    encoder: EncoderConfig,
    mapper_arch: EdgeNetArch,
    edge_net_arch: Option<EdgeNetArch>,
    adversary: Option<DiscriminatorArch>,
    queues: Vec<QueueMeta>,
    multi_queue: bool,
    step: usize,
    total_steps: usize,
}

fn put_buffers(store: &mut Store, prefix: &str, opt: &SgdState<f32>) {
    for (i, b) in opt.buffers().iter().enumerate() {
        store.put(format!("{prefix}.{i}"), b.clone());
    }
}

fn buffers(store: &Store, prefix: &str, like: &ParamSet<f32>) -> Result<SgdState<f32>> {
    let mut out = Vec::with_capacity(like.len());
    for (i, t) in like.tensors().iter().enumerate() {
        let key = format!("{prefix}.{i}");
        let b = store.require(&key)?;
        if b.shape() != t.shape() {
            return Err(Error::CorruptCheckpoint(format!("optimizer blob `{key}` has shape {:?}", b.shape())));
        }
        out.push(b.clone());
    }
    Ok(SgdState::from_buffers(out))
}

fn corrupt(what: &str) -> impl Fn(serde_json::Error) -> Error + '_ {
    move |e| Error::CorruptCheckpoint(format!("{what}: {e}"))
}

impl TrainState<f32> {
    pub fn to_store(&self) -> Store {
        let meta = TrainMeta {
            kind: TRAIN_KIND.into(),
            config: self.config.clone(),
            domains: self.domains.clone(),
            domain_sizes: self.domain_sizes.clone(),
            encoder: self.encoder.config.clone(),
            mapper_arch: self.mapper_arch.clone(),
            edge_net_arch: self.edge_net.as_ref().map(|n| n.arch.clone()),
            adversary: self.adversary.as_ref().map(|a| a.arch.clone()),
            queues: self.queues.queues().iter().map(NegativeQueue::meta).collect(),
            multi_queue: self.queues.is_multi(),
            step: self.step,
            total_steps: self.total_steps,
        };
        let mut s = Store::new(serde_json::to_value(meta).expect("meta serializes"));
        let e = &self.encoder;
        s.put_params("backbone", &e.backbone);
        s.put_params("projector", &e.projector);
        s.put_params("momentum_backbone", &e.momentum_backbone);
        s.put_params("momentum_projector", &e.momentum_projector);
        put_buffers(&mut s, "opt.backbone", &self.opt_backbone);
        put_buffers(&mut s, "opt.projector", &self.opt_projector);
        for (d, (m, opt)) in self.mappers.iter().zip(&self.opt_mappers).enumerate() {
            let name = &self.domains[d];
            s.put_params(&format!("mapper.{name}"), m);
            put_buffers(&mut s, &format!("opt.mapper.{name}"), opt);
        }
        if let Some(a) = &self.adversary {
            s.put_params("adversary", &a.params);
            put_buffers(&mut s, "opt.adversary", &a.opt);
        }
        if let Some(n) = &self.edge_net {
            s.put_params("edge_net", &n.params);
        }
        for (i, q) in self.queues.queues().iter().enumerate() {
            s.put(format!("queue.{i}"), Tensor::new(&[q.buffer().len()], q.buffer().to_vec()));
        }
        s
    }

    pub fn from_store(store: &Store) -> Result<Self> {
        let meta: TrainMeta = serde_json::from_value(store.meta.clone()).map_err(corrupt("training checkpoint header"))?;
        if meta.kind != TRAIN_KIND {
            return Err(Error::CorruptCheckpoint(format!("expected a {TRAIN_KIND} file, found `{}`", meta.kind)));
        }
        let mut r = rng::stream(&[0]);
        let bb_t: ParamSet<f32> = meta.encoder.backbone.init(&mut r);
        let pj_t: ParamSet<f32> = meta.encoder.projector().init(&mut r);
        let encoder = EncoderState {
            backbone: store.params("backbone", &bb_t)?,
            projector: store.params("projector", &pj_t)?,
            momentum_backbone: store.params("momentum_backbone", &bb_t)?,
            momentum_projector: store.params("momentum_projector", &pj_t)?,
            config: meta.encoder.clone(),
        };
        let mapper_t: ParamSet<f32> = meta.mapper_arch.init(&mut r);
        let (mut mappers, mut opt_mappers) = (Vec::new(), Vec::new());
        if meta.config.use_bridge.is_learned() {
            for name in &meta.domains {
                let m = store.params(&format!("mapper.{name}"), &mapper_t)?;
                opt_mappers.push(buffers(store, &format!("opt.mapper.{name}"), &m)?);
                mappers.push(m);
            }
        }
        let adversary = match &meta.adversary {
            Some(arch) => {
                let params = store.params("adversary", &arch.init(&mut r))?;
                Some(Adversary {
                    opt: buffers(store, "opt.adversary", &params)?,
                    arch: arch.clone(),
                    params,
                })
            }
            None => None,
        };
        let edge_net = match &meta.edge_net_arch {
            Some(arch) => Some(HedOracle::new(arch.clone(), store.params("edge_net", &arch.init(&mut r))?)),
            None => None,
        };
        let queues = meta
            .queues
            .into_iter()
            .enumerate()
            .map(|(i, qm)| NegativeQueue::restore(qm, store.require(&format!("queue.{i}"))?.data().to_vec()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            opt_backbone: buffers(store, "opt.backbone", &encoder.backbone)?,
            opt_projector: buffers(store, "opt.projector", &encoder.projector)?,
            config: meta.config,
            domains: meta.domains,
            domain_sizes: meta.domain_sizes,
            encoder,
            mapper_arch: meta.mapper_arch,
            mappers,
            edge_net,
            adversary,
            opt_mappers,
            queues: QueueBank::from_queues(queues, meta.multi_queue),
            step: meta.step,
            total_steps: meta.total_steps,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_store().save(path)
    }

    /// Loads a full checkpoint. The caller's state is only replaced once the
    /// whole file has parsed.
    pub fn load(path: &Path) -> Result<Self> {
        Self::from_store(&Store::load(path)?)
    }

    pub fn export_backbone(&self, path: &Path) -> Result<()> {
        BackboneExport::from_state(self).save(path)
    }
}

/// Everything inference needs: the backbone and its description.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneExport {
    pub arch: BackboneArch,
    pub params: ParamSet<f32>,
    pub step: usize,
    pub proj_dim: usize,
    pub ema_m: f64,
    pub config: Option<TrainConfig>,
}

impl BackboneExport {
    pub fn new(arch: BackboneArch, params: ParamSet<f32>) -> Self {
        Self {
            arch,
            params,
            step: 0,
            proj_dim: 0,
            ema_m: 0.0,
            config: None,
        }
    }

    pub fn from_state(state: &TrainState<f32>) -> Self {
        Self {
            arch: state.encoder.config.backbone.clone(),
            params: state.encoder.backbone.clone(),
            step: state.step,
            proj_dim: state.config.proj_dim,
            ema_m: state.config.ema_m,
            config: Some(state.config.clone()),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.arch.feature_dim()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = json!({
            "kind": BACKBONE_KIND,
            "d": self.arch.feature_dim(),
            "p": self.proj_dim,
            "m": self.ema_m,
            "arch": self.arch,
            "arch_tag": self.arch.tag(),
            "step": self.step,
            "config": self.config,
        });
        let mut s = Store::new(meta);
        s.put_params("backbone", &self.params);
        s.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = Store::load(path)?;
        let kind = s.meta.get("kind").and_then(|k| k.as_str()).unwrap_or_default();
        if kind != BACKBONE_KIND && kind != TRAIN_KIND {
            return Err(Error::CorruptCheckpoint(format!("{} holds `{kind}`, not a backbone", path.display())));
        }
        let arch: BackboneArch = if kind == TRAIN_KIND {
            serde_json::from_value(s.meta["encoder"]["backbone"].clone()).map_err(corrupt("backbone arch"))?
        } else {
            serde_json::from_value(s.meta["arch"].clone()).map_err(corrupt("backbone arch"))?
        };
        let params = s.params("backbone", &arch.init(&mut rng::stream(&[0])))?;
        let config = match s.meta.get("config") {
            Some(c) if !c.is_null() => Some(serde_json::from_value(c.clone()).map_err(corrupt("config"))?),
            _ => None,
        };
        Ok(Self {
            arch,
            params,
            step: s.meta["step"].as_u64().unwrap_or(0) as usize,
            proj_dim: s.meta.get("p").and_then(|v| v.as_u64()).unwrap_or(0) as usize,
            ema_m: s.meta.get("m").and_then(|v| v.as_f64()).unwrap_or(0.0),
            config,
        })
    }
}
