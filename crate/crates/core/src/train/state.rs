//! Training state and the two-phase step over the full objective.

use edgebridge_tensor::{Bound, Float, Graph, ParamSet, SgdConfig, SgdState, Tensor, Var};

use super::config::{cosine_lr, TrainConfig};
use crate::adversary::{adv_loss_graph, BridgeFeatures, DiscriminatorArch, OptimizerGroups, Provenance};
use crate::bridge::{bridge_loss_graph, bridge_targets, BridgeMode, BridgeVariant, EdgeNetArch, HedOracle};
use crate::contrastive::QueueBank;
use crate::data::Batch;
use crate::edges::{canny, EdgeMap};
use crate::encoder::EncoderState;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{gray_to_rgb, images_to_tensor};
use crate::rng;

/// The three weights of the full objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub cont: f64,
    pub bridge: f64,
    pub adv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cont: 1.0,
            bridge: 1.0,
            adv: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossComponents {
    pub l_cont: f64,
    pub l_omega: f64,
    pub l_adv: f64,
}

/// `α1·L_cont + α2·L_Ω − α3·L_adv`, the generator's objective. Callers
/// applying the chance-level cap pass the capped `l_adv`.
pub fn full_loss(c: &LossComponents, w: &LossWeights) -> Result<f64> {
    for (name, v) in [("l_cont", c.l_cont), ("l_omega", c.l_omega), ("l_adv", c.l_adv)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(name));
        }
    }
    for (name, v) in [("alpha_cont", w.cont), ("alpha_bridge", w.bridge), ("alpha_adv", w.adv)] {
        if !v.is_finite() || v < 0.0 {
            return Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")));
        }
    }
    Ok(w.cont * c.l_cont + w.bridge * c.l_omega - w.adv * c.l_adv)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adversary<T> {
    pub arch: DiscriminatorArch,
    pub params: ParamSet<T>,
    pub opt: SgdState<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Only the discriminator has moved.
    Discriminator,
    /// Backbone, projector and mappers have moved.
    Generator,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub lr: f64,
    pub l_cont: f64,
    pub l_omega: f64,
    pub l_adv: f64,
    pub l_f: f64,
    /// Keys came out of a graph with no tracked momentum parameter.
    pub momentum_grad_free: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T> {
    pub config: TrainConfig,
    pub domains: Vec<String>,
    pub domain_sizes: Vec<usize>,
    pub encoder: EncoderState<T>,
    pub mapper_arch: EdgeNetArch,
    /// One per domain for learned bridges, empty otherwise.
    pub mappers: Vec<ParamSet<T>>,
    /// Frozen edge network for `hed_fixed` bridges and `l2_hed` targets.
    pub edge_net: Option<HedOracle>,
    pub adversary: Option<Adversary<T>>,
    pub opt_backbone: SgdState<T>,
    pub opt_projector: SgdState<T>,
    pub opt_mappers: Vec<SgdState<T>>,
    pub queues: QueueBank,
    pub step: usize,
    pub total_steps: usize,
}

/// Positive keys for a batch, rows in domain-sorted order. They are
/// stop-gradient inputs to the objective.
#[derive(Clone, Debug)]
pub struct Keys<T> {
    pub raw: Tensor<T>,
    pub bridge: Tensor<T>,
    pub grad_free: bool,
}

/// One graph holding every loss term of a step.
pub struct Objective<T> {
    pub graph: Graph<T>,
    backbone: Bound,
    projector: Bound,
    mappers: Vec<Bound>,
    adversary: Option<Bound>,
    pub l_cont: Var,
    pub l_omega: Option<Var>,
    /// `L_adv` with the discriminator trainable and its input detached.
    pub l_adv_disc: Option<Var>,
    /// `L_adv` with the discriminator frozen and its input live.
    pub l_adv_gen: Option<Var>,
    pub l_f: Var,
}

impl<T: Float> Objective<T> {
    fn scalar(&self, v: Option<Var>) -> f64 {
        v.map_or(0.0, |v| self.graph.value(v).item().as_f64())
    }

    pub fn components(&self) -> LossComponents {
        LossComponents {
            l_cont: self.scalar(Some(self.l_cont)),
            l_omega: self.scalar(self.l_omega),
            l_adv: self.scalar(self.l_adv_gen),
        }
    }

    pub fn l_f_value(&self) -> f64 {
        self.scalar(Some(self.l_f))
    }
}

/// Batch items regrouped so that each domain's items are contiguous.
struct Ordered<'a> {
    a1: Vec<&'a Image>,
    a2: Vec<&'a Image>,
    domains: Vec<usize>,
    ids: Vec<&'a str>,
    /// `(domain, start, end)` runs over the sorted items.
    runs: Vec<(usize, usize, usize)>,
}

fn order_batch(batch: &Batch, n_domains: usize) -> Result<Ordered<'_>> {
    if batch.pairs.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if let Some(p) = batch.pairs.iter().find(|p| p.domain_id >= n_domains) {
        return Err(Error::DomainOutOfRange {
            domain: p.domain_id,
            n_domains,
        });
    }
    let mut idx: Vec<usize> = (0..batch.pairs.len()).collect();
    idx.sort_by_key(|&i| batch.pairs[i].domain_id);
    let pairs: Vec<_> = idx.iter().map(|&i| &batch.pairs[i]).collect();
    let mut runs = Vec::new();
    let mut start = 0;
    for i in 1..=pairs.len() {
        if i == pairs.len() || pairs[i].domain_id != pairs[start].domain_id {
            runs.push((pairs[start].domain_id, start, i));
            start = i;
        }
    }
    Ok(Ordered {
        a1: pairs.iter().map(|p| &p.a1).collect(),
        a2: pairs.iter().map(|p| &p.a2).collect(),
        domains: pairs.iter().map(|p| p.domain_id).collect(),
        ids: pairs.iter().map(|p| p.sample_id.as_str()).collect(),
        runs,
    })
}

/// Bridge images enter the backbone as dark strokes on a light ground,
/// three identical channels of `1 - edge`, `[n, 3, H, W]`. An edge-free crop
/// then reads as a blank page rather than an all-zero input.
fn edges_to_rgb<T: Float>(maps: &[EdgeMap]) -> Tensor<T> {
    let (h, w) = (maps[0].height(), maps[0].width());
    let mut data = Vec::with_capacity(maps.len() * 3 * h * w);
    for m in maps {
        for _ in 0..3 {
            data.extend(m.values().iter().map(|&v| T::of(1.0 - v as f64)));
        }
    }
    Tensor::new(&[maps.len(), 3, h, w], data)
}

/// Graph counterpart of [`edges_to_rgb`] for mapper outputs `[n, 1, H, W]`.
fn bridge_rgb<T: Float>(g: &mut Graph<T>, psi: Var) -> Var {
    let shape = g.shape(psi).to_vec();
    let ones = g.constant(Tensor::full(&shape, T::one()));
    let inv = g.sub(ones, psi);
    gray_to_rgb(g, inv)
}

fn rows_f32<T: Float>(t: &Tensor<T>, i: usize) -> Vec<f32> {
    t.row(i).iter().map(|v| v.as_f64() as f32).collect()
}

impl<T: Float> TrainState<T> {
    /// Fresh state for a run over `domains`. `edge_net` must be given for
    /// `hed_fixed`, `learned` (its initialization) and the `l2_hed` variant.
    pub fn new(
        config: TrainConfig,
        domains: Vec<String>,
        domain_sizes: Vec<usize>,
        edge_net: Option<HedOracle>,
        total_steps: usize,
    ) -> Result<Self> {
        config.validate()?;
        let n = domains.len();
        if n == 0 || domain_sizes.len() != n {
            return Err(Error::InvalidArgument(format!(
                "{} domain names for {} domain sizes",
                n,
                domain_sizes.len()
            )));
        }
        let mode = config.use_bridge;
        let needs_net = matches!(mode, BridgeMode::HedFixed | BridgeMode::Learned)
            || (mode.is_learned() && config.bridge_variant == BridgeVariant::L2Hed);
        if needs_net && edge_net.is_none() {
            return Err(Error::MissingOracle(format!("{} with {}", mode.name(), config.bridge_variant.name())));
        }

        let enc_cfg = config.encoder();
        let encoder = EncoderState::new(enc_cfg, &mut rng::stream(&[config.seed, 0xE4C]));
        let mapper_arch = match (&edge_net, mode) {
            (Some(net), BridgeMode::Learned) => net.arch.clone(),
            _ => config.mapper_arch(),
        };
        let mappers: Vec<ParamSet<T>> = match mode {
            BridgeMode::Learned => {
                let net = edge_net.as_ref().expect("checked above");
                vec![net.params.cast(); n]
            }
            BridgeMode::LearnedNoPretrain => (0..n)
                .map(|d| mapper_arch.init(&mut rng::stream(&[config.seed, 0xB1D, d as u64])))
                .collect(),
            _ => Vec::new(),
        };
        let adversary = (config.use_adversary && n >= 2).then(|| {
            let arch = config.discriminator(n);
            let params: ParamSet<T> = arch.init(&mut rng::stream(&[config.seed, 0xAD5]));
            Adversary {
                opt: SgdState::new(&params),
                arch,
                params,
            }
        });

        let mut gen_groups = vec!["backbone".to_string(), "projector".to_string()];
        gen_groups.extend((0..mappers.len()).map(|d| format!("mapper.{d}")));
        let disc_groups: Vec<String> = adversary.iter().map(|_| "adversary".to_string()).collect();
        OptimizerGroups::new(disc_groups).check_disjoint(&OptimizerGroups::new(gen_groups))?;

        let queues = QueueBank::new(&domain_sizes, config.cap_max, config.proj_dim, config.multi_queue);
        Ok(Self {
            opt_backbone: SgdState::new(&encoder.backbone),
            opt_projector: SgdState::new(&encoder.projector),
            opt_mappers: mappers.iter().map(SgdState::new).collect(),
            config,
            domains,
            domain_sizes,
            encoder,
            mapper_arch,
            mappers,
            edge_net,
            adversary,
            queues,
            step: 0,
            total_steps,
        })
    }

    pub fn n_domains(&self) -> usize {
        self.domains.len()
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            cont: self.config.alpha_cont,
            bridge: self.config.effective_alpha_bridge(),
            adv: if self.adversary.is_some() { self.config.alpha_adv } else { 0.0 },
        }
    }

    pub fn lr(&self) -> f64 {
        cosine_lr(self.step, self.total_steps, self.config.base_lr, self.config.final_lr)
    }

    fn sgd(&self) -> SgdConfig {
        SgdConfig {
            momentum: self.config.sgd_momentum,
            weight_decay: self.config.weight_decay,
        }
    }

    /// Parameter groups by optimizer-group name.
    pub fn param_groups(&self) -> Vec<(String, &ParamSet<T>)> {
        let mut out = vec![
            ("backbone".to_string(), &self.encoder.backbone),
            ("projector".to_string(), &self.encoder.projector),
        ];
        out.extend(self.mappers.iter().enumerate().map(|(d, p)| (format!("mapper.{d}"), p)));
        if let Some(a) = &self.adversary {
            out.push(("adversary".to_string(), &a.params));
        }
        out
    }

    pub fn param_group_mut(&mut self, name: &str) -> Option<&mut ParamSet<T>> {
        match name {
            "backbone" => Some(&mut self.encoder.backbone),
            "projector" => Some(&mut self.encoder.projector),
            "adversary" => self.adversary.as_mut().map(|a| &mut a.params),
            _ => {
                let d: usize = name.strip_prefix("mapper.")?.parse().ok()?;
                self.mappers.get_mut(d)
            }
        }
    }

    /// Fixed bridge images for non-learned modes, `[n, 3, H, W]`.
    fn fixed_bridge(&self, views: &[&Image]) -> Result<Tensor<T>> {
        let maps = match self.config.use_bridge {
            BridgeMode::CannyFixed => views
                .iter()
                .map(|v| canny(v, self.config.canny_low, self.config.canny_high))
                .collect(),
            BridgeMode::HedFixed => self.edge_net.as_ref().expect("checked at construction").edge_maps(views)?,
            other => unreachable!("no fixed bridge for {}", other.name()),
        };
        Ok(edges_to_rgb(&maps))
    }

    /// Runs each domain's mapper on its slice of `views` and stacks the
    /// outputs, `[n, 1, H, W]`.
    fn mapped(&self, g: &mut Graph<T>, binds: &[Bound], views: &[&Image], runs: &[(usize, usize, usize)]) -> Result<Var> {
        let mut parts = Vec::with_capacity(runs.len());
        for &(d, s, e) in runs {
            let x = g.constant(images_to_tensor(&views[s..e]));
            parts.push(self.mapper_arch.forward(g, &binds[d], x)?);
        }
        Ok(if parts.len() == 1 { parts[0] } else { g.concat(&parts, 0) })
    }

    fn momentum_keys(&self, o: &Ordered) -> Result<Keys<T>> {
        let arch = &self.encoder.config.backbone;
        let proj = self.encoder.config.projector();
        let mut g = Graph::new();
        let bb = self.encoder.momentum_backbone.bind(&mut g, false);
        let pj = self.encoder.momentum_projector.bind(&mut g, false);
        let x = g.constant(images_to_tensor(&o.a2));
        let f = arch.forward(&mut g, &bb, x)?;
        let k_raw = proj.forward(&mut g, &pj, f);
        let k_bridge = match self.config.use_bridge {
            BridgeMode::None => k_raw,
            BridgeMode::CannyFixed | BridgeMode::HedFixed => {
                let xb = g.constant(self.fixed_bridge(&o.a2)?);
                let fb = arch.forward(&mut g, &bb, xb)?;
                proj.forward(&mut g, &pj, fb)
            }
            BridgeMode::Learned | BridgeMode::LearnedNoPretrain => {
                let binds: Vec<Bound> = self.mappers.iter().map(|m| m.bind(&mut g, false)).collect();
                let psi = self.mapped(&mut g, &binds, &o.a2, &o.runs)?;
                let xb = bridge_rgb(&mut g, psi);
                let fb = arch.forward(&mut g, &bb, xb)?;
                proj.forward(&mut g, &pj, fb)
            }
        };
        Ok(Keys {
            grad_free: !g.is_tracked(k_raw) && !g.is_tracked(k_bridge),
            raw: g.value(k_raw).clone(),
            bridge: g.value(k_bridge).clone(),
        })
    }

    /// Every queue's rows stacked, plus the per-item mask admitting only the
    /// item's own queue minus rows cached from the item itself.
    fn negatives(&self, o: &Ordered) -> (Tensor<T>, Option<Vec<bool>>) {
        let p = self.config.proj_dim;
        let queues = self.queues.queues();
        let total: usize = queues.iter().map(|q| q.fill()).sum();
        if total == 0 {
            return (Tensor::zeros(&[0, p]), None);
        }
        let mut data = Vec::with_capacity(total * p);
        let mut owner = Vec::with_capacity(total);
        let mut ids = Vec::with_capacity(total);
        for (qi, q) in queues.iter().enumerate() {
            for (row, id) in q.rows().into_iter().zip(q.row_source_ids()) {
                data.extend(row.iter().map(|&v| T::of(v as f64)));
                owner.push(qi);
                ids.push(id);
            }
        }
        let exclude = self.config.exclude_own_cached;
        let mut mask = Vec::with_capacity(o.domains.len() * total);
        for (&d, &sid) in o.domains.iter().zip(&o.ids) {
            let qi = self.queues.queue_index(d);
            mask.extend((0..total).map(|j| owner[j] == qi && !(exclude && ids[j] == sid)));
        }
        (Tensor::new(&[total, p], data), Some(mask))
    }

    fn build(&self, o: &Ordered, keys: &Keys<T>) -> Result<Objective<T>> {
        let cfg = &self.config;
        let arch = &self.encoder.config.backbone;
        let proj = self.encoder.config.projector();
        let mut g = Graph::new();
        let bb = self.encoder.backbone.bind(&mut g, true);
        let pj = self.encoder.projector.bind(&mut g, true);
        let mappers: Vec<Bound> = self.mappers.iter().map(|m| m.bind(&mut g, true)).collect();

        let x = g.constant(images_to_tensor(&o.a1));
        let f_raw = arch.forward(&mut g, &bb, x)?;
        let q_raw = proj.forward(&mut g, &pj, f_raw);

        let mut l_omega = None;
        let (f_br, q_br) = match cfg.use_bridge {
            BridgeMode::None => (f_raw, q_raw),
            BridgeMode::CannyFixed | BridgeMode::HedFixed => {
                let xb = g.constant(self.fixed_bridge(&o.a1)?);
                let fb = arch.forward(&mut g, &bb, xb)?;
                (fb, proj.forward(&mut g, &pj, fb))
            }
            BridgeMode::Learned | BridgeMode::LearnedNoPretrain => {
                let psi = self.mapped(&mut g, &mappers, &o.a1, &o.runs)?;
                let targets = bridge_targets(&o.a1, &cfg.bridge_loss(), self.edge_net.as_ref())?;
                let target_refs: Vec<&EdgeMap> = targets.iter().collect();
                l_omega = Some(bridge_loss_graph(&mut g, psi, &target_refs, cfg.bridge_variant));
                let xb = bridge_rgb(&mut g, psi);
                let fb = arch.forward(&mut g, &bb, xb)?;
                (fb, proj.forward(&mut g, &pj, fb))
            }
        };

        let (negs, mask) = self.negatives(o);
        let negs = g.constant(negs);
        let kb = g.constant(keys.bridge.clone());
        let kr = g.constant(keys.raw.clone());
        let tau = T::of(cfg.temperature);
        let t1 = g.info_nce(q_raw, kb, negs, mask.clone(), tau);
        let t2 = g.info_nce(q_br, kr, negs, mask, tau);
        let per_item = g.add(t1, t2);
        let l_cont = g.mean(per_item);

        let (mut adv_bind, mut l_adv_disc, mut l_adv_gen) = (None, None, None);
        if let Some(a) = &self.adversary {
            let feats = BridgeFeatures::tag(f_br, Provenance::Bridge);
            let live = a.params.bind(&mut g, true);
            let detached = feats.detached(&mut g);
            l_adv_disc = Some(adv_loss_graph(&mut g, &a.arch, &live, &detached, &o.domains)?);
            let frozen = a.params.bind(&mut g, false);
            l_adv_gen = Some(adv_loss_graph(&mut g, &a.arch, &frozen, &feats, &o.domains)?);
            adv_bind = Some(live);
        }

        let w = self.weights();
        let mut l_f = g.scale(l_cont, T::of(w.cont));
        if let Some(lo) = l_omega {
            let t = g.scale(lo, T::of(w.bridge));
            l_f = g.add(l_f, t);
        }
        if let Some(la) = l_adv_gen {
            // The generator only pushes while the discriminator beats chance;
            // past ln N the term is constant and its gradient vanishes.
            let chance = (self.n_domains() as f64).ln();
            let t = if g.value(la).item().as_f64() < chance {
                g.scale(la, T::of(w.adv))
            } else {
                g.constant(Tensor::scalar(T::of(w.adv * chance)))
            };
            l_f = g.sub(l_f, t);
        }
        Ok(Objective {
            graph: g,
            backbone: bb,
            projector: pj,
            mappers,
            adversary: adv_bind,
            l_cont,
            l_omega,
            l_adv_disc,
            l_adv_gen,
            l_f,
        })
    }

    /// The step's objective graph without applying any update.
    pub fn objective(&self, batch: &Batch) -> Result<Objective<T>> {
        let o = order_batch(batch, self.n_domains())?;
        let keys = self.momentum_keys(&o)?;
        self.build(&o, &keys)
    }

    /// Value of the generator objective `L_f` for `batch` at the current state.
    pub fn objective_value(&self, batch: &Batch) -> Result<f64> {
        Ok(self.objective(batch)?.l_f_value())
    }

    pub fn keys(&self, batch: &Batch) -> Result<Keys<T>> {
        self.momentum_keys(&order_batch(batch, self.n_domains())?)
    }

    /// `L_f` with the positive keys held fixed. This is the function the
    /// analytic gradients differentiate: the key view's Ψ shares weights
    /// with the query view but is a constant.
    pub fn objective_value_with_keys(&self, batch: &Batch, keys: &Keys<T>) -> Result<f64> {
        Ok(self.build(&order_batch(batch, self.n_domains())?, keys)?.l_f_value())
    }

    /// Analytic gradients of `L_f` per parameter group. The discriminator
    /// group gets the gradient of its own `+L_adv`.
    pub fn objective_gradients(&self, batch: &Batch) -> Result<Vec<(String, Vec<Option<Tensor<T>>>)>> {
        let obj = self.objective(batch)?;
        let grads = obj.graph.backward(obj.l_f);
        let mut out = vec![
            ("backbone".to_string(), obj.backbone.grads(&grads)),
            ("projector".to_string(), obj.projector.grads(&grads)),
        ];
        out.extend(obj.mappers.iter().enumerate().map(|(d, b)| (format!("mapper.{d}"), b.grads(&grads))));
        if let (Some(b), Some(l)) = (&obj.adversary, obj.l_adv_disc) {
            out.push(("adversary".to_string(), b.grads(&obj.graph.backward(l))));
        }
        Ok(out)
    }

    /// Backbone features of bridge images `B(Ψ_d(I))`, one row per image.
    pub fn bridge_features(&self, images: &[&Image], domains: &[usize], chunk: usize) -> Result<Tensor<T>> {
        assert_eq!(images.len(), domains.len(), "one domain per image");
        let arch = &self.encoder.config.backbone;
        let dim = arch.feature_dim();
        let mut out = vec![T::zero(); images.len() * dim];
        for d in 0..self.n_domains() {
            let idx: Vec<usize> = (0..images.len()).filter(|&i| domains[i] == d).collect();
            for part in idx.chunks(chunk.max(1)) {
                let views: Vec<&Image> = part.iter().map(|&i| images[i]).collect();
                let mut g = Graph::new();
                let bb = self.encoder.backbone.bind(&mut g, false);
                let x = match self.config.use_bridge {
                    BridgeMode::None => g.constant(images_to_tensor(&views)),
                    BridgeMode::CannyFixed | BridgeMode::HedFixed => g.constant(self.fixed_bridge(&views)?),
                    BridgeMode::Learned | BridgeMode::LearnedNoPretrain => {
                        let m = self.mappers[d].bind(&mut g, false);
                        let psi = self.mapped(&mut g, std::slice::from_ref(&m), &views, &[(0, 0, views.len())])?;
                        bridge_rgb(&mut g, psi)
                    }
                };
                let f = arch.forward(&mut g, &bb, x)?;
                for (r, &i) in part.iter().enumerate() {
                    out[i * dim..(i + 1) * dim].copy_from_slice(g.value(f).row(r));
                }
            }
        }
        Ok(Tensor::new(&[images.len(), dim], out))
    }

    pub fn train_step(&mut self, batch: &Batch) -> Result<StepMetrics> {
        self.train_step_observed(batch, &mut |_, _| {})
    }

    /// One step: discriminator update, generator update, EMA, then the
    /// batch's keys enter the queues. `observer` sees the state after each
    /// of the two updates.
    pub fn train_step_observed(&mut self, batch: &Batch, observer: &mut dyn FnMut(Phase, &Self)) -> Result<StepMetrics> {
        let o = order_batch(batch, self.n_domains())?;
        let keys = self.momentum_keys(&o)?;
        let obj = self.build(&o, &keys)?;
        let comps = obj.components();
        let capped = LossComponents {
            l_adv: comps.l_adv.min((self.n_domains() as f64).ln()),
            ..comps
        };
        let l_f = full_loss(&capped, &self.weights())?;
        let lr = self.lr();
        let sgd = self.sgd();

        if let (Some(a), Some(b), Some(l)) = (self.adversary.as_mut(), &obj.adversary, obj.l_adv_disc) {
            let ld = obj.graph.value(l).item().as_f64();
            if !ld.is_finite() {
                return Err(Error::NonFinite("l_adv"));
            }
            let grads = obj.graph.backward(l);
            a.opt.step(&mut a.params, &b.grads(&grads), lr * self.config.adv_lr_scale, &sgd);
        }
        observer(Phase::Discriminator, self);

        let grads = obj.graph.backward(obj.l_f);
        self.opt_backbone.step(&mut self.encoder.backbone, &obj.backbone.grads(&grads), lr, &sgd);
        self.opt_projector
            .step(&mut self.encoder.projector, &obj.projector.grads(&grads), lr, &sgd);
        for ((m, opt), b) in self.mappers.iter_mut().zip(&mut self.opt_mappers).zip(&obj.mappers) {
            opt.step(m, &b.grads(&grads), lr, &sgd);
        }
        observer(Phase::Generator, self);

        self.encoder.ema_update(self.config.ema_m);
        for i in 0..o.domains.len() {
            let d = o.domains[i];
            self.queues
                .queue_for_mut(d)
                .enqueue_pair(&rows_f32(&keys.bridge, i), &rows_f32(&keys.raw, i), o.ids[i], d)?;
        }
        let step = self.step;
        self.step += 1;
        Ok(StepMetrics {
            step,
            lr,
            l_cont: comps.l_cont,
            l_omega: comps.l_omega,
            l_adv: comps.l_adv,
            l_f,
            momentum_grad_free: keys.grad_free,
        })
    }
}
