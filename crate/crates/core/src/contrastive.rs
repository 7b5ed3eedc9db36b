//! InfoNCE, the two-term cross-bridge loss and the per-domain negative queues.

use edgebridge_tensor::{log_sum_exp, Float, Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Allowed deviation of a stored row from unit norm.
pub const UNIT_NORM_TOL: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    pub temperature: f64,
    pub exclude_own_cached: bool,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            temperature: 0.2,
            exclude_own_cached: true,
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `-log(exp(q.k+/τ) / (exp(q.k+/τ) + Σ exp(q.k-/τ)))` in f64.
pub fn info_nce(q: &[f64], k_plus: &[f64], negatives: &[&[f64]], tau: f64) -> Result<f64> {
    if q.is_empty() || k_plus.is_empty() {
        return Err(Error::InvalidArgument("info_nce needs non-empty query and positive".into()));
    }
    if q.len() != k_plus.len() || negatives.iter().any(|n| n.len() != q.len()) {
        return Err(Error::InvalidArgument("info_nce dimension mismatch".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    let pos = dot(q, k_plus) / tau;
    let logits = std::iter::once(pos).chain(negatives.iter().map(|n| dot(q, n) / tau));
    Ok(log_sum_exp(logits) - pos)
}

/// Circular buffer of unit embeddings from a single domain, or from all
/// domains when `domain_id` is `None` (the shared-queue baseline).
#[derive(Clone, Debug, PartialEq)]
pub struct NegativeQueue {
    domain_id: Option<usize>,
    capacity: usize,
    dim: usize,
    buffer: Vec<f32>,
    head: usize,
    fill: usize,
    source_ids: Vec<String>,
    source_domains: Vec<usize>,
}

/// Serializable snapshot of a queue.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueueMeta {
    pub domain_id: Option<usize>,
    pub capacity: usize,
    pub dim: usize,
    pub head: usize,
    pub fill: usize,
    pub source_ids: Vec<String>,
    pub source_domains: Vec<usize>,
}

/// `min(cap_max, 2 |D_n|)`: every image contributes two rows per epoch.
pub fn queue_capacity(cap_max: usize, domain_size: usize) -> usize {
    cap_max.min(2 * domain_size)
}

impl NegativeQueue {
    pub fn new(domain_id: Option<usize>, capacity: usize, dim: usize) -> Self {
        assert!(capacity > 0 && dim > 0, "queue capacity and dim must be positive");
        Self {
            domain_id,
            capacity,
            dim,
            buffer: vec![0.0; capacity * dim],
            head: 0,
            fill: 0,
            source_ids: vec![String::new(); capacity],
            source_domains: vec![usize::MAX; capacity],
        }
    }

    pub fn domain_id(&self) -> Option<usize> {
        self.domain_id
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn fill(&self) -> usize {
        self.fill
    }

    pub fn head(&self) -> usize {
        self.head
    }

    pub fn is_empty(&self) -> bool {
        self.fill == 0
    }

    /// Slot indices of valid rows, oldest first.
    fn order(&self) -> impl Iterator<Item = usize> + '_ {
        let start = (self.head + self.capacity - self.fill) % self.capacity;
        (0..self.fill).map(move |i| (start + i) % self.capacity)
    }

    /// Valid rows oldest first.
    pub fn rows(&self) -> Vec<&[f32]> {
        self.order().map(|s| &self.buffer[s * self.dim..(s + 1) * self.dim]).collect()
    }

    pub fn row_source_ids(&self) -> Vec<&str> {
        self.order().map(|s| self.source_ids[s].as_str()).collect()
    }

    pub fn row_source_domains(&self) -> Vec<usize> {
        self.order().map(|s| self.source_domains[s]).collect()
    }

    /// Valid rows as a `[fill, dim]` matrix, oldest first.
    pub fn snapshot<T: Float>(&self) -> Tensor<T> {
        let data = self.rows().into_iter().flatten().map(|&v| T::of(v as f64)).collect();
        Tensor::new(&[self.fill, self.dim], data)
    }

    fn push_row(&mut self, row: &[f32], source_id: &str, source_domain: usize) {
        let s = self.head;
        self.buffer[s * self.dim..(s + 1) * self.dim].copy_from_slice(row);
        self.source_ids[s] = source_id.to_string();
        self.source_domains[s] = source_domain;
        self.head = (self.head + 1) % self.capacity;
        self.fill = (self.fill + 1).min(self.capacity);
    }

    fn check_row(&self, row: &[f32]) -> Result<()> {
        if row.len() != self.dim {
            return Err(Error::InvalidArgument(format!("queue row has dim {}, expected {}", row.len(), self.dim)));
        }
        let norm = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::NotUnitNorm { norm });
        }
        Ok(())
    }

    /// Appends the bridge-path key then the raw-path key for one image.
    pub fn enqueue_pair(&mut self, emb_bridge: &[f32], emb_raw: &[f32], source_id: &str, source_domain: usize) -> Result<()> {
        if let Some(d) = self.domain_id {
            if d != source_domain {
                return Err(Error::QueueIsolation {
                    queue: d,
                    got: source_domain,
                });
            }
        }
        self.check_row(emb_bridge)?;
        self.check_row(emb_raw)?;
        self.push_row(emb_bridge, source_id, source_domain);
        self.push_row(emb_raw, source_id, source_domain);
        Ok(())
    }

    /// Negative mask for queries from `query_ids`: row `j` is excluded for
    /// query `i` when it caches the same source image.
    pub fn exclusion_mask(&self, query_ids: &[&str], exclude_own_cached: bool) -> Vec<bool> {
        let ids = self.row_source_ids();
        query_ids
            .iter()
            .flat_map(|q| ids.iter().map(move |r| !(exclude_own_cached && r == q)))
            .collect()
    }

    pub fn meta(&self) -> QueueMeta {
        QueueMeta {
            domain_id: self.domain_id,
            capacity: self.capacity,
            dim: self.dim,
            head: self.head,
            fill: self.fill,
            source_ids: self.source_ids.clone(),
            source_domains: self.source_domains.clone(),
        }
    }

    pub fn buffer(&self) -> &[f32] {
        &self.buffer
    }

    pub fn restore(meta: QueueMeta, buffer: Vec<f32>) -> Result<Self> {
        let ok = meta.capacity > 0
            && buffer.len() == meta.capacity * meta.dim
            && meta.source_ids.len() == meta.capacity
            && meta.source_domains.len() == meta.capacity
            && meta.fill <= meta.capacity
            && meta.head < meta.capacity;
        if !ok {
            return Err(Error::CorruptCheckpoint("inconsistent queue state".into()));
        }
        Ok(Self {
            domain_id: meta.domain_id,
            capacity: meta.capacity,
            dim: meta.dim,
            buffer,
            head: meta.head,
            fill: meta.fill,
            source_ids: meta.source_ids,
            source_domains: meta.source_domains,
        })
    }
}

/// All negative queues of a run: one per domain, or a single shared one.
#[derive(Clone, Debug, PartialEq)]
pub struct QueueBank {
    queues: Vec<NegativeQueue>,
    multi: bool,
}

impl QueueBank {
    pub fn new(domain_sizes: &[usize], cap_max: usize, dim: usize, multi: bool) -> Self {
        let queues = if multi {
            domain_sizes
                .iter()
                .enumerate()
                .map(|(d, &n)| NegativeQueue::new(Some(d), queue_capacity(cap_max, n), dim))
                .collect()
        } else {
            vec![NegativeQueue::new(None, queue_capacity(cap_max, domain_sizes.iter().sum()), dim)]
        };
        Self { queues, multi }
    }

    pub fn from_queues(queues: Vec<NegativeQueue>, multi: bool) -> Self {
        Self { queues, multi }
    }

    pub fn is_multi(&self) -> bool {
        self.multi
    }

    pub fn queues(&self) -> &[NegativeQueue] {
        &self.queues
    }

    pub fn queue_index(&self, domain: usize) -> usize {
        if self.multi {
            domain
        } else {
            0
        }
    }

    pub fn queue_for(&self, domain: usize) -> &NegativeQueue {
        &self.queues[self.queue_index(domain)]
    }

    pub fn queue_for_mut(&mut self, domain: usize) -> &mut NegativeQueue {
        let i = self.queue_index(domain);
        &mut self.queues[i]
    }
}

/// Plain-number reference for one image's loss: the raw query against the
/// bridge key plus the bridge query against the raw key, negatives from the
/// domain queue minus rows cached from this same image.
pub fn contrastive_pair_loss(
    q_raw: &[f64],
    k_bridge: &[f64],
    q_bridge: &[f64],
    k_raw: &[f64],
    queue: &NegativeQueue,
    source_id: &str,
    cfg: &ContrastiveConfig,
) -> Result<f64> {
    let rows: Vec<Vec<f64>> = queue
        .rows()
        .iter()
        .zip(queue.row_source_ids())
        .filter(|(_, id)| !(cfg.exclude_own_cached && *id == source_id))
        .map(|(r, _)| r.iter().map(|&v| v as f64).collect())
        .collect();
    let negs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
    Ok(info_nce(q_raw, k_bridge, &negs, cfg.temperature)? + info_nce(q_bridge, k_raw, &negs, cfg.temperature)?)
}

/// Batched graph version of [`contrastive_pair_loss`] for items of one
/// queue: returns the per-item sums `[m]`.
pub fn contrastive_loss_graph<T: Float>(
    g: &mut Graph<T>,
    q_raw: Var,
    k_bridge: Var,
    q_bridge: Var,
    k_raw: Var,
    queue: &NegativeQueue,
    source_ids: &[&str],
    cfg: &ContrastiveConfig,
) -> Var {
    let negs = g.constant(queue.snapshot());
    let mask = if queue.is_empty() {
        None
    } else {
        Some(queue.exclusion_mask(source_ids, cfg.exclude_own_cached))
    };
    let tau = T::of(cfg.temperature);
    let t1 = g.info_nce(q_raw, k_bridge, negs, mask.clone(), tau);
    let t2 = g.info_nce(q_bridge, k_raw, negs, mask, tau);
    g.add(t1, t2)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(v: &[f32]) -> Vec<f32> {
        let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        v.iter().map(|x| x / n).collect()
    }

    #[test]
    fn worked_values() {
        let q = [1.0, 0.0, 0.0];
        let l = info_nce(&q, &q, &[&[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]], 1.0).unwrap();
        assert!((l - (1.0 + 2.0 / std::f64::consts::E).ln()).abs() < 1e-12);
        assert!((l - 0.5514).abs() < 1e-4);
        assert_eq!(info_nce(&q, &q, &[], 0.7).unwrap(), 0.0);
        let l2 = info_nce(&q, &[0.0, 1.0, 0.0], &[&q], 0.5).unwrap();
        assert!((l2 - (1.0 + 2f64.exp()).ln()).abs() < 1e-12);
        assert!((l2 - 2.1269).abs() < 1e-4);
    }

    #[test]
    fn empty_inputs_rejected() {
        assert!(info_nce(&[], &[], &[], 1.0).is_err());
        assert!(info_nce(&[1.0], &[1.0], &[], 0.0).is_err());
    }

    #[test]
    fn fifo_eviction() {
        let mut q = NegativeQueue::new(Some(0), 4, 2);
        let e: Vec<Vec<f32>> = (0..6).map(|i| unit(&[1.0, i as f32])).collect();
        q.enqueue_pair(&e[0], &e[1], "x", 0).unwrap();
        q.enqueue_pair(&e[2], &e[3], "y", 0).unwrap();
        q.enqueue_pair(&e[4], &e[5], "z", 0).unwrap();
        let rows: Vec<Vec<f32>> = q.rows().into_iter().map(<[f32]>::to_vec).collect();
        assert_eq!(rows, vec![e[2].clone(), e[3].clone(), e[4].clone(), e[5].clone()]);
        assert_eq!(q.row_source_ids(), vec!["y", "y", "z", "z"]);
    }

    #[test]
    fn fill_counts_to_capacity() {
        let mut q = NegativeQueue::new(Some(1), 6, 2);
        let r = unit(&[1.0, 1.0]);
        for i in 0..3 {
            q.enqueue_pair(&r, &r, &i.to_string(), 1).unwrap();
        }
        assert_eq!(q.fill(), 6);
    }

    #[test]
    fn isolation_and_norm_checks() {
        let mut q = NegativeQueue::new(Some(0), 4, 2);
        let r = unit(&[1.0, 2.0]);
        assert!(matches!(q.enqueue_pair(&r, &r, "a", 1), Err(Error::QueueIsolation { queue: 0, got: 1 })));
        assert!(matches!(q.enqueue_pair(&[1.0, 1.0], &r, "a", 0), Err(Error::NotUnitNorm { .. })));
        assert_eq!(q.fill(), 0);
    }

    #[test]
    fn capacity_rule() {
        assert_eq!(queue_capacity(4096, 350), 700);
        assert_eq!(queue_capacity(64, 350), 64);
        let bank = QueueBank::new(&[10, 20], 30, 4, true);
        assert_eq!(bank.queues()[0].capacity(), 20);
        assert_eq!(bank.queues()[1].capacity(), 30);
        let single = QueueBank::new(&[10, 20], 100, 4, false);
        assert_eq!(single.queues().len(), 1);
        assert_eq!(single.queues()[0].capacity(), 60);
    }

    #[test]
    fn identity_bridge_empty_queue_is_zero() {
        let q = NegativeQueue::new(Some(0), 4, 3);
        let v = [0.6, 0.8, 0.0];
        let l = contrastive_pair_loss(&v, &v, &v, &v, &q, "a", &ContrastiveConfig::default()).unwrap();
        assert_eq!(l, 0.0);
    }
}
