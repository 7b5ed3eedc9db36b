use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::Arc;
use std::thread::{self, JoinHandle};

use rand::seq::SliceRandom;

use super::augment::{augment, AugmentConfig};
use super::dataset::Dataset;
use crate::image::Image;
use crate::rng;

const EPOCH_TAG: u64 = 0xE0;
const VIEW_TAG: u64 = 0x71E;

/// Two views of one source sample.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedPair {
    pub a1: Image,
    pub a2: Image,
    /// Position of the source in its [`Dataset`].
    pub source: usize,
    pub domain_id: usize,
    pub sample_id: String,
    pub seeds: (u64, u64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub step: usize,
    pub pairs: Vec<AugmentedPair>,
    /// Number of pairs from each domain; sums to the batch size.
    pub domain_counts: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Seeded epoch permutations over the union of all domains. The final
/// partial batch of each epoch is dropped.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchPlan {
    pub n_samples: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl BatchPlan {
    pub fn new(n_samples: usize, batch_size: usize, seed: u64) -> Self {
        assert!(batch_size > 0 && batch_size <= n_samples, "batch size {batch_size} for {n_samples} samples");
        Self {
            n_samples,
            batch_size,
            seed,
        }
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.n_samples / self.batch_size
    }

    pub fn permutation(&self, epoch: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.n_samples).collect();
        idx.shuffle(&mut rng::stream(&[self.seed, EPOCH_TAG, epoch as u64]));
        idx
    }

    /// Sample indices for a global step.
    pub fn indices(&self, step: usize) -> Vec<usize> {
        let spe = self.steps_per_epoch();
        let (epoch, within) = (step / spe, step % spe);
        self.permutation(epoch)[within * self.batch_size..(within + 1) * self.batch_size].to_vec()
    }

    pub fn view_seeds(&self, step: usize, slot: usize) -> (u64, u64) {
        let base = [self.seed, VIEW_TAG, step as u64, slot as u64];
        (rng::mix(&[base[0], base[1], base[2], base[3], 1]), rng::mix(&[base[0], base[1], base[2], base[3], 2]))
    }
}

fn make_pair(ds: &Dataset, plan: &BatchPlan, cfg: &AugmentConfig, step: usize, slot: usize, source: usize) -> AugmentedPair {
    let s = ds.sample(source);
    let seeds = plan.view_seeds(step, slot);
    AugmentedPair {
        a1: augment(&s.image, cfg, seeds.0),
        a2: augment(&s.image, cfg, seeds.1),
        source,
        domain_id: s.domain_id,
        sample_id: s.sample_id.clone(),
        seeds,
    }
}

/// Builds the batch for `step`; a pure function of its arguments.
/// `workers > 1` splits augmentation across threads without changing the result.
pub fn make_batch(ds: &Dataset, plan: &BatchPlan, cfg: &AugmentConfig, step: usize, workers: usize) -> Batch {
    let indices = plan.indices(step);
    let pairs: Vec<AugmentedPair> = if workers <= 1 {
        indices
            .iter()
            .enumerate()
            .map(|(slot, &i)| make_pair(ds, plan, cfg, step, slot, i))
            .collect()
    } else {
        let chunk = indices.len().div_ceil(workers);
        thread::scope(|sc| {
            let handles: Vec<_> = indices
                .chunks(chunk)
                .enumerate()
                .map(|(c, part)| {
                    sc.spawn(move || {
                        part.iter()
                            .enumerate()
                            .map(|(j, &i)| make_pair(ds, plan, cfg, step, c * chunk + j, i))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            handles.into_iter().flat_map(|h| h.join().expect("augmentation worker panicked")).collect()
        })
    };
    let mut domain_counts = vec![0; ds.catalog().n_domains()];
    pairs.iter().for_each(|p| domain_counts[p.domain_id] += 1);
    Batch {
        step,
        pairs,
        domain_counts,
    }
}

/// Background producer feeding batches through a bounded channel.
pub struct BatchStream {
    rx: Receiver<Batch>,
    handle: Option<JoinHandle<()>>,
}

impl BatchStream {
    pub fn spawn(
        ds: Arc<Dataset>,
        plan: BatchPlan,
        cfg: AugmentConfig,
        steps: std::ops::Range<usize>,
        workers: usize,
        depth: usize,
    ) -> Self {
        let (tx, rx) = sync_channel(depth.max(1));
        let handle = thread::spawn(move || {
            for step in steps {
                if tx.send(make_batch(&ds, &plan, &cfg, step, workers)).is_err() {
                    break;
                }
            }
        });
        Self { rx, handle: Some(handle) }
    }
}

impl Iterator for BatchStream {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        self.rx.recv().ok()
    }
}

impl Drop for BatchStream {
    fn drop(&mut self) {
        // Close our end first so a blocked producer wakes up and exits.
        let (_, dummy) = sync_channel(0);
        drop(std::mem::replace(&mut self.rx, dummy));
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::{render_synthetic, SyntheticSpec};

    fn tiny() -> Dataset {
        render_synthetic(&SyntheticSpec {
            n_domains: 2,
            n_classes: 2,
            per_class: 4,
            image_size: 16,
            seed: 0,
        })
        .unwrap()
    }

    #[test]
    fn epoch_covers_each_sample_once() {
        let plan = BatchPlan::new(512, 256, 3);
        assert_eq!(plan.steps_per_epoch(), 2);
        let mut all: Vec<usize> = plan.indices(0).into_iter().chain(plan.indices(1)).collect();
        all.sort_unstable();
        assert_eq!(all, (0..512).collect::<Vec<_>>());
    }

    #[test]
    fn epochs_use_different_orders() {
        let plan = BatchPlan::new(64, 8, 3);
        assert_ne!(plan.permutation(0), plan.permutation(1));
    }

    #[test]
    fn domain_counts_sum_to_batch() {
        let ds = tiny();
        let plan = BatchPlan::new(ds.len(), 6, 1);
        let b = make_batch(&ds, &plan, &AugmentConfig::default(), 0, 1);
        assert_eq!(b.domain_counts.iter().sum::<usize>(), 6);
    }

    #[test]
    fn workers_do_not_change_batches() {
        let ds = tiny();
        let plan = BatchPlan::new(ds.len(), 5, 1);
        let cfg = AugmentConfig::default();
        for step in 0..4 {
            assert_eq!(make_batch(&ds, &plan, &cfg, step, 1), make_batch(&ds, &plan, &cfg, step, 3));
        }
    }

    #[test]
    fn stream_matches_direct_construction() {
        let ds = Arc::new(tiny());
        let plan = BatchPlan::new(ds.len(), 4, 9);
        let cfg = AugmentConfig::default();
        let streamed: Vec<Batch> = BatchStream::spawn(ds.clone(), plan, cfg.clone(), 2..7, 2, 2).collect();
        assert_eq!(streamed.len(), 5);
        for b in &streamed {
            assert_eq!(*b, make_batch(&ds, &plan, &cfg, b.step, 1));
        }
    }

    #[test]
    fn dropping_a_stream_early_does_not_hang() {
        let ds = Arc::new(tiny());
        let plan = BatchPlan::new(ds.len(), 4, 9);
        let mut s = BatchStream::spawn(ds, plan, AugmentConfig::default(), 0..1000, 1, 1);
        assert!(s.next().is_some());
    }
}
