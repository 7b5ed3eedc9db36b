//! Multi-domain corpora: ingestion, the synthetic generator, augmentation
//! and the batch sampler.

pub mod augment;
pub mod dataset;
pub mod sampler;
pub mod synthetic;

pub use augment::{augment, AugmentConfig};
pub use dataset::{ingest_directory, read_manifest, write_manifest, Dataset, DomainCatalog, DomainSample, ManifestEntry, MANIFEST_FILE};
pub use sampler::{make_batch, AugmentedPair, Batch, BatchPlan, BatchStream};
pub use synthetic::{make_synthetic, render_synthetic, Style, SyntheticSpec, SHAPES};
