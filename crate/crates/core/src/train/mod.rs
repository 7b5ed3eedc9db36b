//! Objective composition, the training loop and its artifacts.

mod checkpoint;
mod config;
mod run;
mod state;

pub use checkpoint::BackboneExport;
pub use config::{cosine_lr, TrainConfig};
pub use run::{
    distill_edge_net, load_dataset, needs_edge_net, resolve_edge_net, total_steps, train, training_split, RunOutcome,
    RunPaths, BACKBONE_FILE, CHECKPOINT_FILE, EDGE_NET_FILE, METRICS_FILE,
};
pub use state::{full_loss, Adversary, Keys, LossComponents, LossWeights, Objective, Phase, StepMetrics, TrainState};
