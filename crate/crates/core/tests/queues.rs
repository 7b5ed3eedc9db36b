mod common;

use common::checks;

#[test]
fn per_domain_queues_match_a_fifo_model_over_500_steps() {
    for seed in 0..3 {
        checks::queue_fuzz(true, seed, 500);
    }
}

#[test]
fn shared_queue_matches_a_fifo_model_over_500_steps() {
    checks::queue_fuzz(false, 7, 500);
}

/// Through the real training step: after every step each queue ends with
/// two rows per batch item of its domain, in batch order, and never holds
/// another domain's image.
#[test]
fn training_enqueues_match_the_model_over_500_steps() {
    checks::training_queue_fuzz(500);
}
