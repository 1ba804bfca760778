//! Deterministic random streams.
//!
//! Every run owns one seed. Each consumer (batch sampling, augmentation,
//! MixUp, ...) draws from its own ChaCha stream, re-derived per training
//! step, so adding a loss term never perturbs the draws of another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type LabRng = ChaCha8Rng;

/// Independent consumers of randomness within a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Init = 0,
    LabeledBatch = 1,
    UnlabeledBatch = 2,
    Pairs = 3,
    Augment = 4,
    Mixup = 5,
    PairAugment = 6,
    Vat = 7,
    Split = 8,
    Classes = 9,
}

const STREAMS: u64 = 16;

/// Stream that is not tied to a training step.
pub fn stream_rng(seed: u64, stream: Stream) -> LabRng {
    step_rng(seed, u64::MAX / STREAMS, stream)
}

/// Stream for one training step.
pub fn step_rng(seed: u64, step: u64, stream: Stream) -> LabRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step.wrapping_mul(STREAMS) + stream as u64);
    rng
}

/// Plain seeded generator for one-off use.
pub fn seeded(seed: u64) -> LabRng {
    ChaCha8Rng::seed_from_u64(seed)
}
