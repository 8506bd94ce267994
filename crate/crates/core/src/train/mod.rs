//! Losses, rewards, gradient assembly, the two-phase training loop, and
//! reconstruction metrics.

mod adam;
mod eval;
mod losses;
mod rollout;
mod trainer;

pub use adam::{Adam, AdamCfg};
pub use eval::{evaluate, improvement_pct, EvalReport};
pub use losses::{
    actor_loss, compute_rewards, demo_loss, entropy_loss, reconstruction_loss, returns,
    value_loss, StepRecord, Trajectory,
};
pub use rollout::{run_batch, BatchOutcome, EpisodeCtx, LossSums, PolicyKind, RolloutOptions};
pub use trainer::{
    train_loop, EpochLog, SidekickData, SidekickMode, TrainOutcome, TrainPolicy, TrainSettings,
};

/// Fixed micro-batch width: batches are split into chunks of this size for
/// parallel rollout, and chunk gradients are reduced in index order, so
/// results are independent of worker count.
pub const MICRO_BATCH: usize = 8;
