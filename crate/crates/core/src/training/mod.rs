//! Losses, optimizers, dropout, backpropagation through time and the epoch loop.

mod loss;
mod model;
mod optim;
mod trainer;

pub use loss::{binary_cross_entropy, perplexity, softmax_cross_entropy, BCE_EPS};
pub use model::{
    batch_loss, bptt, dropout_apply, dropout_mask, evaluate, parse_readout, rollout_losses, Dropout, Model,
    ModelSpec, Readout,
};
pub use optim::{
    clip_factor, clipped_sgd_update, global_norm, lr_schedule, rmsprop_update, OptimizerConfig, OptimizerKind,
    OptimizerState,
};
pub use trainer::{
    check_dataset, train_loop, EarlyStopping, EpochMetrics, Split, TrainConfig, TrainOutcome, TrainState,
    METRICS_HEADER,
};
