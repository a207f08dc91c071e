//! Loss, optimizer, learning-rate schedule, the synthetic toy dataset and
//! the windowed training loop.

mod gradcheck;
mod loss;
mod optim;
mod toy;
mod trainer;

pub use gradcheck::{
    run_gradcheck, tiny_network, GradcheckReport, LAYER_TOLERANCE, MAX_SKIPPED_FRACTION, UNROLLED_TOLERANCE,
};
pub use loss::{cross_entropy_batch, cross_entropy_loss};
pub use optim::{nesterov_step, nesterov_update, schedule_lr, Nesterov, OptimizerConfig};
pub use toy::{make_toy_dataset, toy_network_config, ToyDataset, TOY_PLAN};
pub use trainer::{
    evaluate, train, unrolled_loss, unrolled_step, window_batch, EpochMetrics, GrowEvent, GrowPlan, TrainConfig,
    TrainReport,
};
