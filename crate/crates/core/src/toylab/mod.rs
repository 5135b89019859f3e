//! Synthetic regression tasks and a small MLP trainer that produce error
//! trajectories and descriptors with known ground truth.

mod experiment;
mod mlp;
mod task;
mod train;

pub use experiment::{
    build_index, evaluate_ltau, reweight_experiment, IndexChoice, LtauConfig, LtauRun,
    ReweightProtocol, ReweightSummary, SchemeResult, SplitResult,
};
pub use mlp::{finite_difference_gradcheck, loss_gradient, Activation, Dense, ForwardCache, Mlp};
pub use task::{
    generate_task, random_unit_vectors, synthetic_descriptors, Dataset, TargetFn, TaskSpec, ToyTask,
};
pub use train::{
    absolute_errors, descriptors, mean_absolute_error, predict, train, TrainConfig, TrainOutcome,
};
