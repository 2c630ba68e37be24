//! Model assembly: the EnVI bound, offline training, the online step,
//! forecasting, and checkpoints.

mod config;
mod elbo;
mod noise;
mod params;
mod predict;
mod train;

pub mod checkpoint;
pub mod online;

pub use config::ModelConfig;
pub use elbo::{
    elbo_on_tape, envi_elbo, filtered_means_matrix, ElboBreakdown, ElboNodes, ElboOptions,
    ElboRun, TransitionSpec,
};
pub use noise::{NoisePlan, ROUND_EVAL, ROUND_INIT, ROUND_PREDICT};
pub use online::{oenvi_init, oenvi_objective_identity, oenvi_run, oenvi_step, OnlineState, OnlineStepOutcome};
pub use params::{
    for_each_trainable, init_trainer, model_nodes_from_leaves, register_model, to_param_map,
    GpssmParams, ModelNodes, TrainerState, VariationalParams,
};
pub use predict::{predict_forward, Forecast};
pub use train::{filter_states, train_envi, train_from, Adam, HistoryRow, TrainOutcome};
