//! Learned lifted-linear dynamics: a lifting network plus linear operators,
//! trained end to end on multi-step prediction.

mod model;
mod network;
mod train;

pub use model::{KoopmanModel, ModelSpec, StateLayout};
pub use network::{Dense, LiftingNetwork};
pub use train::{
    finetune_operators, kstep_loss_and_grads, prediction_errors, train, windows, LossGrads,
    TrainConfig, TrainOutcome, Window,
};
