//! Dense ReLU networks: parameters, forward and backward passes, losses,
//! SGD and checkpoints.

mod checkpoint;
mod gradcheck;
mod loss;
mod model;
mod optim;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, LayerRecord, Provenance,
    CHECKPOINT_FORMAT_VERSION,
};
pub use gradcheck::{grad_check, GRAD_CHECK_SAMPLE};
pub use loss::{
    batch_loss, check_compatible, evaluate, loss_and_grads, loss_and_output_grad, predict, Eval,
    LossKind,
};
pub use model::{init_model, Architecture, Dense, ForwardTrace, ModelKind, ModelParams};
pub use optim::{
    batch_order, lr_at, sgd_step, train, train_observed, Schedule, SgdHyper, SgdState,
    TrainConfig, TrainOutcome,
};
