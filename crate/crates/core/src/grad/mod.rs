//! Reverse-mode differentiation, optimizers and gradient verification.

pub mod checkpoint;
pub mod gradcheck;
pub mod optim;
pub mod tape;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CheckpointError};
pub use gradcheck::{
    finite_diff_check, relative_error, sat_gradient_factor_check, FdConfig, FdCoordinate, FdReport,
    Objective, SatFactorReport,
};
pub use optim::{adam_step, ema_update, AdamConfig, AdamState, EmaState, GradientSet, ParamSet};
pub use tape::{
    aggregate_values, detection_loss_from_logits, sigmoid, smooth_l1, softplus, AggregationPlan,
    AggregationTerm, GradError, Gradients, LossConfig, LossTarget, SpikeMode, SynapticKind, SynapticOp,
    Tape, Var,
};
