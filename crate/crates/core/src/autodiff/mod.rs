//! A small dense-tensor layer library with hand-written backward passes.

mod adam;
mod checkpoint;
pub mod gradcheck;
mod layers;
pub mod ops;
mod tensor;

pub use adam::{adam_step, Adam, AdamConfig, AdamSlot};
pub use checkpoint::{Checkpoint, NamedArray, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use gradcheck::{grad_check, GradCase, GradCheckReport};
pub use layers::{
    backward_stack, count_trainable, forward_stack, update_stack_running_stats, zero_grads, BatchNormParams,
    LayerCache, LayerParams, Mode, Parameters, BN_EPSILON, BN_MOMENTUM,
};
pub(crate) use layers::join;
pub use tensor::Tensor;
