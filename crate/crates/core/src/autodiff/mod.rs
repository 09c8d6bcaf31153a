//! Minimal reverse-mode automatic differentiation over dense rank-1..4
//! tensors, with exactly the kernels the U-Net needs.

mod adam;
mod checkpoint;
pub mod kernels;
mod tape;
mod tensor;

pub use adam::{adam_step, clip_global_norm, global_norm, AdamConfig, AdamState};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, MAGIC as CHECKPOINT_MAGIC,
    VERSION as CHECKPOINT_VERSION,
};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
