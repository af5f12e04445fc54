//! Small reverse-mode automatic differentiation engine over f64 tensors.

mod checkpoint;
pub mod conv;
mod nn;
mod optim;
mod params;
mod tape;
mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use nn::{BatchNorm3d, Conv3d, ConvTranspose3d, Linear, Mlp};
pub use optim::{clip_grad_norm, AdamW, CosineSchedule};
pub use params::{he_uniform, ParamId, ParamStore};
pub use tape::{bce_term, sigmoid, BnMode, BufferUpdate, Grads, Tape, Var, BN_EPS};
pub use tensor::Tensor;
