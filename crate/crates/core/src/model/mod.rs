//! Dual-branch encoder-decoder: one shared encoder, one or two identical
//! decoders with independent parameters.

pub mod checkpoint;
pub mod layers;
pub mod optim;
pub mod params;
pub mod unet;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_HEADER};
pub use optim::{Adam, AdamConfig};
pub use params::{Grads, Param, ParamStore};
pub use unet::{BranchMode, ForwardResult, ModelConfig, Tape, UNet, BOTTOM_DECODER, ENCODER, TOP_DECODER};
