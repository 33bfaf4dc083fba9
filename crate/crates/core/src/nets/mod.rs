//! Networks, parameters and checkpoints.

mod arch;
mod checkpoint;
mod layers;
mod params;
mod tensor;

pub use arch::{softmax, softmax_backward, Encoder, Model, Net, NetConfig, Networks, Tape};
pub use checkpoint::{Checkpoint, CheckpointHeader, FORMAT_VERSION};
pub use layers::{conv_out, Layer};
pub use params::{Grads, Param, ParamStore};
pub use tensor::Tensor;
