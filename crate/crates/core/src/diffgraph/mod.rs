//! Reverse-mode differentiation, small networks and the Adam optimiser.

mod adam;
pub mod checkpoint;
mod mlp;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use checkpoint::Checkpoint;
pub use mlp::{time_embedding, HeadInit, Linear, Mlp, MlpVars};
pub use tape::{record_forward, CustomOp, Gradients, Tape, Var};
pub use tensor::{matmul, Tensor};

pub(crate) use tape::fwd_scale;
