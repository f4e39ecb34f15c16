//! Dense arrays, reverse-mode gradients, Adam, finite-difference checks and
//! the `LFC1` checkpoint format.

mod adam;
mod array;
mod checkpoint;
mod gradcheck;
mod params;
mod tape;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use array::{Array, Precision};
pub use checkpoint::{Checkpoint, CheckpointMeta};
pub use gradcheck::{gradcheck, gradcheck_with, rel_error, GradCheck, Stencil};
pub use params::{Binding, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};


