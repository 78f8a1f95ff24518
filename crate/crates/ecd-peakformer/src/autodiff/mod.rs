//! Minimal reverse-mode automatic differentiation used by the molecular
//! encoder, the peak-query transformer and the training loop.

mod mat;
mod tape;

pub use mat::Mat;
pub use tape::{Gradients, Tape, Var};
