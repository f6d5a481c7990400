//! Minimal reverse-mode autodiff substrate and the layers built on it.

mod conv;
mod filter;
pub mod gradcheck;
pub mod layers;
pub mod norm;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use gradcheck::{fd_grad_check, fd_grad_check_coords};
pub use layers::Ctx;
pub use norm::{NormConfig, NormMode};
pub use optim::Adam;
pub use params::{Bound, ParamStore};
pub use tape::{Gradients, Kernel, Tape, Var};
pub use tensor::{Real, Tensor};
