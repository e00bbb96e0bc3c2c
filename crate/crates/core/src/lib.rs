//! Plane-wave ultrasound speckle simulation and despeckling with a
//! mean-reverting stochastic differential equation.

// `!(x > 0.0)` is used on purpose so NaN fails validation; indexed loops
// walk several buffers in lockstep.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod dataset;
pub mod denoiser;
pub mod error;
pub mod grid;
pub mod kv;
pub mod metrics;
pub mod norm;
pub mod pgm;
pub mod rng;
pub mod sde;
pub mod simulator;
pub mod tensor;
pub mod uncertainty;

pub use error::{Error, Result};
pub use grid::{ImageGrid, Mask};
pub use norm::{denormalize, normalize_pair, NormRecord};
pub use rng::Rng;
pub use tensor::{read_tensor, write_tensor, Tensor};
