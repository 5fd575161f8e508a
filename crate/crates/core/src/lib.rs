//! Numerical building blocks for affordance detection and video-to-command
//! translation, on top of a small reverse-mode differentiation tape.

pub mod autodiff;
pub mod backbone;
pub mod crf;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod io;
pub mod layers;
pub mod losses;
pub mod mask;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod recurrent;
pub mod rng;
pub mod tensor;
pub mod v2c;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use params::{ParamId, ParamKind, ParamStore};
pub use rng::SeededRng;
pub use tensor::Tensor;
