//! Visual Parser backbone: a two-level part–whole transformer built on a
//! small reverse-mode autodiff tensor library, with training, evaluation,
//! analytic cost counting and attention-map export.

pub mod attention;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod network;
pub mod params;
pub mod positional;
pub mod tensor;
pub mod train;
pub mod viz;

pub use error::{Error, Result};
pub use network::{count_flops, count_params, CostReport, HeadKind, Model, VariantSpec};
pub use tensor::{Scalar, Tape, Tensor, Var};
