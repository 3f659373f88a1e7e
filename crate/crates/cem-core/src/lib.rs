//! Contrastive energy-based models at desk scale.
//!
//! The crate implements two energy model families over a shared MLP encoder —
//! a parametric one scoring (input, class) pairs and a non-parametric one
//! scoring (input, input) pairs — together with the full family of
//! adversarial / Langevin sampling rules, the supervised and unsupervised
//! training objectives built on them, small synthetic datasets, and an
//! executable verification suite for the gradient identities tying all of
//! these together.
//!
//! Layout:
//! - [`autodiff`]: tape-based reverse-mode AD (generic over the scalar type).
//! - [`models`]: encoders, the two energy models, exact grid oracles.
//! - [`samplers`]: chain-based sampling/attack update rules with ℓ₂ projection.
//! - [`objectives`]: losses, likelihood-gradient estimators, the train loop.
//! - [`data`]: synthetic 2-D datasets and augmentation operators.
//! - [`verify`]: identity checks, sampler diagnostics, sample-quality metrics.
//! - [`io`]: checkpoint serialization, CSV interchange, run manifests.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod io;
pub mod models;
pub mod objectives;
pub mod rng;
pub mod samplers;
pub mod scalar;
pub mod verify;

pub use error::{CemError, Result};
pub use scalar::Scalar;

/// Concrete f64 instantiations of the generic autodiff core. Everything in
/// the model/sampler/objective layers works in f64; the checks in [`verify`]
/// need tolerances f32 cannot reach.
pub type Tensor = autodiff::Tensor<f64>;
pub type Tape = autodiff::Tape<f64>;
pub use autodiff::Var;
