//! The autoregressive policy: parameters, forward/backward, optimizer,
//! decoding and gradient verification.

pub mod generate;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod params;

pub use generate::{generate, DecodeMode};
pub use gradcheck::{finite_difference_check, GradCheckReport};
pub use model::{ForwardOptions, ForwardTrace, ModelConfig, ModelGradients, OutputSeed, PolicyModel};
pub use optim::{AdamConfig, AdamState};
pub use params::{GradientSet, ParamSet, Params, TensorView};
