//! Reverse-mode differentiation, dense networks and the Adam optimizer.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod mlp;
pub mod params;
pub mod tape;

pub use adam::{adam_update, AdamConfig, AdamState, LrDecay};
pub use checkpoint::{load_params, read_params, save_params, write_params};
pub use gradcheck::{gradient_check, GradCheckReport};
pub use mlp::{Mlp, MlpConfig};
pub use params::{ArraySpec, ParamGrads, ParameterSet};
pub use tape::{gate_derivatives, RowFunction, Tape, TapeGradients, Var};
