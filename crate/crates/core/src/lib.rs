//! Learning Hamiltonian flow maps from numerical-scheme residuals.
//!
//! The library is generic over the floating point type through [`Real`]
//! (implemented for `f32` and `f64`); the `*64` aliases at the crate root fix
//! the scalar to `f64`, which is what the CLI and the acceptance tests use.

pub mod adjoint;
pub mod diffnet;
pub mod error;
pub mod evalharness;
pub mod flowmap;
pub mod hamiltonians;
pub mod integrators;
pub mod linalg;
pub mod losses;
pub mod mcsampler;
pub mod scalar;

pub use error::{Error, Result};
pub use hamiltonians::{
    eval_hamiltonian, jacobian, make_system, stiff_spring_energies, vector_field, HamiltonianSystem, ParamTable,
    PhaseState, SlowFastPartition, System,
};
pub use scalar::Real;

pub type System64 = System<f64>;
pub type PhaseState64 = PhaseState<f64>;
