//! Variational Monte Carlo for Rydberg atom arrays with autoregressive
//! neural wavefunctions.
//!
//! The numerical core is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases at the crate root fix the double-precision instantiation used by
//! the command line tool and the tests.

pub mod ed;
pub mod io;
pub mod lattice;
pub mod scalar;
pub mod tensor;
pub mod vmc;
pub mod wavefunction;

pub use lattice::{LatticeSpec, PatchScheme, SpinConfiguration};
pub use scalar::Scalar;
pub use wavefunction::{ModelConfig, ModelKind};

pub type Hamiltonian = lattice::HamiltonianSpec<f64>;
pub type Graph = tensor::Graph<f64>;
pub type AdamState = tensor::AdamState<f64>;
pub type Wavefunction = wavefunction::Wavefunction<f64>;
