//! Truncated Fock-space simulation of a teleported CNOT between two
//! bosonic-encoded qubits, with the tomography and error-budget analysis
//! needed to characterize it.

pub mod budget;
pub mod cli;
pub mod codes;
pub mod config;
pub mod error;
pub mod evolver;
pub mod fock;
pub mod formats;
pub mod grape;
pub mod hamiltonians;
pub mod protocol;
pub mod tomography;

pub use error::{Error, Result};
