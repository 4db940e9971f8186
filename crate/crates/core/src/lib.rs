//! Pseudospectral simulation and verification of Dirichlet heat flows on a
//! box with a Newtonian nonlocal term.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dynamics;
pub mod error;
pub mod field;
pub mod lab;
pub mod potential;
pub mod verify;

pub use error::{Error, Result};
