//! Differentiable logic gate networks: relaxed training of gate mixtures,
//! output heads, binary datasets, and compilation to bit-parallel circuits.

pub mod checkpoint;
pub mod compile;
pub mod data;
pub mod error;
pub mod exec;
pub mod experiment;
pub mod gates;
pub mod heads;
pub mod matrix;
pub mod network;
pub mod train;

pub use error::{Error, Result};
pub use exec::Exec;
pub use gates::GateKind;
pub use heads::Head;
pub use matrix::Matrix;
pub use network::LogicNetwork;
