//! stencilforge: a finite-difference stencil compiler and verification
//! harness for structured grids.
//!
//! Symbolic PDE update equations are grouped into clusters, optimized by a
//! small symbolic engine (CSE, reciprocal hoisting), lowered through an
//! iteration/expression tree into either plain C loop nests or OPS-API-style
//! C source, and cross-validated by a reference interpreter, a virtual OPS
//! runtime that executes the lowered descriptors directly, and (when a C
//! toolchain is present) compiled runs of the emitted sources. A roofline
//! benchmark harness accounts FLOPs and memory traffic for the same clusters.

pub mod bench;
pub mod cli;
pub mod dse;
pub mod emit;
pub mod error;
pub mod exec;
pub mod expr;
pub mod fd;
pub mod grid;
pub mod iet;
pub mod ops;
pub mod problems;
pub mod rational;

pub use error::{Error, Result};
pub use rational::Rational;
