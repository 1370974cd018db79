//! Convex reformulations of token-mixing heads (self-attention, MLP-Mixer,
//! FNO, B-FNO, fixed-mixing heads) with linear, ReLU and gated-ReLU
//! activations, their non-convex counterparts, exact weight mappings between
//! the two, and solvers.

pub mod arrangements;
pub mod data;
pub mod error;
pub mod heads;
pub mod io;
pub mod linalg;
pub mod nonconvex;
pub mod norms;
pub mod rng;
pub mod solvers;
pub mod synth;
pub mod verify;

pub use error::{Error, Result};
