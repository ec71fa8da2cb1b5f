//! Modular arithmetic with transformers.
//!
//! Residues mod `q` are mapped to points on the unit circle, a small
//! encoder-only transformer regresses the point of the sum, and the
//! prediction is decoded by its angle. Training data is drawn so that the
//! number of nonzero terms follows a chosen law, which is what lets the
//! model see easy (mostly zero) examples alongside uniform ones.

pub mod datagen;
pub mod error;
pub mod loss;
pub mod lwe;
pub mod model;
pub mod modring;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
pub use modring::{CirclePoint, Modulus};
