//! Unsupervised two-domain image translation with a shared content encoder,
//! a single AdaIN-conditioned decoder, fixed per-domain style codes, and
//! patch discriminators.

pub mod data;
pub mod error;
pub mod evaluation;
pub mod networks;
pub mod objectives;
pub mod training;

pub use error::{CheckpointError, Error, Result};
