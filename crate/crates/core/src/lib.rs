//! Rating prediction with a time- and feature-modulated Autorec autoencoder.
//!
//! The pipeline builds an intermediate rating matrix `R'` from the observed
//! ratings, their timestamps and the user/item side features, then feeds it
//! to a one-hidden-layer autoencoder that fills in the full rating matrix:
//!
//! ```text
//! timestamps -> time channels -> TimeNN -> T'
//! R, T'      -> FiLM                     -> R_t
//! X_u, X_i   -> bilinear encoder         -> X'
//! R_t, X'    -> combiner (A)             -> R'
//! R'         -> autoencoder              -> R_hat
//! ```
//!
//! Every stage has a hand-written reverse pass so the whole chain trains end
//! to end on the masked squared error.

pub mod autoencoder;
pub mod checkpoint;
pub mod cli;
pub mod dataio;
pub mod eval;
pub mod masked;
pub mod model;
pub mod modulation;
pub mod optim;
pub mod timefeat;
pub mod training;

pub use masked::DenseMatrixWithMask;
pub use model::{ModelConfig, ModelParams, Orientation, Variant};
