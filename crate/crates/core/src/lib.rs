//! Temporal sampling policy optimization at desk scale.
//!
//! A small trainable agent picks keyframes from a long sequence of candidate
//! frame features. It is trained with group-relative policy gradients
//! against a frozen answering oracle, on synthetic needle-in-a-haystack and
//! multi-event data.
//!
//! Modules, bottom-up:
//! - [`numerics`]: dense kernels, local-window attention and its gradient
//! - [`agent`]: frame scoring, Gumbel top-K selection, selection likelihood
//! - [`worldsim`]: synthetic clips, queries and the threshold answerer
//! - [`datapipe`]: splicing, difficulty filter, TSDS dataset files
//! - [`tspo`]: rewards, advantages, objective and the training loop
//! - [`evalbench`]: policy comparison and report export

pub mod agent;
pub mod checkpoint;
pub mod datapipe;
pub mod error;
pub mod evalbench;
pub mod gradcheck;
pub mod numerics;
pub mod optim;
pub mod tspo;
pub mod worldsim;

pub use error::{Error, Result};
