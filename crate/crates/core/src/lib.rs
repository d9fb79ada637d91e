//! Prototype-based information-bottleneck classification of brain
//! functional-connectivity graphs, with Monte Carlo tree search over region
//! subsets to explain individual predictions.
//!
//! - [`connectome`]: BOLD recordings, Pearson connectivity, thresholded graphs, datasets
//! - [`numerics`]: tensors, the gradient tape, Adam
//! - [`model`]: GIN encoder, Gaussian posterior, prototypes, prediction head
//! - [`objectives`]: loss terms and node-masking perturbations
//! - [`trainer`]: training loop, evaluation, k-fold splits, checkpoints
//! - [`gradcheck`]: finite-difference verification of every loss term
//! - [`explainer`]: subset scoring, MCTS, exhaustive search, stability metrics
//! - [`cli`]: the `pime` command line

pub mod cli;
pub mod connectome;
pub mod error;
pub mod explainer;
pub mod gradcheck;
pub mod model;
pub mod numerics;
pub mod objectives;
pub mod trainer;

pub use error::{Error, Result};
