//! Desk-scale dual encoder.
//!
//! Both branches are affine: the image branch maps flattened grayscale pixels
//! to the embedding space, the text branch mean-pools a token embedding table
//! and maps the pooled vector to the same space. Training uses plain
//! mini-batch gradient descent with hand-derived gradients under one of three
//! objectives: symmetric in-batch InfoNCE, triplet hinge, or binary
//! cross-entropy through a classifier head on `|v_i − v_t|`.

mod loss;
mod params;
mod synth;
mod train;

use thiserror::Error;

pub use loss::{bce_pair_loss, info_nce_loss, triplet_loss, BceOutput, HeadGrads, InfoNceOutput, TripletOutput};
pub use params::{ToyArch, ToyEncoderParams, PARAMS_MAGIC, PARAMS_VERSION};
pub use synth::{gen_synthetic_pairs, render_image, tokenize, SyntheticDataset, SyntheticLayout, SyntheticPairSpec};
pub use train::{batch_gradients, loss_settled, train, Objective, ToyDataset, TrainConfig, TrainOutcome};

#[derive(Debug, Error)]
pub enum ToyError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("token {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("temperature must be positive and finite, got {0}")]
    Temperature(f64),
    #[error("training diverged at epoch {epoch}, batch {batch}: loss {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },
    #[error("params file: {0}")]
    Format(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
    #[error(transparent)]
    Head(#[from] crate::scoring::ScoringError),
}
