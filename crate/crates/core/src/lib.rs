//! Recurrent word-level language models in the ERS (embedding → recurrent →
//! softmax) and Dual layouts, where the Dual layout adds a ReLU layer that
//! sees both the embedding and the recurrent output before the softmax.
//!
//! Recurrent modules: LSTM, stacked LSTM (dLSTM) and stacked mogrifier LSTM
//! (mdLSTM). Training uses truncated BPTT with carried state, Nadam, weight
//! tying and per-site dropout/L2; evaluation supports temperature, dynamic
//! evaluation and post-hoc sweeps over sequence length, temperature, clipping
//! and β1.

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use layers::{Recurrence, RecurrentState};
pub use model::{
    build, param_count, Architecture, Checkpoint, Mode, Model, ModelConfig, ParamStore, TokenBatch,
};
pub use tensor::{RngStream, Scalar, Tensor};
