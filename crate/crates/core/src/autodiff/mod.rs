//! Numerical substrate: tensors, a reverse-mode tape, Adam, LSTM layers and
//! checkpoint serialisation.

mod adam;
mod checkpoint;
mod lstm;
mod params;
mod tape;
mod tensor;

pub mod gradcheck;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{Checkpoint, CheckpointEntry, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use lstm::{bilstm_layer, lstm_cell, BoundLstm, Lstm, LstmState};
pub use params::{ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var, BCE_CLAMP};
pub use tensor::Tensor;
