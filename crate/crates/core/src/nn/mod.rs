//! Minimal CNN engine: layers, forward and backward passes, SGD training
//! and the model file format.

mod io;
mod layers;
mod network;
mod spec;
mod train;

pub use io::{load_model, model_from_bytes, model_to_bytes, save_model, MODEL_MAGIC};
pub use network::{argmax, log_softmax, softmax, ForwardTrace, Gradients, Mode, Network};
pub use spec::{ActShape, LayerSpec, ModelSpec};
pub use train::{accuracy, train, EpochStats, TrainConfig, TrainReport};
