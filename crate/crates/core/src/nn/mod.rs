//! Dense tensors, tape-based reverse-mode autodiff, layer primitives, the
//! Adam optimizer and the checkpoint format.

pub mod checkpoint;
mod graph;
pub mod layers;
pub mod optim;
mod real;
mod store;
mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use graph::{ctc_nll, ctc_required_frames, CtcItem, Gradients, Graph, NodeId, SeqLayout, Value};
pub use layers::{bidirectional, dropout, lstm_step, Conv1d, Embedding, Gru, Linear, Lstm};
pub use optim::{adam_step, AdamConfig, AdamState};
pub use real::{gemm, Real};
pub use store::ParamStore;
pub use tensor::Tensor;
