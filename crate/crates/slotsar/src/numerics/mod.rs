//! Dense-tensor compute substrate with reverse-mode differentiation.
//!
//! Provides every primitive the pipeline needs (linear maps, token-wise
//! 1×1 convolution via matmul, batch/layer normalization, softmax, a GRU
//! cell, FFT-based circular 2-d filtering, complex modulus, elementwise
//! arithmetic, reductions), finite-difference gradient verification, and
//! the binary tensor archive used for checkpoints and feature files.

pub mod checkpoint;
pub mod fft;
pub mod gradcheck;
pub mod graph;
pub mod gru;
pub mod ops;
pub mod params;
pub mod tensor;

pub use gradcheck::{bind, grad_check, grad_check_eval, GradCheckEntry, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use gru::{gru_cell, GruParams};
pub use params::ParamStore;
pub use tensor::{Precision, Tensor};
