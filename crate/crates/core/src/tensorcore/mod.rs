//! Dense tensors, seeded randomness, least squares, reverse-mode
//! differentiation for the neural-process layer set, and ADAM.

pub mod adam;
pub mod conv;
pub mod graph;
pub mod io;
pub mod layers;
pub mod linalg;
mod rng;
mod tensor;

pub use adam::{adam_step, AdamState, Decay, LrSchedule};
pub use graph::{Gradients, Graph, NodeId};
pub use layers::{forward_layer, LayerKind, Mode, RunningStats};
pub use linalg::{lstsq, LeastSquares, LstsqSolution};
pub use rng::Rng;
pub use tensor::Tensor;
