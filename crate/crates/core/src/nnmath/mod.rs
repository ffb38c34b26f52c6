//! Numeric kernel layer: dense arrays, a reverse-mode tape, differentiable
//! building blocks and a finite-difference gradient checker.

pub mod array;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod ops;
pub mod params;

pub use array::{DenseArray, Real};
pub use gradcheck::{check_against, check_gradients, GradcheckConfig, GradcheckReport};
pub use graph::{AttentionProbs, Graph, Segment, Targets, Var};
pub use ops::{AttentionOutput, AttentionProjections, LayerNorm, Linear};
pub use params::{Gradients, ParamId, ParamStore, Parameter};
