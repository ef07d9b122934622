//! Dense matrices, a reverse-mode tape, parameters and the optimizer.

mod graph;
mod matrix;
mod optim;
mod params;

pub use graph::{Gradients, Graph, Var};
pub use matrix::{softmax, Matrix};
pub use optim::{lr_at, AdamW, GroupRates};
pub use params::{ParamGroup, ParamId, Parameter, ParameterStore};

pub use matrix::argmax;
