//! Dense tensor math with reverse-mode gradients.
//!
//! A [`Graph`] records every operation of one forward pass over a borrowed
//! [`ParamStore`]. [`Graph::backward`] walks the record in reverse and returns
//! [`Grads`], which the caller folds into the store with
//! [`ParamStore::accumulate`]. Gradients accumulate until
//! [`ParamStore::zero_grad`] is called.
//!
//! The op set is deliberately small: matrix and batched matrix products, bias
//! add, tanh/relu/sigmoid, softmax, embedding gather with scatter-add backward,
//! segment and axis means, concatenation, cosine similarity and binary
//! cross-entropy.

mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use graph::{attention_weights, scaled_dot_attention, Graph, Var};
pub use params::{Grads, ParamId, ParamStore, Parameter};
pub use graph::BCE_EPS;
pub use tensor::{cosine_parts, sigmoid, CosineParts, Scalar, Tensor, COSINE_EPS};
