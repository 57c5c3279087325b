//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Graph`] records every operation as it is evaluated; calling
//! [`Graph::backward`] on a scalar node sweeps the recording in reverse and
//! leaves `∂root/∂node` on every node that requires a gradient. Leaves are
//! created with [`Graph::param`] (gradient wanted) or [`Graph::constant`].
//!
//! The operator set is deliberately small: exactly what the encoders,
//! experts, gate and routing regularizers need.

mod array;
mod gradcheck;
mod graph;

pub use array::Array;
pub use gradcheck::{finite_diff_check, relative_error, GradReport};
pub use graph::{Graph, Node, OpKind, Var, LOG_EPS, NORM_EPS};
