//! Numeric kernels and the differentiation tape.

pub mod dense;
pub mod gradcheck;
pub mod sparse;
pub mod tape;
pub mod vector;

pub use dense::DenseMatrix;
pub use sparse::{spmm, SparseMatrix};
pub use tape::{Gradients, Tape, Var};
pub use vector::{log_sigmoid, project, rowwise_softmax, softmax, EPS_NORM};
