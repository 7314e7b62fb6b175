//! Dense matrix kernels, decompositions and reverse-mode differentiation.

mod autodiff;
mod gradcheck;
pub mod linalg;
mod matrix;
mod scalar;

pub use autodiff::{Gradients, Tape, Var};
pub use gradcheck::{finite_difference_check, GradCheckReport};
pub use linalg::{
    frobenius_normalize, jacobi_svd, low_rank_svd, projected_gram, svd_backward, svd_normalize,
    SvdConfig, SvdMap, SvdResult,
};
pub use matrix::Matrix;
pub(crate) use matrix::gemm_acc;
pub use scalar::{Precision, Real};
