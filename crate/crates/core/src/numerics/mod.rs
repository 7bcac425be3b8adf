//! Dense `f64` tensors, reverse-mode differentiation, the optimizer and the
//! finite-difference gradient checker.

mod gradcheck;
mod graph;
mod optim;
mod params;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckReport, GRAD_CHECK_ABS_FLOOR, GRAD_CHECK_STEP};
pub use graph::{concat, Backward, Graph, Var};
pub use optim::AdamW;
pub use params::{ParamGrads, ParamId, ParamStore};
pub use tensor::{Tensor, MAX_RANK};

pub(crate) use graph::stable_sigmoid;

#[derive(Debug, thiserror::Error)]
pub enum NumericsError {
    #[error("{op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: &'static str },
    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),
}

impl NumericsError {
    pub(crate) fn shape(op: &'static str, detail: String) -> Self {
        Self::Shape { op, detail }
    }
}
