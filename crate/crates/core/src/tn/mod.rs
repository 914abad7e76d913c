//! Matrix product states and operators.
//!
//! States are [`TensorTrain`]s of rank-3 site tensors `(left, phys, right)`;
//! operators are [`OperatorTrain`]s of rank-4 tensors `(left, out, in, right)`.
//! Both carry a `log_norm` so that the represented object is
//! `exp(log_norm)` times the plain contraction of the site tensors. This keeps
//! `2^N`-sized traces representable at large `N`.

mod contract;
pub mod io;
mod operator;
pub(crate) mod sweep;
mod train;

use thiserror::Error;

pub use contract::{hs_sandwich, mpo_trace, mpo_trace_normalized, sandwich, sandwich_log, trace_product};
pub use operator::{apply_mpo, mpo_multiply, OperatorTrain};
pub use train::{canonical_compress, TensorTrain};

use crate::linalg::LinalgError;

#[derive(Debug, Error)]
pub enum TnError {
    #[error("structurally invalid train: {0}")]
    StructurallyInvalid(String),
    #[error("train has zero norm")]
    ZeroNorm,
    #[error("length mismatch: {0} sites vs {1} sites")]
    LengthMismatch(usize, usize),
    #[error("invalid truncation policy: {0}")]
    InvalidPolicy(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

pub type TnResult<T> = Result<T, TnError>;

/// How an operator is applied to a train before truncation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ApplyMethod {
    /// Site-wise product followed by one truncating SVD pass over a
    /// right-normalized input.
    #[default]
    ZipUp,
    /// Exact site-wise product followed by a full canonical compression.
    Exact,
}

/// Bond-dimension control for every truncating operation.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TruncationPolicy {
    pub max_bond: usize,
    /// Singular values below `sv_cutoff * s_max` are discarded.
    pub sv_cutoff: f64,
    /// Restore the pre-truncation norm after discarding weight.
    pub renormalize: bool,
    pub method: ApplyMethod,
}

impl Default for TruncationPolicy {
    fn default() -> Self {
        Self { max_bond: 64, sv_cutoff: 1e-10, renormalize: false, method: ApplyMethod::ZipUp }
    }
}

impl TruncationPolicy {
    pub fn new(max_bond: usize, sv_cutoff: f64) -> Self {
        Self { max_bond, sv_cutoff, ..Self::default() }
    }

    /// No bond cap, no cutoff: every operation is exact.
    pub fn lossless() -> Self {
        Self { max_bond: usize::MAX, sv_cutoff: 0.0, renormalize: false, method: ApplyMethod::Exact }
    }

    pub fn renormalized(mut self) -> Self {
        self.renormalize = true;
        self
    }

    pub fn with_method(mut self, method: ApplyMethod) -> Self {
        self.method = method;
        self
    }

    pub fn validate(&self) -> TnResult<()> {
        if self.max_bond < 1 {
            return Err(TnError::InvalidPolicy("max_bond must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.sv_cutoff) {
            return Err(TnError::InvalidPolicy(format!("sv_cutoff {} outside [0, 1)", self.sv_cutoff)));
        }
        Ok(())
    }
}
