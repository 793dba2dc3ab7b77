//! Crate-wide error type.

/// Errors produced by tensor kernels, model assembly, training and metrics.
#[derive(Debug, thiserror::Error)]
pub enum CoreError {
    /// Shape or extent contract violated (mismatched dims, odd extents, ...).
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid configuration (window does not divide grid, bad variant, ...).
    #[error("config error: {0}")]
    Config(String),

    /// A tensor holds NaN or Inf where finite values are required.
    #[error("non-finite values: {0}")]
    NonFinite(String),

    /// Metric requested on an empty mask; the caller decides the policy.
    #[error("empty mask: {0}")]
    EmptyMask(String),

    /// Training loss left the finite range.
    #[error("training diverged at iteration {iter}: loss {loss}")]
    Diverged { iter: usize, loss: f64 },

    /// Anything else that makes the requested operation meaningless.
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, CoreError>;
