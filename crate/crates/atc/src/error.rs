use thiserror::Error;

pub type Result<T> = std::result::Result<T, AtcError>;

#[derive(Debug, Error)]
pub enum AtcError {
    /// A geometry or configuration precondition failed; the message names the
    /// first violated inequality.
    #[error("constraint violation: {0}")]
    Constraint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("site {site:?}: neighbor {neighbor:?} outside lattice")]
    OutOfRange { site: [i64; 2], neighbor: [i64; 2] },

    #[error("Newton did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("outer Gauss-Newton loop did not converge after {iterations} iterations (gradient norm {grad_norm:e})")]
    OuterDiverged { iterations: usize, grad_norm: f64 },

    #[error("sparse factorization failed: matrix not positive definite")]
    SingularSystem,

    #[error("eigensolver failed: {0}")]
    EigenFailure(String),

    #[error("mesh error: {0}")]
    Mesh(String),

    #[error("mesh does not resolve the overlap: {0}")]
    MeshMismatch(String),

    #[error("reference field does not cover the computational domain: {0}")]
    Coverage(String),

    #[error("empty shell in decay profile (no sites with defined stencil)")]
    EmptyShell,

    #[error("slope fit needs >= 3 points with distinct abscissae")]
    DegenerateFit,

    #[error("rank-zero subspace: overlap Gram has no numerical range")]
    RankZero,

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
