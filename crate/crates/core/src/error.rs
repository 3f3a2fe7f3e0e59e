use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not numerically diagonalizable (eigenvector condition number {condition_number:e})")]
    NotDiagonalizable { condition_number: f64 },
    #[error("matrix is singular (eigenvalue of magnitude {magnitude:e})")]
    SingularMatrix { magnitude: f64 },
    #[error("eigendecomposition residual {residual:e} exceeds tolerance {tolerance:e}")]
    EigenResidual { residual: f64, tolerance: f64 },
    #[error("random draw was degenerate after {attempts} attempts")]
    DegenerateDraw { attempts: usize },
    #[error("failed to generate a cascade satisfying the conditions after {attempts} attempts")]
    GenerationFailed { attempts: usize },
    #[error("index {index} out of range 1..={len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("resonant eigenvalue pair: |1 - lambda_j/lambda_i| = {margin:e}")]
    ResonantPair { margin: f64 },
    #[error("cascade is not chained")]
    NotChained,
    #[error("cascade does not satisfy the standing conditions")]
    ConditionsNotMet,
    #[error("orbit overflowed at t = {t} (composite norm {norm:e})")]
    Overflow { t: usize, norm: f64 },
    #[error("product of two nonconstant eigenfunctions of layer {layer}")]
    SameLayerProduct { layer: usize },
    #[error("eigenvalue {magnitude} is not peripheral for layer {layer} (operator norm {norm})")]
    NotPeripheral { layer: usize, magnitude: f64, norm: f64 },
    #[error("deflated average still grows: {0}")]
    DeflationIncomplete(String),
    #[error("Newton inversion failed to converge for target {target:e}")]
    NewtonDivergence { target: f64 },
    #[error("invalid specification: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
