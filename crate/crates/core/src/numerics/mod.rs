//! Dense matrices, the bfloat16 codec, the embedding exchange format and a
//! small reverse-mode gradient engine.

pub mod bf16;
pub mod grad;
pub mod matrix;
pub mod mmeb;
pub mod scalar;

pub use bf16::{bf16_roundtrip, Bf16Buffer, Bf16Rounding};
pub use grad::{Gradients, Graph, NodeId};
pub use matrix::{kl_rows, Matrix};
pub use scalar::Scalar;

#[derive(Debug, thiserror::Error)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("row {row} has zero norm")]
    ZeroRow { row: usize },
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("row {row} is not a probability distribution (sum {sum})")]
    NonStochasticInput { row: usize, sum: f64 },
    #[error("loss must be 1x1, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },
    #[error("index {index} out of range for {len} rows")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("malformed data: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Row-normalizes then checks nothing went non-finite.
pub fn l2_normalize_rows<T: Scalar>(m: &Matrix<T>) -> Result<Matrix<T>, NumericsError> {
    m.l2_normalize_rows()
}

pub fn row_softmax<T: Scalar>(m: &Matrix<T>, temp: T) -> Result<Matrix<T>, NumericsError> {
    m.row_softmax(temp)
}
