use thiserror::Error;

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("shape {shape:?} does not hold {len} elements")]
    InvalidShape { shape: Vec<usize>, len: usize },

    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: axis {axis} out of range for rank {rank}")]
    InvalidAxis { op: &'static str, axis: usize, rank: usize },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },

    #[error("conv2d: kernel {kernel} with stride {stride} and pad {pad} does not tile an extent of {extent}")]
    ConvGeometry {
        extent: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },

    #[error("upsample_bilinear: cannot shrink {from:?} to {to:?}")]
    Downsample { from: (usize, usize), to: (usize, usize) },

    #[error("{op}: zero-norm vector cannot be normalized")]
    ZeroNorm { op: &'static str },

    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("gradient check: objective is not deterministic")]
    NonDeterministic,
}
