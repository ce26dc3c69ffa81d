use alloc::{boxed::Box, string::String, vec::Vec};
use core::fmt;

use crate::vae::LossBreakdown;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Two operands whose shapes cannot be combined by `op`.
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// A shape whose element count differs from the data it describes.
    ElementCount { expected: usize, actual: usize },
    /// Empty shapes and zero-sized dimensions are rejected.
    InvalidShape(Vec<usize>),
    /// An operation produced NaN or an infinity.
    NonFinite { op: &'static str },
    KernelTooLarge {
        kernel: (usize, usize),
        input: (usize, usize),
    },
    InvalidArgument(String),
    /// Error raised inside a layer of a stack.
    Layer { index: usize, source: Box<Error> },
    /// `backward` called without a preceding `forward`.
    MissingCache { layer: &'static str },
    /// Training produced a non-finite loss.
    Divergence(LossBreakdown),
}

impl Error {
    pub(crate) fn in_layer(self, index: usize) -> Self {
        Error::Layer {
            index,
            source: Box::new(self),
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension { op, left, right } => {
                write!(f, "{op}: incompatible shapes {left:?} and {right:?}")
            }
            Error::ElementCount { expected, actual } => {
                write!(f, "shape holds {expected} elements but {actual} were given")
            }
            Error::InvalidShape(shape) => write!(f, "invalid shape {shape:?}"),
            Error::NonFinite { op } => write!(f, "{op} produced a non-finite value"),
            Error::KernelTooLarge { kernel, input } => write!(
                f,
                "kernel {}x{} larger than padded input {}x{}",
                kernel.0, kernel.1, input.0, input.1
            ),
            Error::InvalidArgument(msg) => f.write_str(msg),
            Error::Layer { index, source } => write!(f, "layer {index}: {source}"),
            Error::MissingCache { layer } => {
                write!(f, "{layer}: backward called before forward")
            }
            Error::Divergence(loss) => write!(
                f,
                "training diverged (reconstruction {}, kl {}, total {})",
                loss.reconstruction, loss.kl, loss.total
            ),
        }
    }
}

impl core::error::Error for Error {
    fn source(&self) -> Option<&(dyn core::error::Error + 'static)> {
        match self {
            Error::Layer { source, .. } => Some(source.as_ref()),
            _ => None,
        }
    }
}
