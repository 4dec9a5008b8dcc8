use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

/// Errors raised by the fusion kernels and the training pipeline.
#[derive(Clone, Debug, PartialEq)]
pub enum Error {
    /// Two operands have incompatible shapes for the named operation.
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    /// A layer or model was configured with inconsistent dimensions/options.
    Config(String),
    /// An operation was called in the wrong order (e.g. backward before forward).
    State(&'static str),
    /// A numeric failure such as a diverging loss or a singular system.
    Numeric(String),
    /// Invalid input parameters; one message per violation.
    Validation(Vec<String>),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, left, right } => write!(
                f,
                "shape mismatch in {op}: {}x{} vs {}x{}",
                left.0, left.1, right.0, right.1
            ),
            Error::Config(msg) => write!(f, "configuration error: {msg}"),
            Error::State(msg) => write!(f, "state error: {msg}"),
            Error::Numeric(msg) => write!(f, "numeric failure: {msg}"),
            Error::Validation(msgs) => {
                write!(f, "invalid parameters: ")?;
                for (i, m) in msgs.iter().enumerate() {
                    if i > 0 {
                        write!(f, "; ")?;
                    }
                    write!(f, "{m}")?;
                }
                Ok(())
            }
        }
    }
}

pub type Result<T> = core::result::Result<T, Error>;
