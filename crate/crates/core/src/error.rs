use alloc::string::String;
use alloc::vec::Vec;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {shapes:?}")]
    Dimension { op: &'static str, shapes: Vec<Vec<usize>> },
    #[error("non-finite value produced by {0}")]
    Numeric(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("argument outside domain: {0}")]
    Domain(String),
    #[error("fit failed: {0}")]
    Fit(String),
}

pub type Result<T> = core::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(op: &'static str, shapes: &[&[usize]]) -> Self {
        Error::Dimension { op, shapes: shapes.iter().map(|s| s.to_vec()).collect() }
    }
}
