use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        expected: String,
        got: String,
    },
    #[error("backward called before any forward pass was recorded")]
    NoForward,
    #[error("loss must be a 1x1 scalar, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),
    #[error("{heads} attention heads do not divide width {width}")]
    Heads { heads: usize, width: usize },
    #[error("node index {index} out of range for graph with {nodes} nodes")]
    NodeIndex { index: usize, nodes: usize },
}

pub(crate) fn shape_err(
    op: &'static str,
    expected: impl Into<String>,
    got: impl Into<String>,
) -> NnError {
    NnError::Shape {
        op,
        expected: expected.into(),
        got: got.into(),
    }
}
