use std::fmt;

use thiserror::Error;

/// Primitive operation kinds recorded on a [`crate::tensor::Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    MulElementwise,
    Concat,
    Slice,
    Sigmoid,
    Tanh,
    Relu,
    Softmax,
    Dropout,
    Conv2dFullDepth,
    GlobalMaxPool2d,
    MaskedMaxPoolOverSequence,
    ScalarScale,
    Sum,
    PairwiseProduct,
    Reshape,
    BinaryCrossEntropy,
    LstmSequence,
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::MulElementwise => "mul_elementwise",
            OpKind::Concat => "concat",
            OpKind::Slice => "slice",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::Relu => "relu",
            OpKind::Softmax => "softmax",
            OpKind::Dropout => "dropout",
            OpKind::Conv2dFullDepth => "conv2d_full_depth",
            OpKind::GlobalMaxPool2d => "global_maxpool_2d",
            OpKind::MaskedMaxPoolOverSequence => "masked_maxpool_over_sequence",
            OpKind::ScalarScale => "scalar_scale",
            OpKind::Sum => "sum",
            OpKind::PairwiseProduct => "pairwise_product",
            OpKind::Reshape => "reshape",
            OpKind::BinaryCrossEntropy => "binary_cross_entropy",
            OpKind::LstmSequence => "lstm_sequence",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {shapes:?}: {reason}")]
    ShapeMismatch {
        op: OpKind,
        shapes: Vec<Vec<usize>>,
        reason: String,
    },
    #[error("{op}: non-finite value")]
    NonFinite { op: OpKind },
    #[error("variable does not belong to this tape")]
    ForeignVariable,
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{source_name}:{line}: {message}")]
    Parse {
        source_name: String,
        line: usize,
        message: String,
    },
    #[error("query {query:?} appears in both the {first} and {second} splits")]
    QueryOverlap {
        query: String,
        first: String,
        second: String,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: OpKind, shapes: &[&[usize]], reason: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            shapes: shapes.iter().map(|s| s.to_vec()).collect(),
            reason: reason.into(),
        }
    }

    pub(crate) fn parse(source_name: impl Into<String>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            source_name: source_name.into(),
            line,
            message: message.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
