use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    // vocab
    #[error("vocabulary must contain at least one base token")]
    EmptyVocabulary,
    #[error("duplicate token {0:?}")]
    DuplicateToken(String),
    #[error("invalid token {0:?}: tokens must be non-empty and contain no line breaks")]
    InvalidToken(String),
    #[error("category name is empty")]
    EmptyName,
    #[error("character {ch:?} of category {name:?} is not covered by the vocabulary")]
    UncoveredCharacter { name: String, ch: char },

    // shapes and grids
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("class index {0} is not a known category")]
    UnknownClass(u32),
    #[error("depth bin {0} is outside 0..=1000")]
    BinOutOfRange(u32),
    #[error("shape error: {0}")]
    ShapeError(String),

    // loss
    #[error("negative top-k must be at least 1")]
    InvalidK,
    #[error("unknown loss kind {0:?}")]
    UnknownBaseline(String),
    #[error("invalid loss parameter: {0}")]
    InvalidParameter(String),

    // decode
    #[error("category {0} has an empty token set")]
    EmptyTokenSet(usize),
    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),
    #[error("vocabulary mismatch: {0}")]
    VocabularyMismatch(String),
    #[error("degenerate box ({0}, {1}, {2}, {3})")]
    DegenerateBox(f64, f64, f64, f64),

    // depth quantization
    #[error("depth value is NaN or infinite")]
    InvalidDepth,
    #[error("bin 0 is the ignore bin and has no depth")]
    IgnoreBin,
    #[error("invalid quantizer: {0}")]
    InvalidQuantizer(String),
    #[error("unknown depth preset {0:?}")]
    UnknownDepthPreset(String),

    // codec
    #[error("parse error at byte {offset}: {message}")]
    ParseError { offset: usize, message: String },
    #[error("length mismatch: expected {expected} pixels, payload holds {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("unbalanced tag <{tag}> at byte {offset}")]
    UnbalancedTag { tag: String, offset: usize },
    #[error("coordinate tokens must come in x,y pairs (at byte {offset})")]
    CoordinateParity { offset: usize },
    #[error("invalid message: {0}")]
    InvalidMessage(String),

    // metrics
    #[error("no valid pixels to evaluate")]
    NoValidPixels,

    // synthlab
    #[error("scene has fewer than two classes")]
    DegenerateScene,
    #[error("training diverged at step {0}")]
    Diverged(usize),
    #[error("unknown experiment preset {0:?}")]
    UnknownPreset(String),

    #[error("i/o error: {0}")]
    Io(String),
    #[error("format error: {0}")]
    Format(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}
