//! Label-set operations in feature space.
//!
//! Samples live in a shared nonnegative feature space; each sample carries a
//! binary label set. Three small MLPs map a pair of feature vectors to the
//! feature vector of a hypothetical sample whose label set is the
//! intersection, union or subtraction of the inputs' label sets. The crate
//! provides:
//!
//! - [`autodiff`]: a minimal f64 tensor/tape engine with reverse-mode
//!   gradients, Adam and a reduce-on-plateau scheduler,
//! - [`labels`]: exact set algebra over binary label vectors,
//! - [`synth`]: a synthetic multi-label feature generator with a decoding
//!   oracle, plus `LBNK` bank persistence and a CSV importer,
//! - [`nets`]: the operator networks, the linear classifier, parameter-free
//!   analytic operators, composed set expressions and `LASO` checkpoints,
//! - [`losses`]: the classifier/operator/symmetry/reconstruction loss stack,
//! - [`eval`]: classification mAP and top-k retrieval mIoU protocols,
//! - [`fewshot`]: operator training plus the episode-based few-shot
//!   augmentation benchmark,
//! - [`gradsuite`]: the finite-difference check suite used by tests and the
//!   `gradcheck` CLI command.

pub mod autodiff;
pub mod eval;
pub mod fewshot;
pub mod gradsuite;
pub mod labels;
pub mod losses;
pub mod nets;
pub mod synth;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: length mismatch {lhs} vs {rhs}")]
    LengthMismatch {
        op: &'static str,
        lhs: usize,
        rhs: usize,
    },
    #[error("{op}: expected a scalar, got shape {shape:?}")]
    NotScalar { op: &'static str, shape: Vec<usize> },
    #[error("loss tensor was not produced by this tape")]
    LossNotOnTape,
    #[error("non-finite gradient for parameter `{name}`")]
    NonFiniteGrad { name: String },
    #[error("non-finite value: {context}")]
    NonFinite { context: String },
    #[error("{op}: {msg}")]
    InvalidArg { op: &'static str, msg: String },
    #[error("invalid config: {msg}")]
    InvalidConfig { msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected `{expected}`")]
    BadMagic { expected: &'static str },
    #[error("truncated file while reading {what}")]
    Truncated { what: String },
    #[error("unsupported format version {found} (supported: {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },
    #[error("malformed file: {msg}")]
    Malformed { msg: String },
    #[error("expression parse error: {msg}")]
    ExprParse { msg: String },
    #[error("sample id {id} out of range (bank has {len})")]
    SampleOutOfRange { id: usize, len: usize },
    #[error("empty pool: {what}")]
    EmptyPool { what: &'static str },
    #[error("label {label} starved: needed {needed} support samples, found {got}")]
    StarvedLabel {
        label: usize,
        needed: usize,
        got: usize,
    },
    #[error("k={k} exceeds retrieval pool size {pool}")]
    KTooLarge { k: usize, pool: usize },
}
