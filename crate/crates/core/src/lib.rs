//! Connectionist temporal classification over two-dimensional lattices.
//!
//! A recognizer emits an `H x W` grid of per-cell class distributions (a
//! [`ProbGrid`]). A label sequence is matched against the grid by summing over
//! every monotone path from the top-left to the bottom-right cell (moving only
//! right or down) and, along each path, over every per-cell labeling that
//! collapses to the target sequence. Horizontal and vertical moves carry
//! configurable weights, so the loss handles one image containing several text
//! lines without any line segmentation in the labels.
//!
//! The crate is organized as:
//!
//! * [`labels`] / [`grid`] — alphabets, label sequences, blank extension and
//!   collapse, probability and logit grids;
//! * [`lattice`] — the log-space forward/backward dynamic programs, sequence
//!   probability, the multi-sequence loss, and its analytic gradients;
//! * [`oracle`] — brute-force linear-space reference implementations (path
//!   enumeration, 1D CTC, exhaustive labeling sums, finite differences) used
//!   to certify the lattice;
//! * [`decode`] — argmax grids, grouping strategies, and strategy selection;
//! * [`metrics`] — edit distance, set-to-set matching, and NED/SA/IA reports;
//! * [`synthgen`] / [`idx`] — deterministic synthetic dataset generation and
//!   IDX glyph ingestion;
//! * [`model`] — a patch-classifier backbone trained with ADADELTA against the
//!   lattice loss.
//!
//! The `ctc2d` binary (in `src/bin`) exposes generation, training,
//! evaluation, decoding, and certification workflows.

pub mod decode;
pub mod grid;
pub mod idx;
pub mod labels;
pub mod lattice;
pub mod metrics;
pub mod model;
pub mod oracle;
pub mod synthgen;

pub use decode::{argmax_grid, decode_with_strategy, select_strategy, ArgmaxGrid, DecodeResult, GroupingStrategy};
pub use grid::{softmax_grid, validate_grid, GridDiagnostics, LogitsGrid, ProbGrid};
pub use labels::{collapse, extend_label, Alphabet, LabelSequence, TargetSet, BLANK};
pub use lattice::{
    backward, feasible, forward, grad_wrt_logits, grad_wrt_probs, sequence_log_prob, set_loss,
    AlphaTensor, BetaTensor, LambdaParams, LatticeResult, LossMode,
};
pub use metrics::{aggregate, edit_distance, match_sets, DatasetMetrics, MatchReport};
pub use model::{
    adadelta_step, evaluate, train, AdadeltaState, GridProducer, PatchClassifier, TrainConfig,
};
pub use synthgen::{gen_dataset, render_hv_sample, render_sample, DatasetSpec, GlyphSource, SampleRecord};

/// Errors shared across the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid alphabet: {0}")]
    InvalidAlphabet(String),
    #[error("invalid label: {0}")]
    InvalidLabel(String),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    /// The extended label cannot fit on any monotone path of the grid.
    #[error("infeasible target{}: extended label length {len_ext} exceeds the {max_ext} matchable on a {h}x{w} grid", fmt_idx(*.index))]
    InfeasibleTarget {
        /// Position of the offending sequence inside a target set, if any.
        index: Option<usize>,
        len_ext: usize,
        max_ext: usize,
        h: usize,
        w: usize,
    },
    /// A probability that a gradient divides by vanished entirely.
    #[error("target{} has zero probability mass; gradient undefined", fmt_idx(*.index))]
    VanishingMass { index: Option<usize> },
    #[error("{what} guard exceeded: {actual} > {limit}")]
    GuardExceeded {
        what: &'static str,
        limit: u64,
        actual: u64,
    },
    #[error("bad IDX magic: expected 0x{expected:08x}, found 0x{found:08x}")]
    IdxBadMagic { expected: u32, found: u32 },
    #[error("IDX file truncated: need {needed} bytes, found {found}")]
    IdxTruncated { needed: usize, found: usize },
    #[error("IDX image/label count mismatch: {images} images vs {labels} labels")]
    IdxCountMismatch { images: usize, labels: usize },
    #[error("IDX glyph size {h}x{w} unsupported (expected 28x28)")]
    IdxGlyphSize { h: usize, w: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Diverged {
        epoch: usize,
        batch: usize,
        detail: String,
    },
    #[error("glyph placement failed after {attempts} attempts")]
    PlacementFailed { attempts: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),
}

fn fmt_idx(index: Option<usize>) -> String {
    match index {
        Some(i) => format!(" #{i}"),
        None => String::new(),
    }
}

pub type Result<T> = std::result::Result<T, Error>;
