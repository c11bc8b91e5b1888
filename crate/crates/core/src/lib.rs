//! Occlusion robustness benchmark for cross-modal (image to text) retrieval.
//!
//! The crate is organised around the evaluation pipeline:
//!
//! ```text
//! manifest ──▶ corpus ──▶ occlusion(p, seed) ──▶ embedder ──▶ scores ──▶ ranks ──▶ Recall@k grid
//!                                   reports ──▶ embedder ───────┘
//! ```
//!
//! - [`data`]: images, sectioned reports, study manifests and the study filter.
//! - [`occlusion`]: seeded single-block occlusion of an image.
//! - [`scoring`]: cosine and classifier scoring, ranking and Recall@k.
//! - [`bench`]: the occlusion retrieval test, grid sweeps and random baselines.
//! - [`report`]: CSV / JSON emission of recall grids.
//! - [`embed`]: the embedder boundary (embedding files, builtin embedders,
//!   the length-prefixed JSON protocol to external embedder processes).
//! - [`toymodel`]: a small linear dual encoder with contrastive, triplet and
//!   binary cross-entropy objectives, plus a synthetic paired dataset.

pub mod bench;
pub mod data;
pub mod embed;
pub mod occlusion;
pub mod report;
pub mod scoring;
pub mod seed;
pub mod toymodel;

pub use bench::{BenchConfig, BenchError, Corpus, OcclusionMode, RecallGrid};
pub use data::{DataError, ImageTensor, Manifest, ReportText, Section, StudyRecord};
pub use embed::{EmbedError, Embedder, EmbedderSpec, EmbeddingTable, EmbeddingVector};
pub use occlusion::{BlockPlacement, OcclusionSpec};
pub use scoring::{ClassifierHead, RankedList, ScoreMatrix, Scorer, ScoringError};

/// Tool name echoed into report provenance.
pub const TOOL_NAME: &str = "xmrbench";

/// Crate version echoed into report provenance.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Default occlusion ratios, in percent of image area.
pub const DEFAULT_RATIOS: [f64; 8] = [0.0, 0.25, 1.0, 4.0, 9.0, 25.0, 49.0, 81.0];

/// Default Recall@k cutoffs.
pub const DEFAULT_K_VALUES: [usize; 6] = [5, 10, 20, 30, 50, 100];
