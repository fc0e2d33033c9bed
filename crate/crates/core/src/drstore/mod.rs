//! Reinforced-dataset store: a single append-only file holding, per sample, the
//! source image and caption plus stored augmentation parameters, synthetic
//! captions and bf16 teacher embeddings.
//!
//! Layout (little-endian, see `docs/FORMAT.md`):
//! `"MDRS" | version u16 | manifest_len u32 | manifest TLV | frames… | index | footer`.
//! Each frame holds one record as seven independently gzipped sections.

mod ingest;
mod manifest;
pub mod providers;
mod record;
mod store;

pub use ingest::{
    load_image, load_pairs, reinforce, save_png, PlainPair, ReinforceConfig, ReinforceSummary,
    SkippedSample,
};
pub use manifest::{StoreManifest, DEFAULT_GZIP_LEVEL, RECOMMENDED_VIEWS};
pub use providers::{
    CaptionProvider, EmbedTarget, JsonlCaptions, MmebTeacher, ProviderError,
    RandomProjectionTeacher, TeacherProvider,
};
pub use record::{ReinforcedRecord, Section, TeacherEmbeddings, SECTIONS, UNIT_NORM_TOL_BF16};
pub use store::{
    choose_view, IndexEntry, SectionBytes, Store, StoreStats, StoreWriter, TrainingView,
};

use crate::augment::AugmentError;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
    #[error("manifest mismatch: {0}")]
    ManifestMismatch(String),
    #[error("invalid embedding: {0}")]
    InvalidEmbedding(String),
    #[error("{source_name}: embedding width {got}, expected d_k = {expected}")]
    EmbeddingDimMismatch {
        source_name: String,
        expected: usize,
        got: usize,
    },
    #[error("duplicate record id {0}")]
    DuplicateId(u64),
    #[error("unknown record id {0}")]
    UnknownId(u64),
    #[error("corrupt store: {0}")]
    Corrupt(String),
    #[error("bad input: {0}")]
    Input(String),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}
