//! Compact memory embedding for target-similarity matching, deformable
//! feature learning, and a synthetic desk-scale tracking harness.
//!
//! The crate is organized around the data flow of a segmentation-based
//! tracker:
//!
//! - [`types`]: feature grids, masks, the memory bank, configuration;
//! - [`io`]: text feature-map format, PGM masks, atomic writes;
//! - [`rng`]: the repo-wide deterministic generator;
//! - [`matching`]: affinity, value retrieval, top-K scores, posterior;
//! - [`memory`]: bank initialization and the merge/expand/discard update;
//! - [`dfl`]: pixel-to-global attention with an exact backward pass;
//! - [`scenario`]: seeded synthetic sequences;
//! - [`pipeline`]: the per-frame tracking loop and its metrics.

pub mod dfl;
pub mod io;
pub mod matching;
pub mod memory;
pub mod pipeline;
pub mod rng;
pub mod scenario;
pub mod types;

pub use matching::{AffinityMatrix, Posterior, ScoreMaps};
pub use memory::{MaxCorrelation, UpdateReport};
pub use pipeline::{Box2D, DflMode, FrameResult, TrackerOptions};
pub use types::{CmeConfig, CmeError, FeatureMap, Mask, MemoryBank, MemoryEntry, MemoryStrategy};
