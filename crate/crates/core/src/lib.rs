//! Bounded KV-cache management for streaming causal geometric transformers.
//!
//! Each incoming frame appends `M` key/value tokens to every layer. The
//! engine keeps the cache within a fixed token budget by rating new tokens
//! with their FFN residual magnitude (smoothed over the patch grid), rating
//! historical tokens by key diversity, and retaining the top scorers, while
//! the first frame and a small FIFO of geometric anchor frames stay
//! protected.
//!
//! [`sim`] provides a seeded toy transformer and synthetic camera
//! trajectories that drive the engine end to end.

pub mod anchors;
pub mod cache;
pub mod compression;
pub mod engine;
pub mod error;
pub mod geometry;
pub mod rating;
pub mod sim;
pub mod trace;

pub use anchors::{protection_bound, select_protected_patches, AnchorId, AnchorRecord, AnchorRegistry};
pub use cache::{cache_footprint_bytes, EngineConfig, LayerCache, ModelDims, Protection, TokenEntry, TokenKind};
pub use compression::{allocate_budgets, compress_layer, diversity_scores, hybrid_scores, BudgetAllocation, HybridScores};
pub use engine::{camera_budget, Engine, FrameInput, StepMetrics, TokenScorer};
pub use error::{Error, Result};
pub use geometry::{compose_relative, coverage_ratio, Intrinsics, PointMap, Pose};
pub use rating::{activation_score, smooth, ActivationGrid, FfnResidual, GaussianKernel};
