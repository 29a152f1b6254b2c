//! Domain types and the per-layer token store.
//!
//! A frame contributes `M = num_aux + H_p * W_p` tokens to every layer. Slots
//! are laid out as `[camera, registers..., patches (row-major)]`; the first
//! aux slot is the camera token.

use serde::{Deserialize, Serialize};

use crate::anchors::AnchorId;
use crate::error::{Error, Result};
use crate::geometry::Intrinsics;

/// Transformer and patch-grid dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub num_layers: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub patch_rows: usize,
    pub patch_cols: usize,
    /// Camera plus register tokens per frame.
    pub num_aux: usize,
}

impl ModelDims {
    pub fn new(
        num_layers: usize,
        num_heads: usize,
        head_dim: usize,
        patch_rows: usize,
        patch_cols: usize,
        num_aux: usize,
    ) -> Result<Self> {
        let dims = Self {
            num_layers,
            num_heads,
            head_dim,
            patch_rows,
            patch_cols,
            num_aux,
        };
        dims.validate()?;
        Ok(dims)
    }

    /// 24 layers, 16 heads of width 64, a 37x28 patch grid and 5 aux tokens
    /// (M = 1041).
    pub fn reference() -> Self {
        Self {
            num_layers: 24,
            num_heads: 16,
            head_dim: 64,
            patch_rows: 37,
            patch_cols: 28,
            num_aux: 5,
        }
    }

    /// Desk-scale layout used by the synthetic pipeline (M = 69).
    pub fn toy() -> Self {
        Self {
            num_layers: 4,
            num_heads: 2,
            head_dim: 16,
            patch_rows: 8,
            patch_cols: 8,
            num_aux: 5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("head_dim", self.head_dim),
            ("patch_rows", self.patch_rows),
            ("patch_cols", self.patch_cols),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidDims(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    /// `N_p`
    pub fn num_patches(&self) -> usize {
        self.patch_rows * self.patch_cols
    }

    /// `M`
    pub fn tokens_per_frame(&self) -> usize {
        self.num_aux + self.num_patches()
    }

    /// Flattened key (or value) width, `N_h * d`.
    pub fn token_width(&self) -> usize {
        self.num_heads * self.head_dim
    }

    /// Key plus value.
    pub fn bytes_per_token(&self, element_size: usize) -> usize {
        2 * self.token_width() * element_size
    }

    pub fn kind_of(&self, slot: usize) -> TokenKind {
        if slot < self.num_aux {
            if slot == 0 {
                TokenKind::Camera
            } else {
                TokenKind::Register
            }
        } else {
            let p = slot - self.num_aux;
            TokenKind::Patch {
                row: p / self.patch_cols,
                col: p % self.patch_cols,
            }
        }
    }

    pub fn patch_slot(&self, patch_index: usize) -> usize {
        self.num_aux + patch_index
    }
}

/// `Mem = 2 * L * T * M * N_h * d * element_size`, or an error on overflow.
pub fn cache_footprint_bytes(dims: &ModelDims, num_frames: u64, element_size: u64) -> Result<u64> {
    [
        dims.num_layers as u64,
        num_frames,
        dims.tokens_per_frame() as u64,
        dims.num_heads as u64,
        dims.head_dim as u64,
        element_size,
    ]
    .into_iter()
    .try_fold(2u64, |acc, x| acc.checked_mul(x))
    .ok_or(Error::FootprintOverflow)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TokenKind {
    Camera,
    Register,
    Patch { row: usize, col: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Protection {
    Unprotected,
    InitialAnchor,
    HistoricalAnchor(AnchorId),
}

impl Protection {
    pub fn is_protected(self) -> bool {
        !matches!(self, Protection::Unprotected)
    }
}

/// One cached key/value pair.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenEntry {
    pub frame_index: u64,
    pub slot_index: usize,
    pub kind: TokenKind,
    pub key: Vec<f32>,
    pub value: Vec<f32>,
    pub protection: Protection,
}

impl TokenEntry {
    pub fn id(&self) -> (u64, usize) {
        (self.frame_index, self.slot_index)
    }
}

/// Ordered token store for one layer. Insertion order is arrival order, so
/// the current frame's tokens always sit at the tail.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCache {
    layer_index: usize,
    tokens_per_frame: usize,
    width: usize,
    budget: usize,
    entries: Vec<TokenEntry>,
    /// Start of the most recently appended frame (`U_new` plus any of its
    /// protected tokens).
    new_start: usize,
}

impl LayerCache {
    pub fn new(layer_index: usize, dims: &ModelDims, budget: usize) -> Self {
        Self::with_shape(layer_index, dims.tokens_per_frame(), dims.token_width(), budget)
    }

    pub(crate) fn with_shape(
        layer_index: usize,
        tokens_per_frame: usize,
        width: usize,
        budget: usize,
    ) -> Self {
        Self {
            layer_index,
            tokens_per_frame,
            width,
            budget,
            entries: Vec::new(),
            new_start: 0,
        }
    }

    pub fn layer_index(&self) -> usize {
        self.layer_index
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn set_budget(&mut self, budget: usize) {
        self.budget = budget;
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[TokenEntry] {
        &self.entries
    }

    /// Tokens of the latest appended frame.
    pub fn newest_frame(&self) -> &[TokenEntry] {
        &self.entries[self.new_start..]
    }

    pub fn last_frame_index(&self) -> Option<u64> {
        self.entries.last().map(|e| e.frame_index)
    }

    pub fn protected_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.protection.is_protected())
            .count()
    }

    /// Appends one frame of tokens in slot order. On error the cache is
    /// left untouched.
    pub fn append_frame(&mut self, mut tokens: Vec<TokenEntry>) -> Result<()> {
        if tokens.len() != self.tokens_per_frame {
            return Err(Error::TokenCount {
                expected: self.tokens_per_frame,
                got: tokens.len(),
            });
        }
        let frame = tokens[0].frame_index;
        tokens.sort_by_key(|t| t.slot_index);
        for (i, t) in tokens.iter().enumerate() {
            if t.frame_index != frame {
                return Err(Error::MixedFrame {
                    first: frame,
                    other: t.frame_index,
                });
            }
            if t.slot_index != i {
                return Err(Error::MalformedFrame(format!(
                    "slot indices must cover 0..{} exactly once",
                    self.tokens_per_frame
                )));
            }
            if t.key.len() != self.width || t.value.len() != self.width {
                return Err(Error::TokenWidth {
                    slot: i,
                    expected: self.width,
                    got: t.key.len().min(t.value.len()),
                });
            }
            if t.protection == Protection::InitialAnchor && frame != 0 {
                return Err(Error::MalformedFrame(
                    "only frame 0 may carry initial-anchor protection".into(),
                ));
            }
        }
        if let Some(last) = self.last_frame_index() {
            if frame <= last {
                return Err(Error::FrameRegression {
                    layer: self.layer_index,
                    last,
                    got: frame,
                });
            }
        }
        self.new_start = self.entries.len();
        self.entries.extend(tokens);
        Ok(())
    }

    /// Returns every token held by `anchor` to the evictable pool.
    pub fn release_anchor(&mut self, anchor: AnchorId) -> usize {
        let mut released = 0;
        for e in &mut self.entries {
            if e.protection == Protection::HistoricalAnchor(anchor) {
                e.protection = Protection::Unprotected;
                released += 1;
            }
        }
        released
    }

    #[cfg(test)]
    pub(crate) fn entries_mut(&mut self) -> &mut [TokenEntry] {
        &mut self.entries
    }

    /// Keeps entries whose flag is set, preserving order.
    pub(crate) fn retain_flags(&mut self, keep: &[bool]) {
        debug_assert_eq!(keep.len(), self.entries.len());
        let newest = self.entries.get(self.new_start).map(|e| e.frame_index);
        let mut it = keep.iter();
        self.entries.retain(|_| *it.next().unwrap());
        self.new_start = match newest {
            Some(f) => self
                .entries
                .iter()
                .position(|e| e.frame_index == f)
                .unwrap_or(self.entries.len()),
            None => self.entries.len(),
        };
    }
}

/// All engine tunables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    /// Total token budget `B`, summed over layers.
    pub total_budget: usize,
    pub smoothing_alpha: f64,
    pub hybrid_beta: f64,
    pub coverage_tau: f64,
    pub anchor_eta: f64,
    pub max_anchors: usize,
    /// Frames that must elapse between anchor registrations.
    pub min_anchor_interval: u64,
    pub gaussian_kernel_size: usize,
    pub gaussian_sigma: f64,
    /// Bytes per stored key/value element, used for footprint accounting.
    pub element_size: usize,
    pub camera: Intrinsics,
    pub dims: ModelDims,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self::for_dims(ModelDims::reference())
    }
}

impl EngineConfig {
    /// Default tunables with the given model layout and a 14-pixel patch
    /// camera whose focal length equals the image width.
    pub fn for_dims(dims: ModelDims) -> Self {
        Self {
            total_budget: 200_000,
            smoothing_alpha: 0.5,
            hybrid_beta: 0.5,
            coverage_tau: 0.2,
            anchor_eta: 0.05,
            max_anchors: 3,
            min_anchor_interval: 100,
            gaussian_kernel_size: 5,
            gaussian_sigma: 1.0,
            element_size: 4,
            camera: Intrinsics::for_patch_grid(dims.patch_rows, dims.patch_cols, 14),
            dims,
        }
    }

    pub fn toy() -> Self {
        Self::for_dims(ModelDims::toy())
    }

    /// Smallest total budget this configuration can run with: every layer
    /// must hold its worst-case protected set plus one incoming frame.
    pub fn min_total_budget(&self) -> usize {
        self.dims.num_layers
            * (crate::anchors::protection_bound(self) + self.dims.tokens_per_frame())
    }

    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        if self.dims.num_aux == 0 {
            return Err(Error::InvalidDims(
                "num_aux must include the camera token".into(),
            ));
        }
        let unit = |field: &'static str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::InvalidConfig {
                    field,
                    reason: format!("{v} is outside [0, 1]"),
                })
            }
        };
        let open_unit = |field: &'static str, v: f64| {
            if v > 0.0 && v < 1.0 {
                Ok(())
            } else {
                Err(Error::InvalidConfig {
                    field,
                    reason: format!("{v} is outside (0, 1)"),
                })
            }
        };
        unit("smoothing_alpha", self.smoothing_alpha)?;
        unit("hybrid_beta", self.hybrid_beta)?;
        open_unit("coverage_tau", self.coverage_tau)?;
        open_unit("anchor_eta", self.anchor_eta)?;
        if self.max_anchors == 0 {
            return Err(Error::InvalidConfig {
                field: "max_anchors",
                reason: "must be positive".into(),
            });
        }
        if self.min_anchor_interval == 0 {
            return Err(Error::InvalidConfig {
                field: "min_anchor_interval",
                reason: "must be positive".into(),
            });
        }
        if self.gaussian_kernel_size.is_multiple_of(2) {
            return Err(Error::InvalidConfig {
                field: "gaussian_kernel_size",
                reason: format!("{} is not odd", self.gaussian_kernel_size),
            });
        }
        if !(self.gaussian_sigma > 0.0 && self.gaussian_sigma.is_finite()) {
            return Err(Error::InvalidConfig {
                field: "gaussian_sigma",
                reason: format!("{} is not a positive real", self.gaussian_sigma),
            });
        }
        if !matches!(self.element_size, 1 | 2 | 4 | 8) {
            return Err(Error::InvalidConfig {
                field: "element_size",
                reason: format!("{} is not 1, 2, 4 or 8", self.element_size),
            });
        }
        self.camera.validate()?;
        let need = self.min_total_budget();
        if self.total_budget < need {
            return Err(Error::InfeasibleBudget {
                total: self.total_budget,
                deficit: need - self.total_budget,
            });
        }
        Ok(())
    }
}
