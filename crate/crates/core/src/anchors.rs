//! Anchor protection: frame 0 stays cached forever, and a FIFO of at most
//! `K_max` historical anchors pins the top-confidence patches of frames
//! where the view drifted away from the last anchor.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::cache::EngineConfig;
use crate::error::{Error, Result};
use crate::geometry::{PointMap, Pose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AnchorId(pub u64);

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorRecord {
    pub anchor_id: AnchorId,
    pub frame_index: u64,
    pub pose: Pose,
    pub points: PointMap,
    /// Patch indices (not frame slots), ascending.
    pub protected_patches: Vec<usize>,
    pub registered_at_step: u64,
}

/// `ceil(eta * n)`, robust to products like `0.3 * 10 = 3.0000000000000004`.
pub fn protected_count(eta: f64, n: usize) -> usize {
    let x = eta * n as f64;
    let r = x.round();
    let c = if (x - r).abs() <= 1e-9 * x.abs().max(1.0) {
        r
    } else {
        x.ceil()
    };
    (c.max(0.0) as usize).min(n)
}

/// Indices of the `ceil(eta * N_p)` highest-confidence patches, ascending.
/// Equal confidences favour the lower index.
pub fn select_protected_patches(confidence: &[f64], eta: f64) -> Result<Vec<usize>> {
    if !(eta > 0.0 && eta < 1.0) {
        return Err(Error::OutOfUnitRange {
            name: "eta",
            value: eta,
        });
    }
    if let Some(i) = confidence.iter().position(|c| !c.is_finite()) {
        return Err(Error::NonFinite { slot: i });
    }
    let k = protected_count(eta, confidence.len());
    let mut idx: Vec<usize> = (0..confidence.len()).collect();
    idx.sort_by(|&a, &b| confidence[b].total_cmp(&confidence[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort_unstable();
    Ok(idx)
}

/// Per-layer upper bound on the protected set, `M + K_max * ceil(eta * N_p)`.
pub fn protection_bound(cfg: &EngineConfig) -> usize {
    cfg.dims.tokens_per_frame()
        + cfg.max_anchors * protected_count(cfg.anchor_eta, cfg.dims.num_patches())
}

/// The reference geometry an incoming frame is compared against.
#[derive(Debug, Clone, Copy)]
pub struct AnchorView<'a> {
    pub frame_index: u64,
    pub pose: &'a Pose,
    pub points: &'a PointMap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RegistrationOutcome {
    pub registered: Option<AnchorId>,
    pub demoted: Option<AnchorId>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AnchorRegistry {
    initial: Option<(Pose, PointMap)>,
    historical: VecDeque<AnchorRecord>,
    last_registration_frame: Option<u64>,
    last_seen_frame: Option<u64>,
    next_id: u64,
}

impl AnchorRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Frame 0 becomes the global initial anchor.
    pub fn set_initial(&mut self, pose: Pose, points: PointMap) {
        self.initial = Some((pose, points));
        self.last_registration_frame = Some(0);
        self.last_seen_frame = Some(0);
    }

    pub fn initial_frame_protected(&self) -> bool {
        self.initial.is_some()
    }

    pub fn historical(&self) -> impl ExactSizeIterator<Item = &AnchorRecord> {
        self.historical.iter()
    }

    pub fn live_ids(&self) -> Vec<AnchorId> {
        self.historical.iter().map(|a| a.anchor_id).collect()
    }

    pub fn get(&self, id: AnchorId) -> Option<&AnchorRecord> {
        self.historical.iter().find(|a| a.anchor_id == id)
    }

    pub fn last_registration_frame(&self) -> Option<u64> {
        self.last_registration_frame
    }

    /// Newest live historical anchor, falling back to the initial anchor.
    pub fn most_recent(&self) -> Option<AnchorView<'_>> {
        if let Some(a) = self.historical.back() {
            return Some(AnchorView {
                frame_index: a.frame_index,
                pose: &a.pose,
                points: &a.points,
            });
        }
        self.initial.as_ref().map(|(pose, points)| AnchorView {
            frame_index: 0,
            pose,
            points,
        })
    }

    /// Whether a frame with coverage `rho` would be registered now.
    pub fn should_register(&self, frame_index: u64, rho: f64, cfg: &EngineConfig) -> bool {
        let elapsed_ok = match self.last_registration_frame {
            Some(last) => frame_index.saturating_sub(last) >= cfg.min_anchor_interval,
            None => true,
        };
        rho < cfg.coverage_tau && elapsed_ok
    }

    /// Registers the current frame when coverage fell below `tau` and the
    /// minimum interval has elapsed. Overflowing `K_max` demotes the oldest
    /// anchor, whose id is returned so its tokens can be released.
    pub fn register_if_needed(
        &mut self,
        frame_index: u64,
        rho: f64,
        frame_pose: &Pose,
        frame_points: &PointMap,
        cfg: &EngineConfig,
    ) -> Result<RegistrationOutcome> {
        if let Some(seen) = self.last_seen_frame {
            if frame_index <= seen {
                return Err(Error::FrameIndexMismatch {
                    expected: seen + 1,
                    got: frame_index,
                });
            }
        }
        if !self.should_register(frame_index, rho, cfg) {
            self.last_seen_frame = Some(frame_index);
            return Ok(RegistrationOutcome::default());
        }
        let protected_patches = select_protected_patches(&frame_points.confidence, cfg.anchor_eta)?;
        let anchor_id = AnchorId(self.next_id);
        self.next_id += 1;
        self.historical.push_back(AnchorRecord {
            anchor_id,
            frame_index,
            pose: *frame_pose,
            points: frame_points.clone(),
            protected_patches,
            registered_at_step: frame_index,
        });
        let demoted = if self.historical.len() > cfg.max_anchors {
            self.historical.pop_front().map(|a| a.anchor_id)
        } else {
            None
        };
        self.last_registration_frame = Some(frame_index);
        self.last_seen_frame = Some(frame_index);
        Ok(RegistrationOutcome {
            registered: Some(anchor_id),
            demoted,
        })
    }
}
