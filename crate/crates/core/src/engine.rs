//! Per-frame streaming orchestration.
//!
//! Every step appends the frame to all layers (and its camera token to the
//! camera-head cache), scores the new tokens, updates anchors, reallocates
//! per-layer budgets and compresses. Anchoring runs before compression so a
//! freshly registered anchor is never partially evicted in its own step.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::anchors::{protected_count, AnchorId, AnchorRegistry, RegistrationOutcome};
use crate::cache::{EngineConfig, LayerCache, ModelDims, Protection, TokenEntry};
use crate::compression::{allocate_budgets, compress_layer, diversity_scores, hybrid_scores, min_max_normalize};
use crate::error::{Error, Result};
use crate::geometry::{coverage_ratio, PointMap, Pose};
use crate::rating::{activation_score, smooth, FfnResidual, GaussianKernel};

/// One frame's worth of per-layer keys, values and FFN residuals plus the
/// frame's geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameInput {
    pub frame_index: u64,
    /// Per layer, `M x (N_h * d)` row-major.
    pub keys: Vec<Vec<f32>>,
    pub values: Vec<Vec<f32>>,
    pub residuals: Vec<FfnResidual>,
    pub pose: Pose,
    pub points: PointMap,
}

impl FrameInput {
    pub fn validate(&self, dims: &ModelDims) -> Result<()> {
        let l = dims.num_layers;
        if self.keys.len() != l || self.values.len() != l || self.residuals.len() != l {
            return Err(Error::MalformedFrame(format!(
                "expected {l} layers, got {} key / {} value / {} residual blocks",
                self.keys.len(),
                self.values.len(),
                self.residuals.len()
            )));
        }
        let block = dims.tokens_per_frame() * dims.token_width();
        for layer in 0..l {
            if self.keys[layer].len() != block || self.values[layer].len() != block {
                return Err(Error::MalformedFrame(format!(
                    "layer {layer} key/value block must hold {block} values"
                )));
            }
            let r = &self.residuals[layer];
            if r.num_tokens() != dims.tokens_per_frame() {
                return Err(Error::TokenCount {
                    expected: dims.tokens_per_frame(),
                    got: r.num_tokens(),
                });
            }
            if let Some(i) = r.as_slice().iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite { slot: i / r.width() });
            }
        }
        self.points.validate(dims.num_patches())
    }

    pub fn key(&self, dims: &ModelDims, layer: usize, slot: usize) -> &[f32] {
        let w = dims.token_width();
        &self.keys[layer][slot * w..(slot + 1) * w]
    }

    pub fn value(&self, dims: &ModelDims, layer: usize, slot: usize) -> &[f32] {
        let w = dims.token_width();
        &self.values[layer][slot * w..(slot + 1) * w]
    }
}

/// Source of retention scores for the newest frame.
///
/// Called before the frame is appended, so `cache` holds history only.
pub trait TokenScorer {
    /// Raw per-slot scores (length `M`) of the incoming frame at `layer`.
    fn current_scores(
        &mut self,
        layer: usize,
        frame: &FrameInput,
        cache: &LayerCache,
        cfg: &EngineConfig,
    ) -> Result<Vec<f64>>;

    /// Replaces the hybrid scores of the `count` evictable tokens entirely.
    fn override_evictable(&mut self, _layer: usize, _count: usize) -> Option<Vec<f64>> {
        None
    }
}

/// FFN-residual activation rating with Gaussian smoothing.
#[derive(Debug, Clone)]
pub struct ActivationRating {
    kernel: GaussianKernel,
    alpha: f64,
}

impl ActivationRating {
    pub fn new(cfg: &EngineConfig) -> Result<Self> {
        Ok(Self {
            kernel: GaussianKernel::new(cfg.gaussian_kernel_size, cfg.gaussian_sigma)?,
            alpha: cfg.smoothing_alpha,
        })
    }
}

impl TokenScorer for ActivationRating {
    fn current_scores(
        &mut self,
        layer: usize,
        frame: &FrameInput,
        _cache: &LayerCache,
        cfg: &EngineConfig,
    ) -> Result<Vec<f64>> {
        let raw = activation_score(&cfg.dims, &frame.residuals[layer], frame.frame_index)?;
        let g = smooth(&raw, self.alpha, &self.kernel)?;
        Ok((0..g.num_slots()).map(|s| g.slot_score(s)).collect())
    }
}

/// `max(floor(B / M), 1 + K_max)` camera tokens.
pub fn camera_budget(cfg: &EngineConfig) -> usize {
    (cfg.total_budget / cfg.dims.tokens_per_frame()).max(1 + cfg.max_anchors)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub frame_index: u64,
    pub layer_sizes: Vec<usize>,
    pub layer_budgets: Vec<usize>,
    pub protected: Vec<usize>,
    pub camera_size: usize,
    pub camera_budget: usize,
    /// Aggregator tokens held after compression.
    pub resident_tokens: usize,
    /// Aggregator tokens held between append and compression.
    pub peak_tokens: usize,
    /// Aggregator plus camera-head key/value bytes after compression.
    pub bytes_resident: u64,
    pub evicted: usize,
    pub camera_evicted: usize,
    pub rho: Option<f64>,
    pub registered: Option<AnchorId>,
    pub demoted: Option<AnchorId>,
    pub live_anchors: Vec<AnchorId>,
    /// Hash of every surviving `(frame, slot)` per layer and camera cache.
    pub survivor_digest: String,
    /// Hash of the bit patterns of this frame's token scores.
    pub score_digest: String,
    /// Wall-clock duration; not part of the serialized record.
    #[serde(skip)]
    pub step_ms: f64,
}

impl StepMetrics {
    /// Steps where a layer, the layer sum or the camera cache is over budget.
    pub fn budget_violations(&self, total_budget: usize) -> usize {
        let per_layer = self
            .layer_sizes
            .iter()
            .zip(&self.layer_budgets)
            .filter(|(s, b)| s > b)
            .count();
        per_layer
            + usize::from(self.resident_tokens > total_budget)
            + usize::from(self.camera_size > self.camera_budget)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EngineState {
    pub layer_caches: Vec<LayerCache>,
    pub camera_cache: LayerCache,
    pub registry: AnchorRegistry,
    pub step_counter: u64,
    pub metrics_log: Vec<StepMetrics>,
}

#[derive(Debug, Clone)]
pub struct Engine {
    cfg: EngineConfig,
    rating: ActivationRating,
    state: EngineState,
}

struct StepTimer(#[cfg(not(target_arch = "wasm32"))] std::time::Instant);

impl StepTimer {
    fn start() -> Self {
        #[cfg(not(target_arch = "wasm32"))]
        {
            Self(std::time::Instant::now())
        }
        #[cfg(target_arch = "wasm32")]
        {
            Self()
        }
    }

    fn elapsed_ms(&self) -> f64 {
        #[cfg(not(target_arch = "wasm32"))]
        {
            self.0.elapsed().as_secs_f64() * 1e3
        }
        #[cfg(target_arch = "wasm32")]
        {
            0.0
        }
    }
}

fn short_hash(h: Sha256) -> String {
    h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
}

impl Engine {
    pub fn new(cfg: EngineConfig) -> Result<Self> {
        cfg.validate()?;
        let dims = cfg.dims;
        let cam_budget = camera_budget(&cfg);
        let state = EngineState {
            layer_caches: (0..dims.num_layers)
                .map(|l| LayerCache::new(l, &dims, cfg.total_budget / dims.num_layers))
                .collect(),
            camera_cache: LayerCache::with_shape(0, 1, dims.token_width(), cam_budget),
            registry: AnchorRegistry::new(),
            step_counter: 0,
            metrics_log: Vec::new(),
        };
        Ok(Self {
            rating: ActivationRating::new(&cfg)?,
            cfg,
            state,
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn state(&self) -> &EngineState {
        &self.state
    }

    pub fn layer(&self, l: usize) -> &LayerCache {
        &self.state.layer_caches[l]
    }

    pub fn metrics(&self) -> &[StepMetrics] {
        &self.state.metrics_log
    }

    pub fn resident_tokens(&self) -> usize {
        self.state.layer_caches.iter().map(LayerCache::len).sum()
    }

    /// Steps with the built-in FFN-residual rating.
    pub fn step(&mut self, frame: &FrameInput) -> Result<StepMetrics> {
        let mut rating = self.rating.clone();
        self.step_with(frame, &mut rating)
    }

    /// Steps with a caller-supplied scorer. Any error leaves the state as it
    /// was before the call.
    pub fn step_with(&mut self, frame: &FrameInput, scorer: &mut dyn TokenScorer) -> Result<StepMetrics> {
        let timer = StepTimer::start();
        let cfg = &self.cfg;
        let dims = cfg.dims;
        let m = dims.tokens_per_frame();
        let t = frame.frame_index;
        if t != self.state.step_counter {
            return Err(Error::FrameIndexMismatch {
                expected: self.state.step_counter,
                got: t,
            });
        }
        frame.validate(&dims)?;

        let mut current_scores = Vec::with_capacity(dims.num_layers);
        for (l, cache) in self.state.layer_caches.iter().enumerate() {
            let s = scorer.current_scores(l, frame, cache, cfg)?;
            if s.len() != m {
                return Err(Error::ScoreLength { expected: m, got: s.len() });
            }
            if let Some(i) = s.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite { slot: i });
            }
            current_scores.push(s);
        }

        // Anchoring on a scratch registry; committed only once the step is
        // known to be feasible.
        let mut registry = self.state.registry.clone();
        let (rho, outcome) = if t == 0 {
            registry.set_initial(frame.pose, frame.points.clone());
            (None, RegistrationOutcome::default())
        } else {
            let anchor = registry.most_recent().expect("initial anchor set at frame 0");
            let rho = coverage_ratio(anchor.points, anchor.pose, &frame.pose, &cfg.camera);
            let out = registry.register_if_needed(t, rho, &frame.pose, &frame.points, cfg)?;
            (Some(rho), out)
        };
        let registered = outcome
            .registered
            .map(|id| (id, registry.get(id).expect("just registered").protected_patches.clone()));
        let new_protection = |slot: usize| -> Protection {
            if t == 0 {
                return Protection::InitialAnchor;
            }
            if let Some((id, patches)) = &registered {
                if slot >= dims.num_aux && patches.binary_search(&(slot - dims.num_aux)).is_ok() {
                    return Protection::HistoricalAnchor(*id);
                }
            }
            Protection::Unprotected
        };
        let new_protected = if t == 0 {
            m
        } else if outcome.registered.is_some() {
            protected_count(cfg.anchor_eta, dims.num_patches())
        } else {
            0
        };
        let floors: Vec<usize> = self
            .state
            .layer_caches
            .iter()
            .map(|c| {
                let demoted = outcome.demoted.map_or(0, |id| {
                    c.entries()
                        .iter()
                        .filter(|e| e.protection == Protection::HistoricalAnchor(id))
                        .count()
                });
                c.protected_count() - demoted + new_protected + m
            })
            .collect();
        let floor_sum: usize = floors.iter().sum();
        if floor_sum > cfg.total_budget {
            return Err(Error::InfeasibleBudget {
                total: cfg.total_budget,
                deficit: floor_sum - cfg.total_budget,
            });
        }

        // From here on the step cannot fail.
        self.state.registry = registry;
        let mut peak_tokens = 0;
        for (l, cache) in self.state.layer_caches.iter_mut().enumerate() {
            if let Some(id) = outcome.demoted {
                cache.release_anchor(id);
            }
            let tokens = (0..m)
                .map(|slot| TokenEntry {
                    frame_index: t,
                    slot_index: slot,
                    kind: dims.kind_of(slot),
                    key: frame.key(&dims, l, slot).to_vec(),
                    value: frame.value(&dims, l, slot).to_vec(),
                    protection: new_protection(slot),
                })
                .collect();
            cache.append_frame(tokens).expect("frame validated");
            peak_tokens += cache.len();
        }
        let camera = &mut self.state.camera_cache;
        if let Some(id) = outcome.demoted {
            camera.release_anchor(id);
        }
        let last = dims.num_layers - 1;
        let camera_protection = match (t, outcome.registered) {
            (0, _) => Protection::InitialAnchor,
            (_, Some(id)) => Protection::HistoricalAnchor(id),
            _ => Protection::Unprotected,
        };
        camera
            .append_frame(vec![TokenEntry {
                frame_index: t,
                slot_index: 0,
                kind: dims.kind_of(0),
                key: frame.key(&dims, last, 0).to_vec(),
                value: frame.value(&dims, last, 0).to_vec(),
                protection: camera_protection,
            }])
            .expect("frame validated");

        // Diversity of the evictable history drives both allocation and the
        // historical half of the hybrid score.
        let hist_diversity: Vec<Vec<f64>> = self
            .state
            .layer_caches
            .iter()
            .map(|c| {
                let keys: Vec<&[f32]> = c
                    .entries()
                    .iter()
                    .filter(|e| !e.protection.is_protected() && e.frame_index < t)
                    .map(|e| e.key.as_slice())
                    .collect();
                diversity_scores(&keys).scores
            })
            .collect();
        let layer_diversity: Vec<f64> = hist_diversity
            .iter()
            .map(|d| {
                if d.is_empty() {
                    0.0
                } else {
                    d.iter().sum::<f64>() / d.len() as f64
                }
            })
            .collect();
        let allocation = allocate_budgets(cfg.total_budget, &layer_diversity, &floors)?;

        let mut evicted = 0;
        for (l, cache) in self.state.layer_caches.iter_mut().enumerate() {
            let budget = allocation.budgets[l];
            cache.set_budget(budget);
            if cache.len() <= budget {
                continue;
            }
            let new_activation: Vec<f64> = cache
                .newest_frame()
                .iter()
                .filter(|e| !e.protection.is_protected())
                .map(|e| current_scores[l][e.slot_index])
                .collect();
            let count = hist_diversity[l].len() + new_activation.len();
            let scores = match scorer.override_evictable(l, count) {
                Some(s) => s,
                None => hybrid_scores(&hist_diversity[l], &new_activation, cfg.hybrid_beta)?.into_values(),
            };
            evicted += compress_layer(cache, &scores, budget)?.evicted;
        }

        let cam_budget = camera_budget(cfg);
        let camera = &mut self.state.camera_cache;
        camera.set_budget(cam_budget);
        let mut camera_evicted = 0;
        if camera.len() > cam_budget {
            let hist: Vec<&[f32]> = camera
                .entries()
                .iter()
                .filter(|e| !e.protection.is_protected() && e.frame_index < t)
                .map(|e| e.key.as_slice())
                .collect();
            let (mut scores, _) = min_max_normalize(&diversity_scores(&hist).scores);
            if camera_protection == Protection::Unprotected {
                // the newest camera token outranks every historical one
                scores.push(f64::INFINITY);
            }
            camera_evicted = compress_layer(camera, &scores, cam_budget)?.evicted;
        }

        let mut survivors = Sha256::new();
        for c in self.state.layer_caches.iter().chain(std::iter::once(&self.state.camera_cache)) {
            survivors.update((c.len() as u64).to_le_bytes());
            for e in c.entries() {
                survivors.update(e.frame_index.to_le_bytes());
                survivors.update((e.slot_index as u64).to_le_bytes());
            }
        }
        let mut score_hash = Sha256::new();
        for s in current_scores.iter().flatten() {
            score_hash.update(s.to_bits().to_le_bytes());
        }

        let layer_sizes: Vec<usize> = self.state.layer_caches.iter().map(LayerCache::len).collect();
        let resident_tokens: usize = layer_sizes.iter().sum();
        let camera_size = self.state.camera_cache.len();
        let metrics = StepMetrics {
            frame_index: t,
            layer_budgets: allocation.budgets,
            protected: self.state.layer_caches.iter().map(LayerCache::protected_count).collect(),
            camera_size,
            camera_budget: cam_budget,
            resident_tokens,
            peak_tokens,
            bytes_resident: ((resident_tokens + camera_size) * dims.bytes_per_token(cfg.element_size)) as u64,
            evicted,
            camera_evicted,
            rho,
            registered: outcome.registered,
            demoted: outcome.demoted,
            live_anchors: self.state.registry.live_ids(),
            survivor_digest: short_hash(survivors),
            score_digest: short_hash(score_hash),
            layer_sizes,
            step_ms: timer.elapsed_ms(),
        };
        self.state.step_counter += 1;
        self.state.metrics_log.push(metrics.clone());
        Ok(metrics)
    }

    /// Checks that every protected token in every cache is backed by the
    /// registry, and that every live anchor's tokens are still protected.
    pub fn check_consistency(&self) -> std::result::Result<(), String> {
        let reg = &self.state.registry;
        let dims = &self.cfg.dims;
        let live = reg.live_ids();
        for c in self.state.layer_caches.iter() {
            for e in c.entries() {
                match e.protection {
                    Protection::Unprotected => {
                        if e.frame_index == 0 {
                            return Err(format!("frame-0 token {:?} lost its protection", e.id()));
                        }
                        if let Some(a) = reg.historical().find(|a| a.frame_index == e.frame_index) {
                            if e.slot_index >= dims.num_aux
                                && a.protected_patches.binary_search(&(e.slot_index - dims.num_aux)).is_ok()
                            {
                                return Err(format!("anchor token {:?} is unprotected", e.id()));
                            }
                        }
                    }
                    Protection::InitialAnchor => {
                        if e.frame_index != 0 {
                            return Err(format!("token {:?} claims the initial anchor", e.id()));
                        }
                    }
                    Protection::HistoricalAnchor(id) => {
                        let Some(a) = reg.get(id) else {
                            return Err(format!("token {:?} held by dead anchor {id:?}", e.id()));
                        };
                        if a.frame_index != e.frame_index {
                            return Err(format!("token {:?} held by anchor of frame {}", e.id(), a.frame_index));
                        }
                    }
                }
            }
        }
        for e in self.state.camera_cache.entries() {
            let is_anchor = e.frame_index == 0 || reg.historical().any(|a| a.frame_index == e.frame_index);
            if is_anchor != e.protection.is_protected() {
                return Err(format!("camera token of frame {} out of sync", e.frame_index));
            }
        }
        for id in live {
            let frame = reg.get(id).expect("live").frame_index;
            if !self.state.camera_cache.entries().iter().any(|e| e.frame_index == frame) {
                return Err(format!("camera token of anchor frame {frame} evicted"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Intrinsics;

    fn tiny_cfg(budget: usize) -> EngineConfig {
        let dims = ModelDims::new(2, 1, 2, 2, 2, 1).unwrap();
        let mut cfg = EngineConfig::for_dims(dims);
        cfg.total_budget = budget;
        cfg.min_anchor_interval = 2;
        cfg.anchor_eta = 0.25;
        cfg.max_anchors = 1;
        cfg.gaussian_kernel_size = 3;
        cfg.camera = Intrinsics::for_patch_grid(2, 2, 8);
        cfg
    }

    /// Frame whose points sit far in front of a camera that turns by
    /// `yaw` radians per frame.
    fn frame(cfg: &EngineConfig, t: u64, yaw: f64) -> FrameInput {
        let dims = cfg.dims;
        let m = dims.tokens_per_frame();
        let w = dims.token_width();
        let pose = Pose::from_axis_angle([0.0, 1.0, 0.0], yaw * t as f64, [0.0; 3]);
        let points = (0..dims.num_patches())
            .map(|p| {
                let r = pose.transform_point(&nalgebra::Vector3::new(0.1 * p as f64 - 0.15, 0.0, 4.0));
                [r.x, r.y, r.z]
            })
            .collect();
        let mk = |salt: f32| -> Vec<Vec<f32>> {
            (0..dims.num_layers)
                .map(|l| {
                    (0..m * w)
                        .map(|i| ((i as f32 + 1.0) * (t as f32 + salt) * (l as f32 + 1.0)).sin())
                        .collect()
                })
                .collect()
        };
        let res = mk(0.3);
        FrameInput {
            frame_index: t,
            keys: mk(0.1),
            values: mk(0.2),
            residuals: res.into_iter().map(|r| FfnResidual::new(w, r).unwrap()).collect(),
            pose,
            points: PointMap {
                points,
                confidence: (0..dims.num_patches()).map(|p| 1.0 / (1.0 + p as f64)).collect(),
            },
        }
    }

    #[test]
    fn first_frame_is_initial_anchor() {
        let cfg = tiny_cfg(100);
        let mut e = Engine::new(cfg.clone()).unwrap();
        let m = e.step(&frame(&cfg, 0, 0.0)).unwrap();
        assert_eq!(m.rho, None);
        assert_eq!(m.evicted, 0);
        for c in &e.state().layer_caches {
            assert_eq!(c.len(), 5);
            assert!(c.entries().iter().all(|t| t.protection == Protection::InitialAnchor));
        }
        assert_eq!(e.state().camera_cache.len(), 1);
    }

    #[test]
    fn wrong_frame_index_leaves_state() {
        let cfg = tiny_cfg(100);
        let mut e = Engine::new(cfg.clone()).unwrap();
        e.step(&frame(&cfg, 0, 0.0)).unwrap();
        let err = e.step(&frame(&cfg, 2, 0.0)).unwrap_err();
        assert_eq!(err, Error::FrameIndexMismatch { expected: 1, got: 2 });
        assert_eq!(e.state().step_counter, 1);
        assert_eq!(e.metrics().len(), 1);
    }

    #[test]
    fn malformed_frame_rejected() {
        let cfg = tiny_cfg(100);
        let mut e = Engine::new(cfg.clone()).unwrap();
        let mut f = frame(&cfg, 0, 0.0);
        f.keys.pop();
        assert!(matches!(e.step(&f), Err(Error::MalformedFrame(_))));
        assert_eq!(e.resident_tokens(), 0);
    }

    #[test]
    fn budget_binds_and_anchors_register() {
        let cfg = tiny_cfg(30);
        cfg.validate().unwrap();
        let mut e = Engine::new(cfg.clone()).unwrap();
        let mut registered = 0;
        for t in 0..40 {
            let m = e.step(&frame(&cfg, t, 0.5)).unwrap();
            assert_eq!(m.budget_violations(cfg.total_budget), 0);
            assert!(m.resident_tokens <= cfg.total_budget);
            assert!(m.peak_tokens <= cfg.total_budget + 2 * 5);
            registered += usize::from(m.registered.is_some());
            e.check_consistency().unwrap();
            assert!(m.live_anchors.len() <= 1);
        }
        assert!(registered >= 2);
        assert!(e.metrics().iter().any(|m| m.demoted.is_some()));
    }

    #[test]
    fn camera_budget_examples() {
        let cfg = EngineConfig::default();
        assert_eq!(camera_budget(&cfg), 192);
        let mut c = cfg.clone();
        c.total_budget = 1041;
        assert_eq!(camera_budget(&c), 4);
        c.total_budget = 10 * 1041;
        assert_eq!(camera_budget(&c), 10);
    }

    #[test]
    fn metrics_skip_wall_clock_when_serialized() {
        let cfg = tiny_cfg(100);
        let mut e = Engine::new(cfg.clone()).unwrap();
        let m = e.step(&frame(&cfg, 0, 0.0)).unwrap();
        let json = serde_json::to_string(&m).unwrap();
        assert!(!json.contains("step_ms"));
    }
}
