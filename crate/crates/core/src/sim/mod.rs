//! Deterministic desk-scale test bed: a toy transformer run over synthetic
//! trajectories, baseline scorers, and a full-cache comparison harness.

mod model;
mod probe;
mod scene;

pub use model::{LayerTrace, ToyModel};
pub use probe::{
    attention_matrix, attention_readout, oracle_full_cache_run, ProbeKind, ProbeReport, ProbeScorer, ProbeStats,
    StrategyRun,
};
pub use scene::{SceneFrame, SceneKind, TrajectoryScene, ORBIT_PERIOD};

use crate::cache::EngineConfig;
use crate::engine::FrameInput;
use crate::rating::FfnResidual;

/// A generated frame plus the per-layer queries the engine never sees.
#[derive(Debug, Clone, PartialEq)]
pub struct SimFrame {
    pub input: FrameInput,
    /// Per layer, `M x width`.
    pub queries: Vec<Vec<f32>>,
}

/// Runs the toy model over frame `t` of the scene and packages its keys,
/// values and FFN residuals with the scene geometry.
pub fn generate_frame(scene: &TrajectoryScene, t: u64, model: &ToyModel) -> SimFrame {
    let sf = scene.frame(t);
    let traces = model.forward(&model.embed(&sf.features));
    let width = model.width();
    let mut keys = Vec::with_capacity(traces.len());
    let mut values = Vec::with_capacity(traces.len());
    let mut residuals = Vec::with_capacity(traces.len());
    let mut queries = Vec::with_capacity(traces.len());
    for tr in traces {
        keys.push(tr.keys);
        values.push(tr.values);
        queries.push(tr.queries);
        residuals.push(FfnResidual::new(width, tr.ffn_residual).expect("width divides buffer"));
    }
    SimFrame {
        input: FrameInput {
            frame_index: t,
            keys,
            values,
            residuals,
            pose: sf.pose,
            points: sf.points,
        },
        queries,
    }
}

/// Toy-scale simulation setup shared by the CLI, tests and the demo.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub scene: TrajectoryScene,
    pub model: ToyModel,
}

impl Simulation {
    pub fn new(cfg: &EngineConfig, kind: SceneKind, seed: u64, frames: u64) -> Self {
        Self {
            scene: TrajectoryScene::new(kind, seed, frames, cfg.dims, cfg.camera),
            model: ToyModel::new(cfg.dims, seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(1)),
        }
    }

    pub fn frame(&self, t: u64) -> SimFrame {
        generate_frame(&self.scene, t, &self.model)
    }

    pub fn frames(&self) -> impl Iterator<Item = SimFrame> + '_ {
        (0..self.scene.num_frames()).map(|t| self.frame(t))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cache::ModelDims;
    use crate::geometry::Intrinsics;

    fn setup() -> (TrajectoryScene, ToyModel) {
        let dims = ModelDims::toy();
        (
            TrajectoryScene::new(SceneKind::Orbit, 2, 10, dims, Intrinsics::for_patch_grid(8, 8, 14)),
            ToyModel::new(dims, 5),
        )
    }

    #[test]
    fn same_frame_twice_is_identical() {
        let (s, m) = setup();
        assert_eq!(generate_frame(&s, 7, &m), generate_frame(&s, 7, &m));
    }

    #[test]
    fn residual_matches_logged_intermediates() {
        let (s, m) = setup();
        let f = generate_frame(&s, 3, &m);
        let traces = m.forward(&m.embed(&s.frame(3).features));
        for (l, tr) in traces.iter().enumerate() {
            let recomputed: Vec<f32> = tr.x.iter().zip(&tr.h).map(|(x, h)| x - h).collect();
            let got = f.input.residuals[l].as_slice();
            for (a, b) in got.iter().zip(&recomputed) {
                // x - h recovers the residual up to one rounding of the sum
                assert!((a - b).abs() <= 1e-6 * (1.0 + a.abs()), "{a} vs {b}");
            }
            assert_eq!(got, tr.ffn_residual.as_slice());
        }
    }

    #[test]
    fn zero_features_zero_ffn_give_zero_patch_scores() {
        let dims = ModelDims::toy();
        let m = ToyModel::new(dims, 5).with_zero_ffn();
        let traces = m.forward(&m.embed(&vec![0.0; dims.num_patches() * dims.token_width()]));
        let r = FfnResidual::new(dims.token_width(), traces[0].ffn_residual.clone()).unwrap();
        let g = crate::rating::activation_score(&dims, &r, 0).unwrap();
        assert!(g.patch_scores.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn frames_validate() {
        let cfg = EngineConfig::toy();
        let sim = Simulation::new(&cfg, SceneKind::Corridor, 1, 3);
        for f in sim.frames() {
            f.input.validate(&cfg.dims).unwrap();
        }
    }
}
