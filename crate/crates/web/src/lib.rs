//! Browser bindings for the interactive demo page in `www/`.
//!
//! Every export has a plain Rust counterpart so the logic is testable
//! natively; the `wasm_bindgen` wrappers only convert errors.

use ovkv::sim::{SceneKind, Simulation};
use ovkv::{activation_score, coverage_ratio, smooth, Engine, EngineConfig, GaussianKernel};
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Longest stream the page may request.
pub const MAX_FRAMES: u64 = 2000;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Heatmap {
    pub rows: usize,
    pub cols: usize,
    pub raw: Vec<f64>,
    pub smoothed: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct Series {
    pub budget: usize,
    pub min_budget: usize,
    pub resident: Vec<usize>,
    pub protected: Vec<usize>,
    pub evicted: Vec<usize>,
    pub camera: Vec<usize>,
    pub rho: Vec<Option<f64>>,
    pub registered: Vec<u64>,
    pub demoted: Vec<u64>,
}

fn scene_kind(name: &str) -> Result<SceneKind, String> {
    name.parse()
}

fn check_frames(frames: u64) -> Result<(), String> {
    if frames == 0 || frames > MAX_FRAMES {
        return Err(format!("frames must be in 1..={MAX_FRAMES}, got {frames}"));
    }
    Ok(())
}

/// Raw and smoothed activation scores of one frame's patches at one layer.
pub fn heatmap_data(
    scene: &str,
    seed: u64,
    frame: u64,
    layer: usize,
    alpha: f64,
    kernel_size: usize,
    sigma: f64,
) -> Result<Heatmap, String> {
    let cfg = EngineConfig::toy();
    if layer >= cfg.dims.num_layers {
        return Err(format!("layer must be below {}", cfg.dims.num_layers));
    }
    check_frames(frame + 1)?;
    let sim = Simulation::new(&cfg, scene_kind(scene)?, seed, frame + 1);
    let f = sim.frame(frame);
    let raw = activation_score(&cfg.dims, &f.input.residuals[layer], frame).map_err(|e| e.to_string())?;
    let kernel = GaussianKernel::new(kernel_size, sigma).map_err(|e| e.to_string())?;
    let smoothed = smooth(&raw, alpha, &kernel).map_err(|e| e.to_string())?;
    Ok(Heatmap {
        rows: raw.rows,
        cols: raw.cols,
        raw: raw.patch_scores,
        smoothed: smoothed.patch_scores,
    })
}

/// Streams a scene through a budgeted engine and records per-step sizes.
pub fn simulate_series(scene: &str, seed: u64, frames: u64, budget: usize) -> Result<Series, String> {
    check_frames(frames)?;
    let cfg = EngineConfig {
        total_budget: budget,
        ..EngineConfig::toy()
    };
    let sim = Simulation::new(&cfg, scene_kind(scene)?, seed, frames);
    let mut engine = Engine::new(cfg.clone()).map_err(|e| e.to_string())?;
    let mut out = Series {
        budget,
        min_budget: cfg.min_total_budget(),
        ..Series::default()
    };
    for f in sim.frames() {
        let s = engine.step(&f.input).map_err(|e| e.to_string())?;
        out.resident.push(s.resident_tokens);
        out.protected.push(s.protected.iter().sum());
        out.evicted.push(s.evicted);
        out.camera.push(s.camera_size);
        out.rho.push(s.rho);
        if s.registered.is_some() {
            out.registered.push(s.frame_index);
        }
        if s.demoted.is_some() {
            out.demoted.push(s.frame_index);
        }
    }
    Ok(out)
}

/// Coverage of `anchor`'s points from every frame of the stream.
pub fn coverage_curve(scene: &str, seed: u64, frames: u64, anchor: u64) -> Result<Vec<f64>, String> {
    check_frames(frames)?;
    if anchor >= frames {
        return Err(format!("anchor frame {anchor} is past the stream end"));
    }
    let cfg = EngineConfig::toy();
    let sim = Simulation::new(&cfg, scene_kind(scene)?, seed, frames);
    let a = sim.scene.frame(anchor);
    Ok((0..frames)
        .map(|t| coverage_ratio(&a.points, &a.pose, sim.scene.pose(t), &cfg.camera))
        .collect())
}

fn js<T: Serialize>(r: Result<T, String>) -> Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

/// JSON `{rows, cols, raw, smoothed}`.
#[wasm_bindgen]
pub fn heatmap(
    scene: &str,
    seed: u64,
    frame: u64,
    layer: usize,
    alpha: f64,
    kernel_size: usize,
    sigma: f64,
) -> Result<String, JsError> {
    js(heatmap_data(scene, seed, frame, layer, alpha, kernel_size, sigma))
}

/// JSON per-step series of a budgeted run.
#[wasm_bindgen]
pub fn simulate(scene: &str, seed: u64, frames: u64, budget: usize) -> Result<String, JsError> {
    js(simulate_series(scene, seed, frames, budget))
}

#[wasm_bindgen]
pub fn coverage(scene: &str, seed: u64, frames: u64, anchor: u64) -> Result<Vec<f64>, JsError> {
    coverage_curve(scene, seed, frames, anchor).map_err(|e| JsError::new(&e))
}
