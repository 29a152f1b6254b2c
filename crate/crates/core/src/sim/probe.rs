//! Alternative eviction scorers and the full-cache comparison harness.
//!
//! All strategies share the engine's hybrid scoring and differ only in how
//! the incoming frame is rated, except `Random`, which replaces the whole
//! retention score with uniform noise.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{SimFrame, ToyModel, TrajectoryScene};
use crate::cache::{EngineConfig, LayerCache};
use crate::engine::{ActivationRating, Engine, FrameInput, TokenScorer};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeKind {
    #[serde(rename = "ffn")]
    FfnResidual,
    #[serde(rename = "attention")]
    AttentionWeight,
    #[serde(rename = "qk")]
    QkDot,
    Random,
}

impl ProbeKind {
    pub const ALL: [ProbeKind; 4] = [
        ProbeKind::FfnResidual,
        ProbeKind::AttentionWeight,
        ProbeKind::QkDot,
        ProbeKind::Random,
    ];
}

impl fmt::Display for ProbeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProbeKind::FfnResidual => "ffn",
            ProbeKind::AttentionWeight => "attention",
            ProbeKind::QkDot => "qk",
            ProbeKind::Random => "random",
        })
    }
}

impl FromStr for ProbeKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "ffn" | "ffn-residual" | "ffnresidual" => Ok(ProbeKind::FfnResidual),
            "attention" | "attention-weight" | "attentionweight" => Ok(ProbeKind::AttentionWeight),
            "qk" | "qk-dot" | "qkdot" => Ok(ProbeKind::QkDot),
            "random" => Ok(ProbeKind::Random),
            other => Err(format!("unknown strategy `{other}` (ffn, attention, qk, random)")),
        }
    }
}

/// Counts of attention matrices the scorer had to materialize.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ProbeStats {
    pub attention_matrices: u64,
    pub attention_elements: u64,
}

/// Softmax attention of `queries` over `keys`, one `rows x keys` matrix per
/// head. Rows sum to one.
pub fn attention_matrix(queries: &[&[f32]], keys: &[&[f32]], heads: usize, head_dim: usize) -> Vec<Vec<Vec<f64>>> {
    let scale = 1.0 / (head_dim as f64).sqrt();
    (0..heads)
        .map(|h| {
            let off = h * head_dim;
            queries
                .iter()
                .map(|q| {
                    let q = &q[off..off + head_dim];
                    let logits: Vec<f64> = keys
                        .iter()
                        .map(|k| {
                            q.iter()
                                .zip(&k[off..off + head_dim])
                                .map(|(a, b)| f64::from(*a) * f64::from(*b))
                                .sum::<f64>()
                                * scale
                        })
                        .collect();
                    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
                    let z: f64 = exps.iter().sum();
                    exps.into_iter().map(|e| e / z).collect()
                })
                .collect()
        })
        .collect()
}

/// One head's slice of every row, widened to `f64` and packed contiguously.
fn pack_head(rows: &[&[f32]], off: usize, head_dim: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows.len() * head_dim);
    for r in rows {
        out.extend(r[off..off + head_dim].iter().map(|&x| f64::from(x)));
    }
    out
}

/// Four interleaved partial sums, so the loop vectorizes.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Attention output of each query over `(keys, values)`, heads
/// concatenated. Streams over the keys without storing the weights.
pub fn attention_readout(
    queries: &[&[f32]],
    keys: &[&[f32]],
    values: &[&[f32]],
    heads: usize,
    head_dim: usize,
) -> Vec<Vec<f64>> {
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut out = vec![vec![0.0f64; heads * head_dim]; queries.len()];
    let mut logits = vec![0.0f64; keys.len()];
    for h in 0..heads {
        let off = h * head_dim;
        let k = pack_head(keys, off, head_dim);
        let v = pack_head(values, off, head_dim);
        let q = pack_head(queries, off, head_dim);
        for (qi, row) in q.chunks_exact(head_dim).zip(out.iter_mut()) {
            for (l, kj) in logits.iter_mut().zip(k.chunks_exact(head_dim)) {
                *l = dot(qi, kj) * scale;
            }
            let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            let acc = &mut row[off..off + head_dim];
            for (l, vj) in logits.iter().zip(v.chunks_exact(head_dim)) {
                let w = (l - mx).exp();
                z += w;
                for (a, x) in acc.iter_mut().zip(vj) {
                    *a += w * x;
                }
            }
            acc.iter_mut().for_each(|a| *a /= z);
        }
    }
    out
}

/// A [`TokenScorer`] implementing one of the probed strategies.
#[derive(Debug, Clone)]
pub struct ProbeScorer {
    kind: ProbeKind,
    seed: u64,
    rating: ActivationRating,
    queries: Vec<Vec<f32>>,
    frame_index: u64,
    stats: ProbeStats,
}

impl ProbeScorer {
    pub fn new(kind: ProbeKind, cfg: &EngineConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            kind,
            seed,
            rating: ActivationRating::new(cfg)?,
            queries: Vec::new(),
            frame_index: 0,
            stats: ProbeStats::default(),
        })
    }

    pub fn kind(&self) -> ProbeKind {
        self.kind
    }

    pub fn stats(&self) -> ProbeStats {
        self.stats
    }

    /// Queries of the frame about to be stepped; needed by the attention
    /// and q.k strategies.
    pub fn set_queries(&mut self, queries: Vec<Vec<f32>>) {
        self.queries = queries;
    }

    fn rng(&self, layer: usize, salt: u64) -> ChaCha8Rng {
        let mix = self
            .seed
            .wrapping_mul(0x9e37_79b9_7f4a_7c15)
            ^ self.frame_index.wrapping_mul(0xbf58_476d_1ce4_e5b9)
            ^ (layer as u64).wrapping_mul(0x94d0_49bb_1331_11eb)
            ^ salt;
        ChaCha8Rng::seed_from_u64(mix)
    }
}

impl TokenScorer for ProbeScorer {
    fn current_scores(
        &mut self,
        layer: usize,
        frame: &FrameInput,
        cache: &LayerCache,
        cfg: &EngineConfig,
    ) -> Result<Vec<f64>> {
        self.frame_index = frame.frame_index;
        let dims = &cfg.dims;
        let m = dims.tokens_per_frame();
        let w = dims.token_width();
        match self.kind {
            ProbeKind::FfnResidual => self.rating.current_scores(layer, frame, cache, cfg),
            ProbeKind::Random => {
                let mut rng = self.rng(layer, 1);
                Ok((0..m).map(|_| rng.random::<f64>()).collect())
            }
            ProbeKind::QkDot => {
                let q = &self.queries[layer];
                Ok((0..m)
                    .map(|j| {
                        let k = frame.key(dims, layer, j);
                        q.chunks(w)
                            .map(|qi| qi.iter().zip(k).map(|(a, b)| f64::from(*a) * f64::from(*b)).sum::<f64>())
                            .sum::<f64>()
                            / m as f64
                    })
                    .collect())
            }
            ProbeKind::AttentionWeight => {
                let queries: Vec<&[f32]> = self.queries[layer].chunks(w).collect();
                let mut keys: Vec<&[f32]> = cache.entries().iter().map(|e| e.key.as_slice()).collect();
                keys.extend((0..m).map(|s| frame.key(dims, layer, s)));
                let att = attention_matrix(&queries, &keys, dims.num_heads, dims.head_dim);
                self.stats.attention_matrices += 1;
                self.stats.attention_elements += (att.len() * queries.len() * keys.len()) as u64;
                let first_new = keys.len() - m;
                Ok((0..m)
                    .map(|j| att.iter().flatten().map(|row| row[first_new + j]).sum())
                    .collect())
            }
        }
    }

    fn override_evictable(&mut self, layer: usize, count: usize) -> Option<Vec<f64>> {
        if self.kind != ProbeKind::Random {
            return None;
        }
        let mut rng = self.rng(layer, 2);
        Some((0..count).map(|_| rng.random::<f64>()).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyRun {
    pub kind: ProbeKind,
    /// Mean readout distance to the full cache at every step.
    pub proxy_errors: Vec<f64>,
    pub mean_proxy_error: f64,
    pub mean_step_ms: f64,
    pub peak_bytes: u64,
    pub attention_matrices: u64,
    pub budget_violations: usize,
    /// Per step, per layer: surviving `(frame, slot)` ids.
    #[serde(skip)]
    pub survivors: Vec<Vec<Vec<(u64, usize)>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub seed: u64,
    pub frames: u64,
    pub runs: Vec<StrategyRun>,
}

impl ProbeReport {
    pub fn run(&self, kind: ProbeKind) -> Option<&StrategyRun> {
        self.runs.iter().find(|r| r.kind == kind)
    }
}

fn readout_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt())
        .sum::<f64>()
        / a.len() as f64
}

/// Streams the scene through an unbounded cache and through one budgeted
/// engine per strategy. At every frame, each budgeted cache (plus the
/// incoming frame) is read by the frame's queries and compared against the
/// same readout over the full history.
pub fn oracle_full_cache_run(
    scene: &TrajectoryScene,
    model: &ToyModel,
    cfg: &EngineConfig,
    strategies: &[ProbeKind],
    seed: u64,
) -> Result<ProbeReport> {
    let dims = cfg.dims;
    let m = dims.tokens_per_frame();
    let w = dims.token_width();
    let frames: Vec<SimFrame> = (0..scene.num_frames()).map(|t| super::generate_frame(scene, t, model)).collect();

    let mut engines = Vec::with_capacity(strategies.len());
    let mut scorers = Vec::with_capacity(strategies.len());
    for &k in strategies {
        engines.push(Engine::new(cfg.clone())?);
        scorers.push(ProbeScorer::new(k, cfg, seed)?);
    }
    let mut errors = vec![Vec::with_capacity(frames.len()); strategies.len()];
    let mut survivors = vec![Vec::with_capacity(frames.len()); strategies.len()];

    for (t, frame) in frames.iter().enumerate() {
        let f = &frame.input;
        // full-history readout, same key order as an engine that never evicts
        let reference: Vec<Vec<Vec<f64>>> = (0..dims.num_layers)
            .map(|l| {
                let queries: Vec<&[f32]> = frame.queries[l].chunks(w).collect();
                let mut keys: Vec<&[f32]> = Vec::with_capacity((t + 1) * m);
                let mut values: Vec<&[f32]> = Vec::with_capacity((t + 1) * m);
                for past in &frames[..=t] {
                    keys.extend(past.input.keys[l].chunks(w));
                    values.extend(past.input.values[l].chunks(w));
                }
                attention_readout(&queries, &keys, &values, dims.num_heads, dims.head_dim)
            })
            .collect();

        for (i, engine) in engines.iter_mut().enumerate() {
            let mut err = 0.0;
            for (l, reference) in reference.iter().enumerate() {
                let cache = engine.layer(l);
                let queries: Vec<&[f32]> = frame.queries[l].chunks(w).collect();
                let mut keys: Vec<&[f32]> = cache.entries().iter().map(|e| e.key.as_slice()).collect();
                let mut values: Vec<&[f32]> = cache.entries().iter().map(|e| e.value.as_slice()).collect();
                keys.extend(f.keys[l].chunks(w));
                values.extend(f.values[l].chunks(w));
                let got = attention_readout(&queries, &keys, &values, dims.num_heads, dims.head_dim);
                err += readout_distance(&got, reference);
            }
            errors[i].push(err / dims.num_layers as f64);
            scorers[i].set_queries(frame.queries.clone());
            engine.step_with(f, &mut scorers[i])?;
            survivors[i].push(
                (0..dims.num_layers)
                    .map(|l| engine.layer(l).entries().iter().map(|e| e.id()).collect())
                    .collect(),
            );
        }
    }

    let runs = strategies
        .iter()
        .enumerate()
        .map(|(i, &kind)| {
            let metrics = engines[i].metrics();
            let n = metrics.len().max(1) as f64;
            StrategyRun {
                kind,
                mean_proxy_error: if errors[i].is_empty() {
                    0.0
                } else {
                    errors[i].iter().sum::<f64>() / errors[i].len() as f64
                },
                proxy_errors: std::mem::take(&mut errors[i]),
                mean_step_ms: metrics.iter().map(|m| m.step_ms).sum::<f64>() / n,
                peak_bytes: metrics.iter().map(|m| m.bytes_resident).max().unwrap_or(0),
                attention_matrices: scorers[i].stats().attention_matrices,
                budget_violations: metrics.iter().map(|m| m.budget_violations(cfg.total_budget)).sum(),
                survivors: std::mem::take(&mut survivors[i]),
            }
        })
        .collect();
    Ok(ProbeReport {
        seed,
        frames: scene.num_frames(),
        runs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cache::ModelDims;
    use crate::sim::{SceneKind, Simulation};

    #[test]
    fn attention_rows_sum_to_one() {
        let q = [vec![0.3f32, -1.0, 2.0, 0.5], vec![1.0, 1.0, 1.0, 1.0]];
        let k = [vec![1.0f32, 0.0, 0.5, 0.5], vec![-1.0, 2.0, 0.0, 1.0], vec![0.0, 0.0, 3.0, -2.0]];
        let qs: Vec<&[f32]> = q.iter().map(|v| v.as_slice()).collect();
        let ks: Vec<&[f32]> = k.iter().map(|v| v.as_slice()).collect();
        for head in attention_matrix(&qs, &ks, 2, 2) {
            for row in head {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn three_token_softmax_by_hand() {
        // one head of width 1: logits are q*k
        let q = [vec![1.0f32]];
        let k = [vec![0.0f32], vec![1.0], vec![2.0]];
        let qs: Vec<&[f32]> = q.iter().map(|v| v.as_slice()).collect();
        let ks: Vec<&[f32]> = k.iter().map(|v| v.as_slice()).collect();
        let att = attention_matrix(&qs, &ks, 1, 1);
        let z = 1.0 + 1f64.exp() + 2f64.exp();
        let expect = [1.0 / z, 1f64.exp() / z, 2f64.exp() / z];
        for (a, b) in att[0][0].iter().zip(expect) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn readout_matches_materialized_attention() {
        let q = [vec![0.2f32, -0.4], vec![1.5, 0.1]];
        let k = [vec![1.0f32, 0.0], vec![0.5, -0.5], vec![-1.0, 2.0]];
        let v = [vec![1.0f32, 2.0], vec![3.0, -1.0], vec![0.0, 0.5]];
        fn as_refs(x: &[Vec<f32>]) -> Vec<&[f32]> {
            x.iter().map(|v| v.as_slice()).collect()
        }
        let att = attention_matrix(&as_refs(&q), &as_refs(&k), 2, 1);
        let out = attention_readout(&as_refs(&q), &as_refs(&k), &as_refs(&v), 2, 1);
        for (i, row) in out.iter().enumerate() {
            for h in 0..2 {
                let direct: f64 = (0..3).map(|j| att[h][i][j] * f64::from(v[j][h])).sum();
                assert!((row[h] - direct).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_cached_token_ranks_first_for_everyone() {
        // one token per frame: every scorer has a single candidate
        let dims = ModelDims::new(1, 1, 2, 1, 1, 0).unwrap();
        let mut cfg = EngineConfig::for_dims(dims);
        cfg.camera = crate::geometry::Intrinsics::for_patch_grid(1, 1, 8);
        let frame = FrameInput {
            frame_index: 0,
            keys: vec![vec![1.0, 0.5]],
            values: vec![vec![0.0, 1.0]],
            residuals: vec![crate::rating::FfnResidual::new(2, vec![0.3, 0.4]).unwrap()],
            pose: crate::geometry::Pose::identity(),
            points: crate::geometry::PointMap {
                points: vec![[0.0, 0.0, 1.0]],
                confidence: vec![0.5],
            },
        };
        let cache = LayerCache::new(0, &dims, 10);
        for kind in ProbeKind::ALL {
            let mut s = ProbeScorer::new(kind, &cfg, 3).unwrap();
            s.set_queries(vec![vec![0.2, 0.1]]);
            let scores = s.current_scores(0, &frame, &cache, &cfg).unwrap();
            assert_eq!(scores.len(), 1);
            assert!(scores[0].is_finite());
        }
    }

    #[test]
    fn random_is_reproducible() {
        let cfg = EngineConfig::toy();
        let mut a = ProbeScorer::new(ProbeKind::Random, &cfg, 17).unwrap();
        let mut b = ProbeScorer::new(ProbeKind::Random, &cfg, 17).unwrap();
        let mut c = ProbeScorer::new(ProbeKind::Random, &cfg, 18).unwrap();
        let ra = a.override_evictable(1, 50).unwrap();
        assert_eq!(ra, b.override_evictable(1, 50).unwrap());
        assert_ne!(ra, c.override_evictable(1, 50).unwrap());
    }

    #[test]
    fn non_binding_budget_has_zero_error() {
        let mut cfg = EngineConfig::toy();
        cfg.total_budget = 1_000_000;
        let sim = Simulation::new(&cfg, SceneKind::Orbit, 1, 12);
        let report = oracle_full_cache_run(&sim.scene, &sim.model, &cfg, &ProbeKind::ALL, 1).unwrap();
        for run in &report.runs {
            assert!(run.proxy_errors.iter().all(|&e| e == 0.0), "{:?}", run.kind);
        }
        assert_eq!(report.run(ProbeKind::FfnResidual).unwrap().attention_matrices, 0);
        assert!(report.run(ProbeKind::AttentionWeight).unwrap().attention_matrices > 0);
    }
}
