//! Seeded toy Pre-LN transformer.
//!
//! Each block computes `h = x + MHA(LN(x))` and `x' = h + lambda2 * FFN(LN(h))`
//! over the tokens of a single frame, exposing per-layer queries, keys,
//! values and the scaled FFN residual.
//!
//! Weights are Gaussian apart from a small amount of structure that trained
//! vision transformers show and random ones lack:
//!
//! * every patch embedding shares a background vector, so untextured
//!   patches collapse onto nearly the same token;
//! * channel [`SALIENCE_CHANNEL`] carries the patch's texture energy and a
//!   detector unit in every FFN amplifies it;
//! * queries carry a bias toward the key of that channel, so textured
//!   patches draw most of the attention.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::cache::ModelDims;

const FFN_EXPANSION: usize = 4;
pub const SALIENCE_CHANNEL: usize = 0;
const SALIENCE_GAIN: f32 = 4.0;
const DETECTOR_IN: f32 = 3.0;
const DETECTOR_BIAS: f32 = -1.0;
const DETECTOR_OUT: f32 = 2.0;
/// Norm of the query bias toward the salience key.
const SINK_BIAS: f32 = 20.0;
const BACKGROUND_NORM: f32 = 2.0;
const POSITION_STD: f32 = 0.02;

#[derive(Debug, Clone)]
struct LayerNorm {
    gain: Vec<f32>,
    bias: Vec<f32>,
}

#[derive(Debug, Clone)]
struct Block {
    ln1: LayerNorm,
    wq: Vec<f32>,
    bq: Vec<f32>,
    wk: Vec<f32>,
    wv: Vec<f32>,
    wo: Vec<f32>,
    ln2: LayerNorm,
    w1: Vec<f32>,
    b1: Vec<f32>,
    w2: Vec<f32>,
    b2: Vec<f32>,
    /// LayerScale, one coefficient per channel.
    lambda2: Vec<f32>,
}

/// Intermediates of one block for one frame, each `tokens x width`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    pub queries: Vec<f32>,
    pub keys: Vec<f32>,
    pub values: Vec<f32>,
    /// Residual stream after attention.
    pub h: Vec<f32>,
    /// Block output.
    pub x: Vec<f32>,
    /// `lambda2 * FFN(LN(h))`
    pub ffn_residual: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct ToyModel {
    dims: ModelDims,
    hidden: usize,
    ln_eps: f32,
    blocks: Vec<Block>,
    aux_embeddings: Vec<f32>,
    patch_positions: Vec<f32>,
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, std: f32) -> Vec<f32> {
    let d = Normal::new(0.0f32, std).expect("finite std");
    (0..n).map(|_| d.sample(rng)).collect()
}

/// `x (rows x inner) * w (inner x cols)`
fn matmul(x: &[f32], rows: usize, inner: usize, w: &[f32], cols: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; rows * cols];
    for r in 0..rows {
        let xr = &x[r * inner..(r + 1) * inner];
        let orow = &mut out[r * cols..(r + 1) * cols];
        for (k, &xv) in xr.iter().enumerate() {
            let wr = &w[k * cols..(k + 1) * cols];
            for (o, &wv) in orow.iter_mut().zip(wr) {
                *o += xv * wv;
            }
        }
    }
    out
}

fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (0.797_884_6 * (x + 0.044_715 * x * x * x)).tanh())
}

impl LayerNorm {
    fn apply(&self, x: &[f32], width: usize, eps: f32) -> Vec<f32> {
        let mut out = Vec::with_capacity(x.len());
        for row in x.chunks(width) {
            let mean = row.iter().sum::<f32>() / width as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / width as f32;
            let inv = 1.0 / (var + eps).sqrt();
            out.extend(
                row.iter()
                    .zip(self.gain.iter().zip(&self.bias))
                    .map(|(v, (g, b))| (v - mean) * inv * g + b),
            );
        }
        out
    }
}

impl ToyModel {
    /// Layer count, head layout and aux count come from `dims`; the model
    /// width is `num_heads * head_dim`.
    pub fn new(dims: ModelDims, seed: u64) -> Self {
        let width = dims.token_width();
        let hidden = FFN_EXPANSION * width;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let proj_std = 1.0 / (width as f32).sqrt();
        let hid_std = 1.0 / (hidden as f32).sqrt();
        let lambda = Uniform::new(0.5f32, 1.0).expect("valid range");
        let blocks = (0..dims.num_layers)
            .map(|_| {
                let ln = |rng: &mut ChaCha8Rng| LayerNorm {
                    gain: gaussian(rng, width, 0.1).into_iter().map(|g| 1.0 + g).collect(),
                    bias: gaussian(rng, width, 0.05),
                };
                let ln1 = ln(&mut rng);
                let wk = gaussian(&mut rng, width * width, proj_std);
                let wq = gaussian(&mut rng, width * width, proj_std);
                let wv = gaussian(&mut rng, width * width, proj_std);
                let wo = gaussian(&mut rng, width * width, proj_std);
                let ln2 = ln(&mut rng);
                let mut w1 = gaussian(&mut rng, width * hidden, proj_std);
                let mut b1 = gaussian(&mut rng, hidden, 0.1);
                let mut w2 = gaussian(&mut rng, hidden * width, hid_std);
                let b2 = gaussian(&mut rng, width, 0.05);
                let lambda2 = (0..width).map(|_| lambda.sample(&mut rng)).collect();
                let sink = &wk[SALIENCE_CHANNEL * width..(SALIENCE_CHANNEL + 1) * width];
                let norm = sink.iter().map(|v| v * v).sum::<f32>().sqrt().max(f32::MIN_POSITIVE);
                let bq = sink.iter().map(|v| SINK_BIAS * v / norm).collect();
                // hidden unit 0 fires on the salience channel and writes back to it
                for c in 0..width {
                    w1[c * hidden] = if c == SALIENCE_CHANNEL { DETECTOR_IN } else { 0.0 };
                    w2[c] = if c == SALIENCE_CHANNEL { DETECTOR_OUT } else { 0.0 };
                }
                b1[0] = DETECTOR_BIAS;
                Block {
                    ln1,
                    wq,
                    bq,
                    wk,
                    wv,
                    wo,
                    ln2,
                    w1,
                    b1,
                    w2,
                    b2,
                    lambda2,
                }
            })
            .collect();
        let aux_embeddings = gaussian(&mut rng, dims.num_aux * width, 1.0);
        let background = gaussian(&mut rng, width, BACKGROUND_NORM / (width as f32).sqrt());
        let mut patch_positions = gaussian(&mut rng, dims.num_patches() * width, POSITION_STD);
        for row in patch_positions.chunks_mut(width) {
            row.iter_mut().zip(&background).for_each(|(p, b)| *p += b);
        }
        Self {
            dims,
            hidden,
            ln_eps: 1e-5,
            blocks,
            aux_embeddings,
            patch_positions,
        }
    }

    /// Same model with every FFN weight and bias set to zero.
    pub fn with_zero_ffn(mut self) -> Self {
        for b in &mut self.blocks {
            b.w1.iter_mut().chain(&mut b.b1).chain(&mut b.w2).chain(&mut b.b2).for_each(|w| *w = 0.0);
        }
        self
    }

    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    pub fn width(&self) -> usize {
        self.dims.token_width()
    }

    /// Aux constants followed by the patch features plus the shared
    /// background and fixed positional offsets, with each patch's feature
    /// RMS added to the salience channel.
    pub fn embed(&self, patch_features: &[f32]) -> Vec<f32> {
        let width = self.width();
        let mut x = self.aux_embeddings.clone();
        for (feat, pos) in patch_features.chunks(width).zip(self.patch_positions.chunks(width)) {
            let rms = (feat.iter().map(|f| f * f).sum::<f32>() / width as f32).sqrt();
            let start = x.len();
            x.extend(feat.iter().zip(pos).map(|(f, p)| f + p));
            x[start + SALIENCE_CHANNEL] += SALIENCE_GAIN * rms;
        }
        x
    }

    /// Runs every block over one frame's `M x width` token matrix.
    pub fn forward(&self, tokens: &[f32]) -> Vec<LayerTrace> {
        let width = self.width();
        let n = tokens.len() / width;
        let heads = self.dims.num_heads;
        let hd = self.dims.head_dim;
        let scale = 1.0 / (hd as f32).sqrt();
        let mut x = tokens.to_vec();
        let mut traces = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let a = b.ln1.apply(&x, width, self.ln_eps);
            let mut q = matmul(&a, n, width, &b.wq, width);
            for row in q.chunks_mut(width) {
                row.iter_mut().zip(&b.bq).for_each(|(v, bias)| *v += bias);
            }
            let k = matmul(&a, n, width, &b.wk, width);
            let v = matmul(&a, n, width, &b.wv, width);
            let mut mixed = vec![0.0f32; n * width];
            let mut logits = vec![0.0f32; n];
            for hh in 0..heads {
                let off = hh * hd;
                for i in 0..n {
                    let qi = &q[i * width + off..i * width + off + hd];
                    for (j, l) in logits.iter_mut().enumerate() {
                        let kj = &k[j * width + off..j * width + off + hd];
                        *l = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f32>() * scale;
                    }
                    let mx = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                    let mut z = 0.0;
                    for l in logits.iter_mut() {
                        *l = (*l - mx).exp();
                        z += *l;
                    }
                    let out = &mut mixed[i * width + off..i * width + off + hd];
                    for (j, w) in logits.iter().enumerate() {
                        let vj = &v[j * width + off..j * width + off + hd];
                        for (o, vv) in out.iter_mut().zip(vj) {
                            *o += w / z * vv;
                        }
                    }
                }
            }
            let attn = matmul(&mixed, n, width, &b.wo, width);
            let h: Vec<f32> = x.iter().zip(&attn).map(|(a, b)| a + b).collect();
            let c = b.ln2.apply(&h, width, self.ln_eps);
            let mut u = matmul(&c, n, width, &b.w1, self.hidden);
            for row in u.chunks_mut(self.hidden) {
                for (val, bias) in row.iter_mut().zip(&b.b1) {
                    *val = gelu(*val + bias);
                }
            }
            let f = matmul(&u, n, self.hidden, &b.w2, width);
            let ffn_residual: Vec<f32> = f
                .chunks(width)
                .flat_map(|row| {
                    row.iter()
                        .zip(&b.b2)
                        .zip(&b.lambda2)
                        .map(|((v, bias), l)| l * (v + bias))
                })
                .collect();
            let next: Vec<f32> = h.iter().zip(&ffn_residual).map(|(a, b)| a + b).collect();
            traces.push(LayerTrace {
                queries: q,
                keys: k,
                values: v,
                h,
                x: next.clone(),
                ffn_residual,
            });
            x = next;
        }
        traces
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forward_conserves_shape_and_reassembles() {
        let dims = ModelDims::toy();
        let model = ToyModel::new(dims, 3);
        let feats: Vec<f32> = (0..dims.num_patches() * dims.token_width())
            .map(|i| (i as f32 * 0.37).sin())
            .collect();
        let x0 = model.embed(&feats);
        let traces = model.forward(&x0);
        assert_eq!(traces.len(), dims.num_layers);
        let n = dims.tokens_per_frame() * dims.token_width();
        for t in &traces {
            for buf in [&t.queries, &t.keys, &t.values, &t.h, &t.x, &t.ffn_residual] {
                assert_eq!(buf.len(), n);
            }
            // x = h + residual, bit for bit
            for ((x, h), r) in t.x.iter().zip(&t.h).zip(&t.ffn_residual) {
                assert_eq!(*x, h + r);
            }
        }
    }

    #[test]
    fn forward_is_reproducible() {
        let dims = ModelDims::toy();
        let a = ToyModel::new(dims, 9);
        let b = ToyModel::new(dims, 9);
        let x0 = a.embed(&vec![0.5; dims.num_patches() * dims.token_width()]);
        assert_eq!(a.forward(&x0), b.forward(&x0));
    }

    #[test]
    fn zero_ffn_gives_zero_residuals() {
        let dims = ModelDims::toy();
        let model = ToyModel::new(dims, 1).with_zero_ffn();
        let x0 = model.embed(&vec![0.0; dims.num_patches() * dims.token_width()]);
        for t in model.forward(&x0) {
            assert!(t.ffn_residual.iter().all(|&r| r == 0.0));
        }
    }
}
