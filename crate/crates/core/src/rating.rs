//! Activation value rating: per-token FFN residual magnitudes, with Gaussian
//! smoothing over the patch grid.
//!
//! Scoring reads nothing but the FFN residual of the current frame, so it
//! never needs attention weights, queries or keys.

use crate::cache::ModelDims;
use crate::error::{Error, Result};

/// The scaled FFN residual `lambda_2 * FFN(LN(h_i))` of every token of one
/// frame at one layer, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FfnResidual {
    width: usize,
    data: Vec<f32>,
}

impl FfnResidual {
    pub fn new(width: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || !data.len().is_multiple_of(width) {
            return Err(Error::MalformedFrame(format!(
                "residual buffer of {} values is not a multiple of width {width}",
                data.len()
            )));
        }
        Ok(Self { width, data })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let width = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::MalformedFrame("ragged residual rows".into()));
        }
        Self::new(width, rows.concat())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_tokens(&self) -> usize {
        self.data.len() / self.width
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.width..(i + 1) * self.width]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }
}

/// Per-token activation scores of one frame: patch scores on the
/// `patch_rows x patch_cols` grid (row-major) and aux scores kept aside.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationGrid {
    pub rows: usize,
    pub cols: usize,
    pub patch_scores: Vec<f64>,
    pub aux_scores: Vec<f64>,
    pub frame_index: u64,
}

impl ActivationGrid {
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.patch_scores[row * self.cols + col]
    }

    /// Score of a frame slot, in `[aux..., patches...]` order.
    pub fn slot_score(&self, slot: usize) -> f64 {
        if slot < self.aux_scores.len() {
            self.aux_scores[slot]
        } else {
            self.patch_scores[slot - self.aux_scores.len()]
        }
    }

    pub fn num_slots(&self) -> usize {
        self.aux_scores.len() + self.patch_scores.len()
    }
}

/// `s_i = ||r_i||_2` for every token slot.
pub fn activation_score(
    dims: &ModelDims,
    residuals: &FfnResidual,
    frame_index: u64,
) -> Result<ActivationGrid> {
    let m = dims.tokens_per_frame();
    if residuals.num_tokens() != m {
        return Err(Error::TokenCount {
            expected: m,
            got: residuals.num_tokens(),
        });
    }
    let mut scores = Vec::with_capacity(m);
    for slot in 0..m {
        let row = residuals.row(slot);
        if row.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { slot });
        }
        let sq: f64 = row.iter().map(|&x| f64::from(x) * f64::from(x)).sum();
        scores.push(sq.sqrt());
    }
    let patch_scores = scores.split_off(dims.num_aux);
    Ok(ActivationGrid {
        rows: dims.patch_rows,
        cols: dims.patch_cols,
        patch_scores,
        aux_scores: scores,
        frame_index,
    })
}

/// Normalized 1-D Gaussian taps; the 2-D kernel is their outer product.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianKernel {
    taps: Vec<f64>,
}

impl GaussianKernel {
    pub fn new(size: usize, sigma: f64) -> Result<Self> {
        if size.is_multiple_of(2) {
            return Err(Error::EvenKernel(size));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::BadSigma(sigma));
        }
        let r = (size / 2) as f64;
        let mut taps: Vec<f64> = (0..size)
            .map(|i| {
                let x = i as f64 - r;
                (-x * x / (2.0 * sigma * sigma)).exp()
            })
            .collect();
        let sum: f64 = taps.iter().sum();
        taps.iter_mut().for_each(|t| *t /= sum);
        Ok(Self { taps })
    }

    pub fn size(&self) -> usize {
        self.taps.len()
    }

    pub fn radius(&self) -> usize {
        self.taps.len() / 2
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    /// The full `size x size` kernel, row-major.
    pub fn weights_2d(&self) -> Vec<f64> {
        let mut w = Vec::with_capacity(self.size() * self.size());
        for a in &self.taps {
            for b in &self.taps {
                w.push(a * b);
            }
        }
        w
    }
}

/// Maps an out-of-range index back into `[0, n)` by half-sample symmetric
/// reflection (`d c b a | a b c d | d c b a`). Works for any offset.
pub fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

fn convolve_rows(src: &[f64], rows: usize, cols: usize, taps: &[f64]) -> Vec<f64> {
    let r = (taps.len() / 2) as isize;
    let mut out = vec![0.0; src.len()];
    for y in 0..rows {
        let line = &src[y * cols..(y + 1) * cols];
        for x in 0..cols {
            out[y * cols + x] = taps
                .iter()
                .enumerate()
                .map(|(k, w)| w * line[reflect_index(x as isize + k as isize - r, cols)])
                .sum();
        }
    }
    out
}

fn convolve_cols(src: &[f64], rows: usize, cols: usize, taps: &[f64]) -> Vec<f64> {
    let r = (taps.len() / 2) as isize;
    let mut out = vec![0.0; src.len()];
    for y in 0..rows {
        for x in 0..cols {
            out[y * cols + x] = taps
                .iter()
                .enumerate()
                .map(|(k, w)| w * src[reflect_index(y as isize + k as isize - r, rows) * cols + x])
                .sum();
        }
    }
    out
}

/// `G * S` by two 1-D passes with reflect padding.
pub fn gaussian_blur(scores: &[f64], rows: usize, cols: usize, kernel: &GaussianKernel) -> Vec<f64> {
    let tmp = convolve_rows(scores, rows, cols, kernel.taps());
    convolve_cols(&tmp, rows, cols, kernel.taps())
}

/// `alpha * (G * S) + (1 - alpha) * S` on the patch scores; aux scores pass
/// through untouched.
pub fn smooth(grid: &ActivationGrid, alpha: f64, kernel: &GaussianKernel) -> Result<ActivationGrid> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::OutOfUnitRange {
            name: "alpha",
            value: alpha,
        });
    }
    if alpha == 0.0 {
        return Ok(grid.clone());
    }
    let blurred = gaussian_blur(&grid.patch_scores, grid.rows, grid.cols, kernel);
    let patch_scores = grid
        .patch_scores
        .iter()
        .zip(&blurred)
        .map(|(s, g)| alpha * g + (1.0 - alpha) * s)
        .collect();
    Ok(ActivationGrid {
        patch_scores,
        ..grid.clone()
    })
}

/// Convenience wrapper building the kernel from its size and sigma.
pub fn smooth_with(
    grid: &ActivationGrid,
    alpha: f64,
    kernel_size: usize,
    sigma: f64,
) -> Result<ActivationGrid> {
    smooth(grid, alpha, &GaussianKernel::new(kernel_size, sigma)?)
}
