//! KV cache compression: key diversity, hybrid scoring, per-layer budget
//! allocation and deterministic top-k retention.

use std::cmp::Ordering;

use crate::cache::{LayerCache, TokenEntry};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Diversity {
    /// `d_i = 1 - cos(k_i, k_bar)`, in `[0, 2]`.
    pub scores: Vec<f64>,
    /// Tokens whose key or the centroid had zero norm; they score 0.
    pub degenerate: usize,
}

impl Diversity {
    pub fn mean(&self) -> f64 {
        if self.scores.is_empty() {
            0.0
        } else {
            self.scores.iter().sum::<f64>() / self.scores.len() as f64
        }
    }
}

/// Cosine distance of every key to the arithmetic mean of all keys.
pub fn diversity_scores<K: AsRef<[f32]>>(keys: &[K]) -> Diversity {
    let Some(first) = keys.first() else {
        return Diversity {
            scores: Vec::new(),
            degenerate: 0,
        };
    };
    let width = first.as_ref().len();
    let mut centroid = vec![0.0f64; width];
    for k in keys {
        for (c, &x) in centroid.iter_mut().zip(k.as_ref()) {
            *c += f64::from(x);
        }
    }
    let n = keys.len() as f64;
    centroid.iter_mut().for_each(|c| *c /= n);
    let c_norm = centroid.iter().map(|c| c * c).sum::<f64>().sqrt();

    let mut degenerate = 0;
    let scores = keys
        .iter()
        .map(|k| {
            let k = k.as_ref();
            let (dot, kk) = k
                .iter()
                .zip(&centroid)
                .fold((0.0, 0.0), |(dot, kk), (&x, &c)| {
                    let x = f64::from(x);
                    (dot + x * c, kk + x * x)
                });
            let k_norm = kk.sqrt();
            if k_norm == 0.0 || c_norm == 0.0 {
                degenerate += 1;
                0.0
            } else {
                (1.0 - dot / (k_norm * c_norm)).clamp(0.0, 2.0)
            }
        })
        .collect();
    Diversity { scores, degenerate }
}

/// Min and max of one score source before normalization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormRange {
    pub min: f64,
    pub max: f64,
}

/// Retention scores for a layer's evictable tokens: historical tokens first,
/// then current-frame tokens, both in arrival order.
#[derive(Debug, Clone, PartialEq)]
pub struct HybridScores {
    values: Vec<f64>,
    num_hist: usize,
    pub hist_range: Option<NormRange>,
    pub new_range: Option<NormRange>,
}

impl HybridScores {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn historical(&self) -> &[f64] {
        &self.values[..self.num_hist]
    }

    pub fn current(&self) -> &[f64] {
        &self.values[self.num_hist..]
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

/// Min-max normalization to `[0, 1]`; an all-equal source maps to 0.5.
pub fn min_max_normalize(xs: &[f64]) -> (Vec<f64>, Option<NormRange>) {
    if xs.is_empty() {
        return (Vec::new(), None);
    }
    let min = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = NormRange { min, max };
    let out = if max > min {
        xs.iter().map(|x| (x - min) / (max - min)).collect()
    } else {
        vec![0.5; xs.len()]
    };
    (out, Some(range))
}

/// `r_i = (1 - beta) * d_hat_i` for historical tokens and `beta * s_hat_i`
/// for current-frame tokens.
pub fn hybrid_scores(hist_diversity: &[f64], new_activation: &[f64], beta: f64) -> Result<HybridScores> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::OutOfUnitRange {
            name: "beta",
            value: beta,
        });
    }
    if let Some(i) = hist_diversity.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite { slot: i });
    }
    if let Some(i) = new_activation.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite {
            slot: hist_diversity.len() + i,
        });
    }
    let (d_hat, hist_range) = min_max_normalize(hist_diversity);
    let (s_hat, new_range) = min_max_normalize(new_activation);
    let mut values = Vec::with_capacity(d_hat.len() + s_hat.len());
    values.extend(d_hat.iter().map(|d| (1.0 - beta) * d));
    values.extend(s_hat.iter().map(|s| beta * s));
    Ok(HybridScores {
        values,
        num_hist: d_hat.len(),
        hist_range,
        new_range,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BudgetAllocation {
    pub budgets: Vec<usize>,
}

impl BudgetAllocation {
    pub fn total(&self) -> usize {
        self.budgets.iter().sum()
    }
}

/// Gives every layer its floor, then splits the remainder in proportion to
/// per-layer diversity with largest-remainder rounding. Remainder ties go to
/// the lower layer index; zero total diversity splits the remainder evenly.
pub fn allocate_budgets(total: usize, diversity: &[f64], floors: &[usize]) -> Result<BudgetAllocation> {
    if diversity.len() != floors.len() {
        return Err(Error::ScoreLength {
            expected: floors.len(),
            got: diversity.len(),
        });
    }
    if let Some(i) = diversity.iter().position(|d| !d.is_finite() || *d < 0.0) {
        return Err(Error::NonFinite { slot: i });
    }
    let floor_sum: usize = floors.iter().sum();
    if total < floor_sum {
        return Err(Error::InfeasibleBudget {
            total,
            deficit: floor_sum - total,
        });
    }
    let n = floors.len();
    if n == 0 {
        return Ok(BudgetAllocation { budgets: Vec::new() });
    }
    let remainder = total - floor_sum;
    let weight_sum: f64 = diversity.iter().sum();
    let quotas: Vec<f64> = if weight_sum > 0.0 {
        diversity
            .iter()
            .map(|d| remainder as f64 * d / weight_sum)
            .collect()
    } else {
        vec![remainder as f64 / n as f64; n]
    };
    let mut extra: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    // float rounding can push the floored sum past the remainder by a hair
    while extra.iter().sum::<usize>() > remainder {
        let i = (0..n).rev().find(|&i| extra[i] > 0).expect("positive share");
        extra[i] -= 1;
    }
    let mut leftover = remainder - extra.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..n).collect();
    let frac = |i: usize| quotas[i] - quotas[i].floor();
    order.sort_by(|&a, &b| frac(b).total_cmp(&frac(a)).then(a.cmp(&b)));
    for &i in order.iter().cycle() {
        if leftover == 0 {
            break;
        }
        extra[i] += 1;
        leftover -= 1;
    }
    Ok(BudgetAllocation {
        budgets: floors.iter().zip(extra).map(|(f, e)| f + e).collect(),
    })
}

/// Retention order: higher score first, then newer frame, then lower slot.
pub fn retention_order(a: (f64, &TokenEntry), b: (f64, &TokenEntry)) -> Ordering {
    b.0.total_cmp(&a.0)
        .then(b.1.frame_index.cmp(&a.1.frame_index))
        .then(a.1.slot_index.cmp(&b.1.slot_index))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CompressionOutcome {
    pub evicted: usize,
}

/// Keeps the protected set plus the `budget - |P|` best evictable tokens.
///
/// `scores` must align with the cache's unprotected entries in arrival
/// order. Survivors keep their relative order. A cache already within
/// budget is left as is.
pub fn compress_layer(cache: &mut LayerCache, scores: &[f64], budget: usize) -> Result<CompressionOutcome> {
    let evictable: Vec<usize> = cache
        .entries()
        .iter()
        .enumerate()
        .filter(|(_, e)| !e.protection.is_protected())
        .map(|(i, _)| i)
        .collect();
    if scores.len() != evictable.len() {
        return Err(Error::ScoreLength {
            expected: evictable.len(),
            got: scores.len(),
        });
    }
    if cache.len() <= budget {
        return Ok(CompressionOutcome::default());
    }
    let protected = cache.len() - evictable.len();
    if budget < protected {
        return Err(Error::BudgetBelowProtected { budget, protected });
    }
    let keep_n = budget - protected;
    let entries = cache.entries();
    let mut ranked: Vec<usize> = (0..evictable.len()).collect();
    let cmp = |&a: &usize, &b: &usize| {
        retention_order(
            (scores[a], &entries[evictable[a]]),
            (scores[b], &entries[evictable[b]]),
        )
    };
    if keep_n < ranked.len() && keep_n > 0 {
        ranked.select_nth_unstable_by(keep_n - 1, cmp);
    }
    let mut keep: Vec<bool> = entries.iter().map(|e| e.protection.is_protected()).collect();
    for &r in &ranked[..keep_n] {
        keep[evictable[r]] = true;
    }
    let evicted = cache.len() - budget;
    cache.retain_flags(&keep);
    Ok(CompressionOutcome { evicted })
}
