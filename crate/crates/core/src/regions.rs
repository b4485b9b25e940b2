//! Discriminative region masks.
//!
//! Two spatial distributions over the patch grid are built: one from the
//! class-token attention of the backbone (extractor mask) and one from the
//! foreground mass each token sends to non-dustbin clusters (aggregator
//! mask). Their mean is the fused mask, which is binarized to its top
//! fraction and upsampled to the local-feature grid for re-ranking.

use std::cmp::Ordering;

use crate::error::{FolError, Result};
use crate::model::{AssignmentMatrix, AttentionStack, DiscriminativeMask, MaskKind};

/// Default fraction of patches kept by [`binarize_topk`].
pub const DEFAULT_TOPK_FRACTION: f64 = 0.40;
/// Default fraction (in percent) of largest values clamped by [`smooth_mask`].
pub const DEFAULT_SMOOTHING_PERCENTILE: f64 = 10.0;

// Absorbs products such as 0.57 * 100 = 56.999999999999993.
const COUNT_EPS: f64 = 1e-9;

fn check_grid(n: usize, height: usize, width: usize, what: &str) -> Result<()> {
    if height * width != n {
        return Err(FolError::dim(format!(
            "{what} has {n} entries but the grid is {height}x{width}"
        )));
    }
    Ok(())
}

/// Extractor mask: head-averaged class-token attention, normalized over
/// the grid.
pub fn attention_mask(att: &AttentionStack, height: usize, width: usize) -> Result<DiscriminativeMask> {
    check_grid(att.num_patches(), height, width, "attention row")?;
    let heads = att.num_heads() as f64;
    let mean: Vec<f64> = att
        .heads()
        .columns()
        .into_iter()
        .map(|c| c.sum() / heads)
        .collect();
    if mean.iter().all(|&v| v == 0.0) {
        return Err(FolError::degenerate("attention is zero everywhere"));
    }
    DiscriminativeMask::from_weights(height, width, mean, MaskKind::Extractor)
}

/// Aggregator mask: spatial softmax of each token's non-dustbin mass,
/// scaled by its mean.
pub fn aggregation_mask(plan: &AssignmentMatrix, height: usize, width: usize) -> Result<DiscriminativeMask> {
    check_grid(plan.num_features(), height, width, "assignment matrix")?;
    let m = plan.num_clusters();
    let raw: Vec<f64> = plan
        .plan()
        .rows()
        .into_iter()
        .map(|r| r.iter().take(m).sum::<f64>())
        .collect();
    let tau = raw.iter().sum::<f64>() / raw.len() as f64;
    let scaled: Vec<f64> = if tau > 0.0 {
        raw.iter().map(|r| r / tau).collect()
    } else {
        vec![0.0; raw.len()]
    };
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights = scaled.iter().map(|s| (s - max).exp()).collect();
    DiscriminativeMask::from_weights(height, width, weights, MaskKind::Aggregator)
}

/// Nearest-rank percentile: the smallest value with at least `q` percent of
/// the values at or below it.
pub fn nearest_rank_percentile(values: &[f64], q: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len();
    let rank = ((q / 100.0) * n as f64 - COUNT_EPS).ceil().max(1.0) as usize;
    sorted[rank.min(n) - 1]
}

/// Clamps the largest `percentile` percent of the mask to the
/// `100 - percentile` nearest-rank percentile and renormalizes.
pub fn smooth_mask(mask: &DiscriminativeMask, percentile: f64) -> Result<DiscriminativeMask> {
    if !mask.kind().is_distribution() {
        return Err(FolError::invalid("smoothing needs a distribution mask"));
    }
    if !(percentile > 0.0 && percentile < 100.0) {
        return Err(FolError::invalid("smoothing percentile must be in (0, 100)"));
    }
    let cap = nearest_rank_percentile(mask.values(), 100.0 - percentile);
    let clamped = mask.values().iter().map(|&v| v.min(cap)).collect();
    DiscriminativeMask::from_weights(mask.height(), mask.width(), clamped, mask.kind())
}

/// Elementwise mean of two distribution masks.
pub fn fuse(extractor: &DiscriminativeMask, aggregator: &DiscriminativeMask) -> Result<DiscriminativeMask> {
    if extractor.height() != aggregator.height() || extractor.width() != aggregator.width() {
        return Err(FolError::dim(format!(
            "cannot fuse {}x{} with {}x{}",
            extractor.height(),
            extractor.width(),
            aggregator.height(),
            aggregator.width()
        )));
    }
    if !(extractor.kind().is_distribution() && aggregator.kind().is_distribution()) {
        return Err(FolError::invalid("fuse needs distribution masks"));
    }
    let values = extractor
        .values()
        .iter()
        .zip(aggregator.values())
        .map(|(a, b)| (a + b) / 2.0)
        .collect();
    DiscriminativeMask::new(extractor.height(), extractor.width(), values, MaskKind::Fused)
}

/// Number of ones kept by [`binarize_topk`] for `n` positions.
pub fn topk_count(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64 + COUNT_EPS).floor() as usize).min(n)
}

/// Sets the `floor(fraction * n)` largest entries to one. Equal values are
/// taken in increasing flat-index order.
pub fn binarize_topk(mask: &DiscriminativeMask, fraction: f64) -> Result<DiscriminativeMask> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(FolError::invalid(format!("top-k fraction {fraction} not in (0, 1]")));
    }
    let values = mask.values();
    let keep = topk_count(values.len(), fraction);
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| match values[b].total_cmp(&values[a]) {
        Ordering::Equal => a.cmp(&b),
        o => o,
    });
    let mut bits = vec![0.0; values.len()];
    for &i in &order[..keep] {
        bits[i] = 1.0;
    }
    DiscriminativeMask::new(mask.height(), mask.width(), bits, MaskKind::Binary)
}

/// Nearest-neighbour upsampling of a binary mask to `height x width`.
pub fn upsample_mask(mask: &DiscriminativeMask, height: usize, width: usize) -> Result<DiscriminativeMask> {
    if mask.kind() != MaskKind::Binary {
        return Err(FolError::invalid("only binary masks are upsampled"));
    }
    let (hp, wp) = (mask.height(), mask.width());
    if height < hp || width < wp {
        return Err(FolError::invalid(format!(
            "cannot upsample {hp}x{wp} mask down to {height}x{width}"
        )));
    }
    let mut out = Vec::with_capacity(height * width);
    for y in 0..height {
        let sy = y * hp / height;
        for x in 0..width {
            out.push(mask.get(sy, x * wp / width));
        }
    }
    DiscriminativeMask::new(height, width, out, MaskKind::Binary)
}
