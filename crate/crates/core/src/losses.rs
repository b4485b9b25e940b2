//! Forward-only loss kernels.
//!
//! None of these compute gradients. During training the contrast loss is
//! meant to see the patch features as constants (gradient stopped), so that
//! only the mask is optimized; here that has no effect on the values.

use ndarray::Array2;

use crate::error::{FolError, Result};
use crate::model::{cosine_sim, dot, normalized, DiscriminativeMask, GlobalDescriptor, LocalFeatureMap, LossConfig};
use crate::regions::smooth_mask;
use crate::rerank::mutual_nn;

/// Floor applied to the denominator of a KL term whose numerator is positive.
pub const KL_EPS: f64 = 1e-12;

/// `KL(p || q) = sum p log(p / q)`, with `0 log(0/x) = 0` and `q` floored at
/// [`KL_EPS`] where it is zero.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(FolError::dim(format!("KL over lengths {} and {}", p.len(), q.len())));
    }
    Ok(p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi / qi.max(KL_EPS)).ln())
        .sum())
}

fn check_same_grid(a: &DiscriminativeMask, b: &DiscriminativeMask) -> Result<()> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(FolError::dim(format!(
            "masks are {}x{} and {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

/// Spatial alignment loss: the symmetric (Jeffreys) divergence between the
/// smoothed aggregator and extractor masks.
pub fn sal_loss(aggregator: &DiscriminativeMask, extractor: &DiscriminativeMask, cfg: &LossConfig) -> Result<f64> {
    check_same_grid(aggregator, extractor)?;
    let a = smooth_mask(aggregator, cfg.smoothing_percentile)?;
    let e = smooth_mask(extractor, cfg.smoothing_percentile)?;
    let forward = kl_divergence(a.values(), e.values())?;
    let backward = kl_divergence(e.values(), a.values())?;
    Ok(forward + backward)
}

/// Foreground and background prototypes: the mask-weighted and
/// (1 - mask)-weighted sums of patch features, each L2-normalized.
pub fn prototypes(mask: &DiscriminativeMask, patches: &Array2<f64>) -> Result<(Vec<f64>, Vec<f64>)> {
    if patches.nrows() != mask.len() {
        return Err(FolError::dim(format!(
            "mask has {} positions but there are {} patches",
            mask.len(),
            patches.nrows()
        )));
    }
    let d = patches.ncols();
    let mut fg = vec![0.0; d];
    let mut bg = vec![0.0; d];
    for (w, f) in mask.values().iter().zip(patches.rows()) {
        for k in 0..d {
            fg[k] += w * f[k];
            bg[k] += (1.0 - w) * f[k];
        }
    }
    let fg = normalized(&fg).map_err(|_| FolError::degenerate("foreground prototype has zero norm"))?;
    let bg = normalized(&bg).map_err(|_| FolError::degenerate("background prototype has zero norm"))?;
    Ok((fg, bg))
}

/// Foreground/background contrast loss,
/// `max(0, margin - (fg . fg_pos - fg . bg))`.
pub fn cel_loss(fg: &[f64], fg_positive: &[f64], bg: &[f64], cfg: &LossConfig) -> Result<f64> {
    if fg.len() != fg_positive.len() || fg.len() != bg.len() {
        return Err(FolError::dim("prototype lengths differ"));
    }
    Ok((cfg.margin - (dot(fg, fg_positive) - dot(fg, bg))).max(0.0))
}

/// One pseudo-correspondence: backbone features and local descriptors at
/// the matched patches of the two images.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondencePair {
    pub feature: Vec<f64>,
    pub feature_positive: Vec<f64>,
    pub local: Vec<f64>,
    pub local_positive: Vec<f64>,
}

/// Confidence-weighted pseudo-correspondence loss: the mean of
/// `1 - sim(D_p, D_p')` weighted by `exp(sim(f_p, f_p'))`.
pub fn pc_loss(pairs: &[CorrespondencePair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(FolError::degenerate("pc_loss needs at least one pair"));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for p in pairs {
        let w = cosine_sim(&p.feature, &p.feature_positive)?.exp();
        num += w * (1.0 - cosine_sim(&p.local, &p.local_positive)?);
        den += w;
    }
    Ok(num / den)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MsParams {
    pub pos_scale: f64,
    pub neg_scale: f64,
    pub offset: f64,
    pub pos_margin: f64,
    pub neg_margin: f64,
}

impl Default for MsParams {
    fn default() -> Self {
        MsParams {
            pos_scale: 1.0,
            neg_scale: 50.0,
            offset: 0.5,
            pos_margin: 0.1,
            neg_margin: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MsLoss {
    pub value: f64,
    /// Set when the batch holds a single class and the loss is undefined.
    pub degenerate: bool,
}

/// Multi-similarity loss with online pair mining, averaged over anchors.
///
/// Positives are kept when `s < max_neg + pos_margin`; negatives when
/// `s > min_pos - neg_margin`. An anchor without positives keeps all its
/// negatives.
pub fn ms_loss(descriptors: &[GlobalDescriptor], labels: &[u64], params: &MsParams) -> Result<MsLoss> {
    if descriptors.len() != labels.len() {
        return Err(FolError::dim(format!(
            "{} descriptors but {} labels",
            descriptors.len(),
            labels.len()
        )));
    }
    let dim = descriptors.first().map(|d| d.dim()).unwrap_or(0);
    if descriptors.iter().any(|d| d.dim() != dim) {
        return Err(FolError::dim("descriptors differ in dimension"));
    }
    if labels.iter().all(|&l| Some(&l) == labels.first()) {
        return Ok(MsLoss {
            value: 0.0,
            degenerate: true,
        });
    }
    let n = descriptors.len();
    let sim = |i: usize, j: usize| dot(descriptors[i].as_slice(), descriptors[j].as_slice());
    let mut total = 0.0;
    for i in 0..n {
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for j in (0..n).filter(|&j| j != i) {
            if labels[j] == labels[i] {
                pos.push(sim(i, j));
            } else {
                neg.push(sim(i, j));
            }
        }
        let max_neg = neg.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min_pos = pos.iter().cloned().fold(f64::INFINITY, f64::min);
        let pos_sum: f64 = pos
            .iter()
            .filter(|&&s| s < max_neg + params.pos_margin)
            .map(|s| (-params.pos_scale * (s - params.offset)).exp())
            .sum();
        let neg_sum: f64 = neg
            .iter()
            .filter(|&&s| pos.is_empty() || s > min_pos - params.neg_margin)
            .map(|s| (params.neg_scale * (s - params.offset)).exp())
            .sum();
        total += pos_sum.ln_1p() / params.pos_scale + neg_sum.ln_1p() / params.neg_scale;
    }
    Ok(MsLoss {
        value: total / n as f64,
        degenerate: false,
    })
}

/// Mean `1 - sim` over mutual nearest neighbours of two local maps; zero
/// when there are no mutual pairs.
pub fn mnn_loss(query: &LocalFeatureMap, positive: &LocalFeatureMap) -> Result<f64> {
    let (matches, _) = mutual_nn(query.features(), positive.features())?;
    if matches.is_empty() {
        return Ok(0.0);
    }
    Ok(matches.iter().map(|m| 1.0 - m.sim).sum::<f64>() / matches.len() as f64)
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub ms: f64,
    pub mnn: f64,
    pub ce: f64,
    pub sa: f64,
    pub pc: f64,
}

/// `ms + mnn + ce + alpha * sa + beta * pc`.
pub fn total_loss(parts: &LossParts, cfg: &LossConfig) -> Result<f64> {
    let all = [parts.ms, parts.mnn, parts.ce, parts.sa, parts.pc];
    if all.iter().any(|x| !x.is_finite()) {
        return Err(FolError::invalid("loss parts must be finite"));
    }
    Ok(parts.ms + parts.mnn + parts.ce + cfg.alpha * parts.sa + cfg.beta * parts.pc)
}
