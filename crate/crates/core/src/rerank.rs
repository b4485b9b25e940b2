//! Stage-two re-ranking by mutual nearest-neighbour matching of local
//! features restricted to each image's discriminative region.

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{FolError, Result};
use crate::model::{DiscriminativeMask, LocalFeatureMap, MaskKind};
use crate::regions::upsample_mask;

/// Local features that survive a binary mask, in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedLocalSet {
    pub coords: Vec<(usize, usize)>,
    /// One unit vector per kept location, `|coords| x d`.
    pub features: Array2<f64>,
}

impl MaskedLocalSet {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Every location of the map, i.e. dense matching.
    pub fn dense(local: &LocalFeatureMap) -> Self {
        let w = local.width();
        MaskedLocalSet {
            coords: (0..local.len()).map(|i| (i / w, i % w)).collect(),
            features: local.features().clone(),
        }
    }
}

/// Selects the local features at the mask's one-positions.
pub fn masked_features(local: &LocalFeatureMap, mask: &DiscriminativeMask) -> Result<MaskedLocalSet> {
    if mask.kind() != MaskKind::Binary {
        return Err(FolError::invalid("masked_features needs a binary mask"));
    }
    if mask.height() != local.height() || mask.width() != local.width() {
        return Err(FolError::dim(format!(
            "mask is {}x{} but local map is {}x{}",
            mask.height(),
            mask.width(),
            local.height(),
            local.width()
        )));
    }
    let kept: Vec<usize> = (0..mask.len()).filter(|&i| mask.values()[i] == 1.0).collect();
    let mut features = Array2::<f64>::zeros((kept.len(), local.dim()));
    for (r, &i) in kept.iter().enumerate() {
        features.row_mut(r).assign(&local.features().row(i));
    }
    Ok(MaskedLocalSet {
        coords: kept.iter().map(|&i| (i / local.width(), i % local.width())).collect(),
        features,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub a: usize,
    pub b: usize,
    pub sim: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MatchStats {
    /// Pairwise similarity evaluations performed.
    pub comparisons: u64,
}

/// Mutual nearest neighbours between two sets of unit row vectors.
///
/// `(i, j)` is returned iff `j` is the most similar row of `b` to `a[i]`
/// and `i` the most similar row of `a` to `b[j]`; argmax ties go to the
/// lower index. Output is ordered by `i`.
pub fn mutual_nn(a: &Array2<f64>, b: &Array2<f64>) -> Result<(Vec<Match>, MatchStats)> {
    let (na, nb) = (a.nrows(), b.nrows());
    if na == 0 || nb == 0 {
        return Ok((Vec::new(), MatchStats::default()));
    }
    if a.ncols() != b.ncols() {
        return Err(FolError::dim(format!(
            "cannot match {}-d features against {}-d features",
            a.ncols(),
            b.ncols()
        )));
    }
    let sims = a.dot(&b.t());
    let stats = MatchStats {
        comparisons: (na * nb) as u64,
    };

    let mut best_in_a = vec![0usize; nb];
    for i in 1..na {
        for j in 0..nb {
            if sims[[i, j]] > sims[[best_in_a[j], j]] {
                best_in_a[j] = i;
            }
        }
    }
    let mut matches = Vec::new();
    for (i, r) in sims.rows().into_iter().enumerate() {
        let mut best = 0;
        for j in 1..nb {
            if r[j] > r[best] {
                best = j;
            }
        }
        if best_in_a[best] == i {
            matches.push(Match {
                a: i,
                b: best,
                sim: r[best],
            });
        }
    }
    Ok((matches, stats))
}

pub fn mutual_nn_matches(a: &MaskedLocalSet, b: &MaskedLocalSet) -> Result<Vec<Match>> {
    mutual_nn(&a.features, &b.features).map(|(m, _)| m)
}

pub fn mutual_nn_matches_with_stats(a: &MaskedLocalSet, b: &MaskedLocalSet) -> Result<(Vec<Match>, MatchStats)> {
    mutual_nn(&a.features, &b.features)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Scoring {
    /// Sum of similarities over mutual matches.
    #[default]
    SimilaritySum,
    /// Number of mutual matches.
    MatchCount,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RerankConfig {
    pub scoring: Scoring,
}

/// An image taking part in re-ranking: its local map and its binary mask,
/// at patch or local resolution.
#[derive(Debug, Clone, Copy)]
pub struct RegionView<'a> {
    pub local: &'a LocalFeatureMap,
    pub mask: &'a DiscriminativeMask,
}

impl RegionView<'_> {
    pub fn masked_set(&self) -> Result<MaskedLocalSet> {
        let up = upsample_mask(self.mask, self.local.height(), self.local.width())?;
        masked_features(self.local, &up)
    }
}

#[derive(Debug, Clone)]
pub struct Candidate<'a> {
    pub id: String,
    pub global_sim: f64,
    pub view: RegionView<'a>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reranked {
    pub id: String,
    pub score: f64,
    pub global_sim: f64,
}

pub fn score_pair(query: &MaskedLocalSet, candidate: &MaskedLocalSet, config: &RerankConfig) -> Result<f64> {
    let matches = mutual_nn_matches(query, candidate)?;
    Ok(match config.scoring {
        Scoring::SimilaritySum => matches.iter().map(|m| m.sim).sum(),
        Scoring::MatchCount => matches.len() as f64,
    })
}

/// Reorders stage-one candidates by local matching score. Ties fall back
/// to global similarity, then to the incoming order.
pub fn rerank(query: RegionView<'_>, candidates: &[Candidate<'_>], config: &RerankConfig) -> Result<Vec<Reranked>> {
    if candidates.is_empty() {
        return Err(FolError::invalid("rerank needs at least one candidate"));
    }
    let q = query.masked_set()?;
    let scores = candidates
        .par_iter()
        .map(|c| score_pair(&q, &c.view.masked_set()?, config))
        .collect::<Result<Vec<f64>>>()?;

    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&x, &y| {
        scores[y]
            .total_cmp(&scores[x])
            .then_with(|| candidates[y].global_sim.total_cmp(&candidates[x].global_sim))
            .then(x.cmp(&y))
    });
    Ok(order
        .into_iter()
        .map(|i| Reranked {
            id: candidates[i].id.clone(),
            score: scores[i],
            global_sim: candidates[i].global_sim,
        })
        .collect())
}
