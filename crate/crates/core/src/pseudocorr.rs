//! Pseudo-correspondence labels between two views of the same place.
//!
//! Patches of the query are visited from the most to the least
//! discriminative. A patch may only correspond to positive-image patches
//! that the aggregator put in the same cluster; among those, the most
//! similar one is accepted if it is similar enough and clearly better than
//! the runner-up.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{FolError, Result};
use crate::model::{cosine_sim, AssignmentMatrix, DiscriminativeMask, FeatureMap};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PseudoCorrConfig {
    /// Minimum similarity of the best candidate (exclusive).
    pub thr1: f64,
    /// Maximum second-best / best similarity ratio (exclusive).
    pub thr2: f64,
    /// Maximum number of correspondences returned.
    pub n_max: usize,
}

impl Default for PseudoCorrConfig {
    fn default() -> Self {
        PseudoCorrConfig {
            thr1: 0.8,
            thr2: 0.5,
            n_max: 8,
        }
    }
}

impl PseudoCorrConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.thr1 > 0.0 && self.thr1 <= 1.0) {
            return Err(FolError::invalid(format!("thr1 = {} must be in (0, 1]", self.thr1)));
        }
        if !(self.thr2 > 0.0 && self.thr2 < 1.0) {
            return Err(FolError::invalid(format!("thr2 = {} must be in (0, 1)", self.thr2)));
        }
        if self.n_max == 0 {
            return Err(FolError::invalid("n_max must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correspondence {
    /// Flat patch index in the query image.
    pub p: usize,
    /// Flat patch index in the positive image.
    pub p_prime: usize,
    /// Cosine similarity of the two backbone patch features.
    pub confidence: f64,
}

/// Builds at most `n_max` one-to-one correspondences.
///
/// Cluster membership is the argmax over non-dustbin columns of each
/// plan row. A cluster with a single remaining candidate passes the ratio
/// test trivially. Positive patches already used are not offered again.
pub fn build_correspondences(
    query_mask: &DiscriminativeMask,
    query: &FeatureMap,
    positive: &FeatureMap,
    query_plan: &AssignmentMatrix,
    positive_plan: &AssignmentMatrix,
    cfg: &PseudoCorrConfig,
) -> Result<Vec<Correspondence>> {
    cfg.validate()?;
    let nq = query.num_patches();
    let np = positive.num_patches();
    if query_mask.len() != nq || query_mask.height() != query.height() {
        return Err(FolError::dim("query mask is not aligned with the query feature grid"));
    }
    if query_plan.num_features() != nq || positive_plan.num_features() != np {
        return Err(FolError::dim("assignment rows do not match the feature grids"));
    }
    if query_plan.num_clusters() != positive_plan.num_clusters() {
        return Err(FolError::dim("query and positive plans use different cluster counts"));
    }
    if query.dim() != positive.dim() {
        return Err(FolError::dim("query and positive features differ in dimension"));
    }

    let values = query_mask.values();
    let mut order: Vec<usize> = (0..nq).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); positive_plan.num_clusters()];
    for j in 0..np {
        members[positive_plan.argmax_cluster(j)].push(j);
    }
    let mut used = vec![false; np];
    let mut out = Vec::with_capacity(cfg.n_max);

    for p in order {
        if out.len() == cfg.n_max {
            break;
        }
        let cluster = query_plan.argmax_cluster(p);
        let mut ranked = Vec::new();
        for &j in members[cluster].iter().filter(|&&j| !used[j]) {
            ranked.push((j, cosine_sim(query.patch(p), positive.patch(j))?));
        }
        if ranked.is_empty() {
            continue;
        }
        ranked.sort_by(|a, b| match b.1.total_cmp(&a.1) {
            Ordering::Equal => a.0.cmp(&b.0),
            o => o,
        });
        let (best, sim1) = ranked[0];
        let distinct = ranked.get(1).is_none_or(|&(_, sim2)| sim2 / sim1 < cfg.thr2);
        if sim1 > cfg.thr1 && distinct {
            used[best] = true;
            out.push(Correspondence {
                p,
                p_prime: best,
                confidence: sim1,
            });
        }
    }
    Ok(out)
}
