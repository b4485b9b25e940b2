//! Independent oracles and instance generators shared by integration tests.
#![allow(dead_code, clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

use fol_core::model::{AssignmentMatrix, DiscriminativeMask, FeatureMap, MaskKind};
use fol_core::pseudocorr::{Correspondence, PseudoCorrConfig};
use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn cos(a: &[f64], b: &[f64]) -> f64 {
    let mut ab = 0.0;
    let mut aa = 0.0;
    let mut bb = 0.0;
    for k in 0..a.len() {
        ab += a[k] * b[k];
        aa += a[k] * a[k];
        bb += b[k] * b[k];
    }
    (ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0)
}

/// Hard cluster of row `i`, scanning all non-dustbin columns.
pub fn hard_cluster(plan: &Array2<f64>, i: usize) -> usize {
    let m = plan.ncols() - 1;
    let mut best = 0;
    for j in 0..m {
        if plan[[i, j]] > plan[[i, best]] {
            best = j;
        }
    }
    best
}

/// Exhaustive pseudo-correspondence construction: at every step the next
/// query patch is found by scanning for the largest unvisited mask value,
/// and all positive patches are scanned for the best and runner-up.
pub fn pseudocorr_oracle(
    mask: &[f64],
    q: &Array2<f64>,
    pos: &Array2<f64>,
    q_plan: &Array2<f64>,
    pos_plan: &Array2<f64>,
    cfg: &PseudoCorrConfig,
) -> Vec<Correspondence> {
    let nq = q.nrows();
    let np = pos.nrows();
    let mut visited = vec![false; nq];
    let mut used = vec![false; np];
    let mut out = Vec::new();
    for _ in 0..nq {
        if out.len() >= cfg.n_max {
            break;
        }
        let mut p = usize::MAX;
        for i in 0..nq {
            if !visited[i] && (p == usize::MAX || mask[i] > mask[p]) {
                p = i;
            }
        }
        visited[p] = true;
        let c = hard_cluster(q_plan, p);
        let qp = q.row(p).to_vec();
        let mut best: Option<(usize, f64)> = None;
        let mut second: Option<f64> = None;
        for j in 0..np {
            if used[j] || hard_cluster(pos_plan, j) != c {
                continue;
            }
            let s = cos(&qp, &pos.row(j).to_vec());
            match best {
                Some((_, b)) if s <= b => {
                    if second.is_none_or(|t| s > t) {
                        second = Some(s);
                    }
                }
                _ => {
                    second = best.map(|(_, b)| b);
                    best = Some((j, s));
                }
            }
        }
        let Some((j, s1)) = best else { continue };
        let unambiguous = match second {
            None => true,
            Some(s2) => s2 / s1 < cfg.thr2,
        };
        if s1 > cfg.thr1 && unambiguous {
            used[j] = true;
            out.push(Correspondence {
                p,
                p_prime: j,
                confidence: s1,
            });
        }
    }
    out
}

pub fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub struct PseudoCorrInstance {
    pub mask: DiscriminativeMask,
    pub query: FeatureMap,
    pub positive: FeatureMap,
    pub q_plan: AssignmentMatrix,
    pub p_plan: AssignmentMatrix,
}

/// Random instance on a grid of at most 6x6. The positive image is a
/// noisy permutation of the query, and its plan rows follow the permuted
/// query rows most of the time, so accepted pairs are common.
pub fn pseudocorr_instance(rng: &mut ChaCha8Rng) -> PseudoCorrInstance {
    let h = rng.gen_range(1..=6);
    let w = rng.gen_range(1..=6);
    let n = h * w;
    let d = rng.gen_range(2..=8);
    let m = rng.gen_range(1..=5);
    let q = Array2::from_shape_fn((n, d), |_| gaussian(rng));
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    let noise = [0.0, 0.05, 0.3][rng.gen_range(0..3)];
    let pos = Array2::from_shape_fn((n, d), |(i, k)| q[[perm[i], k]] + noise * gaussian(rng));
    let q_plan = Array2::from_shape_fn((n, m + 1), |_| rng.gen_range(0.0..1.0));
    let mut p_plan = Array2::from_shape_fn((n, m + 1), |_| rng.gen_range(0.0..1.0));
    for i in 0..n {
        if rng.gen_bool(0.8) {
            p_plan.row_mut(i).assign(&q_plan.row(perm[i]));
        }
    }
    // Quantized weights produce ties in the visiting order.
    let weights: Vec<f64> = (0..n).map(|_| rng.gen_range(1..=4) as f64).collect();
    let fmap = |x: Array2<f64>| FeatureMap::new(h, w, x, Array1::ones(d), None).unwrap();
    PseudoCorrInstance {
        mask: DiscriminativeMask::from_weights(h, w, weights, MaskKind::Fused).unwrap(),
        query: fmap(q),
        positive: fmap(pos),
        q_plan: AssignmentMatrix::new(q_plan, true, 1).unwrap(),
        p_plan: AssignmentMatrix::new(p_plan, true, 1).unwrap(),
    }
}

/// Post-hoc checks on an emitted list, recomputed from the raw inputs.
pub fn pseudocorr_postcheck(inst: &PseudoCorrInstance, out: &[Correspondence], cfg: &PseudoCorrConfig) -> Result<(), String> {
    if out.len() > cfg.n_max {
        return Err(format!("{} pairs exceed n_max", out.len()));
    }
    let mut ps: Vec<usize> = out.iter().map(|c| c.p).collect();
    let mut pps: Vec<usize> = out.iter().map(|c| c.p_prime).collect();
    ps.sort_unstable();
    pps.sort_unstable();
    ps.dedup();
    pps.dedup();
    if ps.len() != out.len() || pps.len() != out.len() {
        return Err("repeated patch index".into());
    }
    for c in out {
        let s = cos(&inst.query.patches().row(c.p).to_vec(), &inst.positive.patches().row(c.p_prime).to_vec());
        if !(s > cfg.thr1) || (s - c.confidence).abs() > 1e-12 {
            return Err(format!("pair {c:?} has recomputed similarity {s}"));
        }
        if hard_cluster(inst.q_plan.plan(), c.p) != hard_cluster(inst.p_plan.plan(), c.p_prime) {
            return Err(format!("pair {c:?} crosses clusters"));
        }
    }
    Ok(())
}
