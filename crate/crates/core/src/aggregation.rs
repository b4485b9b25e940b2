//! Optimal-transport aggregation of patch features into a global descriptor.
//!
//! Features are scored against `m` learned clusters plus a dustbin, the
//! exponentiated scores are balanced with Sinkhorn iterations into a
//! transport plan with uniform marginals, and the non-dustbin part of the
//! plan pools the features into an `m x l` matrix that is concatenated with
//! the scene vector.

use ndarray::{s, Array1, Array2, Axis};

use crate::error::{FolError, Result};
use crate::model::{l2_norm, AssignmentMatrix, ClusterParams, FeatureMap, GlobalDescriptor};

/// Default number of clusters.
pub const DEFAULT_CLUSTERS: usize = 64;
/// Default reduced feature dimensionality.
pub const DEFAULT_REDUCED_DIM: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinkhornConfig {
    pub max_iterations: usize,
    /// Bound on the L1 violation of the row marginals.
    pub tolerance: f64,
    pub log_domain: bool,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        SinkhornConfig {
            max_iterations: 100,
            tolerance: 1e-6,
            log_domain: true,
        }
    }
}

impl SinkhornConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(FolError::invalid("sinkhorn max_iterations must be >= 1"));
        }
        if !(self.tolerance > 0.0) {
            return Err(FolError::invalid("sinkhorn tolerance must be > 0"));
        }
        Ok(())
    }
}

/// Pre-exponential scores `z[i][j] = w_j . f_i + b_j`, with a final column
/// holding the dustbin score.
pub fn score_matrix(features: &Array2<f64>, clusters: &ClusterParams) -> Result<Array2<f64>> {
    if features.ncols() != clusters.dim() {
        return Err(FolError::dim(format!(
            "feature dim {} does not match cluster dim {}",
            features.ncols(),
            clusters.dim()
        )));
    }
    let (n, m) = (features.nrows(), clusters.num_clusters());
    let mut logits = Array2::<f64>::from_elem((n, m + 1), clusters.dustbin_score);
    let mut body = logits.slice_mut(s![.., ..m]);
    body.assign(&features.dot(&clusters.weights.t()));
    body += &clusters.biases;
    Ok(logits)
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Balances `exp(logits)` into a transport plan with row sums `1/n` and
/// column sums `1/(m+1)`.
///
/// Runs until the L1 row-marginal violation drops below the tolerance or
/// the iteration budget is spent; in the latter case the plan is returned
/// with `converged() == false`. Column marginals are exact (up to rounding)
/// after every iteration.
pub fn sinkhorn(logits: &Array2<f64>, config: &SinkhornConfig) -> Result<AssignmentMatrix> {
    config.validate()?;
    let (n, c) = logits.dim();
    if n == 0 || c < 2 {
        return Err(FolError::dim(format!(
            "sinkhorn needs n >= 1 rows and m+1 >= 2 columns, got {n}x{c}"
        )));
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(FolError::invalid("sinkhorn logits must be finite"));
    }
    let logits = logits.as_standard_layout().into_owned();
    if config.log_domain {
        sinkhorn_log(&logits, config)
    } else {
        sinkhorn_linear(&logits, config)
    }
}

fn sinkhorn_log(z: &Array2<f64>, config: &SinkhornConfig) -> Result<AssignmentMatrix> {
    let (n, c) = z.dim();
    let row_target = 1.0 / n as f64;
    let log_mu = row_target.ln();
    let log_kappa = (1.0 / c as f64).ln();
    let mut u = Array1::<f64>::zeros(n);
    let mut v = Array1::<f64>::zeros(c);
    let mut row_lse = Array1::<f64>::zeros(n);

    let mut iterations = 0;
    let converged = loop {
        for (i, r) in z.axis_iter(Axis(0)).enumerate() {
            row_lse[i] = log_sum_exp(r.iter().zip(v.iter()).map(|(a, b)| a + b));
        }
        if iterations > 0 {
            let violation: f64 = u
                .iter()
                .zip(row_lse.iter())
                .map(|(ui, li)| ((ui + li).exp() - row_target).abs())
                .sum();
            if violation <= config.tolerance {
                break true;
            }
        }
        if iterations == config.max_iterations {
            break false;
        }
        u.zip_mut_with(&row_lse, |ui, li| *ui = log_mu - li);
        for (j, col) in z.axis_iter(Axis(1)).enumerate() {
            v[j] = log_kappa - log_sum_exp(col.iter().zip(u.iter()).map(|(a, b)| a + b));
        }
        iterations += 1;
    };

    let mut plan = z.clone();
    for ((i, j), p) in plan.indexed_iter_mut() {
        *p = (*p + u[i] + v[j]).exp();
    }
    AssignmentMatrix::new(plan, converged, iterations)
}

fn sinkhorn_linear(z: &Array2<f64>, config: &SinkhornConfig) -> Result<AssignmentMatrix> {
    let (n, c) = z.dim();
    let row_target = 1.0 / n as f64;
    let col_target = 1.0 / c as f64;
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut plan = z.mapv(|x| (x - max).exp());
    let mut iterations = 0;
    let converged = loop {
        let rows = plan.sum_axis(Axis(1));
        if iterations > 0 {
            let violation: f64 = rows.iter().map(|r| (r - row_target).abs()).sum();
            if violation <= config.tolerance {
                break true;
            }
        }
        if iterations == config.max_iterations {
            break false;
        }
        for (mut r, s) in plan.axis_iter_mut(Axis(0)).zip(rows.iter()) {
            if *s > 0.0 {
                r *= row_target / s;
            }
        }
        let cols = plan.sum_axis(Axis(0));
        for (mut col, s) in plan.axis_iter_mut(Axis(1)).zip(cols.iter()) {
            if *s > 0.0 {
                col *= col_target / s;
            }
        }
        iterations += 1;
    };
    AssignmentMatrix::new(plan, converged, iterations)
}

/// The first `m` columns of the plan, i.e. the plan without the dustbin.
pub fn drop_dustbin(plan: &AssignmentMatrix) -> Array2<f64> {
    plan.plan().slice(s![.., ..plan.num_clusters()]).to_owned()
}

/// Cluster-wise pooling `V[j][k] = sum_i P[i][j] * f[i][k]`.
pub fn aggregate(plan_no_dustbin: &Array2<f64>, features: &Array2<f64>) -> Result<Array2<f64>> {
    if plan_no_dustbin.nrows() != features.nrows() {
        return Err(FolError::dim(format!(
            "plan has {} rows but there are {} features",
            plan_no_dustbin.nrows(),
            features.nrows()
        )));
    }
    Ok(plan_no_dustbin.t().dot(features))
}

/// `L2Norm([g ; L2Norm(flatten(V))])`.
///
/// `V` is normalized as a single flattened vector. An all-zero `V` block is
/// passed through as zeros so the descriptor can still be formed from `g`.
pub fn global_descriptor(scene: &[f64], clusters: &Array2<f64>) -> Result<GlobalDescriptor> {
    let flat: Vec<f64> = clusters.iter().copied().collect();
    let v_norm = l2_norm(&flat);
    let mut concat = Vec::with_capacity(scene.len() + flat.len());
    concat.extend_from_slice(scene);
    if v_norm > 0.0 {
        concat.extend(flat.iter().map(|x| x / v_norm));
    } else {
        concat.extend(flat);
    }
    if l2_norm(&concat) == 0.0 {
        return Err(FolError::degenerate("scene vector and cluster block are both zero"));
    }
    GlobalDescriptor::from_unnormalized(&concat)
}

/// Everything the aggregation stage produces for one image.
#[derive(Debug, Clone)]
pub struct Aggregation {
    pub assignment: AssignmentMatrix,
    pub clusters: Array2<f64>,
    pub descriptor: GlobalDescriptor,
}

/// Runs the full aggregation for one feature map. The class token serves
/// as the scene vector.
pub fn aggregate_features(
    features: &FeatureMap,
    clusters: &ClusterParams,
    config: &SinkhornConfig,
) -> Result<Aggregation> {
    let local = features.aggregation_features();
    let logits = score_matrix(local, clusters)?;
    let assignment = sinkhorn(&logits, config)?;
    let pooled = aggregate(&drop_dustbin(&assignment), local)?;
    let descriptor = global_descriptor(features.cls().as_slice().expect("contiguous"), &pooled)?;
    Ok(Aggregation {
        assignment,
        clusters: pooled,
        descriptor,
    })
}
