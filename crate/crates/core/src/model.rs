//! Shared domain types and elementary vector math.

use ndarray::{s, Array1, Array2};

use crate::error::{FolError, Result};
use crate::tensor::Tensor;

/// Tolerance used when validating unit norms.
pub const UNIT_NORM_TOL: f64 = 1e-6;
/// Tolerance used when validating that a distribution mask sums to one.
pub const DISTRIBUTION_TOL: f64 = 1e-9;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Returns `a / ||a||`, or a degenerate-input error for a zero vector.
pub fn normalized(a: &[f64]) -> Result<Vec<f64>> {
    let norm = l2_norm(a);
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(FolError::degenerate("cannot normalize a zero or non-finite vector"));
    }
    Ok(a.iter().map(|x| x / norm).collect())
}

/// Cosine similarity `a.b / (|a||b|)`.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(FolError::dim(format!(
            "cosine_sim on lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let na = l2_norm(a);
    let nb = l2_norm(b);
    if !(na > 0.0 && nb > 0.0) {
        return Err(FolError::degenerate("cosine_sim of a zero-norm vector"));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

pub(crate) fn row(m: &Array2<f64>, i: usize) -> &[f64] {
    m.row(i).to_slice().expect("standard layout")
}

fn all_finite<'a>(mut it: impl Iterator<Item = &'a f64>) -> bool {
    it.all(|x| x.is_finite())
}

/// Backbone output for one image: a patch-token grid plus the class token.
///
/// Patch tokens are stored flattened row-major as an `n x d` matrix with
/// `n = height * width`. `reduced`, when present, is the `n x l`
/// dimensionality-reduced view used for aggregation.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    patches: Array2<f64>,
    cls: Array1<f64>,
    reduced: Option<Array2<f64>>,
}

impl FeatureMap {
    pub fn new(
        height: usize,
        width: usize,
        patches: Array2<f64>,
        cls: Array1<f64>,
        reduced: Option<Array2<f64>>,
    ) -> Result<Self> {
        if height == 0 || width == 0 || patches.ncols() == 0 {
            return Err(FolError::invalid("feature map needs h, w, d >= 1"));
        }
        let n = height * width;
        if patches.nrows() != n {
            return Err(FolError::dim(format!(
                "{height}x{width} grid needs {n} patch rows, got {}",
                patches.nrows()
            )));
        }
        if cls.len() != patches.ncols() {
            return Err(FolError::dim(format!(
                "cls length {} != patch dim {}",
                cls.len(),
                patches.ncols()
            )));
        }
        if let Some(r) = &reduced {
            if r.nrows() != n || r.ncols() == 0 {
                return Err(FolError::dim(format!(
                    "reduced features must be {n} x l, got {:?}",
                    r.shape()
                )));
            }
        }
        let finite = all_finite(patches.iter())
            && all_finite(cls.iter())
            && reduced.as_ref().is_none_or(|r| all_finite(r.iter()));
        if !finite {
            return Err(FolError::invalid("feature map contains non-finite values"));
        }
        Ok(FeatureMap {
            height,
            width,
            patches: patches.as_standard_layout().into_owned(),
            cls,
            reduced: reduced.map(|r| r.as_standard_layout().into_owned()),
        })
    }

    /// Builds a feature map from `h x w x d` patches, a length-`d` cls
    /// vector and optional `h x w x l` reduced features.
    pub fn from_tensors(patches: &Tensor, cls: &Tensor, reduced: Option<&Tensor>) -> Result<Self> {
        let [h, w, _] = patches.shape() else {
            return Err(FolError::dim(format!(
                "patch tensor must be h x w x d, got {:?}",
                patches.shape()
            )));
        };
        let (h, w) = (*h, *w);
        if cls.rank() != 1 {
            return Err(FolError::dim("cls tensor must be rank 1"));
        }
        let reduced = match reduced {
            Some(t) if t.rank() == 3 && t.shape()[..2] == [h, w] => Some(t.to_matrix()?),
            Some(t) => {
                return Err(FolError::dim(format!(
                    "reduced tensor must be {h} x {w} x l, got {:?}",
                    t.shape()
                )))
            }
            None => None,
        };
        FeatureMap::new(h, w, patches.to_matrix()?, cls.to_vector(), reduced)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_patches(&self) -> usize {
        self.height * self.width
    }

    pub fn dim(&self) -> usize {
        self.patches.ncols()
    }

    pub fn patches(&self) -> &Array2<f64> {
        &self.patches
    }

    pub fn patch(&self, i: usize) -> &[f64] {
        row(&self.patches, i)
    }

    pub fn cls(&self) -> &Array1<f64> {
        &self.cls
    }

    pub fn reduced(&self) -> Option<&Array2<f64>> {
        self.reduced.as_ref()
    }

    /// Features used for cluster assignment: the reduced view when present,
    /// otherwise the raw patches.
    pub fn aggregation_features(&self) -> &Array2<f64> {
        self.reduced.as_ref().unwrap_or(&self.patches)
    }
}

/// Class-token to patch attention rows, one per head (`H x n`).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStack {
    heads: Array2<f64>,
}

impl AttentionStack {
    pub fn new(heads: Array2<f64>) -> Result<Self> {
        if heads.nrows() == 0 || heads.ncols() == 0 {
            return Err(FolError::invalid("attention stack needs at least one head and patch"));
        }
        if heads.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(FolError::invalid("attention scores must be finite and >= 0"));
        }
        Ok(AttentionStack {
            heads: heads.as_standard_layout().into_owned(),
        })
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        AttentionStack::new(t.to_matrix()?)
    }

    pub fn heads(&self) -> &Array2<f64> {
        &self.heads
    }

    pub fn num_heads(&self) -> usize {
        self.heads.nrows()
    }

    pub fn num_patches(&self) -> usize {
        self.heads.ncols()
    }
}

/// Feature-to-cluster transport plan, `n x (m+1)`; the last column is the
/// dustbin.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentMatrix {
    plan: Array2<f64>,
    converged: bool,
    iterations: usize,
}

impl AssignmentMatrix {
    pub fn new(plan: Array2<f64>, converged: bool, iterations: usize) -> Result<Self> {
        if plan.ncols() < 2 || plan.nrows() == 0 {
            return Err(FolError::dim(format!(
                "assignment plan needs n >= 1 rows and m+1 >= 2 columns, got {:?}",
                plan.shape()
            )));
        }
        if plan.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(FolError::invalid("assignment entries must be finite and >= 0"));
        }
        Ok(AssignmentMatrix {
            plan: plan.as_standard_layout().into_owned(),
            converged,
            iterations,
        })
    }

    /// Loads a plan from file; the convergence flag is not persisted and is
    /// reported as `true`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.rank() != 2 {
            return Err(FolError::dim("assignment tensor must be rank 2"));
        }
        AssignmentMatrix::new(t.to_matrix()?, true, 0)
    }

    pub fn plan(&self) -> &Array2<f64> {
        &self.plan
    }

    pub fn num_features(&self) -> usize {
        self.plan.nrows()
    }

    /// Number of non-dustbin clusters.
    pub fn num_clusters(&self) -> usize {
        self.plan.ncols() - 1
    }

    pub fn converged(&self) -> bool {
        self.converged
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    /// Index of the strongest non-dustbin cluster for feature `i`; ties go
    /// to the lower cluster index.
    pub fn argmax_cluster(&self, i: usize) -> usize {
        let r = self.plan.row(i);
        let mut best = 0;
        for j in 1..self.num_clusters() {
            if r[j] > r[best] {
                best = j;
            }
        }
        best
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    Extractor,
    Aggregator,
    Fused,
    Binary,
}

impl MaskKind {
    pub fn is_distribution(self) -> bool {
        !matches!(self, MaskKind::Binary)
    }
}

/// Per-patch importance over an `h x w` grid. Distribution kinds sum to
/// one; the binary kind holds only 0 and 1.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminativeMask {
    height: usize,
    width: usize,
    values: Vec<f64>,
    kind: MaskKind,
}

impl DiscriminativeMask {
    pub fn new(height: usize, width: usize, values: Vec<f64>, kind: MaskKind) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(FolError::invalid("mask needs h, w >= 1"));
        }
        if values.len() != height * width {
            return Err(FolError::dim(format!(
                "{height}x{width} mask needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        if kind.is_distribution() {
            if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(FolError::invalid("distribution mask entries must be finite and >= 0"));
            }
            let total: f64 = values.iter().sum();
            if (total - 1.0).abs() > DISTRIBUTION_TOL {
                return Err(FolError::invalid(format!(
                    "distribution mask sums to {total}, expected 1"
                )));
            }
        } else if values.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(FolError::invalid("binary mask entries must be 0 or 1"));
        }
        Ok(DiscriminativeMask {
            height,
            width,
            values,
            kind,
        })
    }

    /// Normalizes nonnegative weights into a distribution mask.
    pub fn from_weights(height: usize, width: usize, weights: Vec<f64>, kind: MaskKind) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(FolError::degenerate("mask weights sum to zero"));
        }
        let values = weights.into_iter().map(|w| w / total).collect();
        DiscriminativeMask::new(height, width, values, kind)
    }

    /// Loads an `h x w` tensor. Files carry no kind tag: binary-valued
    /// tensors that do not sum to one are read as binary masks, everything
    /// else as a fused distribution (renormalized against float32
    /// rounding).
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let [h, w] = t.shape() else {
            return Err(FolError::dim(format!("mask tensor must be h x w, got {:?}", t.shape())));
        };
        let values: Vec<f64> = t.data().iter().map(|&x| f64::from(x)).collect();
        let total: f64 = values.iter().sum();
        let is_binary = values.iter().all(|&v| v == 0.0 || v == 1.0);
        if is_binary && (total - 1.0).abs() > 1e-6 {
            DiscriminativeMask::new(*h, *w, values, MaskKind::Binary)
        } else {
            DiscriminativeMask::from_weights(*h, *w, values, MaskKind::Fused)
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.height, self.width],
            self.values.iter().map(|&x| x as f32).collect(),
        )
        .expect("mask shape is consistent")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn popcount(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1.0).count()
    }
}

/// Unit-norm global image descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalDescriptor(Vec<f64>);

impl GlobalDescriptor {
    /// Wraps a vector that is already unit norm (within 1e-6).
    pub fn new(v: Vec<f64>) -> Result<Self> {
        let norm = l2_norm(&v);
        if v.is_empty() || (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(FolError::invalid(format!(
                "global descriptor must have unit norm, got {norm}"
            )));
        }
        Ok(GlobalDescriptor(v))
    }

    /// Normalizes an arbitrary nonzero vector into a descriptor.
    pub fn from_unnormalized(v: &[f64]) -> Result<Self> {
        Ok(GlobalDescriptor(normalized(v)?))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

/// Dense local descriptors on an `h x w` grid, each location unit norm.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalFeatureMap {
    height: usize,
    width: usize,
    features: Array2<f64>,
}

impl LocalFeatureMap {
    /// Builds the map from raw decoder output, L2-normalizing every
    /// location. Zero vectors are rejected.
    pub fn from_raw(height: usize, width: usize, raw: Array2<f64>) -> Result<Self> {
        if height == 0 || width == 0 || raw.ncols() == 0 {
            return Err(FolError::invalid("local feature map needs h, w, d >= 1"));
        }
        if raw.nrows() != height * width {
            return Err(FolError::dim(format!(
                "{height}x{width} local grid needs {} rows, got {}",
                height * width,
                raw.nrows()
            )));
        }
        let mut features = raw.as_standard_layout().into_owned();
        for (i, mut r) in features.rows_mut().into_iter().enumerate() {
            let norm = r.dot(&r).sqrt();
            if !(norm > 0.0) || !norm.is_finite() {
                return Err(FolError::degenerate(format!(
                    "local feature at location {i} has zero or non-finite norm"
                )));
            }
            r /= norm;
        }
        Ok(LocalFeatureMap {
            height,
            width,
            features,
        })
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let [h, w, _] = t.shape() else {
            return Err(FolError::dim(format!(
                "local feature tensor must be h x w x d, got {:?}",
                t.shape()
            )));
        };
        LocalFeatureMap::from_raw(*h, *w, t.to_matrix()?)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        row(&self.features, i)
    }
}

/// Learned cluster parameters for score computation.
///
/// On disk this is one `(m+1) x (d+1)` tensor: row `j < m` holds `[w_j, b_j]`
/// and the last row holds `[0, .., 0, dustbin_score]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterParams {
    pub weights: Array2<f64>,
    pub biases: Array1<f64>,
    pub dustbin_score: f64,
}

impl ClusterParams {
    pub fn new(weights: Array2<f64>, biases: Array1<f64>, dustbin_score: f64) -> Result<Self> {
        if weights.nrows() == 0 || weights.ncols() == 0 {
            return Err(FolError::invalid("cluster weights must be m x d with m, d >= 1"));
        }
        if biases.len() != weights.nrows() {
            return Err(FolError::dim(format!(
                "{} biases for {} clusters",
                biases.len(),
                weights.nrows()
            )));
        }
        if !(all_finite(weights.iter()) && all_finite(biases.iter()) && dustbin_score.is_finite()) {
            return Err(FolError::invalid("cluster parameters must be finite"));
        }
        Ok(ClusterParams {
            weights: weights.as_standard_layout().into_owned(),
            biases,
            dustbin_score,
        })
    }

    pub fn num_clusters(&self) -> usize {
        self.weights.nrows()
    }

    pub fn dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn to_tensor(&self) -> Tensor {
        let (m, d) = self.weights.dim();
        let mut packed = Array2::<f64>::zeros((m + 1, d + 1));
        packed.slice_mut(s![..m, ..d]).assign(&self.weights);
        packed.slice_mut(s![..m, d]).assign(&self.biases);
        packed[[m, d]] = self.dustbin_score;
        Tensor::from_matrix(&packed)
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let [rows, cols] = t.shape() else {
            return Err(FolError::dim("cluster tensor must be rank 2"));
        };
        if *rows < 2 || *cols < 2 {
            return Err(FolError::dim(format!(
                "cluster tensor must be (m+1) x (d+1) with m, d >= 1, got {rows}x{cols}"
            )));
        }
        let packed = t.to_matrix()?;
        let (m, d) = (rows - 1, cols - 1);
        ClusterParams::new(
            packed.slice(s![..m, ..d]).to_owned(),
            packed.slice(s![..m, d]).to_owned(),
            packed[[m, d]],
        )
    }
}

/// Weights and constants for the training objectives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub margin: f64,
    pub smoothing_percentile: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 1.0,
            beta: 1.0,
            margin: 1.0,
            smoothing_percentile: 10.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(FolError::invalid("alpha and beta must be >= 0"));
        }
        if !self.margin.is_finite() {
            return Err(FolError::invalid("margin must be finite"));
        }
        if !(self.smoothing_percentile > 0.0 && self.smoothing_percentile < 100.0) {
            return Err(FolError::invalid("smoothing percentile must be in (0, 100)"));
        }
        Ok(())
    }
}
