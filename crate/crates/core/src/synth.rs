//! Seeded synthetic scene sets.
//!
//! Every place gets a latent: a class token, a grid of patch tokens, a
//! discriminative region of patches and a dense local-feature grid. Each
//! view perturbs the latent with isotropic Gaussian noise. Attention is
//! high on the region and low elsewhere.
//!
//! An aliased pair `(a, b)` shares `a`'s class token, patch tokens and
//! region, so its global descriptors are indistinguishable. The local
//! features of `b` equal those of `a` outside the upsampled region and are
//! drawn fresh inside it.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{FolError, Result};
use crate::eval::{DatasetManifest, ManifestRecord, Position, Role};
use crate::model::ClusterParams;
use crate::regions::{topk_count, DEFAULT_TOPK_FRACTION};
use crate::tensor::Tensor;

/// Distance between neighbouring places, metres.
pub const PLACE_SPACING_M: f64 = 150.0;
/// Views are scattered within this radius of their place centre, so any
/// two views of one place are at most twice this apart.
pub const VIEW_JITTER_M: f64 = 5.0;

const REGION_ATTENTION: f64 = 1.0;
const BACKGROUND_ATTENTION: f64 = 0.05;
const ATTENTION_JITTER: f64 = 0.1;
const CLUSTER_WEIGHT_STD: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub places: usize,
    pub views_per_place: usize,
    pub alias_pairs: usize,
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub clusters: usize,
    /// Local grid is `local_scale` times the patch grid on each side.
    pub local_scale: usize,
    pub local_dim: usize,
    pub heads: usize,
    /// Norm of the expected noise vector relative to the unit latent.
    pub noise: f64,
    /// Fraction of patches in each place's discriminative region.
    pub region_fraction: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            places: 64,
            views_per_place: 4,
            alias_pairs: 8,
            height: 8,
            width: 8,
            dim: 128,
            clusters: 64,
            local_scale: 2,
            local_dim: 32,
            heads: 4,
            noise: 0.1,
            region_fraction: DEFAULT_TOPK_FRACTION,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        if self.places < 2 || self.views_per_place < 2 {
            return Err(FolError::invalid("synth needs places >= 2 and views_per_place >= 2"));
        }
        if 2 * self.alias_pairs > self.places {
            return Err(FolError::invalid(format!(
                "{} alias pairs need {} places, have {}",
                self.alias_pairs,
                2 * self.alias_pairs,
                self.places
            )));
        }
        let dims = [
            self.height,
            self.width,
            self.dim,
            self.clusters,
            self.local_scale,
            self.local_dim,
            self.heads,
        ];
        if dims.contains(&0) {
            return Err(FolError::invalid("synth grid sizes and dimensions must be >= 1"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(FolError::invalid("synth noise must be finite and >= 0"));
        }
        if !(self.region_fraction > 0.0 && self.region_fraction <= 1.0) {
            return Err(FolError::invalid("region fraction must be in (0, 1]"));
        }
        if topk_count(self.height * self.width, self.region_fraction) == 0 {
            return Err(FolError::invalid("region fraction selects no patches"));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        self.height * self.width
    }
}

/// Raw inputs for one image, in the on-disk tensor layouts.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthImage {
    pub id: String,
    pub place: usize,
    /// `h x w x d`
    pub patches: Tensor,
    /// `d`
    pub cls: Tensor,
    /// `heads x n`
    pub attention: Tensor,
    /// `(h*s) x (w*s) x d_l`, not normalized.
    pub local: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub seed: u64,
    pub params: SynthParams,
    /// `(original, alias)` place indices.
    pub alias_pairs: Vec<(usize, usize)>,
    /// Flat patch indices of each place's discriminative region.
    pub regions: Vec<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct SynthSceneSet {
    pub summary: SynthSummary,
    pub manifest: DatasetManifest,
    pub clusters: ClusterParams,
    pub images: Vec<SynthImage>,
}

impl SynthSceneSet {
    /// Ids of query images whose place belongs to an aliased pair.
    pub fn aliased_queries(&self) -> Vec<String> {
        let aliased: Vec<usize> = self.summary.alias_pairs.iter().flat_map(|&(a, b)| [a, b]).collect();
        self.images
            .iter()
            .filter(|im| aliased.contains(&im.place) && image_role(&im.id) == Role::Query)
            .map(|im| im.id.clone())
            .collect()
    }
}

pub fn image_id(place: usize, view: usize) -> String {
    format!("place{place:04}_view{view}")
}

/// View 0 of every place is the query; the others form the database.
fn image_role(id: &str) -> Role {
    if id.ends_with("_view0") {
        Role::Query
    } else {
        Role::Database
    }
}

struct PlaceLatent {
    cls: Vec<f64>,
    patches: Array2<f64>,
    region: Vec<usize>,
    local: Array2<f64>,
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn unit_vector(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| gaussian(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
    let mut m = Array2::zeros((n, d));
    for mut row in m.rows_mut() {
        row.assign(&ndarray::Array1::from(unit_vector(rng, d)));
    }
    m
}

/// `latent + N(0, (noise^2 / d) I)`, renormalized to unit length.
fn perturb(rng: &mut ChaCha8Rng, latent: &[f64], noise: f64) -> Vec<f64> {
    let std = noise / (latent.len() as f64).sqrt();
    let mut v: Vec<f64> = latent.iter().map(|x| x + std * gaussian(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 1e-12 {
        v.iter_mut().for_each(|x| *x /= norm);
        v
    } else {
        latent.to_vec()
    }
}

fn perturb_rows(rng: &mut ChaCha8Rng, latent: &Array2<f64>, noise: f64) -> Array2<f64> {
    let mut out = Array2::zeros(latent.dim());
    for (mut o, l) in out.rows_mut().into_iter().zip(latent.rows()) {
        o.assign(&ndarray::Array1::from(perturb(rng, &l.to_vec(), noise)));
    }
    out
}

fn region_for(rng: &mut ChaCha8Rng, n: usize, size: usize) -> Vec<usize> {
    let mut region = rand::seq::index::sample(rng, n, size).into_vec();
    region.sort_unstable();
    region
}

/// Flat local-grid indices covered by the given patches under
/// nearest-neighbour upsampling.
fn local_cells(params: &SynthParams, region: &[usize]) -> Vec<usize> {
    let s = params.local_scale;
    let lw = params.width * s;
    let mut cells = Vec::with_capacity(region.len() * s * s);
    for &p in region {
        let (py, px) = (p / params.width, p % params.width);
        for dy in 0..s {
            for dx in 0..s {
                cells.push((py * s + dy) * lw + px * s + dx);
            }
        }
    }
    cells.sort_unstable();
    cells
}

fn place_position(rng: &mut ChaCha8Rng, place: usize) -> Position {
    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let radius = VIEW_JITTER_M * rng.gen_range(0.0f64..1.0).sqrt();
    Position::Utm {
        easting: place as f64 * PLACE_SPACING_M + radius * angle.cos(),
        northing: radius * angle.sin(),
    }
}

fn random_clusters(rng: &mut ChaCha8Rng, m: usize, d: usize) -> Result<ClusterParams> {
    let weights = Array2::from_shape_fn((m, d), |_| CLUSTER_WEIGHT_STD * gaussian(rng));
    ClusterParams::new(weights, ndarray::Array1::zeros(m), 0.0)
}

/// Generates a scene set. Pure function of `(seed, params)`.
pub fn synth_scene_set(seed: u64, params: &SynthParams) -> Result<SynthSceneSet> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = params.num_patches();
    let (lh, lw) = (params.height * params.local_scale, params.width * params.local_scale);
    let region_size = topk_count(n, params.region_fraction);

    let clusters = random_clusters(&mut rng, params.clusters, params.dim)?;

    let alias_pairs: Vec<(usize, usize)> = (0..params.alias_pairs).map(|k| (2 * k, 2 * k + 1)).collect();
    let mut latents: Vec<PlaceLatent> = Vec::with_capacity(params.places);
    for place in 0..params.places {
        let latent = match alias_pairs.iter().find(|&&(_, b)| b == place) {
            Some(&(a, _)) => {
                let original = &latents[a];
                let mut local = original.local.clone();
                for cell in local_cells(params, &original.region) {
                    local.row_mut(cell).assign(&ndarray::Array1::from(unit_vector(&mut rng, params.local_dim)));
                }
                PlaceLatent {
                    cls: original.cls.clone(),
                    patches: original.patches.clone(),
                    region: original.region.clone(),
                    local,
                }
            }
            None => PlaceLatent {
                cls: unit_vector(&mut rng, params.dim),
                patches: unit_rows(&mut rng, n, params.dim),
                region: region_for(&mut rng, n, region_size),
                local: unit_rows(&mut rng, lh * lw, params.local_dim),
            },
        };
        latents.push(latent);
    }

    let mut images = Vec::with_capacity(params.places * params.views_per_place);
    let mut records = Vec::with_capacity(images.capacity());
    for (place, latent) in latents.iter().enumerate() {
        let mut in_region = vec![false; n];
        latent.region.iter().for_each(|&p| in_region[p] = true);
        for view in 0..params.views_per_place {
            let id = image_id(place, view);
            let cls = perturb(&mut rng, &latent.cls, params.noise);
            let patches = perturb_rows(&mut rng, &latent.patches, params.noise);
            let local = perturb_rows(&mut rng, &latent.local, params.noise);
            let attention = Array2::from_shape_fn((params.heads, n), |(_, p)| {
                let base = if in_region[p] { REGION_ATTENTION } else { BACKGROUND_ATTENTION };
                base * (ATTENTION_JITTER * gaussian(&mut rng)).exp()
            });
            records.push(ManifestRecord {
                id: id.clone(),
                role: image_role(&id),
                position: place_position(&mut rng, place),
            });
            images.push(SynthImage {
                id,
                place,
                patches: grid_tensor(patches, params.height, params.width)?,
                cls: Tensor::from_vector(&cls),
                attention: Tensor::from_matrix(&attention),
                local: grid_tensor(local, lh, lw)?,
            });
        }
    }

    Ok(SynthSceneSet {
        summary: SynthSummary {
            seed,
            params: *params,
            alias_pairs,
            regions: latents.into_iter().map(|l| l.region).collect(),
        },
        manifest: DatasetManifest::new(records)?,
        clusters,
        images,
    })
}

fn grid_tensor(rows: Array2<f64>, h: usize, w: usize) -> Result<Tensor> {
    let d = rows.ncols();
    let grid = rows
        .into_shape((h, w, d))
        .map_err(|e| FolError::dim(format!("cannot reshape to {h}x{w}x{d}: {e}")))?;
    Ok(Tensor::from_array3(&grid))
}
