//! Per-image processing and the two retrieval stages, shared by the CLI
//! and by in-memory experiments.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::aggregation::{aggregate_features, Aggregation, SinkhornConfig};
use crate::error::{FolError, Result};
use crate::eval::Role;
use crate::model::{AttentionStack, ClusterParams, DiscriminativeMask, FeatureMap, GlobalDescriptor, LocalFeatureMap};
use crate::regions::{aggregation_mask, attention_mask, binarize_topk, fuse, DEFAULT_TOPK_FRACTION};
use crate::rerank::{rerank, Candidate, RegionView, RerankConfig};
use crate::retrieval::{DescriptorIndex, DEFAULT_TOPK};
use crate::store::{RankRecord, RerankRecord};
use crate::synth::SynthSceneSet;

/// Aggregation output plus the three patch-grid masks of one image.
#[derive(Debug, Clone)]
pub struct ImageOutputs {
    pub aggregation: Aggregation,
    pub mask_e: DiscriminativeMask,
    pub mask_a: DiscriminativeMask,
    pub mask: DiscriminativeMask,
}

pub fn process_image(
    features: &FeatureMap,
    attention: &AttentionStack,
    clusters: &ClusterParams,
    sinkhorn: &SinkhornConfig,
) -> Result<ImageOutputs> {
    let (h, w) = (features.height(), features.width());
    let aggregation = aggregate_features(features, clusters, sinkhorn)?;
    let mask_e = attention_mask(attention, h, w)?;
    let mask_a = aggregation_mask(&aggregation.assignment, h, w)?;
    let mask = fuse(&mask_e, &mask_a)?;
    Ok(ImageOutputs {
        aggregation,
        mask_e,
        mask_a,
        mask,
    })
}

/// Stage-one search for every query, in query order.
pub fn stage_one(index: &DescriptorIndex, queries: &[(String, GlobalDescriptor)], topk: usize) -> Result<Vec<RankRecord>> {
    let descs: Vec<GlobalDescriptor> = queries.iter().map(|(_, d)| d.clone()).collect();
    let hits = index.query_batch(&descs, topk)?;
    Ok(queries
        .iter()
        .zip(hits)
        .map(|((id, _), results)| RankRecord {
            query: id.clone(),
            results,
        })
        .collect())
}

/// What re-ranking needs from one image.
#[derive(Debug, Clone)]
pub struct RegionData {
    pub local: LocalFeatureMap,
    /// Binary mask on the patch grid.
    pub mask: DiscriminativeMask,
}

impl RegionData {
    pub fn new(local: LocalFeatureMap, fused: &DiscriminativeMask, fraction: f64) -> Result<Self> {
        Ok(RegionData {
            local,
            mask: binarize_topk(fused, fraction)?,
        })
    }

    fn view(&self) -> RegionView<'_> {
        RegionView {
            local: &self.local,
            mask: &self.mask,
        }
    }
}

/// Re-ranks every stage-one list.
pub fn stage_two(
    ranks: &[RankRecord],
    regions: &BTreeMap<String, RegionData>,
    config: &RerankConfig,
) -> Result<Vec<RerankRecord>> {
    let lookup = |id: &str| {
        regions
            .get(id)
            .ok_or_else(|| FolError::invalid(format!("no local features or mask for `{id}`")))
    };
    ranks
        .par_iter()
        .map(|r| {
            let query = lookup(&r.query)?;
            let candidates = r
                .results
                .iter()
                .map(|hit| {
                    Ok(Candidate {
                        id: hit.id.clone(),
                        global_sim: hit.sim,
                        view: lookup(&hit.id)?.view(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(RerankRecord {
                query: r.query.clone(),
                results: rerank(query.view(), &candidates, config)?,
            })
        })
        .collect()
}

pub fn rank_lists(ranks: &[RankRecord]) -> BTreeMap<String, Vec<String>> {
    ranks
        .iter()
        .map(|r| (r.query.clone(), r.results.iter().map(|h| h.id.clone()).collect()))
        .collect()
}

pub fn rerank_lists(ranks: &[RerankRecord]) -> BTreeMap<String, Vec<String>> {
    ranks
        .iter()
        .map(|r| (r.query.clone(), r.results.iter().map(|h| h.id.clone()).collect()))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoStageConfig {
    pub sinkhorn: SinkhornConfig,
    pub topk: usize,
    pub fraction: f64,
    pub rerank: RerankConfig,
}

impl Default for TwoStageConfig {
    fn default() -> Self {
        TwoStageConfig {
            sinkhorn: SinkhornConfig::default(),
            topk: DEFAULT_TOPK,
            fraction: DEFAULT_TOPK_FRACTION,
            rerank: RerankConfig::default(),
        }
    }
}

/// Runs aggregation, masks, stage one and stage two on a synthetic set
/// without touching the filesystem.
pub fn run_two_stage(set: &SynthSceneSet, config: &TwoStageConfig) -> Result<(Vec<RankRecord>, Vec<RerankRecord>)> {
    let processed = set
        .images
        .par_iter()
        .map(|im| {
            let fm = FeatureMap::from_tensors(&im.patches, &im.cls, None)?;
            let att = AttentionStack::from_tensor(&im.attention)?;
            let out = process_image(&fm, &att, &set.clusters, &config.sinkhorn)?;
            let region = RegionData::new(LocalFeatureMap::from_tensor(&im.local)?, &out.mask, config.fraction)?;
            Ok((im.id.clone(), out.aggregation.descriptor, region))
        })
        .collect::<Result<Vec<_>>>()?;

    let roles: BTreeMap<&str, Role> = set.manifest.records.iter().map(|r| (r.id.as_str(), r.role)).collect();
    let mut queries = Vec::new();
    let mut database = Vec::new();
    let mut regions = BTreeMap::new();
    for (id, desc, region) in processed {
        match roles.get(id.as_str()) {
            Some(Role::Query) => queries.push((id.clone(), desc)),
            Some(Role::Database) => database.push((id.clone(), desc)),
            None => return Err(FolError::invalid(format!("`{id}` is not in the manifest"))),
        }
        regions.insert(id, region);
    }
    let index = DescriptorIndex::build(database)?;
    let ranks = stage_one(&index, &queries, config.topk)?;
    let reranked = stage_two(&ranks, &regions, &config.rerank)?;
    Ok((ranks, reranked))
}
