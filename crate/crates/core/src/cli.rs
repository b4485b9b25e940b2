//! Command-line front end for the `fol` binary.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Deserialize;

use crate::aggregation::SinkhornConfig;
use crate::eval::{ground_truth, recall_at_n, DatasetManifest, GroundTruthConfig, Role, DEFAULT_FRAME_WINDOW, DEFAULT_RADIUS_M};
use crate::losses::{cel_loss, mnn_loss, ms_loss, pc_loss, sal_loss, total_loss, CorrespondencePair, LossParts, MsParams};
use crate::model::{ClusterParams, DiscriminativeMask, GlobalDescriptor, LocalFeatureMap, LossConfig};
use crate::pipeline::{process_image, stage_one, stage_two, RegionData};
use crate::pseudocorr::{build_correspondences, PseudoCorrConfig};
use crate::regions::DEFAULT_TOPK_FRACTION;
use crate::rerank::{RerankConfig, Scoring};
use crate::retrieval::{DescriptorIndex, DEFAULT_TOPK};
use crate::store::{self, RankRecord};
use crate::synth::{synth_scene_set, SynthParams};
use crate::tensor::{read_tensor, write_tensor};

#[derive(Debug, Parser)]
#[command(name = "fol", version, about = "Discriminative-region guided visual place recognition")]
pub struct Cli {
    /// Worker threads (0 = all available cores). Results do not depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a seeded synthetic scene set.
    Synth(SynthArgs),
    /// Compute descriptors, assignment plans and masks for every image.
    Aggregate(AggregateArgs),
    /// Build a descriptor index.
    Index(IndexArgs),
    /// Stage-one retrieval.
    Query(QueryArgs),
    /// Stage-two re-ranking inside discriminative regions.
    Rerank(RerankArgs),
    /// Recall@N of a ranking file.
    Eval(EvalArgs),
    /// Evaluate one loss term and print it.
    Loss(LossArgs),
    /// Build pseudo-correspondences between two images.
    Pseudocorr(PseudoCorrArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub places: usize,
    #[arg(long, default_value_t = 4)]
    pub views: usize,
    #[arg(long, default_value_t = 8)]
    pub alias_pairs: usize,
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    #[arg(long, default_value_t = 8)]
    pub height: usize,
    #[arg(long, default_value_t = 8)]
    pub width: usize,
    #[arg(long, default_value_t = 128)]
    pub dim: usize,
    #[arg(long, default_value_t = 64)]
    pub clusters: usize,
    #[arg(long, default_value_t = 2)]
    pub local_scale: usize,
    #[arg(long, default_value_t = 32)]
    pub local_dim: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AggregateArgs {
    /// Dataset directory (or its `images/` subdirectory).
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub clusters: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Expected number of clusters; checked against the clusters file.
    #[arg(long)]
    pub m: Option<usize>,
    /// Expected aggregation feature dimension; checked against the clusters file.
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long, default_value_t = 100)]
    pub sinkhorn_iters: usize,
    #[arg(long, default_value_t = 1e-6)]
    pub sinkhorn_tol: f64,
}

#[derive(Debug, Args)]
pub struct IndexArgs {
    #[arg(long)]
    pub desc: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Only index ids with the database role.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub desc: PathBuf,
    #[arg(long, default_value_t = DEFAULT_TOPK)]
    pub topk: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Only query ids with the query role.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ScoringArg {
    Sum,
    Count,
}

#[derive(Debug, Args)]
pub struct RerankArgs {
    #[arg(long)]
    pub rank: PathBuf,
    /// Directory holding per-image `local.folt` files.
    #[arg(long)]
    pub local: PathBuf,
    /// Aggregation output directory holding per-image `mask.folt` files.
    #[arg(long)]
    pub masks: PathBuf,
    #[arg(long, default_value_t = DEFAULT_TOPK_FRACTION)]
    pub k: f64,
    #[arg(long, value_enum, default_value = "sum")]
    pub scoring: ScoringArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub rank: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
    pub n: Vec<usize>,
    #[arg(long, default_value_t = DEFAULT_RADIUS_M)]
    pub radius: f64,
    #[arg(long, default_value_t = DEFAULT_FRAME_WINDOW)]
    pub frames: u64,
    /// CSV report; a JSON summary is written next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LossKind {
    Sal,
    Cel,
    Pc,
    Ms,
    Mnn,
    Total,
}

#[derive(Debug, Args)]
pub struct LossArgs {
    #[arg(long, value_enum)]
    pub kind: LossKind,
    /// FOLT inputs. sal: mask_a,mask_e. cel: fg,fg_pos,bg. pc: f,f_pos,l,l_pos
    /// (one pair per row). ms: descriptors (one per row). mnn: local_a,local_b.
    #[arg(long, value_delimiter = ',')]
    pub inputs: Vec<PathBuf>,
    /// Class labels for `ms`, one per descriptor row.
    #[arg(long, value_delimiter = ',')]
    pub labels: Vec<u64>,
    /// Loss parts for `total`: ms,mnn,ce,sa,pc.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub parts: Vec<f64>,
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = 1.0)]
    pub beta: f64,
    #[arg(long, default_value_t = 1.0)]
    pub margin: f64,
    #[arg(long, default_value_t = 10.0)]
    pub percentile: f64,
}

#[derive(Debug, Args)]
pub struct PseudoCorrArgs {
    /// Dataset directory (or its `images/` subdirectory).
    #[arg(long)]
    pub features: PathBuf,
    /// Aggregation output directory.
    #[arg(long)]
    pub agg: PathBuf,
    #[arg(long)]
    pub query: String,
    #[arg(long)]
    pub positive: String,
    #[arg(long, default_value_t = 0.8)]
    pub thr1: f64,
    #[arg(long, default_value_t = 0.5)]
    pub thr2: f64,
    #[arg(long, default_value_t = 8)]
    pub n_max: usize,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if cli.threads > 0 {
        pool = pool.num_threads(cli.threads);
    }
    let pool = pool.build().context("building the worker pool")?;
    pool.install(|| match cli.command {
        Command::Synth(a) => synth(a),
        Command::Aggregate(a) => aggregate(a),
        Command::Index(a) => index(a),
        Command::Query(a) => query(a),
        Command::Rerank(a) => rerank(a),
        Command::Eval(a) => eval(a),
        Command::Loss(a) => loss(a),
        Command::Pseudocorr(a) => pseudocorr(a),
    })
}

fn synth(a: SynthArgs) -> anyhow::Result<()> {
    let params = SynthParams {
        places: a.places,
        views_per_place: a.views,
        alias_pairs: a.alias_pairs,
        height: a.height,
        width: a.width,
        dim: a.dim,
        clusters: a.clusters,
        local_scale: a.local_scale,
        local_dim: a.local_dim,
        heads: a.heads,
        noise: a.noise,
        ..Default::default()
    };
    let set = synth_scene_set(a.seed, &params)?;
    store::write_scene_set(&set, &a.out)?;
    eprintln!("wrote {} images to {}", set.images.len(), a.out.display());
    Ok(())
}

fn aggregate(a: AggregateArgs) -> anyhow::Result<()> {
    let clusters = ClusterParams::from_tensor(&read_tensor(&a.clusters)?)
        .with_context(|| format!("reading clusters from {}", a.clusters.display()))?;
    if let Some(m) = a.m {
        ensure!(m == clusters.num_clusters(), "--m {m} but {} holds {} clusters", a.clusters.display(), clusters.num_clusters());
    }
    if let Some(d) = a.dim {
        ensure!(d == clusters.dim(), "--dim {d} but {} expects dimension {}", a.clusters.display(), clusters.dim());
    }
    let sinkhorn = SinkhornConfig {
        max_iterations: a.sinkhorn_iters,
        tolerance: a.sinkhorn_tol,
        ..Default::default()
    };
    let root = store::images_root(&a.features);
    let ids = store::list_ids(&root)?;
    ensure!(!ids.is_empty(), "no image directories under {}", root.display());

    let outputs = ids
        .par_iter()
        .map(|id| {
            let dir = root.join(id);
            let fm = store::load_feature_map(&dir)?;
            let att = store::load_attention(&dir)?;
            process_image(&fm, &att, &clusters, &sinkhorn).with_context(|| format!("aggregating `{id}`"))
        })
        .collect::<anyhow::Result<Vec<_>>>()?;

    let mut unconverged = 0;
    for (id, out) in ids.iter().zip(&outputs) {
        let dir = a.out.join(id);
        store::create_dir(&dir)?;
        store::write_descriptor(&out.aggregation.descriptor, &dir.join(store::DESCRIPTOR_FILE))?;
        write_tensor(
            &crate::tensor::Tensor::from_matrix(out.aggregation.assignment.plan()),
            dir.join(store::ASSIGNMENT_FILE),
        )?;
        store::write_mask(&out.mask_e, &dir.join(store::MASK_E_FILE))?;
        store::write_mask(&out.mask_a, &dir.join(store::MASK_A_FILE))?;
        store::write_mask(&out.mask, &dir.join(store::MASK_FILE))?;
        if !out.aggregation.assignment.converged() {
            unconverged += 1;
        }
    }
    eprintln!(
        "aggregated {} images into {} ({unconverged} Sinkhorn runs hit the iteration cap)",
        ids.len(),
        a.out.display()
    );
    Ok(())
}

fn role_filter(manifest: Option<&Path>, role: Role) -> anyhow::Result<Option<Vec<String>>> {
    let Some(path) = manifest else {
        return Ok(None);
    };
    let m = DatasetManifest::load(path)?;
    Ok(Some(m.ids_with_role(role).map(str::to_string).collect()))
}

fn load_descriptors(dir: &Path, only: Option<Vec<String>>) -> anyhow::Result<Vec<(String, GlobalDescriptor)>> {
    let ids = match only {
        Some(mut ids) => {
            ids.sort();
            ids
        }
        None => store::list_ids(dir)?,
    };
    ensure!(!ids.is_empty(), "no descriptors selected under {}", dir.display());
    ids.par_iter()
        .map(|id| Ok((id.clone(), store::load_descriptor(&dir.join(id))?)))
        .collect()
}

fn index(a: IndexArgs) -> anyhow::Result<()> {
    let entries = load_descriptors(&a.desc, role_filter(a.manifest.as_deref(), Role::Database)?)?;
    let n = entries.len();
    DescriptorIndex::build(entries)?.save(&a.out)?;
    eprintln!("indexed {n} descriptors into {}", a.out.display());
    Ok(())
}

fn query(a: QueryArgs) -> anyhow::Result<()> {
    let index = DescriptorIndex::load(&a.index)?;
    let queries = load_descriptors(&a.desc, role_filter(a.manifest.as_deref(), Role::Query)?)?;
    let ranks = stage_one(&index, &queries, a.topk)?;
    store::write_jsonl(&a.out, &ranks)?;
    eprintln!("ranked {} queries into {}", ranks.len(), a.out.display());
    Ok(())
}

fn rerank(a: RerankArgs) -> anyhow::Result<()> {
    let ranks: Vec<RankRecord> = store::read_jsonl(&a.rank)?;
    ensure!(!ranks.is_empty(), "{} holds no queries", a.rank.display());
    let mut ids: Vec<&str> = ranks
        .iter()
        .flat_map(|r| std::iter::once(r.query.as_str()).chain(r.results.iter().map(|h| h.id.as_str())))
        .collect();
    ids.sort_unstable();
    ids.dedup();
    let local_root = store::images_root(&a.local);
    let regions = ids
        .par_iter()
        .map(|&id| {
            let local = store::load_local(&local_root.join(id))?;
            let mask = store::load_mask(&a.masks.join(id), store::MASK_FILE)?;
            Ok((id.to_string(), RegionData::new(local, &mask, a.k)?))
        })
        .collect::<anyhow::Result<BTreeMap<_, _>>>()?;
    let config = RerankConfig {
        scoring: match a.scoring {
            ScoringArg::Sum => Scoring::SimilaritySum,
            ScoringArg::Count => Scoring::MatchCount,
        },
    };
    let reranked = stage_two(&ranks, &regions, &config)?;
    store::write_jsonl(&a.out, &reranked)?;
    eprintln!("re-ranked {} queries into {}", reranked.len(), a.out.display());
    Ok(())
}

#[derive(Deserialize)]
struct AnyRankLine {
    query: String,
    results: Vec<AnyHit>,
}

#[derive(Deserialize)]
struct AnyHit {
    id: String,
}

fn eval(a: EvalArgs) -> anyhow::Result<()> {
    let lines: Vec<AnyRankLine> = store::read_jsonl(&a.rank)?;
    let mut rankings = BTreeMap::new();
    for l in lines {
        let ids = l.results.into_iter().map(|h| h.id).collect();
        if rankings.insert(l.query.clone(), ids).is_some() {
            bail!("query `{}` appears twice in {}", l.query, a.rank.display());
        }
    }
    let manifest = DatasetManifest::load(&a.manifest)?;
    let cfg = GroundTruthConfig {
        radius_m: a.radius,
        frame_window: a.frames,
    };
    let truth = ground_truth(&manifest, &cfg)?;
    let report = recall_at_n(&rankings, &truth, &a.n)?;
    store::write_text(&a.out, &report.to_csv())?;
    store::write_text(&a.out.with_extension("json"), &report.to_json())?;
    print!("{}", report.to_csv());
    Ok(())
}

fn read_vector(path: &Path) -> anyhow::Result<Vec<f64>> {
    Ok(read_tensor(path)?.to_vector().to_vec())
}

fn read_rows(path: &Path) -> anyhow::Result<Vec<Vec<f64>>> {
    let t = read_tensor(path)?;
    Ok(t.to_matrix()?.rows().into_iter().map(|r| r.to_vec()).collect())
}

fn expect_inputs(a: &LossArgs, n: usize, what: &str) -> anyhow::Result<()> {
    ensure!(
        a.inputs.len() == n,
        "--kind {:?} takes {n} inputs ({what}), got {}",
        a.kind,
        a.inputs.len()
    );
    Ok(())
}

fn loss(a: LossArgs) -> anyhow::Result<()> {
    let cfg = LossConfig {
        alpha: a.alpha,
        beta: a.beta,
        margin: a.margin,
        smoothing_percentile: a.percentile,
    };
    cfg.validate()?;
    let value = match a.kind {
        LossKind::Sal => {
            expect_inputs(&a, 2, "mask_a,mask_e")?;
            let agg = DiscriminativeMask::from_tensor(&read_tensor(&a.inputs[0])?)?;
            let ext = DiscriminativeMask::from_tensor(&read_tensor(&a.inputs[1])?)?;
            sal_loss(&agg, &ext, &cfg)?
        }
        LossKind::Cel => {
            expect_inputs(&a, 3, "fg,fg_pos,bg")?;
            let v: Vec<Vec<f64>> = a.inputs.iter().map(|p| read_vector(p)).collect::<anyhow::Result<_>>()?;
            cel_loss(&v[0], &v[1], &v[2], &cfg)?
        }
        LossKind::Pc => {
            expect_inputs(&a, 4, "f,f_pos,l,l_pos")?;
            let m: Vec<Vec<Vec<f64>>> = a.inputs.iter().map(|p| read_rows(p)).collect::<anyhow::Result<_>>()?;
            ensure!(m.iter().all(|x| x.len() == m[0].len()), "pc inputs need the same number of rows");
            let pairs: Vec<CorrespondencePair> = (0..m[0].len())
                .map(|i| CorrespondencePair {
                    feature: m[0][i].clone(),
                    feature_positive: m[1][i].clone(),
                    local: m[2][i].clone(),
                    local_positive: m[3][i].clone(),
                })
                .collect();
            pc_loss(&pairs)?
        }
        LossKind::Ms => {
            expect_inputs(&a, 1, "descriptors")?;
            let descs = read_rows(&a.inputs[0])?
                .iter()
                .map(|r| GlobalDescriptor::from_unnormalized(r))
                .collect::<crate::Result<Vec<_>>>()?;
            let ms = ms_loss(&descs, &a.labels, &MsParams::default())?;
            if ms.degenerate {
                eprintln!("warning: single-class batch, multi-similarity loss is undefined");
            }
            ms.value
        }
        LossKind::Mnn => {
            expect_inputs(&a, 2, "local_a,local_b")?;
            let x = LocalFeatureMap::from_tensor(&read_tensor(&a.inputs[0])?)?;
            let y = LocalFeatureMap::from_tensor(&read_tensor(&a.inputs[1])?)?;
            mnn_loss(&x, &y)?
        }
        LossKind::Total => {
            ensure!(a.parts.len() == 5, "--kind total needs --parts ms,mnn,ce,sa,pc");
            let p = &a.parts;
            total_loss(
                &LossParts {
                    ms: p[0],
                    mnn: p[1],
                    ce: p[2],
                    sa: p[3],
                    pc: p[4],
                },
                &cfg,
            )?
        }
    };
    println!("{value}");
    Ok(())
}

fn pseudocorr(a: PseudoCorrArgs) -> anyhow::Result<()> {
    let root = store::images_root(&a.features);
    let q = store::load_feature_map(&root.join(&a.query))?;
    let p = store::load_feature_map(&root.join(&a.positive))?;
    let q_plan = store::load_assignment(&a.agg.join(&a.query))?;
    let p_plan = store::load_assignment(&a.agg.join(&a.positive))?;
    let mask = store::load_mask(&a.agg.join(&a.query), store::MASK_FILE)?;
    let cfg = PseudoCorrConfig {
        thr1: a.thr1,
        thr2: a.thr2,
        n_max: a.n_max,
    };
    let pairs = build_correspondences(&mask, &q, &p, &q_plan, &p_plan, &cfg)?;
    store::write_jsonl(&a.out, &pairs)?;
    eprintln!("wrote {} correspondences to {}", pairs.len(), a.out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn parses_defaults() {
        let cli = Cli::try_parse_from(["fol", "rerank", "--rank", "r", "--local", "l", "--masks", "m", "--out", "o"]).unwrap();
        match cli.command {
            Command::Rerank(r) => assert_eq!(r.k, 0.40),
            _ => unreachable!(),
        }
        let cli = Cli::try_parse_from(["fol", "eval", "--rank", "r", "--manifest", "m", "--out", "o"]).unwrap();
        match cli.command {
            Command::Eval(e) => assert_eq!(e.n, vec![1, 5, 10]),
            _ => unreachable!(),
        }
        assert!(Cli::try_parse_from(["fol", "frobnicate"]).is_err());
        assert!(Cli::try_parse_from(["fol", "synth", "--seed", "1", "--bogus", "--out", "x"]).is_err());
    }
}
