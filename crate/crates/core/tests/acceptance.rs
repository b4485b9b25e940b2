//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use common::{gaussian, pseudocorr_instance, pseudocorr_oracle, pseudocorr_postcheck};
use fol_core::aggregation::{sinkhorn, SinkhornConfig};
use fol_core::eval::{
    ground_truth, recall_at_n, DatasetManifest, GroundTruth, GroundTruthConfig, ManifestRecord, Position, Role,
};
use fol_core::losses::{cel_loss, kl_divergence, pc_loss, sal_loss, CorrespondencePair};
use fol_core::model::{DiscriminativeMask, LocalFeatureMap, LossConfig, MaskKind};
use fol_core::pipeline::{rank_lists, rerank_lists, run_two_stage, TwoStageConfig};
use fol_core::pseudocorr::{build_correspondences, PseudoCorrConfig};
use fol_core::regions::binarize_topk;
use fol_core::rerank::{mutual_nn_matches_with_stats, MaskedLocalSet, RegionView};
use fol_core::synth::{synth_scene_set, SynthParams};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Criterion = (&'static str, fn() -> Outcome);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn random_distribution(rng: &mut ChaCha8Rng, h: usize, w: usize, zero_prob: f64) -> DiscriminativeMask {
    let mut weights: Vec<f64> = (0..h * w)
        .map(|_| if rng.gen_bool(zero_prob) { 0.0 } else { rng.gen_range(0.0..1.0) })
        .collect();
    if weights.iter().all(|&x| x == 0.0) {
        weights[0] = 1.0;
    }
    DiscriminativeMask::from_weights(h, w, weights, MaskKind::Fused).unwrap()
}

fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| gaussian(rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn sinkhorn_correctness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let cfg = SinkhornConfig::default();
    let mut converged = 0;
    let mut worst: f64 = 0.0;
    for _ in 0..500 {
        let n = rng.gen_range(1..=64);
        let c = rng.gen_range(1..=16) + 1;
        let scale = rng.gen_range(0.5..5.0);
        let logits = Array2::from_shape_fn((n, c), |_| scale * gaussian(&mut rng));
        let plan = sinkhorn(&logits, &cfg).unwrap();
        if !plan.converged() {
            continue;
        }
        converged += 1;
        let p = plan.plan();
        for r in p.rows() {
            worst = worst.max((r.sum() - 1.0 / n as f64).abs());
        }
        for col in p.columns() {
            worst = worst.max((col.sum() - 1.0 / c as f64).abs());
        }
    }

    let z = ndarray::array![[1.0, 0.2, -0.5], [0.3, 2.0, 0.1], [-1.0, 0.4, 0.7]];
    let mut reference = z.mapv(f64::exp);
    for _ in 0..100_000 {
        for mut r in reference.rows_mut() {
            let s = r.sum();
            r.mapv_inplace(|x| x / (3.0 * s));
        }
        for mut col in reference.columns_mut() {
            let s = col.sum();
            col.mapv_inplace(|x| x / (3.0 * s));
        }
    }
    let tight = SinkhornConfig {
        max_iterations: 100_000,
        tolerance: 1e-13,
        log_domain: true,
    };
    let small = sinkhorn(&z, &tight).unwrap();
    let diff = small
        .plan()
        .iter()
        .zip(reference.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let elapsed = start.elapsed();
    outcome(
        converged > 0 && worst <= 1e-6 && diff <= 1e-8 && elapsed < Duration::from_secs(5),
        format!(
            "{converged}/500 converged within 100 iterations, max marginal error {worst:.2e} (<= 1e-6); \
             3x3 vs 1e5-iteration reference max diff {diff:.2e} (<= 1e-8); {:.2} s (< 5 s)",
            elapsed.as_secs_f64()
        ),
    )
}

fn loss_kernels() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let cfg = LossConfig::default();
    let mut sal_ok = true;
    for _ in 0..1000 {
        let (h, w) = (rng.gen_range(1..=8), rng.gen_range(1..=8));
        let a = random_distribution(&mut rng, h, w, 0.1);
        let b = random_distribution(&mut rng, h, w, 0.1);
        let ab = sal_loss(&a, &b, &cfg).unwrap();
        let ba = sal_loss(&b, &a, &cfg).unwrap();
        let aa = sal_loss(&a, &a, &cfg).unwrap();
        sal_ok &= ab == ba && aa == 0.0 && ab >= 0.0;
    }

    let mut cel_ok = true;
    for _ in 0..1000 {
        let d = rng.gen_range(2..=16);
        let margin = if rng.gen_bool(0.5) { 1.0 } else { rng.gen_range(0.0..2.0) };
        let c = LossConfig { margin, ..cfg };
        let v = cel_loss(&unit(&mut rng, d), &unit(&mut rng, d), &unit(&mut rng, d), &c).unwrap();
        cel_ok &= (0.0..=margin + 2.0).contains(&v);
    }

    let mut pc_ok = true;
    for _ in 0..1000 {
        let d = rng.gen_range(2..=16);
        let pairs: Vec<CorrespondencePair> = (0..rng.gen_range(1..=10))
            .map(|_| CorrespondencePair {
                feature: unit(&mut rng, d),
                feature_positive: unit(&mut rng, d),
                local: unit(&mut rng, d),
                local_positive: unit(&mut rng, d),
            })
            .collect();
        let v = pc_loss(&pairs).unwrap();
        let same: Vec<CorrespondencePair> = pairs
            .iter()
            .map(|p| CorrespondencePair {
                local_positive: p.local.clone(),
                ..p.clone()
            })
            .collect();
        pc_ok &= (0.0..=2.0).contains(&v) && pc_loss(&same).unwrap().abs() < 1e-12;
    }

    let a = DiscriminativeMask::new(1, 2, vec![0.5, 0.5], MaskKind::Aggregator).unwrap();
    let e = DiscriminativeMask::new(1, 2, vec![0.9, 0.1], MaskKind::Extractor).unwrap();
    let forward = kl_divergence(a.values(), e.values()).unwrap();
    let jeffreys = sal_loss(&a, &e, &cfg).unwrap();
    let by_hand = 0.5 * (5.0f64 / 9.0).ln() + 0.5 * 5.0f64.ln() + 0.9 * (9.0f64 / 5.0).ln() + 0.1 * (0.2f64).ln();
    let pc_case = pc_loss(&[
        CorrespondencePair {
            feature: vec![1.0, 0.0],
            feature_positive: vec![1.0, 0.0],
            local: vec![1.0, 0.0],
            local_positive: vec![1.0, 0.0],
        },
        CorrespondencePair {
            feature: vec![1.0, 0.0],
            feature_positive: vec![0.0, 1.0],
            local: vec![1.0, 0.0],
            local_positive: vec![0.0, 1.0],
        },
    ])
    .unwrap();
    let cel_case = cel_loss(&[1.0, 0.0], &[0.0, 1.0], &[1.0, 0.0], &cfg).unwrap();
    let hand_ok = (forward - 0.5108).abs() < 1e-4
        && (jeffreys - by_hand).abs() < 1e-4
        && (pc_case - 0.2689).abs() < 1e-4
        && (cel_case - 2.0).abs() < 1e-4;
    outcome(
        sal_ok && cel_ok && pc_ok && hand_ok,
        format!(
            "sal symmetric/zero-at-identity/nonnegative on 1000 pairs: {sal_ok}; cel in [0, margin+2]: {cel_ok}; \
             pc in [0,2] and zero at identity: {pc_ok}; hand values: KL(a||e) {forward:.4} (0.5108), \
             Jeffreys {jeffreys:.4} (hand-summed {by_hand:.4}), pc {pc_case:.4} (0.2689), cel {cel_case:.4} (2.0)"
        ),
    )
}

fn algorithm_one() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let cfg = PseudoCorrConfig::default();
    let (mut identical, mut checked, mut pairs) = (0, 0, 0);
    for _ in 0..200 {
        let inst = pseudocorr_instance(&mut rng);
        let got = build_correspondences(&inst.mask, &inst.query, &inst.positive, &inst.q_plan, &inst.p_plan, &cfg).unwrap();
        let want = pseudocorr_oracle(
            inst.mask.values(),
            inst.query.patches(),
            inst.positive.patches(),
            inst.q_plan.plan(),
            inst.p_plan.plan(),
            &cfg,
        );
        identical += usize::from(got == want);
        checked += usize::from(pseudocorr_postcheck(&inst, &got, &cfg).is_ok());
        pairs += got.len();
    }
    outcome(
        identical == 200 && checked == 200,
        format!("{identical}/200 identical to the exhaustive oracle, {checked}/200 pass post-checks, {pairs} pairs emitted"),
    )
}

fn rerank_efficiency() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let (grid, patch_grid, d) = (36, 18, 32);
    let mut inputs = Vec::new();
    for _ in 0..100 {
        let mut side = || {
            let raw = Array2::from_shape_fn((grid * grid, d), |_| gaussian(&mut rng));
            let local = LocalFeatureMap::from_raw(grid, grid, raw).unwrap();
            let mask = binarize_topk(&random_distribution(&mut rng, patch_grid, patch_grid, 0.0), 0.40).unwrap();
            (local, mask)
        };
        inputs.push((side(), side()));
    }

    let (mut masked_cmp, mut dense_cmp) = (0u64, 0u64);
    let start = Instant::now();
    for ((la, ma), (lb, mb)) in &inputs {
        let a = RegionView { local: la, mask: ma }.masked_set().unwrap();
        let b = RegionView { local: lb, mask: mb }.masked_set().unwrap();
        let (_, stats) = mutual_nn_matches_with_stats(&a, &b).unwrap();
        masked_cmp += stats.comparisons;
    }
    let masked_time = start.elapsed();
    let start = Instant::now();
    for ((la, _), (lb, _)) in &inputs {
        let (_, stats) = mutual_nn_matches_with_stats(&MaskedLocalSet::dense(la), &MaskedLocalSet::dense(lb)).unwrap();
        dense_cmp += stats.comparisons;
    }
    let dense_time = start.elapsed();
    let ratio = masked_cmp as f64 / dense_cmp as f64;
    outcome(
        ratio <= 0.17 && masked_time < dense_time,
        format!(
            "comparisons masked/dense = {masked_cmp}/{dense_cmp} = {ratio:.4} (<= 0.17); wall clock masked {:.3} s vs dense {:.3} s",
            masked_time.as_secs_f64(),
            dense_time.as_secs_f64()
        ),
    )
}

fn recall1_over(rankings: &BTreeMap<String, Vec<String>>, truth: &GroundTruth, only: Option<&BTreeSet<String>>) -> f64 {
    let subset: BTreeMap<String, Vec<String>> = rankings
        .iter()
        .filter(|(q, _)| only.is_none_or(|s| s.contains(*q)))
        .map(|(q, r)| (q.clone(), r.clone()))
        .collect();
    recall_at_n(&subset, truth, &[1]).unwrap().recalls[0]
}

fn perceptual_aliasing() -> Outcome {
    let set = synth_scene_set(1, &SynthParams::default()).unwrap();
    let (ranks, reranked) = run_two_stage(&set, &TwoStageConfig::default()).unwrap();
    let truth = ground_truth(&set.manifest, &GroundTruthConfig::default()).unwrap();
    let aliased: BTreeSet<String> = set.aliased_queries().into_iter().collect();
    let (stage1, stage2) = (rank_lists(&ranks), rerank_lists(&reranked));
    let s1_all = recall1_over(&stage1, &truth, None);
    let s2_all = recall1_over(&stage2, &truth, None);
    let s1_alias = recall1_over(&stage1, &truth, Some(&aliased));
    let s2_alias = recall1_over(&stage2, &truth, Some(&aliased));
    outcome(
        s1_all < 1.0 && s2_alias == 1.0 && s2_all >= s1_all,
        format!(
            "64 places x 4 views, 8 aliased pairs ({} aliased queries): stage-one R@1 {s1_all:.4} overall / \
             {s1_alias:.4} aliased; reranked R@1 {s2_all:.4} overall / {s2_alias:.4} aliased",
            aliased.len()
        ),
    )
}

fn topk_binarization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut exact = 0;
    for _ in 0..1000 {
        let (h, w) = (rng.gen_range(1..=40), rng.gen_range(1..=40));
        let mut mask = random_distribution(&mut rng, h, w, 0.2);
        if rng.gen_bool(0.3) {
            // Heavy ties.
            let q: Vec<f64> = mask.values().iter().map(|v| (v * 4.0 * (h * w) as f64).round() + 1.0).collect();
            mask = DiscriminativeMask::from_weights(h, w, q, MaskKind::Fused).unwrap();
        }
        let n = h * w;
        exact += usize::from(binarize_topk(&mask, 0.40).unwrap().popcount() == 2 * n / 5);
    }
    let mut sweep_ok = true;
    for pct in [10usize, 20, 30, 40, 50, 60, 70] {
        for _ in 0..100 {
            let (h, w) = (rng.gen_range(1..=40), rng.gen_range(1..=40));
            let mask = random_distribution(&mut rng, h, w, 0.0);
            let bin = binarize_topk(&mask, pct as f64 / 100.0).unwrap();
            sweep_ok &= bin.popcount() == pct * h * w / 100;
        }
    }
    outcome(
        exact == 1000 && sweep_ok,
        format!("popcount = floor(0.40 n) on {exact}/1000 masks; k sweep 10%..70% exact: {sweep_ok}"),
    )
}

fn record(id: &str, role: Role, position: Position) -> ManifestRecord {
    ManifestRecord {
        id: id.into(),
        role,
        position,
    }
}

fn recall_harness() -> Outcome {
    let mut rankings = BTreeMap::new();
    let mut truth = GroundTruth::new();
    for (q, hit) in [("q1", Some(1)), ("q2", Some(3)), ("q3", Some(7)), ("q4", None)] {
        let list = (1..=12)
            .map(|r| if Some(r) == hit { "db_true".to_string() } else { format!("db_false{r}") })
            .collect();
        rankings.insert(q.to_string(), list);
        truth.insert(q.to_string(), BTreeSet::from(["db_true".to_string()]));
    }
    let report = recall_at_n(&rankings, &truth, &[1, 5, 10]).unwrap();

    let utm = |e, n| Position::Utm { easting: e, northing: n };
    let m = DatasetManifest::new(vec![
        record("q", Role::Query, utm(0.0, 0.0)),
        record("d24", Role::Database, utm(0.0, 24.0)),
        record("d26", Role::Database, utm(0.0, 26.0)),
    ])
    .unwrap();
    let gt = ground_truth(&m, &GroundTruthConfig::default()).unwrap();
    let radius_ok = gt["q"] == BTreeSet::from(["d24".to_string()]);

    let f = Position::Frame;
    let m = DatasetManifest::new(vec![
        record("q", Role::Query, f(100)),
        record("f110", Role::Database, f(110)),
        record("f111", Role::Database, f(111)),
        record("f90", Role::Database, f(90)),
        record("f89", Role::Database, f(89)),
    ])
    .unwrap();
    let gt = ground_truth(&m, &GroundTruthConfig::default()).unwrap();
    let frames_ok = gt["q"] == BTreeSet::from(["f110".to_string(), "f90".to_string()]);
    outcome(
        report.recalls == [0.25, 0.5, 0.75] && radius_ok && frames_ok,
        format!(
            "4-query recall@1/5/10 = {:?}; 24 m positive / 26 m negative: {radius_ok}; \
             +-10 positive / +-11 negative frames: {frames_ok}",
            report.recalls
        ),
    )
}

fn fol(args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_fol"))
        .args(args)
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

fn cli_pipeline(root: &Path, threads: &str) -> bool {
    let p = |s: &str| root.join(s).to_str().unwrap().to_string();
    let (data, agg, idx) = (p("data"), p("agg"), p("idx"));
    let manifest = format!("{data}/manifest.jsonl");
    let clusters = format!("{data}/clusters.folt");
    let steps: Vec<Vec<String>> = vec![
        vec!["synth", "--seed", "1", "--out", &data],
        vec!["aggregate", "--features", &data, "--clusters", &clusters, "--out", &agg],
        vec!["index", "--desc", &agg, "--manifest", &manifest, "--out", &idx],
        vec!["query", "--index", &idx, "--desc", &agg, "--manifest", &manifest, "--out", &p("rank.jsonl")],
        vec!["rerank", "--rank", &p("rank.jsonl"), "--local", &data, "--masks", &agg, "--out", &p("rerank.jsonl")],
        vec!["eval", "--rank", &p("rerank.jsonl"), "--manifest", &manifest, "--out", &p("report.csv")],
    ]
    .into_iter()
    .map(|v| v.into_iter().map(String::from).collect())
    .collect();
    steps.iter().all(|step| {
        let mut args = vec!["--threads", threads];
        args.extend(step.iter().map(String::as_str));
        fol(&args)
    })
}

fn end_to_end_determinism() -> Outcome {
    let runs: Vec<(tempfile::TempDir, &str)> =
        ["1", "4", "4"].into_iter().map(|t| (tempfile::tempdir().unwrap(), t)).collect();
    let all_ran = runs.iter().all(|(dir, t)| cli_pipeline(dir.path(), t));
    if !all_ran {
        return outcome(false, "a pipeline step exited nonzero".into());
    }
    let files = ["rank.jsonl", "rerank.jsonl", "report.csv", "report.json"];
    let mut identical = 0;
    for f in files {
        let base = fs::read(runs[0].0.path().join(f)).unwrap();
        identical += usize::from(runs[1..].iter().all(|(d, _)| fs::read(d.path().join(f)).unwrap() == base));
    }
    outcome(
        identical == files.len(),
        format!(
            "{identical}/{} output files byte-identical across threads=1, threads=4 and a repeated threads=4 run",
            files.len()
        ),
    )
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("sinkhorn-correctness", sinkhorn_correctness),
        ("loss-kernel-suite", loss_kernels),
        ("algorithm1-oracle-equivalence", algorithm_one),
        ("rerank-efficiency", rerank_efficiency),
        ("perceptual-aliasing", perceptual_aliasing),
        ("topk-binarization", topk_binarization),
        ("recall-harness", recall_harness),
        ("end-to-end-determinism", end_to_end_determinism),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        let o = run();
        failed += usize::from(!o.pass);
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
