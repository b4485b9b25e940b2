mod common;

use common::{pseudocorr_instance, pseudocorr_oracle, pseudocorr_postcheck};
use fol_core::pseudocorr::{build_correspondences, PseudoCorrConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn run(inst: &common::PseudoCorrInstance, cfg: &PseudoCorrConfig) -> Vec<fol_core::pseudocorr::Correspondence> {
    build_correspondences(&inst.mask, &inst.query, &inst.positive, &inst.q_plan, &inst.p_plan, cfg).unwrap()
}

#[test]
fn matches_exhaustive_oracle_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let cfg = PseudoCorrConfig::default();
    let mut emitted = 0;
    for case in 0..300 {
        let inst = pseudocorr_instance(&mut rng);
        let got = run(&inst, &cfg);
        let want = pseudocorr_oracle(
            inst.mask.values(),
            inst.query.patches(),
            inst.positive.patches(),
            inst.q_plan.plan(),
            inst.p_plan.plan(),
            &cfg,
        );
        assert_eq!(got, want, "case {case}");
        pseudocorr_postcheck(&inst, &got, &cfg).unwrap();
        emitted += got.len();
    }
    assert!(emitted > 100, "instances too easy to reject: {emitted} pairs");
}

#[test]
fn oracle_agreement_holds_for_other_thresholds() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for (thr1, thr2, n_max) in [(0.5, 0.9, 3), (0.95, 0.2, 20), (1.0, 0.5, 1)] {
        let cfg = PseudoCorrConfig { thr1, thr2, n_max };
        for _ in 0..100 {
            let inst = pseudocorr_instance(&mut rng);
            let got = run(&inst, &cfg);
            let want = pseudocorr_oracle(
                inst.mask.values(),
                inst.query.patches(),
                inst.positive.patches(),
                inst.q_plan.plan(),
                inst.p_plan.plan(),
                &cfg,
            );
            assert_eq!(got, want);
        }
    }
}

#[test]
fn repeated_runs_are_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inst = pseudocorr_instance(&mut rng);
    let cfg = PseudoCorrConfig::default();
    assert_eq!(run(&inst, &cfg), run(&inst, &cfg));
}
