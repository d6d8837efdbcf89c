use fasq_core::evalkit::{
    auc, candidate_thresholds, hter, hter_point, mean_row, roc_points, tpr_at_fpr, HterPolicy, MetricReport, EvalConfig, ScoreSet,
};
use proptest::prelude::*;

mod oracles;
use oracles::{auc_oracle, eer_oracle, fixed_oracle, tpr_oracle};

fn set(live: &[f64], spoof: &[f64]) -> ScoreSet {
    let scores = live.iter().chain(spoof).copied().collect();
    let labels = live.iter().map(|_| false).chain(spoof.iter().map(|_| true)).collect();
    ScoreSet::new(scores, labels, "d").unwrap()
}

fn score_sets() -> impl Strategy<Value = ScoreSet> {
    let tie_heavy = prop::collection::vec((0u8..5, any::<bool>()), 2..=64)
        .prop_map(|v| v.into_iter().map(|(q, l)| (q as f64 / 4.0, l)).collect::<Vec<_>>());
    let continuous = prop::collection::vec((0.0f64..1.0, any::<bool>()), 2..=64);
    prop_oneof![tie_heavy, continuous].prop_map(|mut v| {
        v[0].1 = false;
        v[1].1 = true;
        let (scores, labels) = v.into_iter().unzip();
        ScoreSet::new(scores, labels, "p").unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn auc_matches_pairwise_oracle(s in score_sets()) {
        prop_assert_eq!(auc(&s).unwrap(), auc_oracle(&s));
    }

    #[test]
    fn eer_hter_matches_sweep_oracle(s in score_sets()) {
        let op = hter_point(&s, HterPolicy::EerThreshold).unwrap();
        let (t, h) = eer_oracle(&s);
        prop_assert_eq!(op.threshold, t);
        prop_assert_eq!(op.hter, h);
    }

    #[test]
    fn fixed_hter_matches_oracle(s in score_sets(), tau in 0.0f64..1.0) {
        prop_assert_eq!(hter(&s, HterPolicy::Fixed(tau)).unwrap(), fixed_oracle(&s, tau));
    }

    #[test]
    fn step_tpr_matches_oracle(s in score_sets(), target in prop_oneof![Just(0.01), 0.0f64..0.5]) {
        prop_assert_eq!(tpr_at_fpr(&s, target, false).unwrap(), tpr_oracle(&s, target));
    }

    #[test]
    fn interpolated_tpr_brackets_step_value(s in score_sets()) {
        let step = tpr_at_fpr(&s, 0.01, false).unwrap();
        let interp = tpr_at_fpr(&s, 0.01, true).unwrap();
        prop_assert!(interp >= step && interp <= 1.0);
    }

    #[test]
    fn metrics_invariant_under_cubing(s in score_sets()) {
        let cubed = ScoreSet::new(s.scores.iter().map(|x| x.powi(3)).collect(), s.labels.clone(), "c").unwrap();
        // cubing is strictly increasing and keeps ties tied, so ranks are preserved
        prop_assert_eq!(auc(&s).unwrap(), auc(&cubed).unwrap());
        prop_assert_eq!(hter(&s, HterPolicy::EerThreshold).unwrap(), hter(&cubed, HterPolicy::EerThreshold).unwrap());
        prop_assert_eq!(tpr_at_fpr(&s, 0.01, false).unwrap(), tpr_at_fpr(&cubed, 0.01, false).unwrap());
        prop_assert_eq!(roc_points(&s).unwrap(), roc_points(&cubed).unwrap());
    }

    #[test]
    fn candidates_are_sorted_and_cover_scores(s in score_sets()) {
        let c = candidate_thresholds(&s);
        prop_assert!(c.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(s.scores.iter().all(|x| c.contains(x)));
    }

    #[test]
    fn mean_row_is_arithmetic_mean(sets in prop::collection::vec(score_sets(), 1..5)) {
        let report = MetricReport::from_sets(&sets, &EvalConfig::default()).unwrap();
        let k = report.rows.len() as f64;
        let h: f64 = report.rows.iter().map(|r| r.hter).sum::<f64>() / k;
        let a: f64 = report.rows.iter().map(|r| r.auc).sum::<f64>() / k;
        prop_assert!((report.mean.hter - h).abs() <= 1e-9);
        prop_assert!((report.mean.auc - a).abs() <= 1e-9);
    }
}

#[test]
fn auc_hand_values() {
    assert_eq!(auc(&set(&[0.1, 0.2], &[0.8, 0.9])).unwrap(), 1.0);
    assert_eq!(auc(&set(&[0.2, 0.4], &[0.3, 0.9])).unwrap(), 0.75);
    assert_eq!(auc(&set(&[0.5, 0.5], &[0.5, 0.5])).unwrap(), 0.5);
}

#[test]
fn hter_hand_values() {
    let sep = set(&[0.1, 0.2], &[0.8, 0.9]);
    assert_eq!(hter(&sep, HterPolicy::EerThreshold).unwrap(), 0.0);
    assert_eq!(hter(&sep, HterPolicy::Fixed(0.5)).unwrap(), 0.0);
    assert_eq!(hter(&set(&[0.6], &[0.4]), HterPolicy::Fixed(0.5)).unwrap(), 1.0);
    let mixed = set(&[0.2, 0.4], &[0.3, 0.9]);
    assert_eq!(hter(&mixed, HterPolicy::EerThreshold).unwrap(), eer_oracle(&mixed).1);
    // FAR = FRR = 1/2 first occurs at the midpoint 0.35
    let op = hter_point(&mixed, HterPolicy::EerThreshold).unwrap();
    assert_eq!((op.threshold, op.far, op.frr, op.hter), (0.35, 0.5, 0.5, 0.5));
}

#[test]
fn tpr_hand_values() {
    assert_eq!(tpr_at_fpr(&set(&[0.1, 0.2], &[0.8, 0.9]), 0.01, true).unwrap(), 1.0);
    assert_eq!(tpr_at_fpr(&set(&[0.8, 0.9], &[0.1, 0.2]), 0.01, false).unwrap(), 0.0);
}

#[test]
fn single_class_sets_are_rejected() {
    let s = ScoreSet::new(vec![0.1, 0.2], vec![true, true], "x").unwrap();
    assert!(auc(&s).is_err());
    assert!(hter(&s, HterPolicy::EerThreshold).is_err());
    assert!(tpr_at_fpr(&s, 0.01, true).is_err());
}

#[test]
fn mean_of_one_domain_is_that_domain() {
    let s = set(&[0.2, 0.4], &[0.3, 0.9]);
    let r = MetricReport::from_sets(std::slice::from_ref(&s), &EvalConfig::default()).unwrap();
    assert_eq!(r.rows[0].hter, r.mean.hter);
    assert_eq!(r.rows[0].auc, r.mean.auc);
    let m = mean_row(&[r.rows[0].clone(), r.rows[0].clone()], "m");
    assert_eq!(m.auc, r.rows[0].auc);
}

#[test]
fn empty_domains_are_skipped_with_a_warning() {
    let empty = ScoreSet::new(vec![], vec![], "empty").unwrap();
    let r = MetricReport::from_sets(&[empty, set(&[0.1], &[0.9])], &EvalConfig::default()).unwrap();
    assert_eq!(r.rows.len(), 1);
    assert_eq!(r.warnings.len(), 1);
}
