mod common;

use common::oracle;
use proptest::prelude::*;
use spoofscope::corpus::Label;
use spoofscope::metrics::{eer, min_tdcf, read_scores, write_scores, MetricsReport, ScoreRecord, TdcfCosts};

fn records(bona: &[f64], spoof: &[f64]) -> Vec<ScoreRecord> {
    bona.iter()
        .enumerate()
        .map(|(i, &s)| ScoreRecord::new(format!("b{i}"), Label::Bonafide, s))
        .chain(
            spoof
                .iter()
                .enumerate()
                .map(|(i, &s)| ScoreRecord::new(format!("s{i}"), Label::Spoof, s)),
        )
        .collect()
}

/// Scores on a coarse grid part of the time so that ties are common.
fn scores() -> impl Strategy<Value = Vec<f64>> {
    prop_oneof![
        prop::collection::vec(-5.0f64..5.0, 1..30),
        prop::collection::vec((-8i32..8).prop_map(|k| k as f64 * 0.5), 1..30),
    ]
}

proptest! {
    #[test]
    fn eer_matches_oracle(bona in scores(), spoof in scores()) {
        let r = records(&bona, &spoof);
        let (e, t) = eer(&r).unwrap();
        prop_assert!((e - oracle::eer(&r)).abs() <= 1e-12);
        prop_assert!((0.0..=1.0).contains(&e));
        prop_assert!(t.is_finite());
    }

    #[test]
    fn min_tdcf_matches_oracle_and_is_bounded(bona in scores(), spoof in scores()) {
        let r = records(&bona, &spoof);
        let c = TdcfCosts::default();
        let v = min_tdcf(&r, &c).unwrap();
        prop_assert!((v - oracle::min_tdcf(&r, &c)).abs() <= 1e-12);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&v));
    }

    #[test]
    fn eer_is_invariant_under_increasing_maps(bona in scores(), spoof in scores(), a in 0.1f64..10.0, b in -5.0f64..5.0) {
        let r = records(&bona, &spoof);
        let e = eer(&r).unwrap().0;
        for f in [&(|s: f64| a * s + b) as &dyn Fn(f64) -> f64, &|s: f64| (s / 4.0).tanh(), &|s: f64| s.powi(3)] {
            let mapped: Vec<ScoreRecord> = r.iter().map(|x| ScoreRecord::new(x.utt_id.clone(), x.label, f(x.score))).collect();
            prop_assert!((eer(&mapped).unwrap().0 - e).abs() <= 1e-12);
        }
    }

    #[test]
    fn score_file_round_trip(bona in scores(), spoof in scores()) {
        let r = records(&bona, &spoof);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scores.tsv");
        write_scores(&path, &r).unwrap();
        prop_assert_eq!(read_scores(&path).unwrap(), r);
    }
}

#[test]
fn perfectly_separated_scores() {
    let r = records(&[2.0, 3.0, 4.0], &[-1.0, 0.0, 1.0]);
    assert_eq!(eer(&r).unwrap().0, 0.0);
    assert_eq!(min_tdcf(&r, &TdcfCosts::default()).unwrap(), 0.0);
    // fully inverted scores
    let r = records(&[-1.0, 0.0], &[2.0, 3.0]);
    assert_eq!(eer(&r).unwrap().0, 1.0);
}

#[test]
fn report_recomputed_from_score_file() {
    let r = records(&[0.3, 1.2, -0.4, 2.0, 0.9], &[-1.0, 0.5, -2.2, 0.1]);
    let costs = TdcfCosts::default();
    let report = MetricsReport::compute(&r, &costs, 0.0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scores.tsv");
    write_scores(&path, &r).unwrap();
    let again = MetricsReport::compute(&read_scores(&path).unwrap(), &costs, 0.0).unwrap();
    assert_eq!(again, report);
    assert_eq!(MetricsReport::parse(&report.to_text()).unwrap(), report);
}

#[test]
fn single_class_is_rejected() {
    let r = records(&[0.1, 0.2], &[]);
    assert!(eer(&r).is_err());
    assert!(min_tdcf(&r, &TdcfCosts::default()).is_err());
}
