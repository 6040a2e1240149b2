mod common;

use common::metric_oracle::{evaluate as brute, random_case};
use vsdmot::metrics::{evaluate, MatchConfig};
use vsdmot::trackset::TrackSet;

#[test]
fn matches_exhaustive_enumeration_on_small_cases() {
    let cfg = MatchConfig::default();
    let (mut partial, mut switched) = (0, 0);
    for seed in 0..300 {
        let (gt, pred) = random_case(seed);
        let fast = evaluate(&gt, &pred, &cfg).unwrap();
        let slow = brute(&gt, &pred, cfg.iou_threshold, &cfg.alphas);
        let ctx = format!("seed {seed}");
        assert!((fast.hota - slow.hota).abs() < 1e-9, "{ctx} hota {} vs {}", fast.hota, slow.hota);
        assert!((fast.deta - slow.deta).abs() < 1e-9, "{ctx} deta");
        assert!((fast.assa - slow.assa).abs() < 1e-9, "{ctx} assa");
        assert!((fast.mota - slow.mota).abs() < 1e-9, "{ctx} mota {} vs {}", fast.mota, slow.mota);
        assert!((fast.idf1 - slow.idf1).abs() < 1e-9, "{ctx} idf1");
        for (a, b) in fast.per_alpha.iter().zip(&slow.hota_per_alpha) {
            assert!((a.hota - b).abs() < 1e-9, "{ctx} alpha {}", a.alpha);
        }
        partial += usize::from(fast.hota > 0.0 && fast.hota < 1.0);
        switched += usize::from(fast.clear.idsw > 0);
    }
    assert!(partial >= 150, "only {partial} cases have fractional HOTA");
    assert!(switched >= 10, "only {switched} cases contain an id switch");
}

#[test]
fn bounds_and_relabelling() {
    let cfg = MatchConfig::default();
    for seed in 300..400 {
        let (gt, pred) = random_case(seed);
        let r = evaluate(&gt, &pred, &cfg).unwrap();
        for v in [r.hota, r.deta, r.assa, r.idf1] {
            assert!((0.0..=1.0).contains(&v));
        }
        assert!(r.mota <= 1.0);
        let relabelled = evaluate(&gt, &pred.map_ids(|id| 10 - id).unwrap(), &cfg).unwrap();
        assert!((relabelled.hota - r.hota).abs() < 1e-12);
        assert!((relabelled.idf1 - r.idf1).abs() < 1e-12);
    }
}

#[test]
fn removing_a_correct_prediction_never_raises_deta() {
    let cfg = MatchConfig::default();
    for seed in 400..450 {
        let (gt, _) = random_case(seed);
        let full = evaluate(&gt, &gt, &cfg).unwrap();
        let fewer = TrackSet::from_records(gt.records()[1..].to_vec()).unwrap();
        let r = evaluate(&gt, &fewer, &cfg).unwrap();
        assert!(r.deta <= full.deta);
    }
}
