use proptest::prelude::*;

use super::*;
use crate::dataset::{ClassInfo, ImageId};
use crate::detector::DetectorConfig;
use crate::saan::Fusion;

fn bx(x: f64, y: f64, s: f64) -> BBox {
    BBox::new(x, y, x + s, y + s).unwrap()
}

fn det(image: u32, score: f64, b: BBox) -> ScoredBox {
    ScoredBox {
        image: ImageId(image),
        score,
        bbox: b,
    }
}

fn gt(image: u32, b: BBox) -> GtBox {
    GtBox {
        image: ImageId(image),
        bbox: b,
        masked: false,
    }
}

/// Mean over ground truths of the best precision reached at or after each
/// true positive; unmatched ground truths contribute zero.
fn ap_oracle(hits: &[bool], num_gt: usize) -> f64 {
    let mut tp = 0;
    let prec: Vec<f64> = hits
        .iter()
        .enumerate()
        .map(|(i, &h)| {
            tp += h as usize;
            tp as f64 / (i + 1) as f64
        })
        .collect();
    let mut total = 0.0;
    for (i, &h) in hits.iter().enumerate() {
        if h {
            total += prec[i..].iter().copied().fold(0.0, f64::max);
        }
    }
    total / num_gt as f64
}

#[test]
fn worked_example() {
    let gts = [gt(0, bx(0.0, 0.0, 10.0)), gt(0, bx(50.0, 50.0, 10.0))];
    let dets = [
        det(0, 0.9, bx(0.0, 0.0, 10.0)),
        det(0, 0.8, bx(20.0, 20.0, 10.0)),
        det(0, 0.7, bx(51.0, 50.0, 10.0)),
    ];
    let r = compute_ap(&dets, &gts, 0.5).unwrap();
    approx::assert_abs_diff_eq!(r.ap, 0.5 + 0.5 * 2.0 / 3.0, epsilon = 1e-12);
    approx::assert_abs_diff_eq!(r.ap11, (6.0 + 5.0 * 2.0 / 3.0) / 11.0, epsilon = 1e-12);
    assert_eq!(r.pr.len(), 3);
    assert_eq!(r.get(ApMethod::ElevenPoint), r.ap11);
}

#[test]
fn duplicates_are_false_positives() {
    let gts = [gt(0, bx(0.0, 0.0, 10.0))];
    let dets = [det(0, 0.9, bx(0.0, 0.0, 10.0)), det(0, 0.95, bx(0.5, 0.0, 10.0))];
    let r = compute_ap(&dets, &gts, 0.5).unwrap();
    assert_eq!(r.matches[0].detection, 1);
    assert_eq!(r.matches[0].outcome, Outcome::TruePositive);
    assert_eq!(r.matches[1].outcome, Outcome::FalsePositive);
    approx::assert_abs_diff_eq!(r.ap, 1.0, epsilon = 1e-12);
}

#[test]
fn detections_only_match_their_own_image() {
    let gts = [gt(0, bx(0.0, 0.0, 10.0))];
    let r = compute_ap(&[det(1, 0.9, bx(0.0, 0.0, 10.0))], &gts, 0.5).unwrap();
    assert_eq!(r.ap, 0.0);
}

#[test]
fn masked_objects_are_neither_hits_nor_misses() {
    let mut m = gt(0, bx(40.0, 40.0, 10.0));
    m.masked = true;
    let gts = [gt(0, bx(0.0, 0.0, 10.0)), m];
    let dets = [det(0, 0.9, bx(40.0, 40.0, 10.0)), det(0, 0.5, bx(0.0, 0.0, 10.0))];
    let r = compute_ap(&dets, &gts, 0.5).unwrap();
    assert_eq!(r.num_gt, 1);
    assert_eq!(r.matches[0].outcome, Outcome::Ignored);
    assert_eq!(r.ap, 1.0);
    assert!(compute_ap(&dets, &[m], 0.5).is_none());
}

#[test]
fn empty_cases() {
    assert!(compute_ap(&[det(0, 0.5, bx(0.0, 0.0, 5.0))], &[], 0.5).is_none());
    let r = compute_ap(&[], &[gt(0, bx(0.0, 0.0, 5.0))], 0.5).unwrap();
    assert_eq!((r.ap, r.ap11), (0.0, 0.0));
}

#[test]
fn iou_threshold_is_inclusive() {
    // 10x10 vs 10x15 sharing 100 px: IoU exactly 2/3
    let g = [gt(0, BBox::new(0.0, 0.0, 10.0, 15.0).unwrap())];
    let d = [det(0, 1.0, bx(0.0, 0.0, 10.0))];
    assert_eq!(compute_ap(&d, &g, 2.0 / 3.0).unwrap().ap, 1.0);
    assert_eq!(compute_ap(&d, &g, 0.67).unwrap().ap, 0.0);
}

#[test]
fn envelope_is_non_increasing() {
    let env = interpolated(&[(0.1, 0.5), (0.2, 0.8), (0.3, 0.4)]);
    assert_eq!(env, vec![(0.1, 0.8), (0.2, 0.8), (0.3, 0.4)]);
}

/// Detections that exactly coincide with a free ground truth or sit far
/// from every object, in strictly decreasing score order.
fn scenario(hits: &[bool], extra_gt: usize) -> (Vec<ScoredBox>, Vec<GtBox>) {
    let mut gts = Vec::new();
    let mut dets = Vec::new();
    for (i, &h) in hits.iter().enumerate() {
        let score = 1.0 - i as f64 / (hits.len() + 1) as f64;
        if h {
            let b = bx(20.0 * gts.len() as f64, 0.0, 10.0);
            gts.push(gt(0, b));
            dets.push(det(0, score, b));
        } else {
            dets.push(det(0, score, bx(20.0 * i as f64, 500.0, 10.0)));
        }
    }
    for j in 0..extra_gt {
        gts.push(gt(0, bx(20.0 * j as f64, 1000.0, 10.0)));
    }
    (dets, gts)
}

proptest! {
    #[test]
    fn matches_brute_force_oracle(hits in prop::collection::vec(any::<bool>(), 0..30), extra in 0usize..5) {
        let n_tp = hits.iter().filter(|h| **h).count();
        prop_assume!(n_tp + extra > 0);
        let (dets, gts) = scenario(&hits, extra);
        let r = compute_ap(&dets, &gts, 0.5).unwrap();
        prop_assert!((r.ap - ap_oracle(&hits, n_tp + extra)).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&r.ap) && (0.0..=1.0).contains(&r.ap11));
    }

    #[test]
    fn invariant_under_monotone_rescoring(hits in prop::collection::vec(any::<bool>(), 1..20), a in 0.1f64..5.0, b in -3.0f64..3.0) {
        prop_assume!(hits.iter().any(|h| *h));
        let (dets, gts) = scenario(&hits, 1);
        let shifted: Vec<ScoredBox> = dets.iter().map(|d| ScoredBox { score: (a * d.score + b).exp(), ..*d }).collect();
        let r1 = compute_ap(&dets, &gts, 0.5).unwrap();
        let r2 = compute_ap(&shifted, &gts, 0.5).unwrap();
        prop_assert_eq!(r1.ap, r2.ap);
        prop_assert_eq!(r1.ap11, r2.ap11);
    }

    #[test]
    fn permuting_input_order_keeps_ap(hits in prop::collection::vec(any::<bool>(), 1..20), rot in 0usize..20) {
        prop_assume!(hits.iter().any(|h| *h));
        let (mut dets, gts) = scenario(&hits, 0);
        let r1 = compute_ap(&dets, &gts, 0.5).unwrap().ap;
        let k = rot % dets.len();
        dets.rotate_left(k);
        prop_assert_eq!(r1, compute_ap(&dets, &gts, 0.5).unwrap().ap);
    }
}

fn tiny_model() -> FewShotModel {
    let classes = vec![
        ClassInfo {
            id: ClassId(1),
            name: "disk".into(),
        },
        ClassInfo {
            id: ClassId(2),
            name: "square".into(),
        },
    ];
    FewShotModel::new(DetectorConfig::tiny(), Fusion::None, classes, 0).unwrap()
}

#[test]
fn score_builds_per_class_reports() {
    let index = crate::dataset::testutil::grid_index(2, &[vec![(1, 1), (2, 1)], vec![(1, 1)]]);
    let model = tiny_model();
    let boxes: Vec<_> = index.annotations().to_vec();
    let dets = vec![
        ImageDetections {
            image: ImageId(0),
            detections: boxes
                .iter()
                .filter(|a| a.image == ImageId(0) && a.class == ClassId(1))
                .map(|a| Detection {
                    class: ClassId(1),
                    score: 0.9,
                    bbox: a.bbox,
                })
                .collect(),
        },
        ImageDetections {
            image: ImageId(1),
            detections: vec![],
        },
    ];
    let ctx = EvalContext {
        method: "saan".into(),
        novel: BTreeSet::from([ClassId(2)]),
        ..EvalContext::default()
    };
    let report = score(&model, &index, &dets, &ctx, &EvalOptions::default());
    assert_eq!(report.images, 2);
    let disk = report.class(ClassId(1)).unwrap();
    assert_eq!((disk.num_gt, disk.num_detections), (2, 1));
    approx::assert_abs_diff_eq!(disk.ap.unwrap(), 0.5, epsilon = 1e-12);
    let square = report.class(ClassId(2)).unwrap();
    assert!(square.novel);
    assert_eq!(square.ap, Some(0.0));
    assert_eq!(report.novel_ap(), Some(0.0));

    let json = serde_json::to_string(&report).unwrap();
    let back: EvalReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back, report);
}

#[test]
fn grid_cells_and_csv() {
    let spec = GridSpec::one_novel_each(&[ClassId(1), ClassId(2)], vec![Method::Saan, Method::FrcnFt]);
    let cells = spec.cells();
    assert_eq!(cells.len(), 2 * 2 * 5);
    assert_eq!(
        GridSpec::proportion_sweep(vec![ClassId(1)]).cells().len(),
        5 * Proportion::SWEEP.len()
    );
    for m in Method::ALL {
        assert_eq!(m.to_string().parse::<Method>().unwrap(), m);
    }

    let index = crate::dataset::testutil::grid_index(2, &[vec![(1, 1), (2, 1)]]);
    let model = tiny_model();
    let mut calls = 0;
    let results = run_experiment_grid(&spec, |cell| {
        calls += 1;
        if cell.k == 3 {
            return Err(crate::error::Error::Evaluation("boom".into()));
        }
        let ctx = EvalContext {
            k: Some(cell.k),
            novel: cell.novel.iter().copied().collect(),
            ..EvalContext::default()
        };
        Ok(score(&model, &index, &[], &ctx, &EvalOptions::default()))
    });
    assert_eq!(calls, 20);
    assert_eq!(results.iter().filter(|r| r.error.is_some()).count(), 4);

    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("grid.csv");
    write_csv(&csv, &results, &index).unwrap();
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("method,novel_class,k,rho,class,AP,seed,AP11"));
    assert_eq!(lines.count(), 16 * 2);
    let json = dir.path().join("grid.json");
    write_reports(&json, &results).unwrap();
    assert_eq!(read_reports(&json).unwrap(), results);
}
