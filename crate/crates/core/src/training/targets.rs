//! Anchor and RoI label assignment with ignore regions.

use rand::seq::SliceRandom;

use crate::detector::boxes::{iou, BoxCoder, Corners};
use crate::rng::Rng;

/// Ground truth of one query image. Labels are 1-based head indices.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Targets {
    pub boxes: Vec<(usize, Corners)>,
    /// Masked objects: neither positives nor negatives.
    pub ignore: Vec<Corners>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AnchorSample {
    /// `(anchor index, objectness target)`.
    pub labels: Vec<(usize, f64)>,
    /// `(anchor index, encoded deltas)` of the positives.
    pub regression: Vec<(usize, [f64; 4])>,
}

fn best_match(b: &Corners, gt: &[(usize, Corners)]) -> Option<(usize, f64)> {
    gt.iter()
        .enumerate()
        .map(|(j, (_, g))| (j, iou(b, g)))
        .fold(None, |acc, (j, v)| match acc {
            Some((_, best)) if best >= v => acc,
            _ => Some((j, v)),
        })
}

fn max_ignore_iou(b: &Corners, ignore: &[Corners]) -> f64 {
    ignore.iter().map(|g| iou(b, g)).fold(0.0, f64::max)
}

/// Anchors with IoU at least `fg` (or the best anchor of each object) are
/// positive, below `bg` negative, the rest unused. Anchors that overlap a
/// masked object at least `bg` and more than any real object are unused.
#[allow(clippy::too_many_arguments)]
pub fn assign_anchors(
    anchors: &[Corners],
    targets: &Targets,
    fg: f64,
    bg: f64,
    batch: usize,
    positive_fraction: f64,
    coder: &BoxCoder,
    rng: &mut Rng,
) -> AnchorSample {
    let n = anchors.len();
    // -1 unused, 0 negative, 1 positive
    let mut label = vec![-1i8; n];
    let mut matched = vec![usize::MAX; n];
    let mut best_for_gt = vec![0.0f64; targets.boxes.len()];
    let ious: Vec<Vec<f64>> = anchors
        .iter()
        .map(|a| targets.boxes.iter().map(|(_, g)| iou(a, g)).collect())
        .collect();
    for row in &ious {
        for (j, &v) in row.iter().enumerate() {
            best_for_gt[j] = best_for_gt[j].max(v);
        }
    }
    for i in 0..n {
        let (j, m) = ious[i].iter().enumerate().fold(
            (usize::MAX, 0.0),
            |(bj, bv), (j, &v)| if v > bv { (j, v) } else { (bj, bv) },
        );
        matched[i] = j;
        if m >= fg {
            label[i] = 1;
        } else if m < bg {
            label[i] = 0;
        }
        for (gj, &v) in ious[i].iter().enumerate() {
            if v > 0.0 && v == best_for_gt[gj] {
                label[i] = 1;
                matched[i] = gj;
            }
        }
        if label[i] != 1 {
            let ig = max_ignore_iou(&anchors[i], &targets.ignore);
            if ig >= bg && ig > m {
                label[i] = -1;
            }
        }
    }
    let mut pos: Vec<usize> = (0..n).filter(|&i| label[i] == 1).collect();
    let mut neg: Vec<usize> = (0..n).filter(|&i| label[i] == 0).collect();
    pos.shuffle(rng);
    neg.shuffle(rng);
    pos.truncate((batch as f64 * positive_fraction) as usize);
    neg.truncate(batch - pos.len());
    let mut labels: Vec<(usize, f64)> = pos
        .iter()
        .map(|&i| (i, 1.0))
        .chain(neg.iter().map(|&i| (i, 0.0)))
        .collect();
    labels.sort_by_key(|l| l.0);
    pos.sort();
    let regression = pos
        .iter()
        .map(|&i| (i, coder.encode(&anchors[i], &targets.boxes[matched[i]].1)))
        .collect();
    AnchorSample { labels, regression }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RoiSample {
    pub rois: Vec<Corners>,
    /// 0 for background.
    pub labels: Vec<usize>,
    /// `(row, label, encoded deltas)` for foreground rows.
    pub regression: Vec<(usize, usize, [f64; 4])>,
}

/// Samples RoIs from proposals plus the ground-truth boxes. IoU at least
/// `fg` with an object makes a foreground RoI, anything else background,
/// except RoIs that overlap a masked object at least `fg` and more than any
/// real object.
pub fn sample_rois(
    proposals: &[Corners],
    targets: &Targets,
    fg: f64,
    batch: usize,
    positive_fraction: f64,
    coder: &BoxCoder,
    rng: &mut Rng,
) -> RoiSample {
    let candidates: Vec<Corners> = proposals
        .iter()
        .copied()
        .chain(targets.boxes.iter().map(|(_, b)| *b))
        .collect();
    let mut fg_idx = Vec::new();
    let mut bg_idx = Vec::new();
    let mut matches = vec![None; candidates.len()];
    for (i, c) in candidates.iter().enumerate() {
        let best = best_match(c, &targets.boxes);
        let m = best.map_or(0.0, |b| b.1);
        let ig = max_ignore_iou(c, &targets.ignore);
        if m >= fg {
            fg_idx.push(i);
            matches[i] = best.map(|b| b.0);
        } else if ig >= fg && ig > m {
            continue;
        } else {
            bg_idx.push(i);
        }
    }
    fg_idx.shuffle(rng);
    bg_idx.shuffle(rng);
    fg_idx.truncate((batch as f64 * positive_fraction) as usize);
    bg_idx.truncate(batch - fg_idx.len());
    let mut chosen: Vec<usize> = fg_idx.iter().chain(&bg_idx).copied().collect();
    chosen.sort();
    let mut out = RoiSample::default();
    for (row, &i) in chosen.iter().enumerate() {
        out.rois.push(candidates[i]);
        match matches[i] {
            Some(j) => {
                let (label, gt) = targets.boxes[j];
                out.labels.push(label);
                out.regression.push((row, label, coder.encode(&candidates[i], &gt)));
            }
            None => out.labels.push(0),
        }
    }
    out
}
