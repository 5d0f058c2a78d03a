//! Greedy detection matching and VOC-style average precision.

use serde::{Deserialize, Serialize};

use crate::dataset::ImageId;
use crate::geometry::BBox;

pub fn compute_iou(a: &BBox, b: &BBox) -> f64 {
    a.iou(b)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ApMethod {
    /// Area under the precision envelope at every recall change.
    #[default]
    AllPoint,
    /// Mean of the precision envelope at recall 0, 0.1, ..., 1.
    ElevenPoint,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredBox {
    pub image: ImageId,
    pub score: f64,
    pub bbox: BBox,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GtBox {
    pub image: ImageId,
    pub bbox: BBox,
    /// Ignore region: never matched, never counted.
    pub masked: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    TruePositive,
    FalsePositive,
    /// Hit a masked object.
    Ignored,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Match {
    pub detection: usize,
    pub gt: Option<usize>,
    pub outcome: Outcome,
}

/// Visits detections by descending score (ties by index). Each detection
/// takes the ground-truth box of highest IoU in its image (ties by index);
/// at IoU >= `threshold` it is a true positive if that box is still free,
/// ignored if the box is masked, and a false positive otherwise.
pub fn match_detections(dets: &[ScoredBox], gts: &[GtBox], threshold: f64) -> Vec<Match> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut taken = vec![false; gts.len()];
    let mut out = Vec::with_capacity(dets.len());
    for i in order {
        let d = &dets[i];
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if g.image != d.image {
                continue;
            }
            let v = compute_iou(&d.bbox, &g.bbox);
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        let m = match best {
            Some((j, v)) if v >= threshold => {
                if gts[j].masked {
                    Match {
                        detection: i,
                        gt: Some(j),
                        outcome: Outcome::Ignored,
                    }
                } else if !taken[j] {
                    taken[j] = true;
                    Match {
                        detection: i,
                        gt: Some(j),
                        outcome: Outcome::TruePositive,
                    }
                } else {
                    Match {
                        detection: i,
                        gt: Some(j),
                        outcome: Outcome::FalsePositive,
                    }
                }
            }
            _ => Match {
                detection: i,
                gt: None,
                outcome: Outcome::FalsePositive,
            },
        };
        out.push(m);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApResult {
    pub ap: f64,
    pub ap11: f64,
    pub num_gt: usize,
    /// Raw `(recall, precision)` after each counted detection.
    pub pr: Vec<(f64, f64)>,
    pub matches: Vec<Match>,
}

impl ApResult {
    pub fn get(&self, method: ApMethod) -> f64 {
        match method {
            ApMethod::AllPoint => self.ap,
            ApMethod::ElevenPoint => self.ap11,
        }
    }
}

/// Average precision of one class; `None` when the class has no unmasked
/// ground truth.
pub fn compute_ap(dets: &[ScoredBox], gts: &[GtBox], threshold: f64) -> Option<ApResult> {
    let num_gt = gts.iter().filter(|g| !g.masked).count();
    if num_gt == 0 {
        return None;
    }
    let matches = match_detections(dets, gts, threshold);
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut pr = Vec::new();
    for m in &matches {
        match m.outcome {
            Outcome::TruePositive => tp += 1,
            Outcome::FalsePositive => fp += 1,
            Outcome::Ignored => continue,
        }
        pr.push((tp as f64 / num_gt as f64, tp as f64 / (tp + fp) as f64));
    }
    Some(ApResult {
        ap: all_point(&pr),
        ap11: eleven_point(&pr),
        num_gt,
        pr,
        matches,
    })
}

fn all_point(pr: &[(f64, f64)]) -> f64 {
    let mut rec = vec![0.0];
    let mut pre = vec![0.0];
    for &(r, p) in pr {
        rec.push(r);
        pre.push(p);
    }
    rec.push(1.0);
    pre.push(0.0);
    for i in (0..pre.len() - 1).rev() {
        pre[i] = pre[i].max(pre[i + 1]);
    }
    (1..rec.len())
        .filter(|&i| rec[i] != rec[i - 1])
        .map(|i| (rec[i] - rec[i - 1]) * pre[i])
        .sum()
}

fn eleven_point(pr: &[(f64, f64)]) -> f64 {
    (0..=10)
        .map(|t| {
            let t = t as f64 / 10.0;
            pr.iter().filter(|(r, _)| *r >= t).map(|(_, p)| *p).fold(0.0, f64::max)
        })
        .sum::<f64>()
        / 11.0
}

/// Precision envelope: precision made non-increasing in recall.
pub fn interpolated(pr: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut out = pr.to_vec();
    for i in (0..out.len().saturating_sub(1)).rev() {
        out[i].1 = out[i].1.max(out[i + 1].1);
    }
    out
}
