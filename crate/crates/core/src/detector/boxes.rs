//! Anchors, box delta coding and non-maximum suppression.

use crate::geometry::BBox;

/// Plain corner box used on hot paths; `[x1, y1, x2, y2]`.
pub type Corners = [f64; 4];

pub fn corners(b: &BBox) -> Corners {
    [b.x1, b.y1, b.x2, b.y2]
}

pub fn area(b: &Corners) -> f64 {
    (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0)
}

pub fn iou(a: &Corners, b: &Corners) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

pub fn clip(b: &Corners, width: f64, height: f64) -> Corners {
    [
        b[0].clamp(0.0, width),
        b[1].clamp(0.0, height),
        b[2].clamp(0.0, width),
        b[3].clamp(0.0, height),
    ]
}

/// Anchors for every cell of an `h x w` map, ordered cell-major (row, then
/// column, then anchor shape). Each anchor is centred on its cell centre.
pub fn grid_anchors(h: usize, w: usize, stride: usize, sizes: &[f64], ratios: &[f64]) -> Vec<Corners> {
    let shapes: Vec<(f64, f64)> = sizes
        .iter()
        .flat_map(|&s| {
            ratios.iter().map(move |&r| {
                // r = height / width at constant area s^2
                let w = s / r.sqrt();
                (w, w * r)
            })
        })
        .collect();
    let mut out = Vec::with_capacity(h * w * shapes.len());
    for y in 0..h {
        for x in 0..w {
            let cx = (x as f64 + 0.5) * stride as f64;
            let cy = (y as f64 + 0.5) * stride as f64;
            for &(aw, ah) in &shapes {
                out.push([cx - aw / 2.0, cy - ah / 2.0, cx + aw / 2.0, cy + ah / 2.0]);
            }
        }
    }
    out
}

/// Encodes `target` relative to `reference` as weighted `(dx, dy, dw, dh)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxCoder {
    pub weights: [f64; 4],
    pub clamp: f64,
}

impl BoxCoder {
    pub fn new(weights: [f64; 4]) -> Self {
        BoxCoder {
            weights,
            clamp: (1000.0f64 / 16.0).ln(),
        }
    }

    pub fn encode(&self, reference: &Corners, target: &Corners) -> [f64; 4] {
        let (pw, ph) = (reference[2] - reference[0], reference[3] - reference[1]);
        let (px, py) = (reference[0] + 0.5 * pw, reference[1] + 0.5 * ph);
        let (gw, gh) = (target[2] - target[0], target[3] - target[1]);
        let (gx, gy) = (target[0] + 0.5 * gw, target[1] + 0.5 * gh);
        let [wx, wy, ww, wh] = self.weights;
        [
            wx * (gx - px) / pw,
            wy * (gy - py) / ph,
            ww * (gw / pw).ln(),
            wh * (gh / ph).ln(),
        ]
    }

    pub fn decode(&self, reference: &Corners, deltas: [f64; 4]) -> Corners {
        let (pw, ph) = (reference[2] - reference[0], reference[3] - reference[1]);
        let (px, py) = (reference[0] + 0.5 * pw, reference[1] + 0.5 * ph);
        let [wx, wy, ww, wh] = self.weights;
        let dx = deltas[0] / wx;
        let dy = deltas[1] / wy;
        let dw = (deltas[2] / ww).min(self.clamp);
        let dh = (deltas[3] / wh).min(self.clamp);
        let (cx, cy) = (px + dx * pw, py + dy * ph);
        let (w, h) = (pw * dw.exp(), ph * dh.exp());
        [cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h]
    }
}

/// Greedy NMS. Candidates are visited by descending score; equal scores
/// keep the lower index first. Returns kept indices in visit order.
pub fn nms(boxes: &[Corners], scores: &[f64], threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut suppressed = vec![false; boxes.len()];
    let mut keep = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order[pos + 1..] {
            if !suppressed[j] && iou(&boxes[i], &boxes[j]) > threshold {
                suppressed[j] = true;
            }
        }
    }
    keep
}
