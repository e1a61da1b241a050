//! Axis-aligned boxes. Annotations and COCO files use `(x, y, w, h)`;
//! detector internals use corner form `[x1, y1, x2, y2]`.

use serde::{Deserialize, Serialize};

/// A box as `(x, y, w, h)` in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox { x, y, w, h }
    }

    pub fn from_corners(c: [f64; 4]) -> Self {
        BBox { x: c[0], y: c[1], w: c[2] - c[0], h: c[3] - c[1] }
    }

    pub fn corners(&self) -> [f64; 4] {
        [self.x, self.y, self.x + self.w, self.y + self.h]
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        iou_corners(&self.corners(), &other.corners())
    }
}

pub fn area_corners(b: &[f64; 4]) -> f64 {
    (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0)
}

/// Intersection over union of two corner-form boxes; `0` when the union is empty.
pub fn iou_corners(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = area_corners(a) + area_corners(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Regression target parameterisation used by every box head.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxCoder {
    pub weights: [f64; 4],
}

/// Largest log-scale delta applied when decoding.
const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

impl BoxCoder {
    pub const UNIT: BoxCoder = BoxCoder { weights: [1.0, 1.0, 1.0, 1.0] };

    pub fn new(weights: [f64; 4]) -> Self {
        BoxCoder { weights }
    }

    pub fn encode(&self, anchor: &[f64; 4], target: &[f64; 4]) -> [f64; 4] {
        let (aw, ah) = (anchor[2] - anchor[0], anchor[3] - anchor[1]);
        let (ax, ay) = (anchor[0] + 0.5 * aw, anchor[1] + 0.5 * ah);
        let (tw, th) = (target[2] - target[0], target[3] - target[1]);
        let (tx, ty) = (target[0] + 0.5 * tw, target[1] + 0.5 * th);
        let [wx, wy, ww, wh] = self.weights;
        [wx * (tx - ax) / aw, wy * (ty - ay) / ah, ww * (tw / aw).ln(), wh * (th / ah).ln()]
    }

    pub fn decode(&self, anchor: &[f64; 4], delta: &[f64; 4]) -> [f64; 4] {
        let (aw, ah) = (anchor[2] - anchor[0], anchor[3] - anchor[1]);
        let (ax, ay) = (anchor[0] + 0.5 * aw, anchor[1] + 0.5 * ah);
        let [wx, wy, ww, wh] = self.weights;
        let dx = delta[0] / wx;
        let dy = delta[1] / wy;
        let dw = (delta[2] / ww).min(MAX_LOG_SCALE);
        let dh = (delta[3] / wh).min(MAX_LOG_SCALE);
        let cx = ax + dx * aw;
        let cy = ay + dy * ah;
        let w = aw * dw.exp();
        let h = ah * dh.exp();
        [cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h]
    }
}

pub fn clip_corners(b: &[f64; 4], width: f64, height: f64) -> [f64; 4] {
    [b[0].clamp(0.0, width), b[1].clamp(0.0, height), b[2].clamp(0.0, width), b[3].clamp(0.0, height)]
}

/// Descending score, then ascending corner coordinates: the fixed order
/// used by every greedy procedure over scored boxes.
pub fn score_order(a: (f64, &[f64; 4]), b: (f64, &[f64; 4])) -> std::cmp::Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.iter().zip(b.1.iter()).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal))
}

/// Greedy non-maximum suppression over corner boxes. Returns kept indices
/// in processing order; a box is dropped when its IoU with a kept box
/// exceeds `iou_threshold`.
pub fn nms_indices(boxes: &[[f64; 4]], scores: &[f64], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&i, &j| score_order((scores[i], &boxes[i]), (scores[j], &boxes[j])).then(i.cmp(&j)));
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep.iter().all(|&k| iou_corners(&boxes[k], &boxes[i]) <= iou_threshold) {
            keep.push(i);
        }
    }
    keep
}
