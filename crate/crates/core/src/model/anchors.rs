use crate::geometry::iou_corners;
use crate::model::spec::AnchorConfig;

/// Anchors of one level in `(y, x, a)` order, matching the row order of
/// `Tape::flatten_anchors`. Anchor `a` is `scale_index · #ratios + ratio_index`.
pub fn level_anchors(cfg: &AnchorConfig, stride: usize, h: usize, w: usize) -> Vec<[f64; 4]> {
    let s = stride as f64;
    let shapes: Vec<(f64, f64)> = cfg
        .scales
        .iter()
        .flat_map(|&scale| {
            cfg.aspect_ratios.iter().map(move |&ratio| {
                let side = cfg.size_per_stride * s * scale;
                (side / ratio.sqrt(), side * ratio.sqrt())
            })
        })
        .collect();
    let mut out = Vec::with_capacity(h * w * shapes.len());
    for y in 0..h {
        for x in 0..w {
            let (cx, cy) = ((x as f64 + 0.5) * s, (y as f64 + 0.5) * s);
            for &(aw, ah) in &shapes {
                out.push([cx - 0.5 * aw, cy - 0.5 * ah, cx + 0.5 * aw, cy + 0.5 * ah]);
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorLabel {
    Positive(usize),
    Negative,
    Ignore,
}

/// IoU-threshold assignment. With `best_match`, the highest-IoU anchor of
/// every ground truth is positive regardless of threshold.
pub fn assign(anchors: &[[f64; 4]], gts: &[[f64; 4]], pos: f64, neg: f64, best_match: bool) -> Vec<AnchorLabel> {
    if gts.is_empty() {
        return vec![AnchorLabel::Negative; anchors.len()];
    }
    let mut best_gt_iou = vec![0.0f64; gts.len()];
    let mut labels = Vec::with_capacity(anchors.len());
    for a in anchors {
        let (mut bi, mut bv) = (0, -1.0);
        for (g, gt) in gts.iter().enumerate() {
            let v = iou_corners(a, gt);
            if v > bv {
                bi = g;
                bv = v;
            }
            if v > best_gt_iou[g] {
                best_gt_iou[g] = v;
            }
        }
        labels.push(if bv >= pos {
            AnchorLabel::Positive(bi)
        } else if bv < neg {
            AnchorLabel::Negative
        } else {
            AnchorLabel::Ignore
        });
    }
    if best_match {
        for (i, a) in anchors.iter().enumerate() {
            for (g, gt) in gts.iter().enumerate() {
                if best_gt_iou[g] > 0.0 && iou_corners(a, gt) == best_gt_iou[g] {
                    labels[i] = AnchorLabel::Positive(g);
                }
            }
        }
    }
    labels
}
