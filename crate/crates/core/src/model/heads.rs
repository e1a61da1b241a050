//! Pieces shared by the single-stage and two-stage heads.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::geometry::{nms_indices, score_order};
use crate::model::anchors::level_anchors;
use crate::model::spec::{AnchorConfig, InferenceConfig};
use crate::model::Detection;
use crate::tensor::{Float, Tensor};

/// Anchor layout of a batch: per-level anchors and the offset of each
/// level's `[N·HWA]` block inside the level-concatenated row tensor.
#[derive(Debug, Clone)]
pub struct LevelLayout {
    pub batch: usize,
    pub image_hw: (usize, usize),
    pub anchors: Vec<Vec<[f64; 4]>>,
    offsets: Vec<usize>,
}

impl LevelLayout {
    pub fn new(cfg: &AnchorConfig, strides: &[usize], batch: usize, image_hw: (usize, usize)) -> Self {
        let anchors: Vec<Vec<[f64; 4]>> = strides.iter().map(|&s| level_anchors(cfg, s, image_hw.0 / s, image_hw.1 / s)).collect();
        let mut offsets = Vec::with_capacity(anchors.len());
        let mut off = 0;
        for a in &anchors {
            offsets.push(off);
            off += batch * a.len();
        }
        LevelLayout { batch, image_hw, anchors, offsets }
    }

    /// Row of anchor `j` of level `l` for image `n`.
    pub fn row(&self, l: usize, n: usize, j: usize) -> usize {
        self.offsets[l] + n * self.anchors[l].len() + j
    }

    /// Level and in-level index of position `i` in the per-image anchor list.
    pub fn split(&self, mut i: usize) -> (usize, usize) {
        for (l, a) in self.anchors.iter().enumerate() {
            if i < a.len() {
                return (l, i);
            }
            i -= a.len();
        }
        panic!("anchor index out of range");
    }

    pub fn per_image(&self) -> usize {
        self.anchors.iter().map(Vec::len).sum()
    }
}

/// Named loss components; the total is their unweighted sum.
#[derive(Debug, Clone, Default)]
pub struct LossTerms {
    pub parts: Vec<(String, Var)>,
}

impl LossTerms {
    pub fn push(&mut self, name: String, v: Var) {
        self.parts.push((name, v));
    }

    pub fn total<T: Float>(&self, tape: &mut Tape<T>) -> Result<Var> {
        let mut acc = self.parts[0].1;
        for &(_, v) in &self.parts[1..] {
            acc = tape.add(acc, v)?;
        }
        Ok(acc)
    }
}

/// Raw, pre-postprocessing output of one box-head stage over all rois.
#[derive(Debug, Clone, PartialEq)]
pub struct StageOutput<T: Float> {
    pub boxes: Vec<[f64; 4]>,
    pub logits: Tensor<T>,
    pub deltas: Tensor<T>,
}

/// Score threshold, per-class NMS and the per-image detection cap.
pub fn postprocess(cands: Vec<Detection>, cfg: &InferenceConfig) -> Vec<Detection> {
    let mut by_class: std::collections::BTreeMap<usize, Vec<Detection>> = Default::default();
    for d in cands.into_iter().filter(|d| d.score > cfg.score_threshold) {
        by_class.entry(d.label).or_default().push(d);
    }
    let mut out = Vec::new();
    for (_, dets) in by_class {
        let boxes: Vec<[f64; 4]> = dets.iter().map(|d| d.bbox).collect();
        let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
        out.extend(nms_indices(&boxes, &scores, cfg.nms_iou).into_iter().map(|i| dets[i]));
    }
    out.sort_by(|a, b| score_order((a.score, &a.bbox), (b.score, &b.bbox)).then(a.label.cmp(&b.label)));
    out.truncate(cfg.max_detections);
    out
}
