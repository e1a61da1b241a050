use crate::autodiff::{ParamStore, Partition, Tape, Var};
use crate::error::Result;
use crate::geometry::{clip_corners, BoxCoder};
use crate::model::anchors::{assign, AnchorLabel};
use crate::model::heads::{postprocess, LevelLayout, LossTerms};
use crate::model::layers::{Conv, Init};
use crate::model::spec::HeadSpec;
use crate::model::{Detection, ImageTargets};
use crate::tensor::{Float, Tensor};

const POS_IOU: f64 = 0.5;
const NEG_IOU: f64 = 0.4;
pub(crate) const FOCAL_GAMMA: f64 = 2.0;
pub(crate) const FOCAL_ALPHA: f64 = 0.25;
const BOX_BETA: f64 = 0.1;
/// Initial background probability of every anchor.
const BACKGROUND_PRIOR: f64 = 0.99;

/// Dense anchor head: class and box towers shared across levels.
#[derive(Debug, Clone)]
pub(crate) struct SingleStageHead {
    cls_tower: Vec<Conv>,
    box_tower: Vec<Conv>,
    pub cls_out: Conv,
    box_out: Conv,
    spec: HeadSpec,
}

impl SingleStageHead {
    pub fn new<T: Float>(store: &mut ParamStore<T>, init: &Init, spec: &HeadSpec, in_filters: usize) -> Self {
        let p = Partition::Head;
        let (f, hf) = (in_filters, spec.head_filters);
        let a = spec.anchors.per_location();
        let k = spec.num_classes + 1;
        let tower = |store: &mut ParamStore<T>, kind: &str| -> Vec<Conv> {
            (0..spec.rpn_convs).map(|i| Conv::new(store, init, &format!("head.{kind}_tower{i}"), p, if i == 0 { f } else { hf }, hf, 3, 1, true)).collect()
        };
        let cls_tower = tower(store, "cls");
        let box_tower = tower(store, "box");
        let cls_out = Conv::new(store, init, "head.cls_out", p, hf, a * k, 3, 1, true);
        let box_out = Conv::new(store, init, "head.box_out", p, hf, a * 4, 3, 1, true);
        for (conv, std) in [(&cls_out, 0.01), (&box_out, 0.001)] {
            let shape = store.param(conv.w).value.shape().to_vec();
            let name = store.param(conv.w).name.clone();
            store.param_mut(conv.w).value = init.normal(&name, &shape, std);
        }
        // background logit so that p(bg) starts at the prior
        let bg = (BACKGROUND_PRIOR * spec.num_classes as f64 / (1.0 - BACKGROUND_PRIOR)).ln();
        let bias = cls_out.b.expect("cls_out has a bias");
        let data = store.param_mut(bias).value.data_mut();
        for ai in 0..a {
            data[ai * k] = T::from_f64(bg);
        }
        SingleStageHead { cls_tower, box_tower, cls_out, box_out, spec: spec.clone() }
    }

    /// Class rows `[Σ N·HWA, K+1]` (column 0 = background) and box rows.
    fn forward<T: Float>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, feats: &[Var]) -> Result<(Var, Var)> {
        let k = self.spec.num_classes + 1;
        let mut cls = Vec::with_capacity(feats.len());
        let mut reg = Vec::with_capacity(feats.len());
        for &x in feats {
            let mut h = x;
            for conv in &self.cls_tower {
                let y = conv.forward(tape, store, h)?;
                h = tape.relu(y);
            }
            let c = self.cls_out.forward(tape, store, h)?;
            cls.push(tape.flatten_anchors(c, k)?);
            let mut h = x;
            for conv in &self.box_tower {
                let y = conv.forward(tape, store, h)?;
                h = tape.relu(y);
            }
            let r = self.box_out.forward(tape, store, h)?;
            reg.push(tape.flatten_anchors(r, 4)?);
        }
        Ok((tape.concat_rows(&cls)?, tape.concat_rows(&reg)?))
    }

    /// Focal classification and smooth-L1 regression, both normalized by
    /// the number of positive anchors. With `class_weights`, the class term
    /// is a weighted cross-entropy instead (stage-2 tuning).
    pub fn loss<T: Float>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        feats: &[Var],
        layout: &LevelLayout,
        targets: &[ImageTargets],
        class_weights: Option<&[f64]>,
    ) -> Result<LossTerms> {
        let (cls, reg) = self.forward(tape, store, feats)?;
        let all: Vec<[f64; 4]> = layout.anchors.iter().flatten().copied().collect();
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        let mut pos_rows = Vec::new();
        let mut box_targets = Vec::new();
        for (n, t) in targets.iter().enumerate() {
            for (i, l) in assign(&all, &t.boxes, POS_IOU, NEG_IOU, true).into_iter().enumerate() {
                let (lv, j) = layout.split(i);
                let row = layout.row(lv, n, j);
                match l {
                    AnchorLabel::Positive(g) => {
                        rows.push(row);
                        labels.push(t.labels[g] + 1);
                        pos_rows.push(row);
                        box_targets.extend(BoxCoder::UNIT.encode(&all[i], &t.boxes[g]));
                    }
                    AnchorLabel::Negative => {
                        rows.push(row);
                        labels.push(0);
                    }
                    AnchorLabel::Ignore => {}
                }
            }
        }
        let norm = pos_rows.len().max(1) as f64;
        let logits = tape.gather_rows(cls, &rows)?;
        let mut terms = LossTerms::default();
        match class_weights {
            None => {
                let c = tape.focal_loss(logits, &labels, FOCAL_GAMMA, FOCAL_ALPHA, norm)?;
                terms.push("cls".into(), c);
                let pred = tape.gather_rows(reg, &pos_rows)?;
                let target = Tensor::from_parts(vec![pos_rows.len(), 4], box_targets.into_iter().map(T::from_f64).collect());
                let b = tape.smooth_l1(pred, &target, BOX_BETA, norm)?;
                terms.push("box".into(), b);
            }
            Some(w) => {
                let c = tape.cross_entropy(logits, &labels, Some(w), Some(rows.len().max(1) as f64))?;
                terms.push("cls".into(), c);
            }
        }
        Ok(terms)
    }

    /// Raw per-level `(class probabilities, box deltas)` and detections.
    pub fn infer<T: Float>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, feats: &[Var], layout: &LevelLayout) -> Result<(Var, Var, Vec<Vec<Detection>>)> {
        let (cls, reg) = self.forward(tape, store, feats)?;
        let probs = tape.softmax(cls)?;
        let pd = tape.value(probs).data();
        let rd = tape.value(reg).data();
        let k = self.spec.num_classes + 1;
        let inf = &self.spec.inference;
        let (h, w) = (layout.image_hw.0 as f64, layout.image_hw.1 as f64);
        let mut out = Vec::with_capacity(layout.batch);
        for n in 0..layout.batch {
            let mut cands = Vec::new();
            for l in 0..layout.anchors.len() {
                let mut lvl: Vec<(f64, usize, usize)> = Vec::new();
                for j in 0..layout.anchors[l].len() {
                    let row = layout.row(l, n, j);
                    for c in 1..k {
                        let s = pd[row * k + c].to_f64();
                        if s > inf.score_threshold {
                            lvl.push((s, j, c));
                        }
                    }
                }
                lvl.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
                lvl.truncate(self.spec.proposals.pre_nms_per_level);
                for (s, j, c) in lvl {
                    let row = layout.row(l, n, j);
                    let d = [0, 1, 2, 3].map(|i| rd[row * 4 + i].to_f64());
                    let b = clip_corners(&BoxCoder::UNIT.decode(&layout.anchors[l][j], &d), w, h);
                    if b[2] > b[0] && b[3] > b[1] {
                        cands.push(Detection { bbox: b, score: s, label: c - 1 });
                    }
                }
            }
            out.push(postprocess(cands, inf));
        }
        Ok((probs, reg, out))
    }
}
