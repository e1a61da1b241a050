use rand::seq::SliceRandom;

use crate::autodiff::{ParamStore, Partition, RoiRef, Tape, Var};
use crate::error::Result;
use crate::geometry::{clip_corners, iou_corners, nms_indices, BoxCoder};
use crate::model::anchors::{assign, AnchorLabel};
use crate::model::heads::{postprocess, LevelLayout, LossTerms, StageOutput};
use crate::model::layers::{Conv, Dense, Init};
use crate::model::spec::HeadSpec;
use crate::model::{Detection, ImageTargets};
use crate::rng::Rng;
use crate::tensor::{Float, Tensor};

const RPN_POS_IOU: f64 = 0.7;
const RPN_NEG_IOU: f64 = 0.3;
const RPN_BETA: f64 = 1.0 / 9.0;
const ROI_BETA: f64 = 1.0;
/// Smallest side a proposal or refined box may have, in pixels.
const MIN_SIDE: f64 = 0.5;

/// Box-coder weights of successive box-head stages.
pub(crate) fn stage_coder(stage: usize) -> BoxCoder {
    let k = (stage + 1) as f64;
    BoxCoder::new([10.0 * k, 10.0 * k, 5.0 * k, 5.0 * k])
}

#[derive(Debug, Clone)]
pub(crate) struct BoxStage {
    fc1: Dense,
    fc2: Dense,
    pub cls: Dense,
    reg: Dense,
    coder: BoxCoder,
    iou: f64,
}

#[derive(Debug, Clone)]
pub(crate) struct TwoStageHead {
    rpn: Vec<Conv>,
    objectness: Conv,
    rpn_box: Conv,
    pub stages: Vec<BoxStage>,
    spec: HeadSpec,
}

type InferOutput<T> = (Vec<Vec<[f64; 4]>>, Vec<StageOutput<T>>, Vec<Vec<Detection>>, Tensor<T>, Tensor<T>);

fn sanitize(b: [f64; 4], hw: (usize, usize)) -> [f64; 4] {
    let (h, w) = (hw.0 as f64, hw.1 as f64);
    let mut c = clip_corners(&b, w, h);
    if c[2] - c[0] < MIN_SIDE {
        c[0] = c[0].min(w - MIN_SIDE);
        c[2] = c[0] + MIN_SIDE;
    }
    if c[3] - c[1] < MIN_SIDE {
        c[1] = c[1].min(h - MIN_SIDE);
        c[3] = c[1] + MIN_SIDE;
    }
    c
}

/// Pyramid level whose anchors best fit the box side.
fn roi_level(b: &[f64; 4], base: f64, levels: usize) -> usize {
    let side = ((b[2] - b[0]) * (b[3] - b[1])).max(1e-6).sqrt();
    ((side / base).log2().round().max(0.0) as usize).min(levels - 1)
}

impl TwoStageHead {
    pub fn new<T: Float>(store: &mut ParamStore<T>, init: &Init, spec: &HeadSpec, in_filters: usize) -> Self {
        let p = Partition::Head;
        let f = in_filters;
        let a = spec.anchors.per_location();
        let rpn = (0..spec.rpn_convs).map(|i| Conv::new(store, init, &format!("head.rpn.conv{i}"), p, f, f, 3, 1, true)).collect();
        let objectness = Conv::new(store, init, "head.rpn.objectness", p, f, a * 2, 1, 1, true);
        let rpn_box = Conv::new(store, init, "head.rpn.box", p, f, a * 4, 1, 1, true);
        for (conv, std) in [(&objectness, 0.01), (&rpn_box, 0.001)] {
            let shape = store.param(conv.w).value.shape().to_vec();
            let name = store.param(conv.w).name.clone();
            store.param_mut(conv.w).value = init.normal(&name, &shape, std);
        }
        let pooled_dim = f * spec.roi_pool * spec.roi_pool;
        let hf = spec.head_filters;
        let k = spec.num_classes + 1;
        let stages = spec
            .stage_ious()
            .into_iter()
            .enumerate()
            .map(|(s, iou)| {
                let name = |part: &str| format!("head.box{s}.{part}");
                let fc1 = Dense::new(store, init.kaiming(&name("fc1.weight"), &[hf, pooled_dim]), &name("fc1"), p);
                let fc2 = Dense::new(store, init.kaiming(&name("fc2.weight"), &[hf, hf]), &name("fc2"), p);
                let cls = Dense::new(store, init.normal(&name("cls.weight"), &[k, hf], 0.01), &name("cls"), p);
                let reg = Dense::new(store, init.normal(&name("reg.weight"), &[4, hf], 0.001), &name("reg"), p);
                BoxStage { fc1, fc2, cls, reg, coder: stage_coder(s), iou }
            })
            .collect();
        TwoStageHead { rpn, objectness, rpn_box, stages, spec: spec.clone() }
    }

    /// Objectness rows `[Σ N·HWA, 2]` (column 1 = object) and box rows
    /// `[Σ N·HWA, 4]`, levels concatenated.
    fn rpn_forward<T: Float>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, feats: &[Var]) -> Result<(Var, Var)> {
        let mut objs = Vec::with_capacity(feats.len());
        let mut regs = Vec::with_capacity(feats.len());
        for &x in feats {
            let mut h = x;
            for conv in &self.rpn {
                let y = conv.forward(tape, store, h)?;
                h = tape.relu(y);
            }
            let o = self.objectness.forward(tape, store, h)?;
            objs.push(tape.flatten_anchors(o, 2)?);
            let r = self.rpn_box.forward(tape, store, h)?;
            regs.push(tape.flatten_anchors(r, 4)?);
        }
        Ok((tape.concat_rows(&objs)?, tape.concat_rows(&regs)?))
    }

    fn proposals<T: Float>(&self, tape: &Tape<T>, obj: Var, reg: Var, layout: &LevelLayout, keep: usize) -> Vec<Vec<[f64; 4]>> {
        let od = tape.value(obj).data();
        let rd = tape.value(reg).data();
        let cfg = &self.spec.proposals;
        (0..layout.batch)
            .map(|n| {
                let mut boxes = Vec::new();
                let mut scores = Vec::new();
                for l in 0..layout.anchors.len() {
                    let mut cand: Vec<(usize, f64)> = (0..layout.anchors[l].len())
                        .map(|j| {
                            let row = layout.row(l, n, j);
                            (j, od[row * 2 + 1].to_f64() - od[row * 2].to_f64())
                        })
                        .collect();
                    cand.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
                    cand.truncate(cfg.pre_nms_per_level);
                    for (j, s) in cand {
                        let row = layout.row(l, n, j);
                        let d = [0, 1, 2, 3].map(|c| rd[row * 4 + c].to_f64());
                        let b = BoxCoder::UNIT.decode(&layout.anchors[l][j], &d);
                        let c = clip_corners(&b, layout.image_hw.1 as f64, layout.image_hw.0 as f64);
                        if c[2] - c[0] >= MIN_SIDE && c[3] - c[1] >= MIN_SIDE {
                            boxes.push(c);
                            scores.push(s);
                        }
                    }
                }
                let mut kept = nms_indices(&boxes, &scores, cfg.nms_iou);
                kept.truncate(keep);
                kept.into_iter().map(|i| boxes[i]).collect()
            })
            .collect()
    }

    fn rpn_loss<T: Float>(&self, tape: &mut Tape<T>, obj: Var, reg: Var, layout: &LevelLayout, targets: &[ImageTargets], rng: &mut Rng) -> Result<(Var, Var)> {
        let cfg = &self.spec.proposals;
        let all: Vec<[f64; 4]> = layout.anchors.iter().flatten().copied().collect();
        let mut cls_rows = Vec::new();
        let mut cls_targets = Vec::new();
        let mut box_rows = Vec::new();
        let mut box_targets = Vec::new();
        for (n, t) in targets.iter().enumerate() {
            let labels = assign(&all, &t.boxes, RPN_POS_IOU, RPN_NEG_IOU, true);
            let mut pos: Vec<usize> = Vec::new();
            let mut neg: Vec<usize> = Vec::new();
            for (i, l) in labels.iter().enumerate() {
                match l {
                    AnchorLabel::Positive(_) => pos.push(i),
                    AnchorLabel::Negative => neg.push(i),
                    AnchorLabel::Ignore => {}
                }
            }
            let max_pos = (cfg.rpn_batch_per_image as f64 * cfg.rpn_positive_fraction) as usize;
            pos.shuffle(rng);
            pos.truncate(max_pos);
            neg.shuffle(rng);
            neg.truncate(cfg.rpn_batch_per_image - pos.len());
            pos.sort_unstable();
            neg.sort_unstable();
            for &i in &pos {
                let (l, j) = layout.split(i);
                let row = layout.row(l, n, j);
                cls_rows.push(row);
                cls_targets.push(1);
                let AnchorLabel::Positive(g) = labels[i] else { unreachable!() };
                box_rows.push(row);
                box_targets.extend(BoxCoder::UNIT.encode(&all[i], &t.boxes[g]));
            }
            for &i in &neg {
                let (l, j) = layout.split(i);
                cls_rows.push(layout.row(l, n, j));
                cls_targets.push(0);
            }
        }
        let norm = cls_rows.len().max(1) as f64;
        let logits = tape.gather_rows(obj, &cls_rows)?;
        let cls = tape.cross_entropy(logits, &cls_targets, None, Some(norm))?;
        let pred = tape.gather_rows(reg, &box_rows)?;
        let target = Tensor::from_parts(vec![box_rows.len(), 4], box_targets.into_iter().map(T::from_f64).collect());
        let bx = tape.smooth_l1(pred, &target, RPN_BETA, norm)?;
        Ok((cls, bx))
    }

    fn roi_refs(&self, rois: &[(usize, [f64; 4])], levels: usize) -> Vec<RoiRef> {
        let base = self.spec.anchors.size_per_stride * 4.0;
        rois.iter().map(|&(batch, bbox)| RoiRef { batch, level: roi_level(&bbox, base, levels), bbox }).collect()
    }

    fn stage_forward<T: Float>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        stage: &BoxStage,
        feats: &[Var],
        strides: &[usize],
        rois: &[(usize, [f64; 4])],
    ) -> Result<(Var, Var)> {
        let refs = self.roi_refs(rois, feats.len());
        let pooled = tape.roi_align(feats, strides, &refs, self.spec.roi_pool)?;
        let s = tape.shape(pooled).to_vec();
        let flat = tape.reshape(pooled, &[s[0], s[1] * s[2] * s[3]])?;
        let h = stage.fc1.forward(tape, store, flat)?;
        let h = tape.relu(h);
        let h = stage.fc2.forward(tape, store, h)?;
        let h = tape.relu(h);
        let logits = stage.cls.forward(tape, store, h)?;
        let deltas = stage.reg.forward(tape, store, h)?;
        Ok((logits, deltas))
    }

    /// `(image, box)` of every sampled roi, images in order.
    fn sample_rois(&self, proposals: &[Vec<[f64; 4]>], targets: &[ImageTargets], rng: &mut Rng) -> Vec<(usize, [f64; 4])> {
        let cfg = &self.spec.proposals;
        let thr = self.stages[0].iou;
        let mut rois = Vec::new();
        for (n, (props, t)) in proposals.iter().zip(targets).enumerate() {
            let cands: Vec<[f64; 4]> = props.iter().chain(&t.boxes).copied().collect();
            let mut fg = Vec::new();
            let mut bg = Vec::new();
            for (i, c) in cands.iter().enumerate() {
                let best = t.boxes.iter().map(|g| iou_corners(c, g)).fold(0.0, f64::max);
                if best >= thr {
                    fg.push(i);
                } else {
                    bg.push(i);
                }
            }
            let max_fg = (cfg.roi_batch_per_image as f64 * cfg.roi_positive_fraction) as usize;
            fg.shuffle(rng);
            fg.truncate(max_fg);
            bg.shuffle(rng);
            bg.truncate(cfg.roi_batch_per_image - fg.len());
            let mut pick: Vec<usize> = fg.into_iter().chain(bg).collect();
            pick.sort_unstable();
            rois.extend(pick.into_iter().map(|i| (n, cands[i])));
        }
        rois
    }

    /// Detection-training losses. With `class_weights`, only the weighted
    /// classifier terms are produced (stage-2 tuning).
    #[allow(clippy::too_many_arguments)]
    pub fn loss<T: Float>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        feats: &[Var],
        layout: &LevelLayout,
        strides: &[usize],
        targets: &[ImageTargets],
        class_weights: Option<&[f64]>,
        rng: &mut Rng,
    ) -> Result<LossTerms> {
        let (obj, reg) = self.rpn_forward(tape, store, feats)?;
        let mut terms = LossTerms::default();
        // RoI sampling gets its own generator so it sees the same draws
        // whether or not the RPN terms are computed.
        let mut roi_rng = <Rng as rand::SeedableRng>::seed_from_u64(rand::Rng::gen(rng));
        if class_weights.is_none() {
            let (rpn_cls, rpn_box) = self.rpn_loss(tape, obj, reg, layout, targets, rng)?;
            terms.push("rpn_cls".into(), rpn_cls);
            terms.push("rpn_box".into(), rpn_box);
        }
        let proposals = self.proposals(tape, obj, reg, layout, self.spec.proposals.post_nms_train);
        let mut rois = self.sample_rois(&proposals, targets, &mut roi_rng);
        for (s, stage) in self.stages.iter().enumerate() {
            if rois.is_empty() {
                break;
            }
            let (logits, deltas) = self.stage_forward(tape, store, stage, feats, strides, &rois)?;
            let (labels, fg_rows, fg_targets) = label_rois(stage, &rois, targets);
            let norm = rois.len() as f64;
            let cls = tape.cross_entropy(logits, &labels, class_weights, Some(norm))?;
            terms.push(format!("box{s}_cls"), cls);
            if class_weights.is_none() {
                let pred = tape.gather_rows(deltas, &fg_rows)?;
                let target = Tensor::from_parts(vec![fg_rows.len(), 4], fg_targets.into_iter().map(T::from_f64).collect());
                let bx = tape.smooth_l1(pred, &target, ROI_BETA, norm)?;
                terms.push(format!("box{s}_reg"), bx);
            }
            if s + 1 < self.stages.len() {
                rois = refine(stage, &rois, tape.value(deltas), layout.image_hw);
            }
        }
        Ok(terms)
    }

    pub fn infer<T: Float>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, feats: &[Var], layout: &LevelLayout, strides: &[usize]) -> Result<InferOutput<T>> {
        let (obj, reg) = self.rpn_forward(tape, store, feats)?;
        let (obj_t, reg_t) = (tape.value(obj).clone(), tape.value(reg).clone());
        let proposals = self.proposals(tape, obj, reg, layout, self.spec.proposals.post_nms_eval);
        let mut rois: Vec<(usize, [f64; 4])> = proposals.iter().enumerate().flat_map(|(n, p)| p.iter().map(move |&b| (n, b))).collect();
        let k = self.spec.num_classes + 1;
        let mut outputs = Vec::with_capacity(self.stages.len());
        let mut prob_sum = vec![0.0f64; rois.len() * k];
        if rois.is_empty() {
            return Ok((proposals, outputs, vec![Vec::new(); layout.batch], obj_t, reg_t));
        }
        for stage in &self.stages {
            let (logits, deltas) = self.stage_forward(tape, store, stage, feats, strides, &rois)?;
            let probs = tape.softmax(logits)?;
            for (acc, &p) in prob_sum.iter_mut().zip(tape.value(probs).data()) {
                *acc += p.to_f64();
            }
            let refined = refine(stage, &rois, tape.value(deltas), layout.image_hw);
            outputs.push(StageOutput { boxes: rois.iter().map(|r| r.1).collect(), logits: tape.value(logits).clone(), deltas: tape.value(deltas).clone() });
            rois = refined;
        }
        let stages = self.stages.len() as f64;
        let mut per_image: Vec<Vec<Detection>> = vec![Vec::new(); layout.batch];
        for (r, &(n, b)) in rois.iter().enumerate() {
            for c in 1..k {
                let score = prob_sum[r * k + c] / stages;
                per_image[n].push(Detection { bbox: b, score, label: c - 1 });
            }
        }
        let dets = per_image.into_iter().map(|c| postprocess(c, &self.spec.inference)).collect();
        Ok((proposals, outputs, dets, obj_t, reg_t))
    }
}

/// Per-roi class targets at the stage threshold, plus foreground rows and
/// their encoded regression targets.
fn label_rois(stage: &BoxStage, rois: &[(usize, [f64; 4])], targets: &[ImageTargets]) -> (Vec<usize>, Vec<usize>, Vec<f64>) {
    let mut labels = Vec::with_capacity(rois.len());
    let mut fg_rows = Vec::new();
    let mut fg_targets = Vec::new();
    for (r, &(n, b)) in rois.iter().enumerate() {
        let t = &targets[n];
        let mut best = (0, 0.0);
        for (g, gt) in t.boxes.iter().enumerate() {
            let v = iou_corners(&b, gt);
            if v > best.1 {
                best = (g, v);
            }
        }
        if best.1 >= stage.iou {
            labels.push(t.labels[best.0] + 1);
            fg_rows.push(r);
            fg_targets.extend(stage.coder.encode(&b, &t.boxes[best.0]));
        } else {
            labels.push(0);
        }
    }
    (labels, fg_rows, fg_targets)
}

/// Applies a stage's regression to its input boxes; the result is a constant.
fn refine<T: Float>(stage: &BoxStage, rois: &[(usize, [f64; 4])], deltas: &Tensor<T>, hw: (usize, usize)) -> Vec<(usize, [f64; 4])> {
    let d = deltas.data();
    rois.iter()
        .enumerate()
        .map(|(r, &(n, b))| {
            let delta = [0, 1, 2, 3].map(|c| d[r * 4 + c].to_f64());
            (n, sanitize(stage.coder.decode(&b, &delta), hw))
        })
        .collect()
}
