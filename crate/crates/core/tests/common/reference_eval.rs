//! Brute-force evaluator used as the test oracle. Written from the COCO
//! protocol directly on `(x, y, w, h)` boxes, sharing no code with the
//! library beyond plain data.

use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

#[derive(Debug, Clone)]
pub struct RefDet {
    pub image: usize,
    pub class: usize,
    pub b: RefBox,
    pub score: f64,
}

#[derive(Debug, Clone)]
pub struct RefInstance {
    pub num_classes: usize,
    /// Per image: `(class, box)`.
    pub gts: Vec<Vec<(usize, RefBox)>>,
    pub dets: Vec<RefDet>,
    pub train_images: Vec<usize>,
    pub thresholds: Vec<f64>,
    pub max_dets: usize,
    pub size_bins: (f64, f64),
    pub frequency_bins: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefReport {
    pub map: f64,
    pub ap50: f64,
    pub per_class: Vec<Option<f64>>,
    pub per_class_ap50: Vec<Option<f64>>,
    pub strata_freq: [Option<f64>; 3],
    pub strata_size: [Option<f64>; 3],
}

pub fn ref_iou(a: &RefBox, b: &RefBox) -> f64 {
    let ix = ((a.x + a.w).min(b.x + b.w) - a.x.max(b.x)).max(0.0);
    let iy = ((a.y + a.h).min(b.y + b.h) - a.y.max(b.y)).max(0.0);
    let inter = ix * iy;
    let union = a.w * a.h + b.w * b.h - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// `true` when `a` is processed before `b`: higher score, then smaller
/// corners lexicographically.
fn before(a: &RefDet, b: &RefDet) -> std::cmp::Ordering {
    let ka = [a.b.x, a.b.y, a.b.x + a.b.w, a.b.y + a.b.h];
    let kb = [b.b.x, b.b.y, b.b.x + b.b.w, b.b.y + b.b.h];
    let mut o = b.score.partial_cmp(&a.score).unwrap();
    for i in 0..4 {
        o = o.then(ka[i].partial_cmp(&kb[i]).unwrap());
    }
    o
}

/// Interpolated AP: at each recall level `r/100`, the best precision among
/// ranks whose recall reaches it.
pub fn ref_ap(flags: &[bool], num_gt: usize) -> f64 {
    let mut points = Vec::new();
    let mut tp = 0;
    for (i, &f) in flags.iter().enumerate() {
        if f {
            tp += 1;
        }
        points.push((tp as f64 / num_gt as f64, tp as f64 / (i + 1) as f64));
    }
    let mut sum = 0.0;
    for r in 0..=100 {
        let level = r as f64 / 100.0;
        let best = points.iter().filter(|p| p.0 >= level).map(|p| p.1).fold(None, |m: Option<f64>, p| Some(m.map_or(p, |m| m.max(p))));
        sum += best.unwrap_or(0.0);
    }
    sum / 101.0
}

fn in_range(area: f64, range: (f64, f64)) -> bool {
    area >= range.0 && area < range.1
}

/// AP of `class` at `t` within the area `range`, `None` without any
/// in-range ground truth.
fn class_threshold_ap(inst: &RefInstance, dets: &[RefDet], class: usize, t: f64, range: (f64, f64)) -> Option<f64> {
    let num_gt = inst.gts.iter().flatten().filter(|(c, b)| *c == class && in_range(b.w * b.h, range)).count();
    if num_gt == 0 {
        return None;
    }
    let mut mine: Vec<&RefDet> = dets.iter().filter(|d| d.class == class).collect();
    mine.sort_by(|a, b| before(a, b).then(a.image.cmp(&b.image)));
    let mut used: Vec<Vec<bool>> = inst.gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut flags = Vec::new();
    for d in mine {
        let gts = &inst.gts[d.image];
        // prefer any unused in-range ground truth, then unused out-of-range ones
        let pick = |want_in: bool, used: &Vec<bool>| -> Option<usize> {
            let mut best: Option<(usize, f64)> = None;
            for (g, (c, b)) in gts.iter().enumerate() {
                if *c != class || used[g] || in_range(b.w * b.h, range) != want_in {
                    continue;
                }
                let v = ref_iou(&d.b, b);
                if v >= t && best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((g, v));
                }
            }
            best.map(|b| b.0)
        };
        if let Some(g) = pick(true, &used[d.image]) {
            used[d.image][g] = true;
            flags.push(true);
        } else if let Some(g) = pick(false, &used[d.image]) {
            used[d.image][g] = true;
        } else if in_range(d.b.w * d.b.h, range) {
            flags.push(false);
        }
    }
    Some(ref_ap(&flags, num_gt))
}

fn avg(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        None
    } else {
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

pub fn reference_report(inst: &RefInstance) -> RefReport {
    // per-image cap across classes
    let mut dets = Vec::new();
    for img in 0..inst.gts.len() {
        let mut d: Vec<RefDet> = inst.dets.iter().filter(|d| d.image == img).cloned().collect();
        d.sort_by(|a, b| before(a, b).then(a.class.cmp(&b.class)));
        d.truncate(inst.max_dets);
        dets.extend(d);
    }
    let (s, m) = inst.size_bins;
    let ranges = [(0.0, f64::INFINITY), (0.0, s), (s, m), (m, f64::INFINITY)];
    let t50 = inst.thresholds.iter().position(|&t| (t - 0.5).abs() < 1e-9).unwrap();
    let mut per_class = Vec::new();
    let mut per_class_ap50 = Vec::new();
    let mut per_size: Vec<[Option<f64>; 3]> = Vec::new();
    for c in 0..inst.num_classes {
        let all: Option<Vec<f64>> = inst.thresholds.iter().map(|&t| class_threshold_ap(inst, &dets, c, t, ranges[0])).collect();
        per_class.push(all.as_ref().and_then(|v| avg(v)));
        per_class_ap50.push(all.as_ref().map(|v| v[t50]));
        let mut sz = [None; 3];
        for (i, r) in ranges[1..].iter().enumerate() {
            let v: Option<Vec<f64>> = inst.thresholds.iter().map(|&t| class_threshold_ap(inst, &dets, c, t, *r)).collect();
            sz[i] = v.as_ref().and_then(|v| avg(v));
        }
        per_size.push(sz);
    }
    let collect = |f: &dyn Fn(usize) -> Option<f64>, keep: &dyn Fn(usize) -> bool| -> Option<f64> {
        let v: Vec<f64> = (0..inst.num_classes).filter(|&c| keep(c)).filter_map(f).collect();
        avg(&v)
    };
    let bin = |c: usize| {
        let n = inst.train_images[c];
        if n <= inst.frequency_bins.0 {
            0
        } else if n <= inst.frequency_bins.1 {
            1
        } else {
            2
        }
    };
    RefReport {
        map: collect(&|c| per_class[c], &|_| true).unwrap(),
        ap50: collect(&|c| per_class_ap50[c], &|_| true).unwrap(),
        strata_freq: [0, 1, 2].map(|b| collect(&|c| per_class[c], &|c| bin(c) == b)),
        strata_size: [0, 1, 2].map(|i| collect(&|c| per_size[c][i], &|_| true)),
        per_class,
        per_class_ap50,
    }
}

/// A tiny random instance: up to 5 images, 6 boxes each, 3 classes, with
/// near-duplicate detections and tied scores.
pub fn random_instance(rng: &mut impl Rng) -> RefInstance {
    let num_classes = rng.gen_range(1..=3);
    let images = rng.gen_range(1..=5);
    let rand_box = |rng: &mut dyn rand::RngCore| {
        let w = rng.gen_range(2..=30) as f64;
        let h = rng.gen_range(2..=30) as f64;
        RefBox { x: rng.gen_range(0..=40) as f64, y: rng.gen_range(0..=40) as f64, w, h }
    };
    let mut gts = Vec::new();
    let mut dets = Vec::new();
    for img in 0..images {
        let n = rng.gen_range(0..=6);
        let g: Vec<(usize, RefBox)> = (0..n).map(|_| (rng.gen_range(0..num_classes), rand_box(rng))).collect();
        for (c, b) in &g {
            for _ in 0..rng.gen_range(0..=2) {
                let j = |rng: &mut dyn rand::RngCore| rng.gen_range(-3..=3) as f64;
                let nb = RefBox { x: b.x + j(rng), y: b.y + j(rng), w: (b.w + j(rng)).max(1.0), h: (b.h + j(rng)).max(1.0) };
                let class = if rng.gen_bool(0.85) { *c } else { rng.gen_range(0..num_classes) };
                dets.push(RefDet { image: img, class, b: nb, score: rng.gen_range(1..=8) as f64 / 8.0 });
            }
        }
        for _ in 0..rng.gen_range(0..=3) {
            dets.push(RefDet { image: img, class: rng.gen_range(0..num_classes), b: rand_box(rng), score: rng.gen_range(1..=8) as f64 / 8.0 });
        }
        gts.push(g);
    }
    // keep at least one ground-truth box so mAP is defined
    if gts.iter().all(|g| g.is_empty()) {
        gts[0].push((0, RefBox { x: 5.0, y: 5.0, w: 10.0, h: 12.0 }));
    }
    RefInstance {
        num_classes,
        gts,
        dets,
        train_images: (0..num_classes).map(|_| rng.gen_range(0..=150)).collect(),
        thresholds: (0..10).map(|i| 0.5 + 0.05 * i as f64).collect(),
        max_dets: if rng.gen_bool(0.3) { rng.gen_range(1..=4) } else { 100 },
        size_bins: (64.0, 256.0),
        frequency_bins: (10, 100),
    }
}
