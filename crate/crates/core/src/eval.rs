//! COCO-protocol box evaluation: greedy matching, 101-point interpolated
//! AP over IoU thresholds, frequency and size strata, and the smoothed
//! class-wise comparison curve.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::geometry::{iou_corners, nms_indices, score_order, BBox};
use crate::model::Detection;

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    a.iou(b)
}

/// One detection in COCO results format; `bbox` is `[x, y, w, h]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: [f64; 4],
    pub score: f64,
}

impl DetectionRecord {
    fn corners(&self) -> [f64; 4] {
        BBox::new(self.bbox[0], self.bbox[1], self.bbox[2], self.bbox[3]).corners()
    }

    /// Converts model output; class `k` becomes `category_ids[k]`.
    pub fn from_detections(image_id: u64, dets: &[Detection], category_ids: &[u64]) -> Vec<DetectionRecord> {
        dets.iter()
            .map(|d| DetectionRecord { image_id, category_id: category_ids[d.label], bbox: BBox::from_corners(d.bbox).to_array(), score: d.score })
            .collect()
    }
}

/// Per-class greedy NMS within each image, ordered like [`score_order`].
pub fn nms(dets: &[DetectionRecord], iou_threshold: f64) -> Vec<DetectionRecord> {
    let mut groups: BTreeMap<(u64, u64), Vec<usize>> = BTreeMap::new();
    for (i, d) in dets.iter().enumerate() {
        groups.entry((d.image_id, d.category_id)).or_default().push(i);
    }
    let mut out = Vec::with_capacity(dets.len());
    for idx in groups.values() {
        let boxes: Vec<[f64; 4]> = idx.iter().map(|&i| dets[i].corners()).collect();
        let scores: Vec<f64> = idx.iter().map(|&i| dets[i].score).collect();
        out.extend(nms_indices(&boxes, &scores, iou_threshold).into_iter().map(|k| dets[idx[k]]));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_thresholds")]
    pub iou_thresholds: Vec<f64>,
    #[serde(default = "default_max_dets")]
    pub max_dets_per_image: usize,
    /// Upper area bounds of the small and medium bins, pixels².
    #[serde(default = "default_size_bins")]
    pub size_bins: (f64, f64),
    /// Largest training-image counts of rare and common classes.
    #[serde(default = "default_frequency_bins")]
    pub frequency_bins: (usize, usize),
}

fn default_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

fn default_max_dets() -> usize {
    100
}

fn default_size_bins() -> (f64, f64) {
    (32.0 * 32.0, 96.0 * 96.0)
}

fn default_frequency_bins() -> (usize, usize) {
    (10, 100)
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_thresholds: default_thresholds(),
            max_dets_per_image: default_max_dets(),
            size_bins: default_size_bins(),
            frequency_bins: default_frequency_bins(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        let t = &self.iou_thresholds;
        if t.is_empty() || t.iter().any(|&v| !(v > 0.0 && v < 1.0)) || t.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("IoU thresholds must be strictly increasing inside (0, 1)"));
        }
        if self.ap50_index().is_none() {
            return Err(Error::config("IoU thresholds must include 0.5"));
        }
        if self.max_dets_per_image == 0 {
            return Err(Error::config("max_dets_per_image must be >= 1"));
        }
        if !(self.size_bins.0 > 0.0 && self.size_bins.0 < self.size_bins.1) {
            return Err(Error::config("size bins must satisfy 0 < small < medium"));
        }
        if self.frequency_bins.0 >= self.frequency_bins.1 {
            return Err(Error::config("frequency bins must satisfy rare < common"));
        }
        Ok(())
    }

    fn ap50_index(&self) -> Option<usize> {
        self.iou_thresholds.iter().position(|&t| (t - 0.5).abs() < 1e-9)
    }

    /// Area bins in report order: all, small, medium, large.
    pub fn area_ranges(&self) -> [(f64, f64); 4] {
        let (s, m) = self.size_bins;
        [(0.0, f64::INFINITY), (0.0, s), (s, m), (m, f64::INFINITY)]
    }

    pub fn frequency_bin(&self, train_images: usize) -> FrequencyBin {
        let (r, c) = self.frequency_bins;
        if train_images <= r {
            FrequencyBin::Rare
        } else if train_images <= c {
            FrequencyBin::Common
        } else {
            FrequencyBin::Frequent
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrequencyBin {
    Rare,
    Common,
    Frequent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtImage {
    pub id: u64,
    pub boxes: Vec<BBox>,
    /// Class indices into [`GroundTruth::class_names`].
    pub labels: Vec<usize>,
}

/// Evaluation ground truth plus the training statistics used for strata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub class_names: Vec<String>,
    /// COCO category id of each class index.
    pub category_ids: Vec<u64>,
    pub images: Vec<GtImage>,
    /// Distinct training images containing each class.
    pub train_image_counts: Vec<usize>,
    pub train_annotation_counts: Vec<usize>,
}

impl GroundTruth {
    /// Category ids are `class + 1`, matching [`Dataset::to_coco`].
    pub fn from_datasets(eval: &Dataset, train: &Dataset) -> Result<Self> {
        if eval.class_names != train.class_names {
            return Err(Error::data("evaluation and training sets have different class lists"));
        }
        Ok(GroundTruth {
            class_names: eval.class_names.clone(),
            category_ids: (1..=eval.num_classes() as u64).collect(),
            images: eval
                .samples
                .iter()
                .map(|s| GtImage {
                    id: s.id,
                    boxes: s.annotations.iter().map(|a| a.bbox).collect(),
                    labels: s.annotations.iter().map(|a| a.class_id).collect(),
                })
                .collect(),
            train_image_counts: train.class_image_counts(),
            train_annotation_counts: train.class_annotation_counts(),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub name: String,
    /// Mean over IoU thresholds; `None` without ground truth.
    pub ap: Option<f64>,
    pub ap50: Option<f64>,
    pub train_images: usize,
    pub train_annotations: usize,
    pub bin: FrequencyBin,
    /// AP per size bin (small, medium, large).
    pub ap_by_size: [Option<f64>; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub map: f64,
    pub ap50: f64,
    pub map_r: Option<f64>,
    pub map_c: Option<f64>,
    pub map_f: Option<f64>,
    pub map_s: Option<f64>,
    pub map_m: Option<f64>,
    pub map_l: Option<f64>,
    pub per_class: Vec<ClassAp>,
    pub num_images: usize,
    pub num_detections: usize,
}

impl EvalReport {
    pub fn class_names(&self) -> Vec<&str> {
        self.per_class.iter().map(|c| c.name.as_str()).collect()
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values {
        s += v;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

/// Mean of defined per-class values selected by `keep`.
pub fn stratum_mean(per_class: &[ClassAp], value: impl Fn(&ClassAp) -> Option<f64>, keep: impl Fn(&ClassAp) -> bool) -> Option<f64> {
    mean(per_class.iter().filter(|c| keep(c)).filter_map(value))
}

/// 101-point interpolated AP from the cumulative true-positive flags of a
/// score-ordered detection list. Recall comparisons are exact in integers.
pub fn interpolated_ap(is_tp: &[bool], num_gt: usize) -> f64 {
    debug_assert!(num_gt > 0);
    let mut tp = Vec::with_capacity(is_tp.len());
    let mut prec = Vec::with_capacity(is_tp.len());
    let mut t = 0usize;
    for (i, &hit) in is_tp.iter().enumerate() {
        t += hit as usize;
        tp.push(t);
        prec.push(t as f64 / (i + 1) as f64);
    }
    // precision envelope: max over this and every later point
    for i in (0..prec.len().saturating_sub(1)).rev() {
        prec[i] = prec[i].max(prec[i + 1]);
    }
    let mut sum = 0.0;
    let mut j = 0;
    for r in 0..=100usize {
        while j < tp.len() && 100 * tp[j] < r * num_gt {
            j += 1;
        }
        if j < tp.len() {
            sum += prec[j];
        }
    }
    sum / 101.0
}

/// Per-image matching of one class. `dets` are in processing order.
/// Returns per-detection outcomes: `Some(true)` true positive, `Some(false)`
/// false positive, `None` ignored.
fn match_image(dets: &[[f64; 4]], gts: &[[f64; 4]], gt_ignored: &[bool], ious: &[Vec<f64>], threshold: f64, range: (f64, f64)) -> Vec<Option<bool>> {
    // unignored ground truth is tried first
    let mut order: Vec<usize> = (0..gts.len()).collect();
    order.sort_by_key(|&g| gt_ignored[g]);
    let mut taken = vec![false; gts.len()];
    dets.iter()
        .enumerate()
        .map(|(d, b)| {
            let mut best: Option<(usize, f64)> = None;
            for &g in &order {
                if taken[g] {
                    continue;
                }
                if matches!(best, Some((m, _)) if !gt_ignored[m]) && gt_ignored[g] {
                    break;
                }
                let v = ious[d][g];
                if v >= threshold && best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((g, v));
                }
            }
            match best {
                Some((g, _)) => {
                    taken[g] = true;
                    (!gt_ignored[g]).then_some(true)
                }
                None => {
                    let area = crate::geometry::area_corners(b);
                    (area >= range.0 && area < range.1).then_some(false)
                }
            }
        })
        .collect()
}

struct ClassImage {
    image: usize,
    dets: Vec<(f64, [f64; 4])>,
    gts: Vec<[f64; 4]>,
    ious: Vec<Vec<f64>>,
}

/// AP of one class at every threshold for one area range; `None` when the
/// range holds no ground truth of the class.
fn class_ap(items: &[ClassImage], thresholds: &[f64], range: (f64, f64)) -> Option<Vec<f64>> {
    let ignored: Vec<Vec<bool>> = items
        .iter()
        .map(|it| {
            it.gts
                .iter()
                .map(|g| {
                    let a = crate::geometry::area_corners(g);
                    !(a >= range.0 && a < range.1)
                })
                .collect()
        })
        .collect();
    let num_gt: usize = ignored.iter().map(|v| v.iter().filter(|&&i| !i).count()).sum();
    if num_gt == 0 {
        return None;
    }
    let mut order: Vec<(usize, usize)> = items.iter().enumerate().flat_map(|(i, it)| (0..it.dets.len()).map(move |d| (i, d))).collect();
    order.sort_by(|&(ia, da), &(ib, db)| {
        let (a, b) = (&items[ia].dets[da], &items[ib].dets[db]);
        score_order((a.0, &a.1), (b.0, &b.1)).then(items[ia].image.cmp(&items[ib].image)).then(da.cmp(&db))
    });
    let aps = thresholds
        .iter()
        .map(|&t| {
            let outcomes: Vec<Vec<Option<bool>>> = items
                .iter()
                .zip(&ignored)
                .map(|(it, ig)| {
                    let boxes: Vec<[f64; 4]> = it.dets.iter().map(|d| d.1).collect();
                    match_image(&boxes, &it.gts, ig, &it.ious, t, range)
                })
                .collect();
            let flags: Vec<bool> = order.iter().filter_map(|&(i, d)| outcomes[i][d]).collect();
            interpolated_ap(&flags, num_gt)
        })
        .collect();
    Some(aps)
}

/// Evaluates `dets` against `gt`. Detections are capped per image at
/// `max_dets_per_image` by [`score_order`] before matching.
pub fn compute_report(dets: &[DetectionRecord], gt: &GroundTruth, config: &EvalConfig) -> Result<EvalReport> {
    config.validate()?;
    if gt.images.is_empty() {
        return Err(Error::data("cannot evaluate an empty dataset"));
    }
    let k = gt.num_classes();
    if gt.category_ids.len() != k || gt.train_image_counts.len() != k || gt.train_annotation_counts.len() != k {
        return Err(Error::data("ground truth class tables differ in length"));
    }
    let class_of: HashMap<u64, usize> = gt.category_ids.iter().enumerate().map(|(c, &id)| (id, c)).collect();
    let image_of: HashMap<u64, usize> = gt.images.iter().enumerate().map(|(i, im)| (im.id, i)).collect();
    if image_of.len() != gt.images.len() {
        return Err(Error::data("duplicate image ids in ground truth"));
    }
    let mut per_image: Vec<Vec<(f64, [f64; 4], usize)>> = vec![Vec::new(); gt.images.len()];
    for d in dets {
        if !d.score.is_finite() {
            return Err(Error::contract(format!("detection on image {} has a non-finite score", d.image_id)));
        }
        let &i = image_of.get(&d.image_id).ok_or_else(|| Error::data(format!("detection refers to unknown image {}", d.image_id)))?;
        let &c = class_of.get(&d.category_id).ok_or_else(|| Error::data(format!("detection refers to unknown category {}", d.category_id)))?;
        per_image[i].push((d.score, d.corners(), c));
    }
    let mut kept = 0;
    let mut by_class: Vec<Vec<ClassImage>> = (0..k).map(|_| Vec::new()).collect();
    for (i, (mut list, im)) in per_image.into_iter().zip(&gt.images).enumerate() {
        list.sort_by(|a, b| score_order((a.0, &a.1), (b.0, &b.1)).then(a.2.cmp(&b.2)));
        list.truncate(config.max_dets_per_image);
        kept += list.len();
        for (c, items) in by_class.iter_mut().enumerate() {
            let gts: Vec<[f64; 4]> = im.boxes.iter().zip(&im.labels).filter(|(_, &l)| l == c).map(|(b, _)| b.corners()).collect();
            let dets: Vec<(f64, [f64; 4])> = list.iter().filter(|d| d.2 == c).map(|d| (d.0, d.1)).collect();
            if gts.is_empty() && dets.is_empty() {
                continue;
            }
            let ious = dets.iter().map(|d| gts.iter().map(|g| iou_corners(&d.1, g)).collect()).collect();
            items.push(ClassImage { image: i, dets, gts, ious });
        }
        if let Some(&l) = im.labels.iter().find(|&&l| l >= k) {
            return Err(Error::data(format!("image {} has label {l} outside {k} classes", im.id)));
        }
    }
    let ranges = config.area_ranges();
    let a50 = config.ap50_index();
    let per_class: Vec<ClassAp> = by_class
        .iter()
        .enumerate()
        .map(|(c, items)| {
            let all = class_ap(items, &config.iou_thresholds, ranges[0]);
            let size = |r: usize| class_ap(items, &config.iou_thresholds, ranges[r]).and_then(|v| mean(v.into_iter()));
            ClassAp {
                name: gt.class_names[c].clone(),
                ap: all.as_ref().and_then(|v| mean(v.iter().copied())),
                ap50: all.as_ref().and_then(|v| a50.map(|i| v[i])),
                train_images: gt.train_image_counts[c],
                train_annotations: gt.train_annotation_counts[c],
                bin: config.frequency_bin(gt.train_image_counts[c]),
                ap_by_size: [size(1), size(2), size(3)],
            }
        })
        .collect();
    let map = stratum_mean(&per_class, |c| c.ap, |_| true).ok_or_else(|| Error::data("no class has ground truth"))?;
    let ap50 = stratum_mean(&per_class, |c| c.ap50, |_| true).expect("defined wherever ap is");
    let bin = |b: FrequencyBin| stratum_mean(&per_class, |c| c.ap, move |c| c.bin == b);
    let size = |i: usize| stratum_mean(&per_class, move |c| c.ap_by_size[i], |_| true);
    Ok(EvalReport {
        map,
        ap50,
        map_r: bin(FrequencyBin::Rare),
        map_c: bin(FrequencyBin::Common),
        map_f: bin(FrequencyBin::Frequent),
        map_s: size(0),
        map_m: size(1),
        map_l: size(2),
        per_class,
        num_images: gt.images.len(),
        num_detections: kept,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub class: String,
    pub annotations: usize,
    pub delta_raw: f64,
    pub delta_smoothed: f64,
}

/// Normalized Gaussian kernel weights of `xs` at `query`.
pub fn gaussian_weights(xs: &[f64], query: f64, sigma: f64) -> Vec<f64> {
    let raw: Vec<f64> = xs.iter().map(|&x| (-0.5 * ((x - query) / sigma).powi(2)).exp()).collect();
    let z: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / z).collect()
}

/// Per-class `AP_a − AP_b` against training annotation counts, with a
/// Gaussian-smoothed series evaluated at every class's count. Classes
/// without AP in either report are left out. Points are sorted by count.
pub fn classwise_relative_curve(a: &EvalReport, b: &EvalReport, annotation_counts: &[usize], sigma: f64) -> Result<Vec<CurvePoint>> {
    if !(sigma > 0.0) {
        return Err(Error::config("curve sigma must be > 0"));
    }
    if a.class_names() != b.class_names() {
        return Err(Error::data("reports cover different class sets"));
    }
    if annotation_counts.len() != a.per_class.len() {
        return Err(Error::data(format!("{} annotation counts for {} classes", annotation_counts.len(), a.per_class.len())));
    }
    let mut pts: Vec<(usize, &str, f64)> =
        a.per_class.iter().zip(&b.per_class).zip(annotation_counts).filter_map(|((ca, cb), &n)| Some((n, ca.name.as_str(), ca.ap? - cb.ap?))).collect();
    pts.sort_by(|x, y| x.0.cmp(&y.0).then_with(|| x.1.cmp(y.1)));
    let xs: Vec<f64> = pts.iter().map(|p| p.0 as f64).collect();
    Ok(pts
        .iter()
        .map(|&(n, name, d)| {
            let w = gaussian_weights(&xs, n as f64, sigma);
            let smoothed = w.iter().zip(&pts).map(|(w, p)| w * p.2).sum();
            CurvePoint { class: name.to_owned(), annotations: n, delta_raw: d, delta_smoothed: smoothed }
        })
        .collect())
}

pub fn curve_csv(points: &[CurvePoint]) -> String {
    let mut s = String::from("class,annotations,delta_raw,delta_smoothed\n");
    for p in points {
        let _ = writeln!(s, "{},{},{},{}", p.class, p.annotations, p.delta_raw, p.delta_smoothed);
    }
    s
}

pub fn read_detections(path: impl AsRef<std::path::Path>) -> Result<Vec<DetectionRecord>> {
    crate::io::read_json(path)
}

pub fn write_detections(path: impl AsRef<std::path::Path>, dets: &[DetectionRecord]) -> Result<()> {
    crate::io::write_json(path, dets)
}
