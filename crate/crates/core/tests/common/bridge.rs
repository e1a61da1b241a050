//! Maps oracle instances onto library inputs and compares the results.

use detlab::eval::{compute_report, DetectionRecord, EvalConfig, GroundTruth, GtImage};
use detlab::geometry::BBox;
use detlab::rng;

use super::reference_eval::{random_instance, reference_report, RefInstance};

pub fn to_library(inst: &RefInstance) -> (Vec<DetectionRecord>, GroundTruth, EvalConfig) {
    let images = inst
        .gts
        .iter()
        .enumerate()
        .map(|(i, g)| GtImage {
            id: 100 + i as u64,
            boxes: g.iter().map(|(_, b)| BBox::new(b.x, b.y, b.w, b.h)).collect(),
            labels: g.iter().map(|(c, _)| *c).collect(),
        })
        .collect();
    let gt = GroundTruth {
        class_names: (0..inst.num_classes).map(|c| format!("k{c}")).collect(),
        category_ids: (0..inst.num_classes as u64).map(|c| 10 + 3 * c).collect(),
        images,
        train_image_counts: inst.train_images.clone(),
        train_annotation_counts: inst.train_images.clone(),
    };
    let dets = inst
        .dets
        .iter()
        .map(|d| DetectionRecord { image_id: 100 + d.image as u64, category_id: 10 + 3 * d.class as u64, bbox: [d.b.x, d.b.y, d.b.w, d.b.h], score: d.score })
        .collect();
    let config = EvalConfig {
        iou_thresholds: inst.thresholds.clone(),
        max_dets_per_image: inst.max_dets,
        size_bins: inst.size_bins,
        frequency_bins: inst.frequency_bins,
    };
    (dets, gt, config)
}

/// Library and oracle agree exactly on randomized instance `seed`.
pub fn oracle_agrees(seed: u64) -> Result<(), String> {
    let mut r = rng::stream(seed, &[0xe7]);
    let inst = random_instance(&mut r);
    let want = reference_report(&inst);
    let (dets, gt, config) = to_library(&inst);
    let got = compute_report(&dets, &gt, &config).map_err(|e| format!("seed {seed}: {e}"))?;
    let per: Vec<_> = got.per_class.iter().map(|c| c.ap).collect();
    let per50: Vec<_> = got.per_class.iter().map(|c| c.ap50).collect();
    let checks = [
        ("mAP", got.map == want.map),
        ("AP50", got.ap50 == want.ap50),
        ("per-class AP", per == want.per_class),
        ("per-class AP50", per50 == want.per_class_ap50),
        ("frequency strata", [got.map_r, got.map_c, got.map_f] == want.strata_freq),
        ("size strata", [got.map_s, got.map_m, got.map_l] == want.strata_size),
    ];
    match checks.iter().find(|c| !c.1) {
        Some((what, _)) => Err(format!("seed {seed}: {what} differs from the reference")),
        None => Ok(()),
    }
}
