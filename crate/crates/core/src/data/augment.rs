use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::scene::{occlude, Annotation, SceneSample, DEFAULT_MIN_VISIBLE};
use crate::data::shapes::Mask;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Fill value of pixels outside the resized image.
const PAD: f32 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LsjPolicy {
    pub enabled: bool,
    #[serde(default = "default_scale_range")]
    pub scale_range: (f64, f64),
}

fn default_scale_range() -> (f64, f64) {
    (0.1, 2.0)
}

impl Default for LsjPolicy {
    fn default() -> Self {
        LsjPolicy { enabled: false, scale_range: default_scale_range() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CopyPastePolicy {
    pub enabled: bool,
    #[serde(default = "default_max_pasted")]
    pub max_pasted: usize,
    #[serde(default = "default_min_visible")]
    pub min_visible: f64,
}

fn default_max_pasted() -> usize {
    3
}

fn default_min_visible() -> f64 {
    DEFAULT_MIN_VISIBLE
}

impl Default for CopyPastePolicy {
    fn default() -> Self {
        CopyPastePolicy { enabled: false, max_pasted: default_max_pasted(), min_visible: default_min_visible() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentPolicy {
    #[serde(default)]
    pub lsj: LsjPolicy,
    #[serde(default)]
    pub copy_paste: CopyPastePolicy,
}

impl AugmentPolicy {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.lsj.scale_range;
        if !(lo > 0.0 && lo <= 1.0 && hi >= 1.0) {
            return Err(Error::config(format!("LSJ scale range ({lo}, {hi}) must satisfy 0 < lo <= 1 <= hi")));
        }
        if !(0.0..=1.0).contains(&self.copy_paste.min_visible) {
            return Err(Error::config("copy-paste min_visible must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        !self.lsj.enabled && !(self.copy_paste.enabled && self.copy_paste.max_pasted > 0)
    }
}

fn bilinear(plane: &[f32], h: usize, w: usize, y: f64, x: f64) -> f32 {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (ly, lx) = ((y - y0 as f64) as f32, (x - x0 as f64) as f32);
    let top = plane[y0 * w + x0] * (1.0 - lx) + plane[y0 * w + x1] * lx;
    let bottom = plane[y1 * w + x0] * (1.0 - lx) + plane[y1 * w + x1] * lx;
    top * (1.0 - ly) + bottom * ly
}

/// Resize by `scale` (bilinear image, nearest masks), then take the
/// `out_size` window whose top-left sits at `offset` in the resized frame.
/// Negative offsets pad. Boxes are recomputed from the transformed masks;
/// objects with no remaining pixel are dropped.
pub fn lsj_transform(sample: &SceneSample, scale: f64, offset: (isize, isize), out_size: (usize, usize)) -> SceneSample {
    let (c, h, w) = (sample.image.dim(0), sample.height(), sample.width());
    let rh = ((h as f64 * scale).round() as usize).max(1);
    let rw = ((w as f64 * scale).round() as usize).max(1);
    let (sy, sx) = (rh as f64 / h as f64, rw as f64 / w as f64);
    let (oh, ow) = out_size;
    let src = sample.image.data();
    let mut out = vec![PAD; c * oh * ow];
    // resized coordinate of output pixel, when inside the resized image
    let map = |o: usize, off: isize, lim: usize| -> Option<usize> {
        let r = o as isize + off;
        (r >= 0 && (r as usize) < lim).then_some(r as usize)
    };
    for y in 0..oh {
        let Some(ry) = map(y, offset.0, rh) else { continue };
        let fy = (ry as f64 + 0.5) / sy - 0.5;
        for x in 0..ow {
            let Some(rx) = map(x, offset.1, rw) else { continue };
            let fx = (rx as f64 + 0.5) / sx - 0.5;
            for ch in 0..c {
                out[(ch * oh + y) * ow + x] = bilinear(&src[ch * h * w..(ch + 1) * h * w], h, w, fy, fx);
            }
        }
    }
    let annotations = sample
        .annotations
        .iter()
        .filter_map(|a| {
            let mut m = Mask::empty(oh, ow);
            for y in 0..oh {
                let Some(ry) = map(y, offset.0, rh) else { continue };
                let my = (((ry as f64 + 0.5) / sy).floor() as usize).min(h - 1);
                for x in 0..ow {
                    let Some(rx) = map(x, offset.1, rw) else { continue };
                    let mx = (((rx as f64 + 0.5) / sx).floor() as usize).min(w - 1);
                    if a.mask.get(my, mx) {
                        m.set(y, x, true);
                    }
                }
            }
            m.bbox().map(|bbox| Annotation { id: a.id, class_id: a.class_id, bbox, mask: m })
        })
        .collect();
    SceneSample { id: sample.id, image: Tensor::new(&[c, oh, ow], out).expect("output extents are positive"), annotations, label: sample.label }
}

/// Random scale in `scale_range`, random crop (or pad placement) to `out_size`.
pub fn lsj_augment(sample: &SceneSample, scale_range: (f64, f64), out_size: (usize, usize), rng: &mut Rng) -> SceneSample {
    let (lo, hi) = scale_range;
    let s = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    let rh = ((sample.height() as f64 * s).round() as usize).max(1);
    let rw = ((sample.width() as f64 * s).round() as usize).max(1);
    let pick = |r: &mut Rng, resized: usize, out: usize| -> isize {
        if resized >= out {
            r.gen_range(0..=(resized - out)) as isize
        } else {
            -(r.gen_range(0..=(out - resized)) as isize)
        }
    };
    let oy = pick(rng, rh, out_size.0);
    let ox = pick(rng, rw, out_size.1);
    lsj_transform(sample, s, (oy, ox), out_size)
}

/// Composites donor annotation `index` shifted by `shift = (dy, dx)`.
/// `reference` holds the area against which occluded objects are judged.
fn paste_one(target: &mut SceneSample, reference: &mut Vec<usize>, donor: &SceneSample, index: usize, shift: (isize, isize), min_visible: f64) {
    let src = &donor.annotations[index];
    let (h, w) = (target.height(), target.width());
    let (dh, dw) = (donor.height(), donor.width());
    let c = target.image.dim(0).min(donor.image.dim(0));
    let mut cover = Mask::empty(h, w);
    let dimg = donor.image.data();
    let timg = target.image.data_mut();
    for y in 0..dh {
        for x in 0..dw {
            if !src.mask.get(y, x) {
                continue;
            }
            let (ty, tx) = (y as isize + shift.0, x as isize + shift.1);
            if ty < 0 || tx < 0 || ty as usize >= h || tx as usize >= w {
                continue;
            }
            let (ty, tx) = (ty as usize, tx as usize);
            cover.set(ty, tx, true);
            for ch in 0..c {
                timg[(ch * h + ty) * w + tx] = dimg[(ch * dh + y) * dw + x];
            }
        }
    }
    let Some(bbox) = cover.bbox() else { return };
    occlude(&mut target.annotations, reference, &cover, min_visible);
    let id = target.annotations.iter().map(|a| a.id).max().unwrap_or(target.id * 1000) + 1;
    reference.push(cover.area());
    target.annotations.push(Annotation { id, class_id: src.class_id, bbox, mask: cover });
}

/// Deterministic single paste, exposed for tests and tooling.
pub fn paste_object(target: &SceneSample, donor: &SceneSample, index: usize, shift: (isize, isize), min_visible: f64) -> SceneSample {
    let mut out = target.clone();
    let mut reference: Vec<usize> = out.annotations.iter().map(|a| a.mask.area()).collect();
    paste_one(&mut out, &mut reference, donor, index, shift, min_visible);
    out
}

/// Pastes between 1 and `max_pasted` random donor objects at random
/// positions that keep each pasted box inside the target canvas.
pub fn copy_paste_augment(target: &SceneSample, donor: &SceneSample, max_pasted: usize, min_visible: f64, rng: &mut Rng) -> SceneSample {
    let avail = max_pasted.min(donor.annotations.len());
    if avail == 0 {
        return target.clone();
    }
    let k = rng.gen_range(1..=avail);
    let mut idx: Vec<usize> = (0..donor.annotations.len()).collect();
    idx.shuffle(rng);
    let mut out = target.clone();
    let mut reference: Vec<usize> = out.annotations.iter().map(|a| a.mask.area()).collect();
    let (h, w) = (target.height() as f64, target.width() as f64);
    for &i in &idx[..k] {
        let b = donor.annotations[i].bbox;
        let ny = if b.h < h { rng.gen_range(0.0..=(h - b.h)) } else { 0.0 };
        let nx = if b.w < w { rng.gen_range(0.0..=(w - b.w)) } else { 0.0 };
        let shift = ((ny - b.y).round() as isize, (nx - b.x).round() as isize);
        paste_one(&mut out, &mut reference, donor, i, shift, min_visible);
    }
    out
}

/// Applies the enabled augmentations: LSJ to target and donor, then
/// copy-paste from the donor.
pub fn apply_policy(sample: &SceneSample, donor: Option<&SceneSample>, policy: &AugmentPolicy, rng: &mut Rng) -> SceneSample {
    let size = (sample.height(), sample.width());
    let lsj = |s: &SceneSample, r: &mut Rng| {
        if policy.lsj.enabled {
            lsj_augment(s, policy.lsj.scale_range, size, r)
        } else {
            s.clone()
        }
    };
    let out = lsj(sample, rng);
    match donor {
        Some(d) if policy.copy_paste.enabled && policy.copy_paste.max_pasted > 0 => {
            let d = lsj(d, rng);
            copy_paste_augment(&out, &d, policy.copy_paste.max_pasted, policy.copy_paste.min_visible, rng)
        }
        _ => out,
    }
}
