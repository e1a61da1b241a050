use std::f64::consts::PI;

use rand::distributions::WeightedIndex;
use rand::prelude::Distribution;
use rand::Rng as _;
use rand_distr::Normal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::shapes::{rasterize, Family, Mask, Pose, Texture};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::model::ImageTargets;
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

/// Objects whose visible area falls below this fraction are dropped.
pub const DEFAULT_MIN_VISIBLE: f64 = 0.05;

const DETECTION_KEY: u64 = 0xd37;
const CLASSIFY_SMALL_KEY: u64 = 0xc5;
const CLASSIFY_LARGE_KEY: u64 = 0xc1;

/// Appearance generator of one object class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeClass {
    pub name: String,
    pub family: Family,
    pub texture: Texture,
    /// Object side in pixels before the aspect stretch.
    pub size_range: (f64, f64),
    /// Width / height ratio range.
    pub aspect_range: (f64, f64),
    /// Largest absolute rotation, radians.
    pub max_rotation: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Frequency {
    Uniform,
    PowerLaw { exponent: f64 },
}

impl Frequency {
    /// Unnormalized class weights; class `k` gets `(k + 1)^-exponent`.
    pub fn weights(&self, classes: usize) -> Vec<f64> {
        match *self {
            Frequency::Uniform => vec![1.0; classes],
            Frequency::PowerLaw { exponent } => (0..classes).map(|k| ((k + 1) as f64).powf(-exponent)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    /// `(height, width)`.
    pub canvas: (usize, usize),
    pub class_catalog: Vec<ShapeClass>,
    pub frequency: Frequency,
    /// Inclusive range.
    pub objects_per_image: (usize, usize),
    pub occlusion_allowed: bool,
    pub seed: u64,
    /// Per-pixel background noise standard deviation.
    #[serde(default = "default_noise")]
    pub noise: f64,
}

fn default_noise() -> f64 {
    0.04
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.class_catalog.len() < 2 {
            return Err(Error::config("a scene spec needs at least 2 classes"));
        }
        if self.canvas.0 == 0 || self.canvas.1 == 0 {
            return Err(Error::config("canvas extents must be >= 1"));
        }
        let (lo, hi) = self.objects_per_image;
        if lo > hi || hi == 0 {
            return Err(Error::config(format!("objects_per_image range ({lo}, {hi}) is invalid")));
        }
        if let Frequency::PowerLaw { exponent } = self.frequency {
            if !(exponent > 0.0) {
                return Err(Error::config("power-law exponent must be > 0"));
            }
        }
        for c in &self.class_catalog {
            let ok = c.size_range.0 > 0.0 && c.size_range.0 <= c.size_range.1 && c.aspect_range.0 > 0.0 && c.aspect_range.0 <= c.aspect_range.1;
            if !ok {
                return Err(Error::config(format!("class {} has an invalid size or aspect range", c.name)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub id: u64,
    pub class_id: usize,
    pub bbox: BBox,
    pub mask: Mask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub id: u64,
    /// `[C, H, W]` in `[0, 1]`.
    pub image: Tensor<f32>,
    pub annotations: Vec<Annotation>,
    /// Image-level label of classification samples.
    pub label: Option<usize>,
}

impl SceneSample {
    pub fn height(&self) -> usize {
        self.image.dim(1)
    }

    pub fn width(&self) -> usize {
        self.image.dim(2)
    }

    /// Checks the tight mask/bbox bound and canvas containment.
    pub fn validate(&self) -> Result<()> {
        for a in &self.annotations {
            if a.mask.height != self.height() || a.mask.width != self.width() {
                return Err(Error::invariant(format!("annotation {} mask does not match the canvas", a.id)));
            }
            match a.mask.bbox() {
                Some(b) if b == a.bbox && a.bbox.w > 0.0 && a.bbox.h > 0.0 => {}
                _ => return Err(Error::invariant(format!("annotation {} bbox {:?} does not bound its mask", a.id, a.bbox))),
            }
        }
        Ok(())
    }

    pub fn targets(&self) -> ImageTargets {
        ImageTargets { boxes: self.annotations.iter().map(|a| a.bbox.corners()).collect(), labels: self.annotations.iter().map(|a| a.class_id).collect() }
    }
}

/// Removes the pixels of `cover` from existing masks. Annotations whose
/// visible area drops below `min_visible` of `reference_area` are removed;
/// the others get recomputed boxes.
pub(crate) fn occlude(annotations: &mut Vec<Annotation>, reference_area: &mut Vec<usize>, cover: &Mask, min_visible: f64) {
    let mut keep = vec![true; annotations.len()];
    for (i, a) in annotations.iter_mut().enumerate() {
        for (b, &c) in a.mask.bits.iter_mut().zip(&cover.bits) {
            if c {
                *b = false;
            }
        }
        let area = a.mask.area();
        match a.mask.bbox() {
            Some(bb) if area as f64 >= min_visible * reference_area[i] as f64 => a.bbox = bb,
            _ => keep[i] = false,
        }
    }
    let mut it = keep.iter();
    annotations.retain(|_| *it.next().expect("same length"));
    let mut it = keep.iter();
    reference_area.retain(|_| *it.next().expect("same length"));
}

struct Canvas {
    h: usize,
    w: usize,
    pixels: Vec<f32>,
}

impl Canvas {
    fn background(h: usize, w: usize, noise: f64, r: &mut Rng) -> Self {
        let base: [f64; 3] = [r.gen_range(0.05..0.35), r.gen_range(0.05..0.35), r.gen_range(0.05..0.35)];
        let (gx, gy) = (r.gen_range(-0.1..0.1), r.gen_range(-0.1..0.1));
        let nd = Normal::new(0.0, noise.max(1e-12)).expect("positive std");
        let mut pixels = vec![0.0f32; 3 * h * w];
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let v = base[c] + gx * (x as f64 / w as f64 - 0.5) + gy * (y as f64 / h as f64 - 0.5) + nd.sample(r);
                    pixels[(c * h + y) * w + x] = v.clamp(0.0, 1.0) as f32;
                }
            }
        }
        Canvas { h, w, pixels }
    }

    fn into_tensor(self) -> Tensor<f32> {
        Tensor::new(&[3, self.h, self.w], self.pixels).expect("canvas extents are positive")
    }
}

/// Draws one object of `class` at a random pose; returns its mask (possibly
/// empty when clipped away).
fn draw_object(canvas: &mut Canvas, class: &ShapeClass, pose: &Pose, r: &mut Rng) -> Mask {
    let primary: [f64; 3] = loop {
        let c = [r.gen_range(0.15..1.0), r.gen_range(0.15..1.0), r.gen_range(0.15..1.0)];
        if c.iter().cloned().fold(0.0, f64::max) >= 0.6 {
            break c;
        }
    };
    let secondary = primary.map(|v| v * 0.35);
    let mut mask = Mask::empty(canvas.h, canvas.w);
    let (h, w) = (canvas.h, canvas.w);
    rasterize(class.family, class.texture, pose, h, w, |y, x, alt| {
        mask.set(y, x, true);
        let col = if alt { secondary } else { primary };
        for c in 0..3 {
            canvas.pixels[(c * h + y) * w + x] = col[c] as f32;
        }
    });
    mask
}

fn random_pose(class: &ShapeClass, canvas: (usize, usize), centred: bool, r: &mut Rng) -> Pose {
    let side = r.gen_range(class.size_range.0..=class.size_range.1);
    let aspect = r.gen_range(class.aspect_range.0..=class.aspect_range.1);
    let (half_w, half_h) = (0.5 * side * aspect.sqrt(), 0.5 * side / aspect.sqrt());
    let angle = if class.max_rotation > 0.0 { r.gen_range(-class.max_rotation..=class.max_rotation) } else { 0.0 };
    let (h, w) = (canvas.0 as f64, canvas.1 as f64);
    let (cx, cy) = if centred {
        (w / 2.0 + r.gen_range(-0.1..0.1) * w, h / 2.0 + r.gen_range(-0.1..0.1) * h)
    } else {
        let mx = half_w.min(w / 2.0);
        let my = half_h.min(h / 2.0);
        (r.gen_range(mx..=w - mx), r.gen_range(my..=h - my))
    };
    Pose { cx, cy, half_w, half_h, angle }
}

fn scene(spec: &SceneSpec, weights: &WeightedIndex<f64>, index: u64) -> SceneSample {
    let mut r = rng::stream(spec.seed, &[DETECTION_KEY, index]);
    let (h, w) = spec.canvas;
    let mut canvas = Canvas::background(h, w, spec.noise, &mut r);
    let count = r.gen_range(spec.objects_per_image.0..=spec.objects_per_image.1);
    let mut annotations: Vec<Annotation> = Vec::new();
    let mut reference = Vec::new();
    let mut occupied = Mask::empty(h, w);
    for _ in 0..count {
        let class_id = weights.sample(&mut r);
        let class = &spec.class_catalog[class_id];
        let mut pose = random_pose(class, spec.canvas, false, &mut r);
        if !spec.occlusion_allowed {
            // rejection-sample a free spot; give up on the object otherwise
            let mut tries = 0;
            loop {
                let mut clash = false;
                rasterize(class.family, class.texture, &pose, h, w, |y, x, _| clash |= occupied.get(y, x));
                if !clash {
                    break;
                }
                tries += 1;
                if tries == 30 {
                    break;
                }
                pose = random_pose(class, spec.canvas, false, &mut r);
            }
            if tries == 30 {
                continue;
            }
        }
        let mask = draw_object(&mut canvas, class, &pose, &mut r);
        let area = mask.area();
        let Some(bbox) = mask.bbox() else { continue };
        occlude(&mut annotations, &mut reference, &mask, DEFAULT_MIN_VISIBLE);
        for (o, &m) in occupied.bits.iter_mut().zip(&mask.bits) {
            *o |= m;
        }
        annotations.push(Annotation { id: 0, class_id, bbox, mask });
        reference.push(area);
    }
    for (i, a) in annotations.iter_mut().enumerate() {
        a.id = index * 1000 + i as u64 + 1;
    }
    SceneSample { id: index, image: canvas.into_tensor(), annotations, label: None }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub class_names: Vec<String>,
    pub samples: Vec<SceneSample>,
}

/// Summary counts plus a content digest of images and annotations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub num_images: usize,
    pub num_annotations: usize,
    pub class_names: Vec<String>,
    pub class_annotation_counts: Vec<usize>,
    pub class_image_counts: Vec<usize>,
    pub sha256: String,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_annotation_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes()];
        for s in &self.samples {
            for a in &s.annotations {
                c[a.class_id] += 1;
            }
        }
        c
    }

    /// Number of distinct images containing each class.
    pub fn class_image_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes()];
        for s in &self.samples {
            let mut seen = vec![false; self.num_classes()];
            for a in &s.annotations {
                seen[a.class_id] = true;
            }
            if let Some(l) = s.label {
                seen[l] = true;
            }
            for (k, v) in seen.into_iter().enumerate() {
                c[k] += v as usize;
            }
        }
        c
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for s in &self.samples {
            h.update(s.id.to_le_bytes());
            h.update(s.image.to_le_bytes());
            h.update((s.label.map_or(u64::MAX, |l| l as u64)).to_le_bytes());
            for a in &s.annotations {
                h.update(a.id.to_le_bytes());
                h.update((a.class_id as u64).to_le_bytes());
                for v in a.bbox.to_array() {
                    h.update(v.to_le_bytes());
                }
                for c in a.mask.to_rle() {
                    h.update(c.to_le_bytes());
                }
            }
        }
        hex::encode(h.finalize())
    }

    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            name: self.name.clone(),
            num_images: self.samples.len(),
            num_annotations: self.samples.iter().map(|s| s.annotations.len()).sum(),
            class_names: self.class_names.clone(),
            class_annotation_counts: self.class_annotation_counts(),
            class_image_counts: self.class_image_counts(),
            sha256: self.digest(),
        }
    }

    /// Deterministic split: the first `n` samples and the rest.
    pub fn split_at(&self, n: usize) -> (Dataset, Dataset) {
        let n = n.min(self.samples.len());
        let part =
            |suffix: &str, s: &[SceneSample]| Dataset { name: format!("{}:{suffix}", self.name), class_names: self.class_names.clone(), samples: s.to_vec() };
        (part("a", &self.samples[..n]), part("b", &self.samples[n..]))
    }
}

/// Multi-object scenes; deterministic in `(spec, n_images)`.
pub fn generate_detection_set(spec: &SceneSpec, n_images: usize) -> Result<Dataset> {
    spec.validate()?;
    if n_images == 0 {
        return Err(Error::config("n_images must be >= 1"));
    }
    let weights = WeightedIndex::new(spec.frequency.weights(spec.class_catalog.len())).map_err(|e| Error::config(e.to_string()))?;
    let samples = (0..n_images as u64).into_par_iter().map(|i| scene(spec, &weights, i)).collect();
    Ok(Dataset { name: "detection".into(), class_names: spec.class_catalog.iter().map(|c| c.name.clone()).collect(), samples })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PretrainScale {
    Small,
    LargeDiverse,
}

impl PretrainScale {
    pub fn as_str(self) -> &'static str {
        match self {
            PretrainScale::Small => "small",
            PretrainScale::LargeDiverse => "large_diverse",
        }
    }
}

/// Parameters of a classification analog.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassificationSpec {
    pub canvas: (usize, usize),
    pub images: usize,
    pub seed: u64,
}

impl ClassificationSpec {
    pub fn default_for(scale: PretrainScale, seed: u64) -> Self {
        let images = match scale {
            PretrainScale::Small => 2000,
            PretrainScale::LargeDiverse => 10_000,
        };
        ClassificationSpec { canvas: (32, 32), images, seed }
    }
}

fn class_name(f: Family, t: Texture) -> String {
    format!("{}_{}", f.as_str(), t.as_str())
}

/// The class catalog of a pretraining scale. `small` has one texture per
/// family and narrow appearance ranges; `large_diverse` crosses every
/// family with every texture and widens size, aspect and rotation.
pub fn classification_catalog(scale: PretrainScale, canvas: (usize, usize)) -> Vec<ShapeClass> {
    let side = canvas.0.min(canvas.1) as f64;
    match scale {
        PretrainScale::Small => Family::ALL
            .iter()
            .map(|&f| ShapeClass {
                name: class_name(f, Texture::Solid),
                family: f,
                texture: Texture::Solid,
                size_range: (0.5 * side, 0.7 * side),
                aspect_range: (0.85, 1.15),
                max_rotation: 0.3,
            })
            .collect(),
        PretrainScale::LargeDiverse => Family::ALL
            .iter()
            .flat_map(|&f| {
                Texture::ALL.iter().map(move |&t| ShapeClass {
                    name: class_name(f, t),
                    family: f,
                    texture: t,
                    size_range: (0.3 * side, 0.85 * side),
                    aspect_range: (0.7, 1.4),
                    max_rotation: PI,
                })
            })
            .collect(),
    }
}

/// Single dominant object per image with an image-level label; classes
/// are drawn uniformly.
pub fn generate_classification_set(scale: PretrainScale, spec: &ClassificationSpec) -> Result<Dataset> {
    if spec.images == 0 || spec.canvas.0 == 0 || spec.canvas.1 == 0 {
        return Err(Error::config("classification set needs images >= 1 and a non-empty canvas"));
    }
    let catalog = classification_catalog(scale, spec.canvas);
    let key = match scale {
        PretrainScale::Small => CLASSIFY_SMALL_KEY,
        PretrainScale::LargeDiverse => CLASSIFY_LARGE_KEY,
    };
    let noise = match scale {
        PretrainScale::Small => 0.03,
        PretrainScale::LargeDiverse => 0.06,
    };
    let samples = (0..spec.images as u64)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(spec.seed, &[key, i]);
            let label = r.gen_range(0..catalog.len());
            let class = &catalog[label];
            let mut canvas = Canvas::background(spec.canvas.0, spec.canvas.1, noise, &mut r);
            let pose = random_pose(class, spec.canvas, true, &mut r);
            let mask = draw_object(&mut canvas, class, &pose, &mut r);
            let annotations = mask.bbox().map(|bbox| Annotation { id: i + 1, class_id: label, bbox, mask }).into_iter().collect();
            SceneSample { id: i, image: canvas.into_tensor(), annotations, label: Some(label) }
        })
        .collect();
    Ok(Dataset { name: scale.as_str().into(), class_names: catalog.into_iter().map(|c| c.name).collect(), samples })
}

/// Detection catalog: the first `families` shape families crossed with
/// `textures`, object sides between 8 and 28 pixels.
pub fn detection_catalog(families: usize, textures: &[Texture]) -> Vec<ShapeClass> {
    textures
        .iter()
        .flat_map(|&t| {
            Family::ALL[..families.min(Family::ALL.len())].iter().map(move |&f| ShapeClass {
                name: class_name(f, t),
                family: f,
                texture: t,
                size_range: (8.0, 28.0),
                aspect_range: (0.75, 1.33),
                max_rotation: PI,
            })
        })
        .collect()
}
