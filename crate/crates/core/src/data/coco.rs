//! COCO-style annotation files. Consumed fields are typed; every other
//! field is carried through untouched so write-after-read is lossless.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize, Serializer};
use serde_json::{Map, Value};

use crate::data::scene::{Annotation, Dataset, SceneSample};
use crate::data::shapes::Mask;
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::tensor::Tensor;

/// Integral values are written without a fractional part.
fn num<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.fract() == 0.0 && v.abs() < 9.0e15 {
        s.serialize_i64(*v as i64)
    } else {
        s.serialize_f64(*v)
    }
}

fn nums<S: Serializer>(v: &[f64; 4], s: S) -> std::result::Result<S::Ok, S::Error> {
    use serde::ser::SerializeSeq;
    let mut seq = s.serialize_seq(Some(4))?;
    for x in v {
        if x.fract() == 0.0 && x.abs() < 9.0e15 {
            seq.serialize_element(&(*x as i64))?;
        } else {
            seq.serialize_element(x)?;
        }
    }
    seq.end()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    #[serde(serialize_with = "nums")]
    pub bbox: [f64; 4],
    #[serde(serialize_with = "num")]
    pub area: f64,
    pub iscrowd: u8,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: u64,
    pub name: String,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CocoFile {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

/// A record dropped during ingestion.
#[derive(Debug, Clone, PartialEq)]
pub struct Rejected {
    pub array: &'static str,
    pub index: usize,
    pub reason: String,
}

/// Counts of an annotation file, keyed by category id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoSummary {
    pub num_images: usize,
    pub num_annotations: usize,
    pub annotations_per_category: BTreeMap<u64, usize>,
    pub images_per_category: BTreeMap<u64, usize>,
}

fn parse_array<T: serde::de::DeserializeOwned>(root: &Map<String, Value>, name: &'static str) -> Result<Vec<(usize, T)>> {
    let arr = root.get(name).and_then(Value::as_array).ok_or_else(|| Error::format(format!("missing \"{name}\" array")))?;
    arr.iter().enumerate().map(|(i, v)| serde_json::from_value(v.clone()).map(|t| (i, t)).map_err(|e| Error::format(format!("{name}[{i}]: {e}")))).collect()
}

/// Parses an annotation document. Annotations with a non-positive box
/// extent are rejected and reported, not fatal.
pub fn parse_coco_json(text: &str) -> Result<(CocoFile, Vec<Rejected>)> {
    let root: Value = serde_json::from_str(text)?;
    let Value::Object(mut root) = root else {
        return Err(Error::format("annotation file must be a JSON object"));
    };
    let images = parse_array::<CocoImage>(&root, "images")?.into_iter().map(|(_, v)| v).collect();
    let categories = parse_array::<CocoCategory>(&root, "categories")?.into_iter().map(|(_, v)| v).collect();
    let mut rejected = Vec::new();
    let mut annotations = Vec::new();
    for (i, a) in parse_array::<CocoAnnotation>(&root, "annotations")? {
        if !(a.bbox[2] > 0.0 && a.bbox[3] > 0.0) {
            log::warn!("annotations[{i}] (id {}) rejected: bbox {:?} has a non-positive extent", a.id, a.bbox);
            rejected.push(Rejected { array: "annotations", index: i, reason: format!("non-positive bbox extent {:?}", a.bbox) });
        } else {
            annotations.push(a);
        }
    }
    for k in ["images", "annotations", "categories"] {
        root.remove(k);
    }
    Ok((CocoFile { images, annotations, categories, extra: root }, rejected))
}

pub fn read_coco_json(path: impl AsRef<Path>) -> Result<(CocoFile, Vec<Rejected>)> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_coco_json(&text)
}

pub fn write_coco_json(file: &CocoFile, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string(file)?;
    crate::io::write_atomic(path, text.as_bytes())
}

impl CocoFile {
    pub fn summary(&self) -> CocoSummary {
        let mut per_cat = BTreeMap::new();
        let mut img_cat = BTreeMap::<u64, std::collections::BTreeSet<u64>>::new();
        for c in &self.categories {
            per_cat.insert(c.id, 0);
            img_cat.insert(c.id, Default::default());
        }
        for a in &self.annotations {
            *per_cat.entry(a.category_id).or_insert(0) += 1;
            img_cat.entry(a.category_id).or_default().insert(a.image_id);
        }
        CocoSummary {
            num_images: self.images.len(),
            num_annotations: self.annotations.len(),
            annotations_per_category: per_cat,
            images_per_category: img_cat.into_iter().map(|(k, v)| (k, v.len())).collect(),
        }
    }

    /// Category ids in class-index order.
    pub fn category_ids(&self) -> Vec<u64> {
        let mut ids: Vec<u64> = self.categories.iter().map(|c| c.id).collect();
        ids.sort_unstable();
        ids
    }
}

fn rle_value(m: &Mask) -> Value {
    serde_json::json!({ "counts": m.to_rle(), "size": [m.height, m.width] })
}

fn rle_mask(v: Option<&Value>) -> Option<Mask> {
    let obj = v?.as_object()?;
    let size = obj.get("size")?.as_array()?;
    let (h, w) = (size.first()?.as_u64()? as usize, size.get(1)?.as_u64()? as usize);
    let counts: Option<Vec<u32>> = obj.get("counts")?.as_array()?.iter().map(|c| c.as_u64().map(|c| c as u32)).collect();
    Mask::from_rle(h, w, &counts?)
}

impl Dataset {
    /// COCO view of the dataset; masks are stored as uncompressed RLE.
    pub fn to_coco(&self) -> CocoFile {
        let images = self
            .samples
            .iter()
            .map(|s| {
                let mut extra = Map::new();
                if let Some(l) = s.label {
                    extra.insert("label".into(), Value::from(l as u64 + 1));
                }
                CocoImage { id: s.id, file_name: format!("{:06}.f32", s.id), width: s.width() as u32, height: s.height() as u32, extra }
            })
            .collect();
        let annotations = self
            .samples
            .iter()
            .flat_map(|s| {
                s.annotations.iter().map(move |a| {
                    let mut extra = Map::new();
                    extra.insert("segmentation".into(), rle_value(&a.mask));
                    CocoAnnotation {
                        id: a.id,
                        image_id: s.id,
                        category_id: a.class_id as u64 + 1,
                        bbox: a.bbox.to_array(),
                        area: a.mask.area() as f64,
                        iscrowd: 0,
                        extra,
                    }
                })
            })
            .collect();
        let categories = self.class_names.iter().enumerate().map(|(k, n)| CocoCategory { id: k as u64 + 1, name: n.clone(), extra: Map::new() }).collect();
        let mut extra = Map::new();
        extra.insert("info".into(), serde_json::json!({ "description": self.name }));
        CocoFile { images, annotations, categories, extra }
    }

    /// Rebuilds samples from annotations and matching `[C, H, W]` images.
    /// Crowd annotations are logged and skipped; annotations without a
    /// mask get a filled box mask.
    pub fn from_coco(coco: &CocoFile, mut images: BTreeMap<u64, Tensor<f32>>) -> Result<Dataset> {
        let ids = coco.category_ids();
        let class_of: BTreeMap<u64, usize> = ids.iter().enumerate().map(|(k, &id)| (id, k)).collect();
        let mut names: Vec<(u64, String)> = coco.categories.iter().map(|c| (c.id, c.name.clone())).collect();
        names.sort();
        let mut samples = Vec::with_capacity(coco.images.len());
        let mut per_image: BTreeMap<u64, Vec<&CocoAnnotation>> = BTreeMap::new();
        for a in &coco.annotations {
            per_image.entry(a.image_id).or_default().push(a);
        }
        let mut crowd = 0;
        for img in &coco.images {
            let image = images.remove(&img.id).ok_or_else(|| Error::data(format!("no pixels for image {}", img.id)))?;
            let (h, w) = (img.height as usize, img.width as usize);
            if image.rank() != 3 || image.dim(1) != h || image.dim(2) != w {
                return Err(Error::data(format!("image {} pixels {:?} do not match {h}x{w}", img.id, image.shape())));
            }
            let mut anns = Vec::new();
            for a in per_image.remove(&img.id).unwrap_or_default() {
                if a.iscrowd != 0 {
                    crowd += 1;
                    continue;
                }
                let class_id =
                    *class_of.get(&a.category_id).ok_or_else(|| Error::data(format!("annotation {} has unknown category {}", a.id, a.category_id)))?;
                let mask = match rle_mask(a.extra.get("segmentation")) {
                    Some(m) if m.height == h && m.width == w => m,
                    _ => {
                        let mut m = Mask::empty(h, w);
                        let [x, y, bw, bh] = a.bbox;
                        for yy in (y.floor() as usize)..((y + bh).ceil() as usize).min(h) {
                            for xx in (x.floor() as usize)..((x + bw).ceil() as usize).min(w) {
                                m.set(yy, xx, true);
                            }
                        }
                        m
                    }
                };
                let [x, y, bw, bh] = a.bbox;
                anns.push(Annotation { id: a.id, class_id, bbox: BBox::new(x, y, bw, bh), mask });
            }
            let label = img.extra.get("label").and_then(Value::as_u64).map(|l| l as usize - 1);
            samples.push(SceneSample { id: img.id, image, annotations: anns, label });
        }
        if crowd > 0 {
            log::info!("dropped {crowd} crowd annotations");
        }
        let name = coco.extra.get("info").and_then(|i| i.get("description")).and_then(Value::as_str).unwrap_or("coco").to_owned();
        Ok(Dataset { name, class_names: names.into_iter().map(|(_, n)| n).collect(), samples })
    }
}
