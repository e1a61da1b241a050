//! On-disk dataset layout: `annotations.json` (COCO), `images.f32` (packed
//! little-endian planes in index order) and `manifest.json`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::coco::{read_coco_json, write_coco_json};
use crate::data::scene::Dataset;
use crate::error::{Error, Result};
use crate::io::{read_json, write_atomic, write_json};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PackEntry {
    id: u64,
    offset: usize,
    shape: [usize; 3],
}

pub fn save_dataset(ds: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let mut bytes = Vec::new();
    let mut index = Vec::with_capacity(ds.samples.len());
    for s in &ds.samples {
        let sh = s.image.shape();
        index.push(PackEntry { id: s.id, offset: bytes.len() / 4, shape: [sh[0], sh[1], sh[2]] });
        for v in s.image.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_atomic(dir.join("images.f32"), &bytes)?;
    write_json(dir.join("images.json"), &index)?;
    write_coco_json(&ds.to_coco(), dir.join("annotations.json"))?;
    write_json(dir.join("manifest.json"), &ds.manifest())
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let (coco, rejected) = read_coco_json(dir.join("annotations.json"))?;
    if !rejected.is_empty() {
        log::warn!("{}: {} annotations rejected", dir.display(), rejected.len());
    }
    let index: Vec<PackEntry> = read_json(dir.join("images.json"))?;
    let path = dir.join("images.f32");
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let mut images = BTreeMap::new();
    for e in index {
        let n = e.shape.iter().product::<usize>();
        let range = e.offset * 4..(e.offset + n) * 4;
        let chunk = bytes.get(range).ok_or_else(|| Error::format(format!("image {} lies outside {}", e.id, path.display())))?;
        let data = chunk.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        images.insert(e.id, Tensor::new(&e.shape, data)?);
    }
    Dataset::from_coco(&coco, images)
}
