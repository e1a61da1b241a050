use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Which part of the detector a parameter belongs to. Governs trainability
/// under each regime and the attribution of cost estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Backbone,
    Adapter,
    Decoder,
    Head,
}

impl Partition {
    pub const ALL: [Partition; 4] = [Partition::Backbone, Partition::Adapter, Partition::Decoder, Partition::Head];

    pub fn as_str(self) -> &'static str {
        match self {
            Partition::Backbone => "backbone",
            Partition::Adapter => "adapter",
            Partition::Decoder => "decoder",
            Partition::Head => "head",
        }
    }

    pub fn tag(self) -> u8 {
        self as u8
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.get(tag as usize).copied()
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Partition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Partition::ALL.into_iter().find(|p| p.as_str() == s).ok_or_else(|| Error::format(format!("unknown partition `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BufferId(pub(crate) usize);

/// A learnable tensor. `grad` is only ever allocated while `trainable`.
#[derive(Debug, Clone)]
pub struct Parameter<T: Float> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub partition: Partition,
    pub trainable: bool,
}

impl<T: Float> Parameter<T> {
    pub fn numel(&self) -> usize {
        self.value.numel()
    }
}

/// Non-learnable state, e.g. normalization running statistics.
#[derive(Debug, Clone)]
pub struct Buffer<T: Float> {
    pub name: String,
    pub value: Tensor<T>,
    pub partition: Partition,
}

/// Owns every parameter and buffer of a model in creation order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Float> {
    params: Vec<Parameter<T>>,
    buffers: Vec<Buffer<T>>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), buffers: Vec::new() }
    }

    pub fn add_param(&mut self, name: impl Into<String>, partition: Partition, value: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(self.find_param(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Parameter { name, value, grad: None, partition, trainable: true });
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, partition: Partition, value: Tensor<T>) -> BufferId {
        self.buffers.push(Buffer { name: name.into(), value, partition });
        BufferId(self.buffers.len() - 1)
    }

    pub fn param(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn buffer(&self, id: BufferId) -> &Buffer<T> {
        &self.buffers[id.0]
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Buffer<T> {
        &mut self.buffers[id.0]
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn buffers(&self) -> &[Buffer<T>] {
        &self.buffers
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find_param(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn find_buffer(&self, name: &str) -> Option<BufferId> {
        self.buffers.iter().position(|b| b.name == name).map(BufferId)
    }

    /// Sets trainability for every parameter of a partition. Freezing drops
    /// any gradient buffer the parameter held.
    pub fn set_partition_trainable(&mut self, partition: Partition, trainable: bool) {
        for p in self.params.iter_mut().filter(|p| p.partition == partition) {
            p.trainable = trainable;
            if !trainable {
                p.grad = None;
            }
        }
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        let p = &mut self.params[id.0];
        p.trainable = trainable;
        if !trainable {
            p.grad = None;
        }
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for id in 0..self.params.len() {
            self.set_trainable(ParamId(id), trainable);
        }
    }

    /// Adds `grad` into the parameter's gradient buffer.
    pub fn accumulate_grad(&mut self, id: ParamId, grad: &Tensor<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if !p.trainable {
            return Err(Error::invariant(format!("gradient produced for frozen parameter {}", p.name)));
        }
        if grad.shape() != p.value.shape() {
            return Err(Error::invariant(format!("gradient shape {:?} does not match parameter {} {:?}", grad.shape(), p.name, p.value.shape())));
        }
        match &mut p.grad {
            Some(g) => g.add_assign(grad),
            None => p.grad = Some(grad.clone()),
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Parameter::numel).sum()
    }

    pub fn num_params_in(&self, partition: Partition) -> usize {
        self.params.iter().filter(|p| p.partition == partition).map(Parameter::numel).sum()
    }

    pub fn num_trainable(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(Parameter::numel).sum()
    }

    /// One line per parameter: `name shape partition trainable`.
    pub fn manifest(&self) -> Vec<ManifestEntry> {
        self.params
            .iter()
            .map(|p| ManifestEntry { name: p.name.clone(), shape: p.value.shape().to_vec(), partition: p.partition, trainable: p.trainable })
            .collect()
    }

    pub fn manifest_text(&self) -> String {
        let mut out = String::new();
        for e in self.manifest() {
            out.push_str(&e.to_string());
            out.push('\n');
        }
        out
    }

    /// SHA-256 over names and little-endian bytes of the selected
    /// parameters and, when `with_buffers`, the buffers of those partitions.
    pub fn checksum(&self, partitions: &[Partition], with_buffers: bool) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| partitions.contains(&p.partition)) {
            h.update(p.name.as_bytes());
            h.update(p.value.to_le_bytes());
        }
        if with_buffers {
            for b in self.buffers.iter().filter(|b| partitions.contains(&b.partition)) {
                h.update(b.name.as_bytes());
                h.update(b.value.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub partition: Partition,
    pub trainable: bool,
}

impl ManifestEntry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

impl fmt::Display for ManifestEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let dims: Vec<String> = self.shape.iter().map(|d| d.to_string()).collect();
        write!(f, "{} [{}] {} {}", self.name, dims.join(","), self.partition, self.trainable)
    }
}
