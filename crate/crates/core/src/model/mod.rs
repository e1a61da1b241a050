//! Backbone, decoders, detection heads and residual adapters.

mod anchors;
mod backbone;
mod decoder;
mod heads;
mod layers;
mod single_stage;
pub mod spec;
mod two_stage;

use serde::{Deserialize, Serialize};

use crate::autodiff::{BnMode, ParamId, ParamStore, Partition, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Float, Tensor};

pub use anchors::{assign, level_anchors, AnchorLabel};
pub use heads::{postprocess, LevelLayout, LossTerms, StageOutput};
pub use layers::Init;
pub use spec::*;

use backbone::{build_adapters, Adapter, Backbone};
use decoder::Decoder;
use layers::Dense;
use single_stage::SingleStageHead;
use two_stage::TwoStageHead;

/// Ground truth of one image in corner form; labels are `0..num_classes`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ImageTargets {
    pub boxes: Vec<[f64; 4]>,
    pub labels: Vec<usize>,
}

/// A scored box in corner form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: [f64; 4],
    pub score: f64,
    pub label: usize,
}

/// Everything `forward_detect` produces for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectOutput<T: Float> {
    /// Backbone stage outputs, finest first.
    pub backbone: Vec<Tensor<T>>,
    /// Single-stage class probabilities `[Σ N·HWA, K+1]`, or RPN objectness logits.
    pub anchor_scores: Tensor<T>,
    /// Per-anchor box deltas `[Σ N·HWA, 4]`.
    pub anchor_deltas: Tensor<T>,
    /// Two-stage only: proposals per image.
    pub proposals: Vec<Vec<[f64; 4]>>,
    /// Two-stage only: per-stage raw outputs over all proposals.
    pub stages: Vec<StageOutput<T>>,
    /// Post-processed detections per image.
    pub detections: Vec<Vec<Detection>>,
}

#[derive(Debug, Clone)]
enum Head {
    Single(SingleStageHead),
    Two(TwoStageHead),
}

/// Maps `[0, 1]` pixels to roughly zero-mean unit-scale inputs.
fn normalize<T: Float>(images: &Tensor<T>) -> Tensor<T> {
    images.map(|v| T::from_f64((v.to_f64() - 0.5) / 0.25))
}

fn check_images<T: Float>(images: &Tensor<T>, channels: usize, multiple: usize) -> Result<(usize, usize, usize)> {
    if images.rank() != 4 {
        return Err(Error::contract(format!("images must be NCHW, got shape {:?}", images.shape())));
    }
    let (n, c, h, w) = images.nchw();
    if c != channels {
        return Err(Error::contract(format!("model expects {channels} input channels, images have {c}")));
    }
    if h % multiple != 0 || w % multiple != 0 {
        return Err(Error::contract(format!("image extents {h}x{w} must be divisible by {multiple}")));
    }
    Ok((n, h, w))
}

#[derive(Debug, Clone)]
pub struct Detector<T: Float> {
    pub spec: DetectorSpec,
    pub store: ParamStore<T>,
    seed: u64,
    backbone: Backbone,
    adapters: Option<Vec<Vec<Adapter>>>,
    decoder: Decoder,
    head: Head,
}

/// Builds a detector whose structure is a pure function of `spec` and
/// whose initial weights are a pure function of `(spec, seed)`.
pub fn build_detector<T: Float>(spec: &DetectorSpec, seed: u64) -> Result<Detector<T>> {
    spec.validate()?;
    let init = Init { seed };
    let mut store = ParamStore::new();
    let backbone = Backbone::new(&mut store, &init, &spec.backbone);
    let levels = spec.decoder.levels;
    let decoder = Decoder::new(&mut store, &init, &spec.decoder, &spec.backbone.stage_channels[..levels]);
    let f = spec.decoder.filters;
    let head = match spec.head.kind {
        HeadKind::SingleStage => Head::Single(SingleStageHead::new(&mut store, &init, &spec.head, f)),
        HeadKind::TwoStage => Head::Two(TwoStageHead::new(&mut store, &init, &spec.head, f)),
    };
    let adapters = spec.adapter.enabled.then(|| build_adapters(&mut store, &init, &spec.backbone, &spec.adapter));
    Ok(Detector { spec: spec.clone(), store, seed, backbone, adapters, decoder, head })
}

impl<T: Float> Detector<T> {
    pub fn has_adapters(&self) -> bool {
        self.adapters.is_some()
    }

    /// Adds a zero-initialised residual adapter after every backbone block.
    /// The backbone must already be frozen.
    pub fn insert_adapters(&mut self, spec: &AdapterSpec) -> Result<()> {
        spec.validate()?;
        if self.adapters.is_some() {
            return Err(Error::config("model already has adapters"));
        }
        if self.store.params().iter().any(|p| p.partition == Partition::Backbone && p.trainable) {
            return Err(Error::config("adapters require a frozen backbone (regime FreezeWithAdapters)"));
        }
        let init = Init { seed: self.seed };
        self.adapters = Some(build_adapters(&mut self.store, &init, &self.spec.backbone, spec));
        self.spec.adapter = AdapterSpec { enabled: true, ..spec.clone() };
        Ok(())
    }

    pub fn strides(&self) -> Vec<usize> {
        self.spec.level_strides()
    }

    /// Normalization mode implied by the backbone's trainability.
    pub fn train_bn_mode(&self) -> BnMode {
        if self.store.params().iter().any(|p| p.partition == Partition::Backbone && p.trainable) {
            BnMode::TrainStats
        } else {
            BnMode::FrozenStats
        }
    }

    pub fn check_images(&self, images: &Tensor<T>) -> Result<(usize, usize, usize)> {
        check_images(images, self.spec.backbone.input_channels, self.spec.max_stride())
    }

    /// Backbone stage outputs and decoder features.
    pub fn features(&self, tape: &mut Tape<T>, images: &Tensor<T>, mode: BnMode) -> Result<(Vec<Var>, Vec<Var>)> {
        self.check_images(images)?;
        let x = tape.input(normalize(images));
        let stages = self.backbone.forward(tape, &self.store, x, mode, self.adapters.as_deref())?;
        let feats = self.decoder.forward(tape, &self.store, &stages[..self.spec.decoder.levels])?;
        Ok((stages, feats))
    }

    fn layout(&self, images: &Tensor<T>) -> LevelLayout {
        let (n, _, h, w) = images.nchw();
        LevelLayout::new(&self.spec.head.anchors, &self.strides(), n, (h, w))
    }

    /// Inference pass: frozen normalization statistics, no gradients.
    pub fn forward_detect(&self, images: &Tensor<T>) -> Result<DetectOutput<T>> {
        let mut tape = Tape::new(false);
        let (stages, feats) = self.features(&mut tape, images, BnMode::FrozenStats)?;
        let layout = self.layout(images);
        tape.set_scope(Partition::Head);
        let backbone = stages.iter().map(|&v| tape.value(v).clone()).collect();
        match &self.head {
            Head::Single(h) => {
                let (probs, reg, detections) = h.infer(&mut tape, &self.store, &feats, &layout)?;
                Ok(DetectOutput {
                    backbone,
                    anchor_scores: tape.value(probs).clone(),
                    anchor_deltas: tape.value(reg).clone(),
                    proposals: Vec::new(),
                    stages: Vec::new(),
                    detections,
                })
            }
            Head::Two(h) => {
                let (proposals, stages, detections, obj, reg) = h.infer(&mut tape, &self.store, &feats, &layout, &self.strides())?;
                Ok(DetectOutput { backbone, anchor_scores: obj, anchor_deltas: reg, proposals, stages, detections })
            }
        }
    }

    /// Training losses on a recorded tape.
    pub fn loss(&self, tape: &mut Tape<T>, images: &Tensor<T>, targets: &[ImageTargets], mode: BnMode, rng: &mut Rng) -> Result<LossTerms> {
        self.loss_inner(tape, images, targets, mode, None, rng)
    }

    /// Class-weighted classifier loss used by stage-2 tuning.
    pub fn balanced_loss(&self, tape: &mut Tape<T>, images: &Tensor<T>, targets: &[ImageTargets], weights: &[f64], rng: &mut Rng) -> Result<LossTerms> {
        self.loss_inner(tape, images, targets, BnMode::FrozenStats, Some(weights), rng)
    }

    fn loss_inner(
        &self,
        tape: &mut Tape<T>,
        images: &Tensor<T>,
        targets: &[ImageTargets],
        mode: BnMode,
        weights: Option<&[f64]>,
        rng: &mut Rng,
    ) -> Result<LossTerms> {
        if targets.len() != images.dim(0) {
            return Err(Error::contract(format!("{} target lists for {} images", targets.len(), images.dim(0))));
        }
        let k = self.spec.head.num_classes;
        if let Some(bad) = targets.iter().flat_map(|t| &t.labels).find(|&&l| l >= k) {
            return Err(Error::data(format!("label {bad} outside [0, {k})")));
        }
        if let Some(w) = weights {
            if w.len() != k + 1 {
                return Err(Error::config(format!("class weight vector has {} entries, expected {} (background first)", w.len(), k + 1)));
            }
        }
        let (_, feats) = self.features(tape, images, mode)?;
        let layout = self.layout(images);
        let prev = tape.set_scope(Partition::Head);
        let terms = match &self.head {
            Head::Single(h) => h.loss(tape, &self.store, &feats, &layout, targets, weights)?,
            Head::Two(h) => h.loss(tape, &self.store, &feats, &layout, &self.strides(), targets, weights, rng)?,
        };
        tape.set_scope(prev);
        Ok(terms)
    }

    /// Parameters of the final classification layer(s) of the head.
    pub fn classifier_params(&self) -> Vec<ParamId> {
        match &self.head {
            Head::Single(h) => {
                let mut v = vec![h.cls_out.w];
                v.extend(h.cls_out.b);
                v
            }
            Head::Two(h) => h.stages.iter().flat_map(|s| [s.cls.w, s.cls.b]).collect(),
        }
    }

    pub fn manifest_text(&self) -> String {
        self.store.manifest_text()
    }
}

/// Backbone plus global pooling and a linear head: the pretraining model.
#[derive(Debug, Clone)]
pub struct Classifier<T: Float> {
    pub spec: BackboneSpec,
    pub store: ParamStore<T>,
    backbone: Backbone,
    fc: Dense,
}

pub fn build_classifier<T: Float>(spec: &BackboneSpec, seed: u64) -> Result<Classifier<T>> {
    spec.validate()?;
    if spec.num_pretrain_classes < 2 {
        return Err(Error::config("classification needs num_pretrain_classes >= 2"));
    }
    let init = Init { seed };
    let mut store = ParamStore::new();
    let backbone = Backbone::new(&mut store, &init, spec);
    let c = *spec.stage_channels.last().expect("validated");
    let w = init.normal("classifier.fc.weight", &[spec.num_pretrain_classes, c], 0.01);
    let fc = Dense::new(&mut store, w, "classifier.fc", Partition::Head);
    Ok(Classifier { spec: spec.clone(), store, backbone, fc })
}

impl<T: Float> Classifier<T> {
    /// Globally pooled last-stage features `[N, C]`.
    pub fn pooled_features(&self, tape: &mut Tape<T>, images: &Tensor<T>, mode: BnMode) -> Result<Var> {
        let multiple = self.spec.stage_stride(self.spec.num_stages() - 1);
        check_images(images, self.spec.input_channels, multiple)?;
        let x = tape.input(normalize(images));
        let stages = self.backbone.forward(tape, &self.store, x, mode, None)?;
        let prev = tape.set_scope(Partition::Head);
        let pooled = tape.global_avg_pool(*stages.last().expect("non-empty"));
        tape.set_scope(prev);
        pooled
    }

    /// Logits `[N, num_pretrain_classes]`.
    pub fn forward_classify(&self, tape: &mut Tape<T>, images: &Tensor<T>, mode: BnMode) -> Result<Var> {
        let pooled = self.pooled_features(tape, images, mode)?;
        let prev = tape.set_scope(Partition::Head);
        let logits = self.fc.forward(tape, &self.store, pooled);
        tape.set_scope(prev);
        logits
    }

    pub fn fc_params(&self) -> [ParamId; 2] {
        [self.fc.w, self.fc.b]
    }
}
