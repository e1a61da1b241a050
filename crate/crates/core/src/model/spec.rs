use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: Vec<usize>,
    #[serde(default = "default_input_channels")]
    pub input_channels: usize,
    pub num_pretrain_classes: usize,
}

fn default_input_channels() -> usize {
    3
}

impl BackboneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.len() != self.blocks_per_stage.len() {
            return Err(Error::config(format!("backbone has {} stage widths but {} block counts", self.stage_channels.len(), self.blocks_per_stage.len())));
        }
        if self.stage_channels.len() < 3 {
            return Err(Error::config("backbone must emit at least 3 feature levels"));
        }
        if self.stage_channels.iter().chain(&self.blocks_per_stage).any(|&v| v == 0) || self.input_channels == 0 {
            return Err(Error::config("backbone widths, block counts and input channels must be >= 1"));
        }
        Ok(())
    }

    pub fn num_stages(&self) -> usize {
        self.stage_channels.len()
    }

    /// Output stride of stage `i` (stem downsamples by 4).
    pub fn stage_stride(&self, i: usize) -> usize {
        4 << i
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderVariant {
    /// Lateral 1×1 + top-down sum + one 3×3 output conv per level.
    FpnLite,
    /// FPN-lite plus repeated top-down/bottom-up merge passes with a conv
    /// per merge; the high-capacity decoder.
    MultiMergeLite,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderSpec {
    pub variant: DecoderVariant,
    #[serde(default = "default_filters")]
    pub filters: usize,
    #[serde(default = "default_merge_repeats")]
    pub merge_repeats: usize,
    pub levels: usize,
}

fn default_filters() -> usize {
    256
}

fn default_merge_repeats() -> usize {
    3
}

impl DecoderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.filters == 0 {
            return Err(Error::config("decoder filters must be >= 1"));
        }
        if self.merge_repeats == 0 {
            return Err(Error::config("decoder merge_repeats must be >= 1"));
        }
        if self.levels < 2 {
            return Err(Error::config("decoder needs at least 2 levels"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    SingleStage,
    TwoStage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorConfig {
    #[serde(default = "default_scales")]
    pub scales: Vec<f64>,
    #[serde(default = "default_ratios")]
    pub aspect_ratios: Vec<f64>,
    /// Anchor side at scale 1 as a multiple of the level stride.
    #[serde(default = "default_size_per_stride")]
    pub size_per_stride: f64,
}

fn default_scales() -> Vec<f64> {
    vec![1.0, 2f64.powf(1.0 / 3.0), 2f64.powf(2.0 / 3.0)]
}

fn default_ratios() -> Vec<f64> {
    vec![0.5, 1.0, 2.0]
}

fn default_size_per_stride() -> f64 {
    2.0
}

impl Default for AnchorConfig {
    fn default() -> Self {
        AnchorConfig { scales: default_scales(), aspect_ratios: default_ratios(), size_per_stride: default_size_per_stride() }
    }
}

impl AnchorConfig {
    pub fn per_location(&self) -> usize {
        self.scales.len() * self.aspect_ratios.len()
    }
}

/// Proposal and sampling budget for the two-stage head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProposalConfig {
    pub pre_nms_per_level: usize,
    pub nms_iou: f64,
    pub post_nms_train: usize,
    pub post_nms_eval: usize,
    pub rpn_batch_per_image: usize,
    pub rpn_positive_fraction: f64,
    pub roi_batch_per_image: usize,
    pub roi_positive_fraction: f64,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        ProposalConfig {
            pre_nms_per_level: 1000,
            nms_iou: 0.7,
            post_nms_train: 512,
            post_nms_eval: 256,
            rpn_batch_per_image: 256,
            rpn_positive_fraction: 0.5,
            roi_batch_per_image: 64,
            roi_positive_fraction: 0.25,
        }
    }
}

/// Post-processing of final detections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceConfig {
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig { score_threshold: 0.05, nms_iou: 0.5, max_detections: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadSpec {
    pub kind: HeadKind,
    /// RPN conv depth (two-stage) or tower depth (single-stage).
    #[serde(default = "default_rpn_convs")]
    pub rpn_convs: usize,
    #[serde(default)]
    pub cascade_stages: usize,
    #[serde(default = "default_cascade_ious")]
    pub cascade_ious: Vec<f64>,
    /// Hidden width of the box head (two-stage) or towers (single-stage).
    pub head_filters: usize,
    #[serde(default = "default_roi_pool")]
    pub roi_pool: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub anchors: AnchorConfig,
    #[serde(default)]
    pub proposals: ProposalConfig,
    #[serde(default)]
    pub inference: InferenceConfig,
}

fn default_rpn_convs() -> usize {
    2
}

fn default_cascade_ious() -> Vec<f64> {
    vec![0.5, 0.6, 0.7]
}

fn default_roi_pool() -> usize {
    4
}

impl HeadSpec {
    pub fn validate(&self) -> Result<()> {
        if !(1..=4).contains(&self.rpn_convs) {
            return Err(Error::config(format!("rpn_convs must be in [1, 4], got {}", self.rpn_convs)));
        }
        if self.num_classes == 0 || self.head_filters == 0 || self.roi_pool == 0 {
            return Err(Error::config("num_classes, head_filters and roi_pool must be >= 1"));
        }
        if self.cascade_ious.is_empty() || self.cascade_ious.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::config("cascade IoU thresholds must be non-empty and strictly increasing"));
        }
        if self.cascade_ious.iter().any(|&t| !(t > 0.0 && t < 1.0)) {
            return Err(Error::config("cascade IoU thresholds must lie in (0, 1)"));
        }
        if self.cascade_stages > self.cascade_ious.len() {
            return Err(Error::config(format!("{} cascade stages need as many IoU thresholds, got {}", self.cascade_stages, self.cascade_ious.len())));
        }
        if self.anchors.scales.is_empty() || self.anchors.aspect_ratios.is_empty() {
            return Err(Error::config("anchor scales and aspect ratios must be non-empty"));
        }
        Ok(())
    }

    /// Foreground IoU threshold of every box-head stage; a plain two-stage
    /// head is a single stage at the first threshold.
    pub fn stage_ious(&self) -> Vec<f64> {
        self.cascade_ious[..self.cascade_stages.max(1)].to_vec()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterSpec {
    pub enabled: bool,
    #[serde(default = "default_bottleneck")]
    pub bottleneck_ratio: f64,
}

fn default_bottleneck() -> f64 {
    0.25
}

impl Default for AdapterSpec {
    fn default() -> Self {
        AdapterSpec { enabled: false, bottleneck_ratio: default_bottleneck() }
    }
}

impl AdapterSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.bottleneck_ratio > 0.0 && self.bottleneck_ratio <= 1.0) {
            return Err(Error::config(format!("adapter bottleneck_ratio must be in (0, 1], got {}", self.bottleneck_ratio)));
        }
        Ok(())
    }

    pub fn bottleneck(&self, channels: usize) -> usize {
        ((channels as f64 * self.bottleneck_ratio).round() as usize).max(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorSpec {
    pub backbone: BackboneSpec,
    pub decoder: DecoderSpec,
    pub head: HeadSpec,
    #[serde(default)]
    pub adapter: AdapterSpec,
}

impl DetectorSpec {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.decoder.validate()?;
        self.head.validate()?;
        self.adapter.validate()?;
        if self.decoder.levels > self.backbone.num_stages() {
            return Err(Error::config(format!("decoder wants {} levels but the backbone emits {}", self.decoder.levels, self.backbone.num_stages())));
        }
        Ok(())
    }

    pub fn level_strides(&self) -> Vec<usize> {
        (0..self.decoder.levels).map(|i| self.backbone.stage_stride(i)).collect()
    }

    pub fn max_stride(&self) -> usize {
        self.backbone.stage_stride(self.backbone.num_stages() - 1)
    }
}

/// Small default architectures for laptop-scale runs and tests.
pub mod presets {
    use super::*;

    pub fn desk_backbone(num_pretrain_classes: usize) -> BackboneSpec {
        BackboneSpec { stage_channels: vec![16, 32, 64, 128], blocks_per_stage: vec![1, 1, 1, 1], input_channels: 3, num_pretrain_classes }
    }

    pub fn desk_decoder(variant: DecoderVariant) -> DecoderSpec {
        DecoderSpec { variant, filters: 64, merge_repeats: 3, levels: 3 }
    }

    pub fn desk_head(kind: HeadKind, cascade_stages: usize, num_classes: usize) -> HeadSpec {
        HeadSpec {
            kind,
            rpn_convs: 2,
            cascade_stages,
            cascade_ious: vec![0.5, 0.6, 0.7],
            head_filters: 128,
            roi_pool: 4,
            num_classes,
            anchors: AnchorConfig::default(),
            proposals: ProposalConfig { pre_nms_per_level: 300, ..Default::default() },
            inference: InferenceConfig::default(),
        }
    }

    pub fn desk_detector(variant: DecoderVariant, kind: HeadKind, cascade_stages: usize, num_classes: usize) -> DetectorSpec {
        DetectorSpec {
            backbone: desk_backbone(10),
            decoder: desk_decoder(variant),
            head: desk_head(kind, cascade_stages, num_classes),
            adapter: AdapterSpec::default(),
        }
    }
}
