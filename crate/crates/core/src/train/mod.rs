//! Training regimes, SGD with momentum, learning-rate schedules, the
//! detector and classifier loops, class-balanced stage-2 tuning and
//! checkpoints.

mod checkpoint;
mod loops;

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Partition};
use crate::error::{Error, Result};
use crate::model::{AdapterSpec, Detector};
use crate::tensor::{Float, Tensor};

pub use checkpoint::{Checkpoint, CheckpointEntry, EntryKind, RngState, FORMAT_VERSION, MAGIC};
pub use loops::{
    balanced_stage2_tune, class_balance_weights, classifier_accuracy, linear_probe_accuracy, make_batch, pretrain_classifier, train_detector, train_step,
    EpochLog, PretrainOutput, RunLog, Stage2Config, StepOutput,
};

/// Reference hyper-parameters of the full-scale runs; desk runs scale
/// them down linearly.
pub const REFERENCE_BATCH_SIZE: usize = 64;
pub const REFERENCE_BASE_LR: f64 = 0.08;
pub const REFERENCE_EPOCHS_SHORT: usize = 72;
pub const REFERENCE_EPOCHS_LONG: usize = 600;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainRegime {
    Scratch,
    FineTune,
    Freeze,
    FreezeWithAdapters,
}

impl TrainRegime {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainRegime::Scratch => "scratch",
            TrainRegime::FineTune => "fine_tune",
            TrainRegime::Freeze => "freeze",
            TrainRegime::FreezeWithAdapters => "freeze_with_adapters",
        }
    }

    pub fn freezes_backbone(self) -> bool {
        matches!(self, TrainRegime::Freeze | TrainRegime::FreezeWithAdapters)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Cosine,
    /// Multiply by `step_gamma` at each fraction of `step_milestones`.
    Step,
}

/// Per-component loss multipliers, matched on term names.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub classification: f64,
    pub box_regression: f64,
    pub rpn_objectness: f64,
    pub rpn_box: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { classification: 1.0, box_regression: 1.0, rpn_objectness: 1.0, rpn_box: 1.0 }
    }
}

impl LossWeights {
    pub fn weight_for(&self, term: &str) -> f64 {
        match term {
            "rpn_cls" => self.rpn_objectness,
            "rpn_box" => self.rpn_box,
            t if t == "cls" || t.ends_with("_cls") => self.classification,
            _ => self.box_regression,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub base_lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    pub epochs: usize,
    #[serde(default = "default_schedule")]
    pub schedule: Schedule,
    /// `None` means `min(500, 5% of total steps)`.
    #[serde(default)]
    pub warmup_steps: Option<usize>,
    #[serde(default = "default_milestones")]
    pub step_milestones: Vec<f64>,
    #[serde(default = "default_gamma")]
    pub step_gamma: f64,
    #[serde(default)]
    pub loss_weights: LossWeights,
    #[serde(default)]
    pub seed: u64,
}

fn default_batch() -> usize {
    8
}

/// Linear scaling of the reference pair: 0.08 · 8 / 64.
fn default_lr() -> f64 {
    REFERENCE_BASE_LR * default_batch() as f64 / REFERENCE_BATCH_SIZE as f64
}

fn default_momentum() -> f64 {
    0.9
}

fn default_wd() -> f64 {
    1e-4
}

fn default_schedule() -> Schedule {
    Schedule::Cosine
}

fn default_milestones() -> Vec<f64> {
    vec![2.0 / 3.0, 8.0 / 9.0]
}

fn default_gamma() -> f64 {
    0.1
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: default_batch(),
            base_lr: default_lr(),
            momentum: default_momentum(),
            weight_decay: default_wd(),
            epochs: 1,
            schedule: default_schedule(),
            warmup_steps: None,
            step_milestones: default_milestones(),
            step_gamma: default_gamma(),
            loss_weights: LossWeights::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if !(self.base_lr > 0.0) {
            return Err(Error::config("base_lr must be > 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::config("momentum must lie in [0, 1) and weight_decay be >= 0"));
        }
        if self.step_milestones.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return Err(Error::config("step milestones are fractions of training in [0, 1]"));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, dataset_len: usize) -> usize {
        dataset_len.div_ceil(self.batch_size)
    }

    pub fn warmup_for(&self, total_steps: usize) -> usize {
        self.warmup_steps.unwrap_or_else(|| 500.min(total_steps / 20)).min(total_steps)
    }

    /// Learning rate of `step` (0-based) out of `total_steps`.
    pub fn lr_at(&self, step: usize, total_steps: usize) -> f64 {
        let warm = self.warmup_for(total_steps);
        if step < warm {
            return self.base_lr * (step + 1) as f64 / warm as f64;
        }
        match self.schedule {
            Schedule::Cosine => {
                let span = total_steps.saturating_sub(warm).max(1) as f64;
                let t = ((step - warm) as f64 / span).min(1.0);
                0.5 * self.base_lr * (1.0 + (PI * t).cos())
            }
            Schedule::Step => {
                let passed = self.step_milestones.iter().filter(|&&m| step as f64 >= m * total_steps as f64).count();
                self.base_lr * self.step_gamma.powi(passed as i32)
            }
        }
    }
}

/// Parameter counts per partition after a regime was applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSummary {
    pub regime: TrainRegime,
    /// `(partition, total, trainable)`.
    pub partitions: Vec<(Partition, usize, usize)>,
    pub total: usize,
    pub trainable: usize,
}

impl PartitionSummary {
    pub fn of<T: Float>(store: &ParamStore<T>, regime: TrainRegime) -> Self {
        let partitions = Partition::ALL
            .iter()
            .map(|&p| {
                let all = store.num_params_in(p);
                let tr = store.params().iter().filter(|q| q.partition == p && q.trainable).map(|q| q.numel()).sum();
                (p, all, tr)
            })
            .collect();
        PartitionSummary { regime, partitions, total: store.num_params(), trainable: store.num_trainable() }
    }

    pub fn trainable_fraction(&self) -> f64 {
        self.trainable as f64 / self.total as f64
    }
}

/// Applies `regime`: loads the pretrained backbone where the regime needs
/// one and sets trainable flags. Adapters are inserted for
/// `FreezeWithAdapters` when the model has none.
pub fn partition_parameters<T: Float>(model: &mut Detector<T>, regime: TrainRegime, pretrained: Option<&Checkpoint>) -> Result<PartitionSummary> {
    match (regime, pretrained) {
        (TrainRegime::Scratch, Some(_)) => return Err(Error::config("the scratch regime must not load a pretrained backbone")),
        (TrainRegime::FineTune, None) => return Err(Error::config("fine-tuning needs a pretrained classification checkpoint")),
        (TrainRegime::Freeze | TrainRegime::FreezeWithAdapters, None) => {
            return Err(Error::config("freezing random weights is not a supported regime; supply a pretrained checkpoint"))
        }
        _ => {}
    }
    if let Some(ckpt) = pretrained {
        ckpt.load_into(&mut model.store, &[Partition::Backbone])?;
    }
    model.store.set_all_trainable(true);
    if regime.freezes_backbone() {
        model.store.set_partition_trainable(Partition::Backbone, false);
    }
    if regime == TrainRegime::FreezeWithAdapters && !model.has_adapters() {
        let spec = if model.spec.adapter.enabled { model.spec.adapter.clone() } else { AdapterSpec { enabled: true, ..AdapterSpec::default() } };
        model.insert_adapters(&spec)?;
    }
    if regime != TrainRegime::FreezeWithAdapters {
        model.store.set_partition_trainable(Partition::Adapter, false);
    }
    Ok(PartitionSummary::of(&model.store, regime))
}

/// Momentum buffers, one per parameter.
#[derive(Debug, Clone, Default)]
pub struct Sgd<T: Float> {
    velocity: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Sgd<T> {
    pub fn new() -> Self {
        Sgd { velocity: Vec::new() }
    }

    /// `v ← m·v + g; w ← w − lr·(v + wd·w)` on every trainable parameter
    /// holding a gradient. Gradients are consumed.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64, momentum: f64, weight_decay: f64) -> Result<()> {
        let ids: Vec<_> = store.param_ids().collect();
        if self.velocity.len() < ids.len() {
            self.velocity.resize(ids.len(), None);
        }
        let (lr, m, wd) = (T::from_f64(lr), T::from_f64(momentum), T::from_f64(weight_decay));
        for id in ids {
            let p = store.param_mut(id);
            let Some(g) = p.grad.take() else { continue };
            if !p.trainable {
                return Err(Error::invariant(format!("gradient present on frozen parameter {}", p.name)));
            }
            let v = self.velocity[id.index()].get_or_insert_with(|| Tensor::zeros(g.shape()));
            for ((vi, &gi), wi) in v.data_mut().iter_mut().zip(g.data()).zip(p.value.data_mut()) {
                *vi = m * *vi + gi;
                *wi -= lr * (*vi + wd * *wi);
            }
        }
        Ok(())
    }
}
