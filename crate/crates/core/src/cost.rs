//! Parameter, FLOP and activation-memory accounting per partition.
//!
//! The estimator records one training graph of the detector on a fixed
//! synthetic batch, then decides per node whether the regime needs its
//! gradient: a node needs one when it is a trainable parameter or any of
//! its inputs needs one. Backward FLOPs are the tape's per-edge costs (2×
//! forward for layers producing weight and input gradients, 1× for input
//! gradients only) summed over edges whose producer needs a gradient,
//! attributed to the producer's partition. Layers below the lowest
//! trainable parameter therefore cost nothing backward.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BnMode, NodeProfile, ParamId, ParamStore, Partition, Tape};
use crate::error::{Error, Result};
use crate::model::{Detector, HeadKind, ImageTargets};
use crate::report::{fmt_delta, fmt_millions, fmt_percent, render_table};
use crate::rng;
use crate::tensor::{Float, Tensor};
use crate::train::{RunLog, Sgd, TrainConfig, TrainRegime};

const PROFILE_KEY: u64 = 0xc057;

/// Per-partition tally, in partition order.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionTally {
    pub backbone: u64,
    pub decoder: u64,
    pub head: u64,
    pub adapter: u64,
}

impl PartitionTally {
    pub fn get(&self, p: Partition) -> u64 {
        match p {
            Partition::Backbone => self.backbone,
            Partition::Decoder => self.decoder,
            Partition::Head => self.head,
            Partition::Adapter => self.adapter,
        }
    }

    pub fn total(&self) -> u64 {
        self.backbone + self.decoder + self.head + self.adapter
    }
}

impl From<[u64; 4]> for PartitionTally {
    fn from(v: [u64; 4]) -> Self {
        let at = |p: Partition| v[p.index()];
        PartitionTally { backbone: at(Partition::Backbone), decoder: at(Partition::Decoder), head: at(Partition::Head), adapter: at(Partition::Adapter) }
    }
}

/// Exact counts from the parameter manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub total: usize,
    pub trained: usize,
    pub trained_fraction: f64,
    pub by_partition: BTreeMap<String, (usize, usize)>,
}

pub fn count_params<T: Float>(store: &ParamStore<T>) -> ParamCounts {
    let manifest = store.manifest();
    let mut by_partition = BTreeMap::new();
    for p in Partition::ALL {
        by_partition.insert(p.as_str().to_owned(), (0, 0));
    }
    let (mut total, mut trained) = (0, 0);
    for e in &manifest {
        let n = e.numel();
        let slot = by_partition.get_mut(e.partition.as_str()).expect("all partitions listed");
        slot.0 += n;
        total += n;
        if e.trainable {
            slot.1 += n;
            trained += n;
        }
    }
    ParamCounts { total, trained, trained_fraction: if total == 0 { 0.0 } else { trained as f64 / total as f64 }, by_partition }
}

/// Cost of one recorded node under a regime.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCost {
    pub index: usize,
    pub name: &'static str,
    pub scope: Partition,
    pub forward: u64,
    /// Backward FLOPs per receiving partition.
    pub backward: [u64; 4],
    pub needs_grad: bool,
    /// Bytes of producer outputs this node keeps for its backward rule.
    pub saved_bytes: u64,
}

/// Which nodes of `profile` need a gradient when `trainable` decides
/// parameter leaves: trainable leaves and everything computed from them
/// that the `loss` node depends on.
pub fn gradient_mask(profile: &[NodeProfile], loss: usize, trainable: &dyn Fn(ParamId) -> bool) -> Vec<bool> {
    let mut need = vec![false; profile.len()];
    for (i, n) in profile.iter().enumerate() {
        need[i] = match n.param {
            Some(id) => trainable(id),
            None => n.inputs.iter().any(|e| need[e.src]),
        };
    }
    let mut reaches = vec![false; profile.len()];
    if loss < profile.len() {
        reaches[loss] = true;
    }
    for i in (0..profile.len()).rev() {
        if reaches[i] {
            for e in &profile[i].inputs {
                reaches[e.src] = true;
            }
        }
    }
    need.iter().zip(reaches).map(|(&n, r)| n && r).collect()
}

/// Per-node costs. `frozen_bn` selects the input-gradient cost of batch
/// norms running on stored statistics.
pub fn layer_costs(profile: &[NodeProfile], loss: usize, trainable: &dyn Fn(ParamId) -> bool, frozen_bn: bool) -> Vec<LayerCost> {
    let need = gradient_mask(profile, loss, trainable);
    profile
        .iter()
        .enumerate()
        .map(|(i, n)| {
            let mut backward = [0u64; 4];
            let mut saved = 0;
            if need[i] && n.param.is_none() {
                for (k, e) in n.inputs.iter().enumerate() {
                    if need[e.src] {
                        let f = match (k, n.frozen_stats_input_grad) {
                            (0, Some(f)) if frozen_bn => f,
                            _ => e.grad_flops,
                        };
                        backward[profile[e.src].scope.index()] += f;
                    }
                    if profile[e.src].param.is_none() {
                        saved += profile[e.src].output_bytes;
                    }
                }
            }
            LayerCost { index: i, name: n.name, scope: n.scope, forward: n.forward_flops, backward, needs_grad: need[i], saved_bytes: saved }
        })
        .collect()
}

/// Second-stage cost as a function of the number of sampled RoIs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiRange {
    pub rois_recorded: usize,
    pub rois_min: usize,
    pub rois_max: usize,
    /// FLOPs (forward + backward) of RoI-dependent nodes as recorded.
    pub roi_flops_recorded: u64,
    pub training_flops_min: u64,
    pub training_flops_max: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopEstimate {
    pub input_shape: [usize; 4],
    pub forward: PartitionTally,
    pub backward: PartitionTally,
    pub training_flops: u64,
    /// Saved forward activations needed by the backward pass.
    pub activation_bytes: u64,
    /// Saved activations by the partition that keeps them.
    pub activation_bytes_by_partition: PartitionTally,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub roi_range: Option<RoiRange>,
}

/// Fixed synthetic batch used for estimation: uniform pixels and one
/// centred box per image.
pub fn synthetic_batch<T: Float>(input_shape: [usize; 4]) -> Result<(Tensor<T>, Vec<ImageTargets>)> {
    let [n, c, h, w] = input_shape;
    if n == 0 || c == 0 || h == 0 || w == 0 {
        return Err(Error::config(format!("input shape {input_shape:?} has an empty extent")));
    }
    let mut r = rng::stream(0, &[PROFILE_KEY]);
    let data = (0..n * c * h * w).map(|_| T::from_f64(r.gen::<f64>())).collect();
    let (hf, wf) = (h as f64, w as f64);
    let t = ImageTargets { boxes: vec![[0.25 * wf, 0.25 * hf, 0.75 * wf, 0.75 * hf]], labels: vec![0] };
    Ok((Tensor::new(&[n, c, h, w], data)?, vec![t; n]))
}

/// Records the training graph used by [`estimate_flops`]: synthetic
/// batch, batch-statistics normalization, fixed sampling stream. The
/// graph is the same for every regime of models with equal weights.
pub fn record_training_graph<T: Float>(model: &Detector<T>, input_shape: [usize; 4]) -> Result<(Tape<T>, crate::autodiff::Var)> {
    let (images, targets) = synthetic_batch::<T>(input_shape)?;
    let mut tape = Tape::new(true);
    let terms = model.loss(&mut tape, &images, &targets, BnMode::TrainStats, &mut rng::stream(0, &[PROFILE_KEY, 1]))?;
    tape.set_scope(Partition::Head);
    let mut total = None;
    for (_, v) in &terms.parts {
        total = Some(match total {
            None => *v,
            Some(acc) => tape.add(acc, *v)?,
        });
    }
    let total = total.ok_or_else(|| Error::invariant("model produced no loss terms"))?;
    Ok((tape, total))
}

/// Static training cost of one step on `input_shape` under the model's
/// current trainable flags.
pub fn estimate_flops<T: Float>(model: &Detector<T>, input_shape: [usize; 4]) -> Result<FlopEstimate> {
    let (tape, loss) = record_training_graph(model, input_shape)?;
    let profile = tape.profile();
    let store = &model.store;
    let trainable = |id: ParamId| store.param(id).trainable;
    let frozen_bn = model.train_bn_mode() == BnMode::FrozenStats;
    let layers = layer_costs(&profile, loss.index(), &trainable, frozen_bn);
    let mut fwd = [0u64; 4];
    let mut bwd = [0u64; 4];
    for l in &layers {
        fwd[l.scope.index()] += l.forward;
        for i in 0..4 {
            bwd[i] += l.backward[i];
        }
    }
    // each saved tensor counts once, charged to the first partition
    // whose backward rule keeps it
    let need = gradient_mask(&profile, loss.index(), &trainable);
    let mut owner: BTreeMap<usize, Partition> = BTreeMap::new();
    for (i, n) in profile.iter().enumerate() {
        if need[i] && n.param.is_none() {
            for e in n.inputs.iter().filter(|e| profile[e.src].param.is_none()) {
                owner.entry(e.src).or_insert(n.scope);
            }
        }
    }
    let mut act = [0u64; 4];
    for (&s, p) in &owner {
        act[p.index()] += profile[s].output_bytes;
    }
    let forward = PartitionTally::from(fwd);
    let backward = PartitionTally::from(bwd);
    let training_flops = forward.total() + backward.total();
    let roi_range = match model.spec.head.kind {
        HeadKind::TwoStage => roi_range(model, &profile, &layers, input_shape[0], training_flops, T::DTYPE.size_of() as u64),
        HeadKind::SingleStage => None,
    };
    Ok(FlopEstimate {
        input_shape,
        forward,
        backward,
        training_flops,
        activation_bytes: act.iter().sum(),
        activation_bytes_by_partition: PartitionTally::from(act),
        roi_range,
    })
}

/// RoI-dependent nodes are the head nodes from the first RoI pooling on.
/// Their cost is scaled linearly between one RoI per image and the
/// configured per-image sampling cap.
fn roi_range<T: Float>(model: &Detector<T>, profile: &[NodeProfile], layers: &[LayerCost], n: usize, total: u64, elem: u64) -> Option<RoiRange> {
    let first = profile.iter().position(|p| p.name == "roi_align")?;
    let per_roi_bytes = (model.spec.decoder.filters * model.spec.head.roi_pool * model.spec.head.roi_pool) as u64 * elem;
    let rois_recorded = (profile[first].output_bytes / per_roi_bytes) as usize;
    let dynamic: u64 = layers[first..].iter().filter(|l| l.scope == Partition::Head).map(|l| l.forward + l.backward.iter().sum::<u64>()).sum();
    let fixed = total - dynamic;
    let scaled = |rois: usize| fixed + (dynamic as f64 * rois as f64 / rois_recorded.max(1) as f64).round() as u64;
    let (rois_min, rois_max) = (n, n * model.spec.head.proposals.roi_batch_per_image);
    Some(RoiRange {
        rois_recorded,
        rois_min,
        rois_max,
        roi_flops_recorded: dynamic,
        training_flops_min: scaled(rois_min),
        training_flops_max: scaled(rois_max),
    })
}

/// Cost of one (model, regime) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub model: String,
    pub regime: TrainRegime,
    pub params_total: usize,
    pub params_trained: usize,
    pub trained_fraction: f64,
    pub params_by_partition: BTreeMap<String, (usize, usize)>,
    pub flops: FlopEstimate,
    /// Median measured seconds per training step, when timed.
    #[serde(default)]
    pub step_seconds: Option<f64>,
}

pub fn cost_report<T: Float>(model: &Detector<T>, name: &str, regime: TrainRegime, input_shape: [usize; 4]) -> Result<CostReport> {
    let counts = count_params(&model.store);
    Ok(CostReport {
        model: name.to_owned(),
        regime,
        params_total: counts.total,
        params_trained: counts.trained,
        trained_fraction: counts.trained_fraction,
        params_by_partition: counts.by_partition,
        flops: estimate_flops(model, input_shape)?,
        step_seconds: None,
    })
}

/// Wall time of each of `steps` training steps on one fixed batch after
/// `warmup` untimed steps. The model is trained in the process.
pub fn time_training_steps<T: Float>(
    model: &mut Detector<T>,
    images: &Tensor<T>,
    targets: &[ImageTargets],
    config: &TrainConfig,
    warmup: usize,
    steps: usize,
) -> Result<Vec<f64>> {
    let mut opt = Sgd::new();
    let mut times = Vec::with_capacity(steps);
    for s in 0..warmup + steps {
        let mut r = rng::stream(config.seed, &[PROFILE_KEY, 2, s as u64]);
        let t0 = Instant::now();
        crate::train::train_step(model, &mut opt, images, targets, config, config.base_lr, s, None, &mut r)?;
        if s >= warmup {
            times.push(t0.elapsed().as_secs_f64());
        }
    }
    Ok(times)
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

/// One row of the resource table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub model: String,
    pub regime: TrainRegime,
    pub params_total: usize,
    pub params_trained: usize,
    pub trained_fraction: f64,
    pub backward_flops: u64,
    pub training_flops: u64,
    pub activation_bytes: u64,
    pub steps: usize,
    pub wall_seconds: f64,
    /// `null` when evaluation did not run.
    pub map: Option<f64>,
    /// `mAP(this) − mAP(baseline regime of the same model)`.
    pub delta_map: Option<f64>,
}

/// Joins a cost report with the measured run.
pub fn training_cost_summary(log: &RunLog, report: &CostReport, map: Option<f64>) -> CostRow {
    CostRow {
        model: report.model.clone(),
        regime: report.regime,
        params_total: report.params_total,
        params_trained: report.params_trained,
        trained_fraction: report.trained_fraction,
        backward_flops: report.flops.backward.total(),
        training_flops: report.flops.training_flops,
        activation_bytes: report.flops.activation_bytes,
        steps: log.epochs.iter().map(|e| e.steps).sum(),
        wall_seconds: log.epochs.iter().map(|e| e.wall_seconds).sum(),
        map,
        delta_map: None,
    }
}

/// Fills `delta_map` against the `baseline` row of each model. Rows
/// without an mAP, or whose baseline lacks one, keep `None`.
pub fn attach_deltas(rows: &mut [CostRow], baseline: TrainRegime) {
    let base: BTreeMap<String, Option<f64>> = rows.iter().filter(|r| r.regime == baseline).map(|r| (r.model.clone(), r.map)).collect();
    for r in rows.iter_mut() {
        r.delta_map = match (r.map, base.get(&r.model).copied().flatten()) {
            (Some(m), Some(b)) => Some(m - b),
            _ => None,
        };
    }
}

/// Table with columns model, total params (M), trained params (M),
/// trained %, Δ mAP. Missing values render as `-`.
pub fn render_cost_table(rows: &[CostRow]) -> String {
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                format!("{} [{}]", r.model, r.regime.as_str()),
                fmt_millions(r.params_total),
                fmt_millions(r.params_trained),
                fmt_percent(r.trained_fraction),
                r.delta_map.map_or_else(|| "-".into(), fmt_delta),
            ]
        })
        .collect();
    render_table(&["model", "params (M)", "trained (M)", "trained %", "Δ mAP"], &body)
}
