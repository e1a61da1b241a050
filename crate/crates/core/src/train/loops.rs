use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BnMode, ParamStore, Partition, Tape};
use crate::data::{apply_policy, AugmentPolicy, Dataset, SceneSample};
use crate::error::{Error, Result};
use crate::model::{build_classifier, build_detector, BackboneSpec, Classifier, Detector, ImageTargets};
use crate::rng::{self, Rng};
use crate::tensor::{Float, Tensor};

use super::{Checkpoint, Sgd, TrainConfig};

const ORDER_KEY: u64 = 0x0de5;
const SAMPLE_KEY: u64 = 0xa6;
const STEP_KEY: u64 = 0x51;

/// Stacks `[C, H, W]` images into `[N, C, H, W]`; all extents must agree.
pub fn make_batch<T: Float>(samples: &[SceneSample]) -> Result<(Tensor<T>, Vec<ImageTargets>)> {
    let first = samples.first().ok_or_else(|| Error::contract("empty batch"))?;
    let shape = first.image.shape().to_vec();
    let mut data = Vec::with_capacity(samples.len() * first.image.numel());
    for s in samples {
        if s.image.shape() != shape.as_slice() {
            return Err(Error::contract(format!("batch mixes image shapes {:?} and {:?}", shape, s.image.shape())));
        }
        data.extend(s.image.data().iter().map(|&v| T::from_f32(v)));
    }
    let images = Tensor::new(&[samples.len(), shape[0], shape[1], shape[2]], data)?;
    Ok((images, samples.iter().map(SceneSample::targets).collect()))
}

fn partition_map(v: [u64; 4]) -> BTreeMap<String, u64> {
    Partition::ALL.iter().map(|p| (p.as_str().to_owned(), v[p.index()])).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub terms: Vec<(String, f64)>,
    pub total: f64,
    pub forward_flops: [u64; 4],
    pub backward_flops: [u64; 4],
}

/// One optimization step: forward, weighted loss sum, backward, running
/// statistics, SGD. With `class_weights` the step uses the class-balanced
/// classifier loss and frozen normalization statistics.
#[allow(clippy::too_many_arguments)]
pub fn train_step<T: Float>(
    model: &mut Detector<T>,
    opt: &mut Sgd<T>,
    images: &Tensor<T>,
    targets: &[ImageTargets],
    config: &TrainConfig,
    lr: f64,
    step: usize,
    class_weights: Option<&[f64]>,
    rng: &mut Rng,
) -> Result<StepOutput> {
    let mut tape = Tape::new(true);
    let terms = match class_weights {
        Some(w) => model.balanced_loss(&mut tape, images, targets, w, rng)?,
        None => {
            let mode = model.train_bn_mode();
            model.loss(&mut tape, images, targets, mode, rng)?
        }
    };
    // the weighted sum belongs to the head, not the tape's default scope
    tape.set_scope(Partition::Head);
    let mut values = Vec::with_capacity(terms.parts.len());
    let mut total = None;
    for (name, v) in &terms.parts {
        let value = tape.value(*v).item().to_f64();
        if !value.is_finite() {
            return Err(Error::Numerical { step, component: name.clone(), value });
        }
        values.push((name.clone(), value));
        let w = config.loss_weights.weight_for(name);
        let scaled = if w == 1.0 { *v } else { tape.scale(*v, w) };
        total = Some(match total {
            None => scaled,
            Some(acc) => tape.add(acc, scaled)?,
        });
    }
    let total = total.ok_or_else(|| Error::invariant("model produced no loss terms"))?;
    let total_value = tape.value(total).item().to_f64();
    if !total_value.is_finite() {
        return Err(Error::Numerical { step, component: "total".into(), value: total_value });
    }
    let forward_flops = tape.forward_flops();
    let stats = tape.backward(total, &mut model.store)?;
    let updates = tape.take_stat_updates();
    model.store.apply_stat_updates(updates);
    opt.step(&mut model.store, lr, config.momentum, config.weight_decay)?;
    Ok(StepOutput { terms: values, total: total_value, forward_flops, backward_flops: stats.flops })
}

/// One line of the run log. `wall_seconds` is the only field that is not
/// a pure function of seed, config and data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub lr: f64,
    /// Mean per-step value of each loss term.
    pub loss: BTreeMap<String, f64>,
    pub total_loss: f64,
    pub forward_flops: BTreeMap<String, u64>,
    pub backward_flops: BTreeMap<String, u64>,
    /// Backbone share of measured backward FLOPs.
    pub backbone_backward_share: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    pub wall_seconds: f64,
}

impl EpochLog {
    /// The log line with wall time zeroed.
    pub fn deterministic(&self) -> EpochLog {
        EpochLog { wall_seconds: 0.0, ..self.clone() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub epochs: Vec<EpochLog>,
}

impl RunLog {
    /// One JSON object per line.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for e in &self.epochs {
            s.push_str(&serde_json::to_string(e)?);
            s.push('\n');
        }
        Ok(s)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let epochs = text.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect::<std::result::Result<_, _>>()?;
        Ok(RunLog { epochs })
    }

    pub fn deterministic(&self) -> RunLog {
        RunLog { epochs: self.epochs.iter().map(EpochLog::deterministic).collect() }
    }
}

struct EpochAcc {
    start: Instant,
    steps: usize,
    lr: f64,
    loss: BTreeMap<String, f64>,
    total: f64,
    fwd: [u64; 4],
    bwd: [u64; 4],
    correct: usize,
    seen: usize,
}

impl EpochAcc {
    fn new() -> Self {
        EpochAcc { start: Instant::now(), steps: 0, lr: 0.0, loss: BTreeMap::new(), total: 0.0, fwd: [0; 4], bwd: [0; 4], correct: 0, seen: 0 }
    }

    fn add(&mut self, lr: f64, terms: &[(String, f64)], total: f64, fwd: [u64; 4], bwd: [u64; 4]) {
        self.steps += 1;
        self.lr = lr;
        for (k, v) in terms {
            *self.loss.entry(k.clone()).or_insert(0.0) += v;
        }
        self.total += total;
        for i in 0..4 {
            self.fwd[i] += fwd[i];
            self.bwd[i] += bwd[i];
        }
    }

    fn finish(self, epoch: usize, with_accuracy: bool) -> EpochLog {
        let n = self.steps.max(1) as f64;
        let bwd_total: u64 = self.bwd.iter().sum();
        EpochLog {
            epoch,
            steps: self.steps,
            lr: self.lr,
            loss: self.loss.into_iter().map(|(k, v)| (k, v / n)).collect(),
            total_loss: self.total / n,
            forward_flops: partition_map(self.fwd),
            backward_flops: partition_map(self.bwd),
            backbone_backward_share: if bwd_total == 0 { 0.0 } else { self.bwd[Partition::Backbone.index()] as f64 / bwd_total as f64 },
            accuracy: with_accuracy.then(|| self.correct as f64 / self.seen.max(1) as f64),
            wall_seconds: self.start.elapsed().as_secs_f64(),
        }
    }
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, &[ORDER_KEY, epoch as u64]));
    order
}

/// Each sample's augmentation draws from its own `(seed, epoch, index)`
/// stream, so batches can be built in parallel without changing results.
fn augmented_batch(ds: &Dataset, idx: &[usize], policy: &AugmentPolicy, seed: u64, epoch: usize) -> Vec<SceneSample> {
    idx.par_iter()
        .map(|&i| {
            if policy.is_identity() {
                return ds.samples[i].clone();
            }
            let mut r = rng::stream(seed, &[SAMPLE_KEY, epoch as u64, i as u64]);
            let n = ds.samples.len();
            let donor = (n > 1).then(|| {
                let j = r.gen_range(0..n - 1);
                &ds.samples[if j >= i { j + 1 } else { j }]
            });
            apply_policy(&ds.samples[i], donor, policy, &mut r)
        })
        .collect()
}

fn run_detector_loop<T: Float>(
    model: &mut Detector<T>,
    ds: &Dataset,
    config: &TrainConfig,
    policy: &AugmentPolicy,
    class_weights: Option<&[f64]>,
) -> Result<RunLog> {
    config.validate()?;
    policy.validate()?;
    if ds.samples.is_empty() {
        return Err(Error::data("training set is empty"));
    }
    if ds.num_classes() != model.spec.head.num_classes {
        return Err(Error::config(format!("dataset has {} classes, the head {}", ds.num_classes(), model.spec.head.num_classes)));
    }
    let per_epoch = config.steps_per_epoch(ds.samples.len());
    let total = per_epoch * config.epochs;
    let mut opt = Sgd::new();
    let mut log = RunLog::default();
    let mut step = 0;
    for epoch in 0..config.epochs {
        let mut acc = EpochAcc::new();
        let order = epoch_order(ds.samples.len(), config.seed, epoch);
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let samples = augmented_batch(ds, chunk, policy, config.seed, epoch);
            let (images, targets) = make_batch::<T>(&samples)?;
            let lr = config.lr_at(step, total);
            let mut r = rng::stream(config.seed, &[STEP_KEY, epoch as u64, b as u64]);
            let out = train_step(model, &mut opt, &images, &targets, config, lr, step, class_weights, &mut r)?;
            acc.add(lr, &out.terms, out.total, out.forward_flops, out.backward_flops);
            step += 1;
        }
        let line = acc.finish(epoch, false);
        log::info!("epoch {epoch}: loss {:.4} lr {:.5} ({:.1}s)", line.total_loss, line.lr, line.wall_seconds);
        log.epochs.push(line);
    }
    Ok(log)
}

/// The detection training loop. Trainable flags must already reflect the
/// regime; frozen partitions receive no gradient work.
pub fn train_detector<T: Float>(model: &mut Detector<T>, ds: &Dataset, config: &TrainConfig, policy: &AugmentPolicy) -> Result<RunLog> {
    run_detector_loop(model, ds, config, policy, None)
}

/// `w_c ∝ 1 / count_c^α`, normalized to mean 1 over classes present in
/// the counts. Absent classes get weight 1 and are left out of the mean
/// (they never appear as targets). Background (index 0) gets weight 1.
pub fn class_balance_weights(counts: &[usize], alpha: f64) -> Vec<f64> {
    let present: Vec<f64> = counts.iter().filter(|&&c| c > 0).map(|&c| c as f64).collect();
    // w_c = n / Σ_j (c_c / c_j)^α: equal counts give exactly 1.0
    let weight = |c: f64| present.len() as f64 / present.iter().map(|&cj| (c / cj).powf(alpha)).sum::<f64>();
    let mut out = vec![1.0];
    for (k, &c) in counts.iter().enumerate() {
        if c == 0 {
            log::warn!("class {k} has no training annotations; excluded from class balancing");
            out.push(1.0);
        } else {
            out.push(weight(c as f64));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage2Config {
    pub train: TrainConfig,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Re-initialize the classifier layer instead of continuing from the
    /// stage-1 weights.
    #[serde(default)]
    pub reinit_classifier: bool,
}

fn default_alpha() -> f64 {
    1.0
}

/// Tunes only the final classification layer with the class-balanced
/// loss. Trainable flags are restored afterwards.
pub fn balanced_stage2_tune<T: Float>(model: &mut Detector<T>, ds: &Dataset, config: &Stage2Config) -> Result<RunLog> {
    if !(config.alpha >= 0.0) {
        return Err(Error::config("stage-2 alpha must be >= 0"));
    }
    let weights = class_balance_weights(&ds.class_annotation_counts(), config.alpha);
    let saved: Vec<bool> = model.store.params().iter().map(|p| p.trainable).collect();
    let cls = model.classifier_params();
    if config.reinit_classifier {
        let fresh = build_detector::<T>(&model.spec, config.train.seed ^ 0x5eed)?;
        for &id in &cls {
            let name = model.store.param(id).name.clone();
            let src = fresh.store.find_param(&name).ok_or_else(|| Error::invariant(format!("fresh model lacks {name}")))?;
            model.store.param_mut(id).value = fresh.store.param(src).value.clone();
        }
    }
    model.store.set_all_trainable(false);
    for &id in &cls {
        model.store.set_trainable(id, true);
    }
    let out = run_detector_loop(model, ds, &config.train, &AugmentPolicy::default(), Some(&weights));
    let ids: Vec<_> = model.store.param_ids().collect();
    for (id, t) in ids.into_iter().zip(saved) {
        model.store.set_trainable(id, t);
    }
    out
}

fn labels_of(ds: &Dataset) -> Result<Vec<usize>> {
    let k = ds.num_classes();
    ds.samples
        .iter()
        .map(|s| match s.label {
            Some(l) if l < k => Ok(l),
            Some(l) => Err(Error::data(format!("image {} has label {l} outside [0, {k})", s.id))),
            None => Err(Error::data(format!("image {} has no class label", s.id))),
        })
        .collect()
}

fn argmax_hits<T: Float>(logits: &Tensor<T>, labels: &[usize]) -> usize {
    let c = logits.dim(1);
    logits
        .data()
        .chunks_exact(c)
        .zip(labels)
        .filter(|(row, &y)| {
            let best = row.iter().enumerate().fold(0, |b, (i, v)| if *v > row[b] { i } else { b });
            best == y
        })
        .count()
}

#[derive(Debug, Clone)]
pub struct PretrainOutput {
    pub checkpoint: Checkpoint,
    pub log: RunLog,
}

/// Supervised pretraining of backbone plus classification head. The
/// checkpoint holds the final weights and running statistics.
pub fn pretrain_classifier<T: Float>(spec: &BackboneSpec, ds: &Dataset, config: &TrainConfig) -> Result<PretrainOutput> {
    config.validate()?;
    if ds.num_classes() < 2 {
        return Err(Error::data("classification pretraining needs at least 2 classes"));
    }
    if spec.num_pretrain_classes != ds.num_classes() {
        return Err(Error::config(format!("backbone spec expects {} classes, dataset has {}", spec.num_pretrain_classes, ds.num_classes())));
    }
    let labels = labels_of(ds)?;
    let mut model = build_classifier::<T>(spec, config.seed)?;
    let per_epoch = config.steps_per_epoch(ds.samples.len());
    let total = per_epoch * config.epochs;
    let mut opt = Sgd::new();
    let mut log = RunLog::default();
    let mut step = 0;
    for epoch in 0..config.epochs {
        let mut acc = EpochAcc::new();
        for chunk in epoch_order(ds.samples.len(), config.seed, epoch).chunks(config.batch_size) {
            let samples: Vec<SceneSample> = chunk.iter().map(|&i| ds.samples[i].clone()).collect();
            let (images, _) = make_batch::<T>(&samples)?;
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let lr = config.lr_at(step, total);
            let mut tape = Tape::new(true);
            let logits = model.forward_classify(&mut tape, &images, BnMode::TrainStats)?;
            let loss = tape.cross_entropy(logits, &y, None, None)?;
            let value = tape.value(loss).item().to_f64();
            if !value.is_finite() {
                return Err(Error::Numerical { step, component: "classification".into(), value });
            }
            acc.correct += argmax_hits(tape.value(logits), &y);
            acc.seen += y.len();
            let stats = tape.backward(loss, &mut model.store)?;
            let updates = tape.take_stat_updates();
            model.store.apply_stat_updates(updates);
            opt.step(&mut model.store, lr, config.momentum, config.weight_decay)?;
            acc.add(lr, &[("classification".into(), value)], value, tape.forward_flops(), stats.flops);
            step += 1;
        }
        let line = acc.finish(epoch, true);
        log::info!("pretrain epoch {epoch}: loss {:.4} acc {:.3}", line.total_loss, line.accuracy.unwrap_or(0.0));
        log.epochs.push(line);
    }
    let meta = serde_json::json!({ "kind": "classifier", "backbone": spec, "seed": config.seed, "dataset": ds.name });
    Ok(PretrainOutput { checkpoint: Checkpoint::from_store(&model.store, None, meta), log })
}

fn restored_classifier<T: Float>(spec: &BackboneSpec, ckpt: &Checkpoint) -> Result<Classifier<T>> {
    let mut model = build_classifier::<T>(spec, 0)?;
    ckpt.restore_store(&mut model.store)?;
    Ok(model)
}

/// Top-1 accuracy of a pretrained classifier on a labelled set.
pub fn classifier_accuracy<T: Float>(spec: &BackboneSpec, ckpt: &Checkpoint, ds: &Dataset, batch: usize) -> Result<f64> {
    let model = restored_classifier::<T>(spec, ckpt)?;
    let labels = labels_of(ds)?;
    let mut hits = 0;
    for (chunk, y) in ds.samples.chunks(batch.max(1)).zip(labels.chunks(batch.max(1))) {
        let (images, _) = make_batch::<T>(chunk)?;
        let mut tape = Tape::new(false);
        let logits = model.forward_classify(&mut tape, &images, BnMode::FrozenStats)?;
        hits += argmax_hits(tape.value(logits), y);
    }
    Ok(hits as f64 / ds.samples.len().max(1) as f64)
}

fn pooled<T: Float>(model: &Classifier<T>, ds: &Dataset, batch: usize) -> Result<Tensor<T>> {
    let mut rows = Vec::new();
    let mut c = 0;
    for chunk in ds.samples.chunks(batch.max(1)) {
        let (images, _) = make_batch::<T>(chunk)?;
        let mut tape = Tape::new(false);
        let f = model.pooled_features(&mut tape, &images, BnMode::FrozenStats)?;
        c = tape.shape(f)[1];
        rows.extend_from_slice(tape.value(f).data());
    }
    Tensor::new(&[ds.samples.len(), c], rows)
}

/// Accuracy of a softmax-regression probe trained on frozen pooled
/// backbone features. `probe_train` and `probe_test` share a label space
/// that need not match the pretraining classes.
pub fn linear_probe_accuracy<T: Float>(
    spec: &BackboneSpec,
    ckpt: &Checkpoint,
    probe_train: &Dataset,
    probe_test: &Dataset,
    config: &TrainConfig,
) -> Result<f64> {
    config.validate()?;
    let k = probe_train.num_classes();
    if probe_test.num_classes() != k {
        return Err(Error::data("probe splits have different label spaces"));
    }
    let backbone = restored_classifier::<T>(spec, ckpt)?;
    let (xtr, ytr) = (pooled(&backbone, probe_train, 64)?, labels_of(probe_train)?);
    let (xte, yte) = (pooled(&backbone, probe_test, 64)?, labels_of(probe_test)?);
    let c = xtr.dim(1);
    let mut store = ParamStore::<T>::new();
    let w = store.add_param("probe.weight", Partition::Head, Tensor::zeros(&[k, c]));
    let b = store.add_param("probe.bias", Partition::Head, Tensor::zeros(&[k]));
    store.set_all_trainable(true);
    let mut opt = Sgd::new();
    let n = ytr.len();
    let total = config.epochs * config.steps_per_epoch(n);
    let mut step = 0;
    let row = |x: &Tensor<T>, idx: &[usize]| -> Result<Tensor<T>> {
        let mut d = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            d.extend_from_slice(&x.data()[i * c..(i + 1) * c]);
        }
        Tensor::new(&[idx.len(), c], d)
    };
    for epoch in 0..config.epochs {
        for chunk in epoch_order(n, config.seed, epoch).chunks(config.batch_size) {
            let mut tape = Tape::new(true);
            let x = tape.input(row(&xtr, chunk)?);
            let (wv, bv) = (tape.param(&store, w), tape.param(&store, b));
            let logits = tape.linear(x, wv, Some(bv))?;
            let y: Vec<usize> = chunk.iter().map(|&i| ytr[i]).collect();
            let loss = tape.cross_entropy(logits, &y, None, None)?;
            tape.backward(loss, &mut store)?;
            opt.step(&mut store, config.lr_at(step, total), config.momentum, config.weight_decay)?;
            step += 1;
        }
    }
    let mut tape = Tape::new(false);
    let x = tape.input(xte);
    let (wv, bv) = (tape.param(&store, w), tape.param(&store, b));
    let logits = tape.linear(x, wv, Some(bv))?;
    Ok(argmax_hits(tape.value(logits), &yte) as f64 / yte.len().max(1) as f64)
}
