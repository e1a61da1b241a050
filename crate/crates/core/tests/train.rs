use std::collections::BTreeSet;
use std::f64::consts::PI;

use detlab::autodiff::{BnMode, ParamStore, Partition, Tape};
use detlab::data::presets::balanced_detection;
use detlab::data::{generate_detection_set, AugmentPolicy, Dataset, SceneSample};
use detlab::model::presets::{desk_backbone, desk_detector};
use detlab::model::{build_classifier, build_detector, DecoderVariant, Detector, HeadKind};
use detlab::rng;
use detlab::train::{
    balanced_stage2_tune, class_balance_weights, classifier_accuracy, make_batch, partition_parameters, pretrain_classifier, train_detector, Checkpoint,
    RngState, Schedule, Sgd, Stage2Config, TrainConfig, TrainRegime,
};
use detlab::{Error, Tensor};
use rand::Rng as _;

fn pretrained(seed: u64) -> Checkpoint {
    let c = build_classifier::<f32>(&desk_backbone(10), seed).unwrap();
    Checkpoint::from_store(&c.store, None, serde_json::Value::Null)
}

fn small_detector(kind: HeadKind) -> Detector<f32> {
    let mut spec = desk_detector(DecoderVariant::FpnLite, kind, 0, 20);
    spec.decoder.filters = 16;
    spec.head.head_filters = 32;
    build_detector::<f32>(&spec, 3).unwrap()
}

fn tiny_set(n: usize) -> Dataset {
    generate_detection_set(&balanced_detection(11), n).unwrap()
}

fn quick(seed: u64) -> TrainConfig {
    TrainConfig { batch_size: 2, epochs: 1, warmup_steps: Some(1), seed, ..TrainConfig::default() }
}

fn names(m: &Detector<f32>, pred: impl Fn(Partition, bool) -> bool) -> BTreeSet<String> {
    m.store.params().iter().filter(|p| pred(p.partition, p.trainable)).map(|p| p.name.clone()).collect()
}

#[test]
fn scratch_trains_everything() {
    let mut m = small_detector(HeadKind::TwoStage);
    let s = partition_parameters(&mut m, TrainRegime::Scratch, None).unwrap();
    assert_eq!(s.trainable, s.total);
    assert_eq!(s.trainable_fraction(), 1.0);
}

#[test]
fn freeze_fraction_matches_enumeration() {
    let mut m = small_detector(HeadKind::TwoStage);
    let s = partition_parameters(&mut m, TrainRegime::Freeze, Some(&pretrained(0))).unwrap();
    let manifest = m.store.manifest();
    let expected: usize =
        manifest.iter().filter(|e| matches!(e.partition, Partition::Decoder | Partition::Head)).map(|e| e.shape.iter().product::<usize>()).sum();
    let total: usize = manifest.iter().map(|e| e.shape.iter().product::<usize>()).sum();
    assert_eq!(s.trainable, expected);
    assert_eq!(s.total, total);
    assert!((s.trainable_fraction() - expected as f64 / total as f64).abs() < 1e-15);
    let bb = s.partitions.iter().find(|p| p.0 == Partition::Backbone).unwrap();
    assert_eq!(bb.2, 0);
}

#[test]
fn freeze_needs_a_checkpoint() {
    for regime in [TrainRegime::Freeze, TrainRegime::FreezeWithAdapters, TrainRegime::FineTune] {
        let mut m = small_detector(HeadKind::TwoStage);
        let err = partition_parameters(&mut m, regime, None).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{regime:?}: {err}");
    }
    let mut m = small_detector(HeadKind::TwoStage);
    assert!(partition_parameters(&mut m, TrainRegime::Scratch, Some(&pretrained(0))).unwrap_err().is_config());
}

#[test]
fn fine_tune_loads_backbone_and_trains_it() {
    let ckpt = pretrained(5);
    let mut m = small_detector(HeadKind::TwoStage);
    let s = partition_parameters(&mut m, TrainRegime::FineTune, Some(&ckpt)).unwrap();
    assert_eq!(s.trainable, s.total);
    let cls = build_classifier::<f32>(&desk_backbone(10), 5).unwrap();
    assert_eq!(m.store.checksum(&[Partition::Backbone], true), cls.store.checksum(&[Partition::Backbone], true));
}

#[test]
fn adapters_extend_the_freeze_set() {
    let ckpt = pretrained(0);
    let mut frozen = small_detector(HeadKind::TwoStage);
    partition_parameters(&mut frozen, TrainRegime::Freeze, Some(&ckpt)).unwrap();
    let mut fwa = small_detector(HeadKind::TwoStage);
    partition_parameters(&mut fwa, TrainRegime::FreezeWithAdapters, Some(&ckpt)).unwrap();
    let freeze_set = names(&frozen, |_, t| t);
    let adapter_set = names(&fwa, |p, _| p == Partition::Adapter);
    let backbone = names(&fwa, |p, _| p == Partition::Backbone);
    let trainable = names(&fwa, |_, t| t);
    assert!(!adapter_set.is_empty());
    assert_eq!(trainable, freeze_set.union(&adapter_set).cloned().collect());
    assert!(trainable.is_disjoint(&backbone));
}

fn scalar_store(w: f64) -> (ParamStore<f64>, detlab::autodiff::ParamId) {
    let mut s = ParamStore::new();
    let id = s.add_param("w", Partition::Head, Tensor::new(&[1], vec![w]).unwrap());
    s.set_all_trainable(true);
    (s, id)
}

fn grad(s: &mut ParamStore<f64>, id: detlab::autodiff::ParamId, g: f64) {
    s.accumulate_grad(id, &Tensor::new(&[1], vec![g]).unwrap()).unwrap();
}

#[test]
fn sgd_examples() {
    let (mut s, id) = scalar_store(0.7);
    let mut opt = Sgd::new();
    grad(&mut s, id, 1.0);
    opt.step(&mut s, 0.0, 0.9, 1e-4).unwrap();
    assert_eq!(s.param(id).value.data()[0], 0.7);

    let (mut s, id) = scalar_store(0.7);
    let mut opt = Sgd::new();
    grad(&mut s, id, 1.0);
    opt.step(&mut s, 0.1, 0.0, 0.0).unwrap();
    assert!((s.param(id).value.data()[0] - 0.6).abs() < 1e-15);

    // v1 = g, v2 = 0.9·g + g: total displacement lr·(1 + 1.9)·g
    let (lr, g) = (0.05, 0.3);
    let (mut s, id) = scalar_store(1.0);
    let mut opt = Sgd::new();
    for _ in 0..2 {
        grad(&mut s, id, g);
        opt.step(&mut s, lr, 0.9, 0.0).unwrap();
    }
    assert!((s.param(id).value.data()[0] - 1.0 + lr * 2.9 * g).abs() < 1e-15);
}

#[test]
fn sgd_leaves_frozen_parameters_alone_and_rejects_their_gradients() {
    let mut s = ParamStore::<f64>::new();
    let a = s.add_param("a", Partition::Backbone, Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
    let b = s.add_param("b", Partition::Head, Tensor::new(&[2], vec![3.0, 4.0]).unwrap());
    s.set_all_trainable(true);
    s.set_trainable(a, false);
    s.accumulate_grad(b, &Tensor::new(&[2], vec![1.0, 1.0]).unwrap()).unwrap();
    assert!(s.accumulate_grad(a, &Tensor::new(&[2], vec![1.0, 1.0]).unwrap()).is_err());
    let before = s.param(a).value.to_le_bytes();
    let mut opt = Sgd::new();
    opt.step(&mut s, 0.1, 0.9, 0.1).unwrap();
    assert_eq!(s.param(a).value.to_le_bytes(), before);
    assert_ne!(s.param(b).value.data(), &[3.0, 4.0]);

    // a gradient smuggled onto a frozen parameter is a bug, not a no-op
    s.param_mut(a).grad = Some(Tensor::new(&[2], vec![1.0, 1.0]).unwrap());
    assert!(matches!(opt.step(&mut s, 0.1, 0.9, 0.1), Err(Error::Invariant(_))));
}

#[test]
fn schedules_match_closed_form() {
    let total = 1000;
    let cos = TrainConfig { base_lr: 0.02, warmup_steps: Some(50), ..TrainConfig::default() };
    for step in [0, 10, 49, 50, 51, 333, 500, 999, 1000] {
        let want = if step < 50 {
            0.02 * (step + 1) as f64 / 50.0
        } else {
            let t = ((step - 50) as f64 / 950.0).min(1.0);
            0.01 * (1.0 + (PI * t).cos())
        };
        assert!((cos.lr_at(step, total) - want).abs() <= 1e-12, "cosine step {step}");
    }
    let stp = TrainConfig { schedule: Schedule::Step, step_milestones: vec![0.5, 0.75], ..cos.clone() };
    for (step, want) in [(49, 0.02), (50, 0.02), (499, 0.02), (500, 0.002), (749, 0.002), (750, 0.0002), (999, 0.0002)] {
        let want = if step < 50 { 0.02 * (step + 1) as f64 / 50.0 } else { want };
        assert!((stp.lr_at(step, total) - want).abs() <= 1e-12, "step schedule at {step}");
    }
    // default warmup: min(500, 5% of total)
    let d = TrainConfig::default();
    assert_eq!(d.warmup_for(1000), 50);
    assert_eq!(d.warmup_for(100_000), 500);
    assert!((d.base_lr - 0.01).abs() < 1e-15);
}

#[test]
fn config_validation() {
    assert!(TrainConfig { base_lr: 0.0, ..TrainConfig::default() }.validate().unwrap_err().is_config());
    assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().unwrap_err().is_config());
    let parsed: Result<TrainConfig, _> = serde_json::from_str(r#"{"epochs": 2, "bogus": 1}"#);
    assert!(parsed.is_err());
}

#[test]
fn checkpoint_round_trip_is_byte_exact() {
    let mut m = small_detector(HeadKind::TwoStage);
    // make buffers non-trivial
    for i in 0..m.store.buffers().len() {
        let id = m.store.find_buffer(&m.store.buffers()[i].name.clone()).unwrap();
        for (j, v) in m.store.buffer_mut(id).value.data_mut().iter_mut().enumerate() {
            *v += 0.001 * j as f32;
        }
    }
    let mut r = rng::stream(9, &[1, 2]);
    let _: u64 = r.gen();
    let ckpt = Checkpoint::from_store(&m.store, Some(&r), serde_json::json!({"note": "x"}));
    let bytes = ckpt.to_bytes().unwrap();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back, ckpt);
    assert_eq!(back.to_bytes().unwrap(), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    ckpt.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    let mut fresh = build_detector::<f32>(&m.spec, 99).unwrap();
    loaded.restore_store(&mut fresh.store).unwrap();
    for (a, b) in m.store.params().iter().zip(fresh.store.params()) {
        assert_eq!(a.value.to_le_bytes(), b.value.to_le_bytes(), "{}", a.name);
    }
    for (a, b) in m.store.buffers().iter().zip(fresh.store.buffers()) {
        assert_eq!(a.value.to_le_bytes(), b.value.to_le_bytes(), "{}", a.name);
    }
    let mut resumed = loaded.rng.unwrap().restore();
    assert_eq!(RngState::capture(&resumed), RngState::capture(&r));
    assert_eq!(resumed.gen::<u64>(), r.gen::<u64>());
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let bytes = pretrained(0).to_bytes().unwrap();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));
    assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
    let mut longer = bytes.clone();
    longer.push(0);
    assert!(matches!(Checkpoint::from_bytes(&longer), Err(Error::Format(_))));
    let mut version = bytes;
    version[8] = 9;
    assert!(matches!(Checkpoint::from_bytes(&version), Err(Error::Format(_))));
}

#[test]
fn zero_epochs_change_nothing() {
    let mut m = small_detector(HeadKind::TwoStage);
    partition_parameters(&mut m, TrainRegime::Scratch, None).unwrap();
    let before = m.store.checksum(&Partition::ALL, true);
    let log = train_detector(&mut m, &tiny_set(4), &TrainConfig { epochs: 0, ..quick(0) }, &AugmentPolicy::default()).unwrap();
    assert!(log.epochs.is_empty());
    assert_eq!(m.store.checksum(&Partition::ALL, true), before);

    let spec = desk_backbone(2);
    let ds = separable(8, 1);
    let out = pretrain_classifier::<f32>(&spec, &ds, &TrainConfig { epochs: 0, ..quick(4) }).unwrap();
    let init = build_classifier::<f32>(&spec, 4).unwrap();
    assert_eq!(out.checkpoint.to_bytes().unwrap(), Checkpoint::from_store(&init.store, None, out.checkpoint.meta.clone()).to_bytes().unwrap());
}

fn changed(a: &ParamStore<f32>, b: &ParamStore<f32>) -> BTreeSet<String> {
    a.params().iter().zip(b.params()).filter(|(x, y)| x.value.to_le_bytes() != y.value.to_le_bytes()).map(|(x, _)| x.name.clone()).collect()
}

#[test]
fn freeze_keeps_backbone_bytes_and_does_no_backbone_backward_work() {
    let ckpt = pretrained(2);
    let mut m = small_detector(HeadKind::TwoStage);
    partition_parameters(&mut m, TrainRegime::Freeze, Some(&ckpt)).unwrap();
    let start = m.store.clone();
    let policy = AugmentPolicy { lsj: detlab::data::LsjPolicy { enabled: true, ..Default::default() }, ..Default::default() };
    let log = train_detector(&mut m, &tiny_set(6), &quick(1), &policy).unwrap();
    assert_eq!(log.epochs.len(), 1);
    assert_eq!(log.epochs[0].steps, 3);
    assert_eq!(log.epochs[0].backward_flops["backbone"], 0);
    assert_eq!(log.epochs[0].backbone_backward_share, 0.0);
    assert!(log.epochs[0].forward_flops["backbone"] > 0);
    for (a, b) in start.buffers().iter().zip(m.store.buffers()) {
        if a.partition == Partition::Backbone {
            assert_eq!(a.value.to_le_bytes(), b.value.to_le_bytes(), "{}", a.name);
        }
    }
    let moved = changed(&start, &m.store);
    let trainable = names(&m, |_, t| t);
    assert!(!moved.is_empty());
    assert!(moved.is_subset(&trainable), "{:?}", moved.difference(&trainable).collect::<Vec<_>>());
    for (name, e) in ckpt.entries.iter().map(|e| (&e.name, e)) {
        if e.partition == Partition::Backbone && e.kind == detlab::train::EntryKind::Param {
            let id = m.store.find_param(name).unwrap();
            assert_eq!(m.store.param(id).value.to_le_bytes(), e.bytes, "{name}");
        }
    }
}

#[test]
fn identical_runs_are_bit_identical() {
    let run = || {
        let mut m = small_detector(HeadKind::SingleStage);
        partition_parameters(&mut m, TrainRegime::FineTune, Some(&pretrained(1))).unwrap();
        let policy = AugmentPolicy {
            lsj: detlab::data::LsjPolicy { enabled: true, ..Default::default() },
            copy_paste: detlab::data::CopyPastePolicy { enabled: true, ..Default::default() },
        };
        let log = train_detector(&mut m, &tiny_set(4), &quick(7), &policy).unwrap();
        (m.store.checksum(&Partition::ALL, true), log.deterministic().to_jsonl().unwrap())
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
}

#[test]
fn nan_loss_reports_step_and_component() {
    let mut m = small_detector(HeadKind::TwoStage);
    partition_parameters(&mut m, TrainRegime::Scratch, None).unwrap();
    let id = m.classifier_params()[0];
    m.store.param_mut(id).value.data_mut()[0] = f32::NAN;
    match train_detector(&mut m, &tiny_set(2), &quick(0), &AugmentPolicy::default()) {
        Err(Error::Numerical { step, component, value }) => {
            assert_eq!(step, 0);
            assert!(component.ends_with("_cls"), "{component}");
            assert!(value.is_nan());
        }
        other => panic!("expected a numerical error, got {other:?}"),
    }
}

/// Two classes split by mean brightness: class 1 images are bright.
fn separable(n: usize, seed: u64) -> Dataset {
    let mut r = rng::stream(seed, &[0x5e9]);
    let samples = (0..n)
        .map(|i| {
            let label = i % 2;
            let base = if label == 1 { 0.7 } else { 0.2 };
            let data = (0..3 * 32 * 32).map(|_| base + 0.1 * r.gen::<f32>()).collect();
            SceneSample { id: i as u64, image: Tensor::new(&[3, 32, 32], data).unwrap(), annotations: vec![], label: Some(label) }
        })
        .collect();
    Dataset { name: "separable".into(), class_names: vec!["dark".into(), "bright".into()], samples }
}

#[test]
fn separable_classes_reach_full_accuracy() {
    let spec = desk_backbone(2);
    let train = separable(64, 1);
    let cfg = TrainConfig { batch_size: 8, epochs: 25, base_lr: 0.05, warmup_steps: Some(10), seed: 3, ..TrainConfig::default() };
    assert!(cfg.epochs * cfg.steps_per_epoch(train.samples.len()) <= 200);
    let out = pretrain_classifier::<f32>(&spec, &train, &cfg).unwrap();
    assert!(out.log.epochs.last().unwrap().accuracy.is_some());
    let acc = classifier_accuracy::<f32>(&spec, &out.checkpoint, &separable(32, 2), 16).unwrap();
    assert_eq!(acc, 1.0);
}

#[test]
fn pretraining_rejects_bad_labels() {
    let spec = desk_backbone(2);
    let mut ds = separable(4, 0);
    ds.samples[2].label = Some(5);
    assert!(matches!(pretrain_classifier::<f32>(&spec, &ds, &quick(0)), Err(Error::Data(_))));
    ds.samples[2].label = None;
    assert!(matches!(pretrain_classifier::<f32>(&spec, &ds, &quick(0)), Err(Error::Data(_))));
}

#[test]
fn balance_weights_are_inverse_frequency_with_unit_mean() {
    let w = class_balance_weights(&[1, 2, 0, 4], 1.0);
    assert_eq!(w.len(), 5);
    assert_eq!(w[0], 1.0);
    let raw = [1.0, 0.5, 0.25];
    let mean = raw.iter().sum::<f64>() / 3.0;
    for (got, want) in [w[1], w[2], w[4]].iter().zip(raw) {
        assert!((got - want / mean).abs() < 1e-12);
    }
    assert!((w[1] + w[2] + w[4] - 3.0).abs() < 1e-12);
    assert_eq!(class_balance_weights(&[5, 5, 5], 1.0), vec![1.0; 4]);
    assert_eq!(class_balance_weights(&[1, 9], 0.0), vec![1.0; 3]);
}

#[test]
fn uniform_weights_reproduce_the_unweighted_loss() {
    let m = small_detector(HeadKind::TwoStage);
    let ds = tiny_set(2);
    let (images, targets) = make_batch::<f32>(&ds.samples).unwrap();
    let mut t1 = Tape::new(false);
    let plain = m.loss(&mut t1, &images, &targets, BnMode::FrozenStats, &mut rng::stream(0, &[1])).unwrap();
    let mut t2 = Tape::new(false);
    let ones = vec![1.0; 21];
    let weighted = m.balanced_loss(&mut t2, &images, &targets, &ones, &mut rng::stream(0, &[1])).unwrap();
    for (name, v) in &weighted.parts {
        let p = plain.parts.iter().find(|(n, _)| n == name).unwrap_or_else(|| panic!("{name} missing")).1;
        assert_eq!(t2.value(*v).item(), t1.value(p).item(), "{name}");
    }
}

#[test]
fn stage2_touches_only_the_classifier_layer() {
    for kind in [HeadKind::TwoStage, HeadKind::SingleStage] {
        let mut m = small_detector(kind);
        partition_parameters(&mut m, TrainRegime::Freeze, Some(&pretrained(0))).unwrap();
        let flags: Vec<bool> = m.store.params().iter().map(|p| p.trainable).collect();
        let before = m.store.clone();
        let cfg = Stage2Config { train: quick(2), alpha: 1.0, reinit_classifier: false };
        balanced_stage2_tune(&mut m, &tiny_set(4), &cfg).unwrap();
        let cls: BTreeSet<String> = m.classifier_params().iter().map(|&id| m.store.param(id).name.clone()).collect();
        let moved = changed(&before, &m.store);
        assert!(!moved.is_empty());
        assert!(moved.is_subset(&cls), "{kind:?}: {:?}", moved.difference(&cls).collect::<Vec<_>>());
        for (a, b) in before.buffers().iter().zip(m.store.buffers()) {
            assert_eq!(a.value.to_le_bytes(), b.value.to_le_bytes(), "{}", a.name);
        }
        assert_eq!(m.store.params().iter().map(|p| p.trainable).collect::<Vec<_>>(), flags);
    }
}
