use detlab::autodiff::{BnMode, ParamStore, Partition, Tape};
use detlab::cost::{
    attach_deltas, cost_report, count_params, estimate_flops, layer_costs, median, record_training_graph, render_cost_table, training_cost_summary, CostRow,
    PartitionTally,
};
use detlab::model::presets::{desk_backbone, desk_detector};
use detlab::model::{build_classifier, build_detector, DecoderVariant, Detector, DetectorSpec, HeadKind};
use detlab::report::{fmt_delta, fmt_mean_spread, fmt_points};
use detlab::train::{partition_parameters, Checkpoint, EpochLog, RunLog, TrainRegime};
use detlab::Tensor;

const SHAPE: [usize; 4] = [2, 3, 64, 64];

fn ckpt() -> Checkpoint {
    let c = build_classifier::<f32>(&desk_backbone(10), 1).unwrap();
    Checkpoint::from_store(&c.store, None, serde_json::Value::Null)
}

fn small(variant: DecoderVariant, kind: HeadKind, cascade: usize) -> DetectorSpec {
    let mut s = desk_detector(variant, kind, cascade, 20);
    s.decoder.filters = 16;
    s.head.head_filters = 32;
    s
}

fn regime_model(spec: &DetectorSpec, regime: TrainRegime) -> Detector<f32> {
    let mut m = build_detector::<f32>(spec, 4).unwrap();
    let c = ckpt();
    partition_parameters(&mut m, regime, (regime != TrainRegime::Scratch).then_some(&c)).unwrap();
    m
}

#[test]
fn conv_flops_are_two_per_mac() {
    let mut store = ParamStore::<f64>::new();
    let w = store.add_param("w", Partition::Head, Tensor::zeros(&[2, 1, 3, 3]));
    let mut tape = Tape::new(true);
    tape.set_scope(Partition::Head);
    let x = tape.input(Tensor::zeros(&[1, 1, 4, 4]));
    let wv = tape.param(&store, w);
    let y = tape.conv2d(x, wv, None, 1, 1).unwrap();
    assert_eq!(tape.shape(y), &[1, 2, 4, 4]);
    assert_eq!(tape.forward_flops()[Partition::Head.index()], 576);
    let profile = tape.profile();
    let costs = layer_costs(&profile, y.index(), &|_| true, false);
    // weight gradient only: the input is a constant
    assert_eq!(costs[2].backward[Partition::Head.index()], 576);
    let r = tape.reshape(y, &[2, 16]).unwrap();
    let profile = tape.profile();
    assert_eq!(profile[r.index()].forward_flops, 0);
    assert_eq!(layer_costs(&profile, r.index(), &|_| true, false)[r.index()].backward, [0; 4]);
}

#[test]
fn param_counts_follow_the_manifest() {
    let spec = small(DecoderVariant::MultiMergeLite, HeadKind::TwoStage, 0);
    let scratch = regime_model(&spec, TrainRegime::Scratch);
    let c = count_params(&scratch.store);
    assert_eq!(c.trained, c.total);
    assert_eq!(c.trained_fraction, 1.0);

    let frozen = regime_model(&spec, TrainRegime::Freeze);
    let c = count_params(&frozen.store);
    let want: usize =
        frozen.store.manifest().iter().filter(|e| matches!(e.partition, Partition::Decoder | Partition::Head)).map(|e| e.shape.iter().product::<usize>()).sum();
    assert_eq!(c.trained, want);
    assert_eq!(c.trained_fraction, want as f64 / c.total as f64);
    assert_eq!(c.by_partition["backbone"].1, 0);
}

#[test]
fn freeze_saves_exactly_the_backbone_backward() {
    for spec in [
        small(DecoderVariant::FpnLite, HeadKind::TwoStage, 0),
        small(DecoderVariant::MultiMergeLite, HeadKind::TwoStage, 3),
        small(DecoderVariant::FpnLite, HeadKind::SingleStage, 0),
    ] {
        let ft = estimate_flops(&regime_model(&spec, TrainRegime::FineTune), SHAPE).unwrap();
        let fr = estimate_flops(&regime_model(&spec, TrainRegime::Freeze), SHAPE).unwrap();
        assert_eq!(ft.forward, fr.forward);
        assert_eq!(fr.backward.backbone, 0);
        assert!(ft.backward.backbone > 0);
        assert!(fr.training_flops < ft.training_flops);
        assert_eq!(ft.training_flops - fr.training_flops, ft.backward.backbone);
        assert_eq!(ft.backward.decoder, fr.backward.decoder);
        assert_eq!(ft.backward.head, fr.backward.head);
        assert!(fr.activation_bytes < ft.activation_bytes);
        assert_eq!(fr.activation_bytes_by_partition.backbone, 0);
        assert!(ft.activation_bytes_by_partition.backbone > 0);
    }
}

#[test]
fn estimates_match_the_measured_backward() {
    let spec = small(DecoderVariant::FpnLite, HeadKind::TwoStage, 2);
    for regime in [TrainRegime::FineTune, TrainRegime::Freeze] {
        let mut m = regime_model(&spec, regime);
        let est = estimate_flops(&m, SHAPE).unwrap();
        let (tape, loss) = record_training_graph(&m, SHAPE).unwrap();
        assert_eq!(PartitionTally::from(tape.forward_flops()), est.forward);
        let measured = tape.backward(loss, &mut m.store).unwrap();
        assert_eq!(PartitionTally::from(measured.flops), est.backward, "{regime:?}");
    }
}

#[test]
fn layer_costs_sum_to_the_model_estimate() {
    let m = regime_model(&small(DecoderVariant::MultiMergeLite, HeadKind::TwoStage, 0), TrainRegime::Freeze);
    let est = estimate_flops(&m, SHAPE).unwrap();
    let (tape, loss) = record_training_graph(&m, SHAPE).unwrap();
    let layers = layer_costs(&tape.profile(), loss.index(), &|id| m.store.param(id).trainable, m.train_bn_mode() == BnMode::FrozenStats);
    let fwd: u64 = layers.iter().map(|l| l.forward).sum();
    let bwd: u64 = layers.iter().map(|l| l.backward.iter().sum::<u64>()).sum();
    assert_eq!(fwd + bwd, est.training_flops);
    // frozen layers below the decoder never need a gradient
    assert!(layers.iter().filter(|l| l.scope == Partition::Backbone).all(|l| !l.needs_grad));
}

#[test]
fn adapters_reintroduce_backbone_backward_above_them() {
    let spec = small(DecoderVariant::FpnLite, HeadKind::TwoStage, 0);
    let fr = estimate_flops(&regime_model(&spec, TrainRegime::Freeze), SHAPE).unwrap();
    let fwa = estimate_flops(&regime_model(&spec, TrainRegime::FreezeWithAdapters), SHAPE).unwrap();
    let ft = estimate_flops(&regime_model(&spec, TrainRegime::FineTune), SHAPE).unwrap();
    assert!(fwa.backward.adapter > 0);
    assert!(fwa.training_flops > fr.training_flops);
    assert!(fwa.backward.backbone < ft.backward.backbone);
}

#[test]
fn roi_range_brackets_the_recorded_graph() {
    let m = regime_model(&small(DecoderVariant::FpnLite, HeadKind::TwoStage, 0), TrainRegime::FineTune);
    let est = estimate_flops(&m, SHAPE).unwrap();
    let r = est.roi_range.unwrap();
    assert_eq!(r.rois_min, 2);
    assert_eq!(r.rois_max, 2 * m.spec.head.proposals.roi_batch_per_image);
    assert!((r.rois_min..=r.rois_max).contains(&r.rois_recorded));
    assert!(r.training_flops_min <= est.training_flops && est.training_flops <= r.training_flops_max);
    let single = regime_model(&small(DecoderVariant::FpnLite, HeadKind::SingleStage, 0), TrainRegime::FineTune);
    assert!(estimate_flops(&single, SHAPE).unwrap().roi_range.is_none());
}

fn fake_log(seconds: f64) -> RunLog {
    let e = EpochLog {
        epoch: 0,
        steps: 10,
        lr: 0.01,
        loss: Default::default(),
        total_loss: 1.0,
        forward_flops: Default::default(),
        backward_flops: Default::default(),
        backbone_backward_share: 0.0,
        accuracy: None,
        wall_seconds: seconds,
    };
    RunLog { epochs: vec![e] }
}

#[test]
fn regime_rows_differ_only_in_training_fields() {
    let spec = small(DecoderVariant::FpnLite, HeadKind::TwoStage, 0);
    let a = cost_report(&regime_model(&spec, TrainRegime::FineTune), "fpn", TrainRegime::FineTune, SHAPE).unwrap();
    let b = cost_report(&regime_model(&spec, TrainRegime::Freeze), "fpn", TrainRegime::Freeze, SHAPE).unwrap();
    let ra = training_cost_summary(&fake_log(3.0), &a, Some(0.30));
    let rb = training_cost_summary(&fake_log(2.0), &b, None);
    assert_eq!((ra.model.as_str(), ra.params_total, ra.steps), (rb.model.as_str(), rb.params_total, rb.steps));
    assert!(rb.params_trained < ra.params_trained && rb.backward_flops < ra.backward_flops && rb.activation_bytes < ra.activation_bytes);
    let json = serde_json::to_value(&rb).unwrap();
    assert!(json["map"].is_null(), "absent mAP must stay null");
    let mut rows = vec![ra, rb];
    attach_deltas(&mut rows, TrainRegime::FineTune);
    assert_eq!(rows[0].delta_map, Some(0.0));
    assert_eq!(rows[1].delta_map, None);
}

fn row(model: &str, regime: TrainRegime, total: usize, trained: usize, frac: f64, map: f64) -> CostRow {
    CostRow {
        model: model.into(),
        regime,
        params_total: total,
        params_trained: trained,
        trained_fraction: frac,
        backward_flops: 0,
        training_flops: 0,
        activation_bytes: 0,
        steps: 0,
        wall_seconds: 0.0,
        map: Some(map),
        delta_map: None,
    }
}

#[test]
fn reference_table_format() {
    // reference row of the full-size backbone + FPN, rendered as given
    let mut rows = vec![
        row("r101-fpn", TrainRegime::FineTune, 83_500_000, 83_500_000, 1.0, 0.400),
        row("r101-fpn", TrainRegime::Freeze, 83_500_000, 21_900_000, 0.261, 0.335),
    ];
    attach_deltas(&mut rows, TrainRegime::FineTune);
    let table = render_cost_table(&rows);
    let last = table.lines().last().unwrap();
    let cells: Vec<&str> = last.split_whitespace().collect();
    assert_eq!(cells, ["r101-fpn", "[freeze]", "83.5", "21.9", "26.1", "-6.5"]);
    assert!(table.lines().next().unwrap().contains("Δ mAP"));
    for (d, s) in [(0.491 - 0.490, "+0.1"), (0.007, "+0.7"), (-0.065, "-6.5"), (0.0, "0.0")] {
        assert_eq!(fmt_delta(d), s);
    }
}

#[test]
fn point_formatting() {
    assert_eq!((fmt_points(0.490), fmt_points(0.491), fmt_delta(0.491 - 0.490)), ("49.0".into(), "49.1".into(), "+0.1".into()));
    assert_eq!(fmt_mean_spread(&[0.400, 0.410, 0.420]).unwrap(), "41.0 (40.0–42.0)");
    assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
    assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
    assert_eq!(median(&[]), None);
}
