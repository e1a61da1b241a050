//! One PASS/FAIL line per acceptance criterion.
//!
//! Exact criteria fail the test binary. The directional criteria (7, 8, 9)
//! are reported with their measured numbers and never fail it. Their sweeps
//! resume from `DETLAB_ACCEPTANCE_OUT` (default `target/acceptance-runs`),
//! so only missing runs are trained on a re-invocation.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use detlab::autodiff::Partition;
use detlab::cost::{count_params, estimate_flops, median, time_training_steps};
use detlab::data::presets::{balanced_detection, long_tail_detection};
use detlab::data::{generate_detection_set, load_dataset, parse_coco_json, save_dataset, write_coco_json};
use detlab::eval::{interpolated_ap, EvalReport};
use detlab::experiment::{execute_run, load_records, run_sweep, GridSpec, RunContext, RunRecord, RunStatus, SweepOptions};
use detlab::model::presets::{desk_backbone, desk_detector};
use detlab::model::{build_classifier, build_detector, DecoderVariant, Detector, DetectorSpec, HeadKind};
use detlab::train::{balanced_stage2_tune, make_batch, partition_parameters, train_detector, Checkpoint, EntryKind, Stage2Config, TrainConfig, TrainRegime};
use detlab::Tensor;
use rand::Rng as _;

use common::bridge::oracle_agrees;
use common::gradcheck::{case, run_case, PRIMITIVES, REL_TOL};

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn stand_in_checkpoint<T: detlab::Float>(seed: u64) -> Checkpoint {
    let c = build_classifier::<T>(&desk_backbone(10), seed).unwrap();
    Checkpoint::from_store(&c.store, None, serde_json::Value::Null)
}

fn default_specs() -> Vec<(&'static str, DetectorSpec)> {
    vec![
        ("fpn_lite", desk_detector(DecoderVariant::FpnLite, HeadKind::TwoStage, 0, 20)),
        ("multi_merge_lite", desk_detector(DecoderVariant::MultiMergeLite, HeadKind::TwoStage, 0, 20)),
        ("multi_merge_lite+cascade", desk_detector(DecoderVariant::MultiMergeLite, HeadKind::TwoStage, 3, 20)),
        ("fpn_lite single-stage", desk_detector(DecoderVariant::FpnLite, HeadKind::SingleStage, 0, 20)),
    ]
}

fn with_regime<T: detlab::Float>(spec: &DetectorSpec, regime: TrainRegime, seed: u64) -> Detector<T> {
    let mut m = build_detector::<T>(spec, seed).unwrap();
    let c = stand_in_checkpoint::<T>(seed);
    partition_parameters(&mut m, regime, (regime != TrainRegime::Scratch).then_some(&c)).unwrap();
    m
}

// 1
fn gradient_correctness() -> Outcome {
    let t0 = Instant::now();
    let mut worst = (0.0f64, "");
    for &p in PRIMITIVES {
        for seed in 0..20 {
            let out = run_case(&case(p, seed), seed);
            ensure(out.checked > 0, format!("{p} seed {seed}: nothing probed"))?;
            ensure(out.max_rel_err <= REL_TOL, format!("{p} seed {seed}: rel err {:.2e} > {REL_TOL:.0e}", out.max_rel_err))?;
            if out.max_rel_err > worst.0 {
                worst = (out.max_rel_err, p);
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    ensure(secs < 120.0, format!("suite took {secs:.1}s"))?;
    Ok(format!("{} primitives x 20 shapes, worst rel err {:.2e} ({})", PRIMITIVES.len(), worst.0, worst.1))
}

// 2: uses the frozen runs of the shipped sweeps
fn freeze_bit_exactness(out: &Path, records: &[RunRecord]) -> Outcome {
    let frozen: Vec<&RunRecord> = records.iter().filter(|r| r.status == RunStatus::Ok && r.config.regime == TrainRegime::Freeze).collect();
    ensure(!frozen.is_empty(), "no completed Freeze run to inspect")?;
    let mut tensors = 0;
    for r in &frozen {
        let pre =
            Checkpoint::load(out.join("pretrain").join(format!("{}.ckpt", r.pretrain_hash.as_ref().ok_or("record without pretrain hash")?))).map_err(err)?;
        let fin = Checkpoint::load(out.join(r.run_dir.as_ref().ok_or("record without run dir")?).join("final.ckpt")).map_err(err)?;
        let backbone: Vec<_> = fin.entries.iter().filter(|e| e.partition == Partition::Backbone).collect();
        ensure(!backbone.is_empty(), "final checkpoint holds no backbone entries")?;
        for e in backbone {
            let p = pre.entry(&e.name, e.kind).ok_or_else(|| format!("{} missing from the pretraining checkpoint", e.name))?;
            ensure(p.bytes == e.bytes && p.shape == e.shape, format!("{} seed {}: {} changed", r.name, r.seed, e.name))?;
            tensors += 1;
        }
        let stats = fin.entries.iter().filter(|e| e.partition == Partition::Backbone && e.kind == EntryKind::Buffer).count();
        ensure(stats > 0, "no backbone normalization statistics in the checkpoint")?;
    }
    Ok(format!("{} Freeze runs, {tensors} backbone tensors byte-identical to pretraining", frozen.len()))
}

// 3
fn adapter_identity() -> Outcome {
    let spec = desk_detector(DecoderVariant::MultiMergeLite, HeadKind::TwoStage, 3, 20);
    let plain = with_regime::<f64>(&spec, TrainRegime::Freeze, 5);
    let adapted = with_regime::<f64>(&spec, TrainRegime::FreezeWithAdapters, 5);
    ensure(adapted.store.num_params_in(Partition::Adapter) > 0, "no adapter parameters")?;
    let mut r = detlab::rng::stream(3, &[0xada]);
    let mut dets = 0;
    for i in 0..10 {
        let x: Tensor<f64> = Tensor::new(&[1, 3, 64, 64], (0..3 * 64 * 64).map(|_| r.gen::<f64>()).collect()).map_err(err)?;
        let a = plain.forward_detect(&x).map_err(err)?;
        let b = adapted.forward_detect(&x).map_err(err)?;
        ensure(a == b, format!("image {i}: outputs differ"))?;
        dets += a.detections[0].len();
    }
    Ok(format!("10 random images, outputs identical ({dets} detections compared)"))
}

// 4
fn evaluator_oracle() -> Outcome {
    for seed in 0..1000 {
        oracle_agrees(seed)?;
    }
    let ap = interpolated_ap(&[true, false, true], 2);
    ensure(format!("{ap:.4}") == "0.8350", format!("fixture AP {ap}"))?;
    Ok(format!("1000 random instances exact, fixture AP {ap:.4}"))
}

// 5
fn resource_ordering() -> Outcome {
    let shape = [8, 3, 64, 64];
    let mut lines = Vec::new();
    for (name, spec) in default_specs() {
        let ft = estimate_flops(&with_regime::<f32>(&spec, TrainRegime::FineTune, 1), shape).map_err(err)?;
        let fr = estimate_flops(&with_regime::<f32>(&spec, TrainRegime::Freeze, 1), shape).map_err(err)?;
        ensure(fr.training_flops < ft.training_flops, format!("{name}: Freeze FLOPs not below FineTune"))?;
        ensure(fr.activation_bytes < ft.activation_bytes, format!("{name}: Freeze activations not below FineTune"))?;
        ensure(ft.training_flops - fr.training_flops == ft.backward.backbone, format!("{name}: FLOP gap differs from the backbone backward"))?;
        lines.push(format!("{name} {:.2}", fr.training_flops as f64 / ft.training_flops as f64));
    }
    // measured: reference desk spec, three interleaved runs per regime
    let spec = desk_detector(DecoderVariant::FpnLite, HeadKind::TwoStage, 0, 20);
    let ds = generate_detection_set(&balanced_detection(17), 8).map_err(err)?;
    let (images, targets) = make_batch::<f32>(&ds.samples).map_err(err)?;
    let config = TrainConfig { batch_size: 8, epochs: 1, ..TrainConfig::default() };
    let (mut ft_runs, mut fr_runs) = (Vec::new(), Vec::new());
    for run in 0..3 {
        for (regime, acc) in [(TrainRegime::FineTune, &mut ft_runs), (TrainRegime::Freeze, &mut fr_runs)] {
            let mut m = with_regime::<f32>(&spec, regime, run);
            let t = time_training_steps(&mut m, &images, &targets, &config, 2, 5).map_err(err)?;
            acc.push(median(&t).unwrap());
        }
    }
    let ratio = median(&fr_runs).unwrap() / median(&ft_runs).unwrap();
    ensure(ratio <= 1.0, format!("measured step time ratio {ratio:.3} > 1"))?;
    Ok(format!("FLOP ratio Freeze/FineTune: {}; measured step time ratio {ratio:.3}", lines.join(", ")))
}

// 6
fn trained_fraction_ordering() -> Outcome {
    let specs = &default_specs()[..3];
    let counts: Vec<(usize, usize)> = specs
        .iter()
        .map(|(_, s)| {
            let c = count_params(&with_regime::<f32>(s, TrainRegime::Freeze, 1).store);
            (c.trained, c.total)
        })
        .collect();
    // a/b < c/d  <=>  a*d < c*b on exact integers
    for w in counts.windows(2) {
        let ((a, b), (c, d)) = (w[0], w[1]);
        ensure((a as u128) * (d as u128) < (c as u128) * (b as u128), format!("{a}/{b} is not below {c}/{d}"))?;
    }
    let text: Vec<String> = specs.iter().zip(&counts).map(|((n, _), (t, tot))| format!("{n} {t}/{tot} = {:.1}%", 100.0 * *t as f64 / *tot as f64)).collect();
    Ok(text.join(" < "))
}

// 10
fn stage2_scope() -> Outcome {
    let spec = desk_detector(DecoderVariant::MultiMergeLite, HeadKind::TwoStage, 3, 20);
    let ds = generate_detection_set(&long_tail_detection(4), 16).map_err(err)?;
    let mut m = with_regime::<f32>(&spec, TrainRegime::FineTune, 2);
    let quick = TrainConfig { batch_size: 4, epochs: 1, warmup_steps: Some(1), seed: 2, ..TrainConfig::default() };
    train_detector(&mut m, &ds, &quick, &Default::default()).map_err(err)?;
    let before = Checkpoint::from_store(&m.store, None, serde_json::Value::Null);
    let cfg = Stage2Config { train: TrainConfig { epochs: 2, ..quick }, alpha: 1.0, reinit_classifier: false };
    balanced_stage2_tune(&mut m, &ds, &cfg).map_err(err)?;
    let after = Checkpoint::from_store(&m.store, None, serde_json::Value::Null);
    let classifier: Vec<String> = m.classifier_params().into_iter().map(|id| m.store.param(id).name.clone()).collect();
    let (mut same, mut changed) = (0, 0);
    for (a, b) in before.entries.iter().zip(&after.entries) {
        ensure(a.name == b.name, "entry order changed")?;
        if classifier.contains(&a.name) {
            changed += usize::from(a.bytes != b.bytes);
        } else {
            ensure(a.bytes == b.bytes, format!("{} changed outside the classifier", a.name))?;
            same += 1;
        }
    }
    ensure(changed > 0, "stage 2 did not update the classifier")?;
    Ok(format!("{same} tensors byte-unchanged, {changed}/{} classifier tensors updated", classifier.len()))
}

// 11
fn determinism_and_persistence(out: &Path, records: &[RunRecord]) -> Outcome {
    // rerun one recorded cell from scratch in a fresh context
    let rec = records.iter().find(|r| r.status == RunStatus::Ok && r.config.data.train_images > 0).ok_or("no completed run to reproduce")?;
    let mut cfg = rec.config.clone();
    cfg.data.train_images = cfg.data.train_images.min(64);
    cfg.data.eval_images = cfg.data.eval_images.min(16);
    cfg.train.epochs = 1;
    cfg.stage2 = None;
    let tmp = tempfile::tempdir().map_err(err)?;
    // both runs share the recorded pretraining checkpoint
    if let Some(p) = cfg.pretrain.as_mut() {
        p.checkpoint = Some(out.join("pretrain").join(format!("{}.ckpt", rec.pretrain_hash.as_ref().unwrap())));
    }
    let (a, art_a) = execute_run(&cfg, &RunContext::new(tmp.path().join("a"))).map_err(err)?;
    let (b, art_b) = execute_run(&cfg, &RunContext::new(tmp.path().join("b"))).map_err(err)?;
    ensure(a.eval == b.eval && a.cost == b.cost, "metrics differ between identical runs")?;
    ensure(art_a.log.deterministic() == art_b.log.deterministic(), "run logs differ")?;
    let ca = Checkpoint::from_store(&art_a.model.store, None, serde_json::Value::Null);
    ensure(ca == Checkpoint::from_store(&art_b.model.store, None, serde_json::Value::Null), "final weights differ")?;
    // checkpoint round trip
    let path = tmp.path().join("w.ckpt");
    ca.save(&path).map_err(err)?;
    let back = Checkpoint::load(&path).map_err(err)?;
    ensure(back == ca && back.to_bytes().map_err(err)? == ca.to_bytes().map_err(err)?, "checkpoint round trip is lossy")?;
    // recorded metrics survive JSON exactly
    let text = serde_json::to_string(&a.eval).map_err(err)?;
    ensure(serde_json::from_str::<Option<EvalReport>>(&text).map_err(err)? == a.eval, "EvalReport JSON round trip is lossy")?;
    // COCO-JSON dataset round trip
    let ds = generate_detection_set(&balanced_detection(23), 12).map_err(err)?;
    save_dataset(&ds, tmp.path().join("ds")).map_err(err)?;
    let loaded = load_dataset(tmp.path().join("ds")).map_err(err)?;
    ensure(loaded == ds, "COCO dataset round trip is lossy")?;
    let coco_text = std::fs::read_to_string(tmp.path().join("ds/annotations.json")).map_err(err)?;
    let (coco, _) = parse_coco_json(&coco_text).map_err(err)?;
    write_coco_json(&coco, tmp.path().join("again.json")).map_err(err)?;
    let (again, _) = parse_coco_json(&std::fs::read_to_string(tmp.path().join("again.json")).map_err(err)?).map_err(err)?;
    ensure(again == coco, "COCO JSON write after read is lossy")?;
    Ok(format!("rerun of {} seed {} bit-identical; checkpoint, metrics and COCO round trips lossless", rec.name, rec.seed))
}

struct Means {
    map: f64,
    map_r: Option<f64>,
    map_f: Option<f64>,
    seeds: usize,
}

fn cell_means(records: &[RunRecord], name: &str) -> Result<Means, String> {
    let evals: Vec<&EvalReport> = records.iter().filter(|r| r.name == name && r.status == RunStatus::Ok).filter_map(|r| r.eval.as_ref()).collect();
    ensure(evals.len() == 3, format!("{name}: {} successful seeds, expected 3", evals.len()))?;
    let n = evals.len() as f64;
    let opt = |f: fn(&EvalReport) -> Option<f64>| evals.iter().map(|e| f(e)).sum::<Option<f64>>().map(|s| s / n);
    Ok(Means { map: evals.iter().map(|e| e.map).sum::<f64>() / n, map_r: opt(|e| e.map_r), map_f: opt(|e| e.map_f), seeds: evals.len() })
}

fn pts(v: f64) -> String {
    format!("{:.1}", 100.0 * v)
}

// 7
fn capacity_pattern(records: &[RunRecord], sweep_secs: f64) -> Outcome {
    let mm_ft = cell_means(records, "capacity/multi_merge_cascade/fine_tune")?;
    let mm_fr = cell_means(records, "capacity/multi_merge_cascade/freeze")?;
    let fpn_ft = cell_means(records, "capacity/fpn_lite/fine_tune")?;
    let fpn_fr = cell_means(records, "capacity/fpn_lite/freeze")?;
    let a = mm_fr.map >= mm_ft.map - 0.005;
    let b = fpn_fr.map <= fpn_ft.map - 0.010;
    let text = format!(
        "(a) mm+cascade Freeze {} vs FineTune {} [{}]; (b) fpn_lite Freeze {} vs FineTune {} [{}]; {} seeds; sweep compute {:.0} min",
        pts(mm_fr.map),
        pts(mm_ft.map),
        if a { "ok" } else { "not met" },
        pts(fpn_fr.map),
        pts(fpn_ft.map),
        if b { "ok" } else { "not met" },
        mm_ft.seeds,
        sweep_secs / 60.0
    );
    if a && b {
        Ok(text)
    } else {
        Err(text)
    }
}

// 8
fn pretrain_scale_effect(records: &[RunRecord]) -> Outcome {
    let large = cell_means(records, "capacity/multi_merge_cascade/freeze")?;
    let small = cell_means(records, "pretrain_scale/multi_merge_cascade/small/freeze")?;
    let text = format!("Freeze mAP large-diverse {} vs small {}", pts(large.map), pts(small.map));
    if large.map >= small.map {
        Ok(text)
    } else {
        Err(text)
    }
}

// 9
fn rare_class_concentration(records: &[RunRecord]) -> Outcome {
    let ft = cell_means(records, "long_tail/multi_merge_cascade/fine_tune")?;
    let fr = cell_means(records, "long_tail/multi_merge_cascade/freeze")?;
    let d = |a: Option<f64>, b: Option<f64>, what: &str| a.zip(b).map(|(a, b)| a - b).ok_or_else(|| format!("{what} undefined on the long-tail split"));
    let dr = d(fr.map_r, ft.map_r, "mAP_r")?;
    let df = d(fr.map_f, ft.map_f, "mAP_f")?;
    let text = format!("Δ mAP_r {:+.1} vs Δ mAP_f {:+.1} (Freeze − FineTune)", 100.0 * dr, 100.0 * df);
    if dr >= df {
        Ok(text)
    } else {
        Err(text)
    }
}

fn shipped_sweeps(out: &Path) -> Result<(Vec<RunRecord>, f64), String> {
    let configs = workspace().join("configs");
    let grids = ["capacity_fpn_lite.json", "capacity_multi_merge_cascade.json", "pretrain_scale_small.json", "long_tail.json"]
        .iter()
        .map(|f| GridSpec::load(configs.join(f)).map_err(err))
        .collect::<Result<Vec<_>, _>>()?;
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get());
    let outcome = run_sweep(&grids, &SweepOptions { out_dir: out.to_path_buf(), workers, resume: true }).map_err(err)?;
    eprintln!("acceptance sweeps: {} new runs, {} reused, {} failed", outcome.new_records.len(), outcome.skipped, outcome.failed);
    let hashes: std::collections::BTreeSet<String> = grids.iter().flat_map(|g| g.cells().unwrap()).map(|c| c.hash()).collect();
    let mut seen = std::collections::BTreeSet::new();
    let records: Vec<RunRecord> = load_records(out)
        .map_err(err)?
        .into_iter()
        .filter(|r| hashes.contains(&r.config_hash) && r.status == RunStatus::Ok && seen.insert(r.config_hash.clone()))
        .collect();
    let secs = records.iter().map(|r| r.wall_seconds).sum();
    Ok((records, secs))
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    // `cargo test -- --list` and filters from other suites
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    if let Some(filter) = args.iter().skip(1).find(|a| !a.starts_with('-')) {
        if !"acceptance".contains(filter.as_str()) {
            return;
        }
    }
    let out = std::env::var_os("DETLAB_ACCEPTANCE_OUT").map(PathBuf::from).unwrap_or_else(|| workspace().join("target/acceptance-runs"));
    let started = Instant::now();
    let mut results: BTreeMap<u32, (String, bool)> = BTreeMap::new();
    let mut record = |id: u32, name: &str, exact: bool, f: &dyn Fn() -> Outcome| {
        let t0 = Instant::now();
        let r = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panicked".into()))
        });
        let (tag, detail) = match &r {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        let line = format!("{tag} [{id}] {name}: {detail} ({:.1}s)", t0.elapsed().as_secs_f64());
        eprintln!("checked [{id}] {tag}");
        results.insert(id, (line, r.is_ok() || !exact));
    };
    // the cheap exact checks run first, on an otherwise idle machine
    record(1, "gradient correctness", true, &gradient_correctness);
    record(3, "adapter identity", true, &adapter_identity);
    record(4, "evaluator oracle", true, &evaluator_oracle);
    record(5, "resource ordering", true, &resource_ordering);
    record(6, "trained-fraction ordering", true, &trained_fraction_ordering);
    record(10, "stage-2 scope", true, &stage2_scope);

    let sweeps = catch_unwind(AssertUnwindSafe(|| shipped_sweeps(&out))).unwrap_or_else(|_| Err("sweep panicked".into()));
    let (records, sweep_secs) = sweeps.clone().unwrap_or_default();
    let need_sweeps = |f: &dyn Fn() -> Outcome| -> Outcome {
        match &sweeps {
            Ok(_) => f(),
            Err(e) => Err(format!("sweeps unavailable: {e}")),
        }
    };
    record(2, "freeze bit-exactness", true, &|| need_sweeps(&|| freeze_bit_exactness(&out, &records)));
    record(7, "capacity-conditioned regime pattern (directional)", false, &|| need_sweeps(&|| capacity_pattern(&records, sweep_secs)));
    record(8, "pretrain-scale effect under freezing (directional)", false, &|| need_sweeps(&|| pretrain_scale_effect(&records)));
    record(9, "rare-class concentration (directional)", false, &|| need_sweeps(&|| rare_class_concentration(&records)));
    record(11, "determinism and persistence", true, &|| need_sweeps(&|| determinism_and_persistence(&out, &records)));

    let lines: Vec<&str> = results.values().map(|(l, _)| l.as_str()).collect();
    println!("{}", lines.join("\n"));
    let passed = lines.iter().filter(|l| l.starts_with("PASS")).count();
    println!("acceptance: {passed}/{} criteria passed in {:.0}s", lines.len(), started.elapsed().as_secs_f64());
    let _ = std::fs::create_dir_all(&out).and_then(|_| std::fs::write(out.join("acceptance.txt"), lines.join("\n") + "\n"));
    let exact_failures: Vec<u32> = results.iter().filter(|(_, (_, ok))| !ok).map(|(id, _)| *id).collect();
    if !exact_failures.is_empty() {
        eprintln!("exact criteria failed: {exact_failures:?}");
        std::process::exit(1);
    }
}
