//! Experiment configs, single runs, sweeps over config grids and the
//! comparison report built from stored run records.

mod summary;
mod sweep;

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cost::{cost_report, CostReport};
use crate::data::presets::{balanced_detection, long_tail_detection};
use crate::data::{classification_catalog, generate_classification_set, generate_detection_set, AugmentPolicy, ClassificationSpec, Dataset, PretrainScale};
use crate::error::{Error, Result};
use crate::eval::{compute_report, DetectionRecord, EvalConfig, EvalReport, GroundTruth};
use crate::model::{build_detector, BackboneSpec, Detector, DetectorSpec};
use crate::tensor::Float;
use crate::train::{
    balanced_stage2_tune, make_batch, partition_parameters, pretrain_classifier, train_detector, Checkpoint, RunLog, Stage2Config, TrainConfig, TrainRegime,
};

pub use summary::{build_report, cost_rows, render_curve_csv, render_report_csv, render_report_text, CellSummary, Comparison, Report, ReportOptions};
pub use sweep::{append_record, load_records, run_sweep, GridAxes, GridSpec, SweepOptions, SweepOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Benchmark {
    Balanced,
    LongTail,
}

/// Detection data are generated, so a reference is the generator input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionData {
    pub benchmark: Benchmark,
    pub train_images: usize,
    pub eval_images: usize,
    pub seed: u64,
    /// Distribution of the evaluation split; defaults to `benchmark`.
    #[serde(default)]
    pub eval_benchmark: Option<Benchmark>,
}

impl DetectionData {
    /// `(train, eval)`. The evaluation split comes from a separate
    /// generator stream so it never overlaps the training images.
    pub fn generate(&self) -> Result<(Dataset, Dataset)> {
        let spec = |b: Benchmark, seed: u64| match b {
            Benchmark::Balanced => balanced_detection(seed),
            Benchmark::LongTail => long_tail_detection(seed),
        };
        let mut train = generate_detection_set(&spec(self.benchmark, self.seed), self.train_images)?;
        let mut eval = generate_detection_set(&spec(self.eval_benchmark.unwrap_or(self.benchmark), self.seed ^ EVAL_SEED_SALT), self.eval_images)?;
        train.name = format!("{:?}-train", self.benchmark).to_lowercase();
        eval.name = format!("{:?}-eval", self.eval_benchmark.unwrap_or(self.benchmark)).to_lowercase();
        Ok((train, eval))
    }

    /// `(height, width)` of every generated image.
    pub fn canvas(&self) -> (usize, usize) {
        balanced_detection(0).canvas
    }

    pub fn num_classes(&self) -> usize {
        balanced_detection(0).class_catalog.len()
    }
}

const EVAL_SEED_SALT: u64 = 0xe7a1_0000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub scale: PretrainScale,
    /// Defaults to the scale's standard size.
    #[serde(default)]
    pub images: Option<usize>,
    pub train: TrainConfig,
    /// Use an existing checkpoint instead of training one.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
}

impl PretrainConfig {
    pub fn dataset_spec(&self) -> ClassificationSpec {
        let mut s = ClassificationSpec::default_for(self.scale, self.train.seed);
        if let Some(n) = self.images {
            s.images = n;
        }
        s
    }

    /// The backbone with its classification width set to the catalog.
    pub fn backbone(&self, detector_backbone: &BackboneSpec) -> BackboneSpec {
        let canvas = self.dataset_spec().canvas;
        BackboneSpec { num_pretrain_classes: classification_catalog(self.scale, canvas).len(), ..detector_backbone.clone() }
    }

    /// Identifies the pretraining job independent of where it is stored.
    pub fn hash(&self, detector_backbone: &BackboneSpec) -> String {
        let key =
            serde_json::json!({ "backbone": self.backbone(detector_backbone), "scale": self.scale, "images": self.dataset_spec().images, "train": self.train });
        short_hash(&key)
    }
}

fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3]
}

fn default_eval_batch() -> usize {
    8
}

/// One experiment: a detector, a regime and everything needed to train
/// and evaluate it. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub detector: DetectorSpec,
    pub regime: TrainRegime,
    #[serde(default)]
    pub pretrain: Option<PretrainConfig>,
    pub data: DetectionData,
    pub train: TrainConfig,
    #[serde(default)]
    pub augment: AugmentPolicy,
    #[serde(default)]
    pub stage2: Option<Stage2Config>,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_eval_batch")]
    pub eval_batch: usize,
    /// Not part of the config hash.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

pub fn short_hash(v: &impl Serialize) -> String {
    let text = serde_json::to_string(v).expect("config values serialize");
    hex::encode(&Sha256::digest(text.as_bytes())[..8])
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config(format!("experiment config: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    /// Hash of everything that determines results, seeds included.
    pub fn hash(&self) -> String {
        short_hash(&ExperimentConfig { output_dir: None, ..self.clone() })
    }

    /// Hash shared by the seeds of one grid cell.
    pub fn cell_hash(&self) -> String {
        short_hash(&self.without_seed())
    }

    /// The config with every per-seed field cleared.
    pub fn without_seed(&self) -> Self {
        let mut c = ExperimentConfig { output_dir: None, seeds: vec![], ..self.clone() };
        c.train.seed = 0;
        if let Some(s2) = c.stage2.as_mut() {
            s2.train.seed = 0;
        }
        c
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.seeds = vec![seed];
        c.train.seed = seed;
        if let Some(s2) = c.stage2.as_mut() {
            s2.train.seed = seed;
        }
        c
    }

    /// Checks every contract that can fail before training starts,
    /// including the existence of referenced checkpoint files.
    pub fn validate(&self) -> Result<()> {
        self.detector.validate()?;
        self.train.validate()?;
        self.augment.validate()?;
        self.eval.validate()?;
        if let Some(s2) = &self.stage2 {
            s2.train.validate()?;
        }
        if self.seeds.is_empty() {
            return Err(Error::config(format!("{}: seed list is empty", self.name)));
        }
        if self.eval_batch == 0 || self.data.train_images == 0 || self.data.eval_images == 0 {
            return Err(Error::config(format!("{}: image counts and eval_batch must be >= 1", self.name)));
        }
        if self.detector.head.num_classes != self.data.num_classes() {
            return Err(Error::config(format!(
                "{}: head predicts {} classes, the benchmark has {}",
                self.name,
                self.detector.head.num_classes,
                self.data.num_classes()
            )));
        }
        match (&self.pretrain, self.regime) {
            (Some(_), TrainRegime::Scratch) => return Err(Error::config(format!("{}: scratch runs take no pretraining", self.name))),
            (None, r) if r != TrainRegime::Scratch => return Err(Error::config(format!("{}: regime {} needs a pretrain section", self.name, r.as_str()))),
            _ => {}
        }
        if let Some(p) = &self.pretrain {
            p.train.validate()?;
            if let Some(path) = &p.checkpoint {
                if !path.is_file() {
                    return Err(Error::config(format!("{}: pretrained checkpoint {} does not exist", self.name, path.display())));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    Failed,
}

/// The immutable outcome of one (config, seed) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub cell_hash: String,
    pub name: String,
    pub seed: u64,
    pub status: RunStatus,
    #[serde(default)]
    pub error: Option<String>,
    pub config: ExperimentConfig,
    #[serde(default)]
    pub eval: Option<EvalReport>,
    /// Evaluation before stage-2 tuning, when stage 2 ran.
    #[serde(default)]
    pub stage1_eval: Option<EvalReport>,
    #[serde(default)]
    pub cost: Option<CostReport>,
    #[serde(default)]
    pub pretrain_hash: Option<String>,
    #[serde(default)]
    pub run_dir: Option<String>,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub wall_seconds: f64,
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Batched inference over a dataset in corner-box COCO records.
pub fn predict_dataset<T: Float>(model: &Detector<T>, ds: &Dataset, batch: usize) -> Result<Vec<DetectionRecord>> {
    let category_ids: Vec<u64> = (1..=ds.num_classes() as u64).collect();
    let mut out = Vec::new();
    for chunk in ds.samples.chunks(batch.max(1)) {
        let (images, _) = make_batch::<T>(chunk)?;
        let det = model.forward_detect(&images)?;
        for (s, d) in chunk.iter().zip(&det.detections) {
            out.extend(DetectionRecord::from_detections(s.id, d, &category_ids));
        }
    }
    Ok(out)
}

pub fn evaluate<T: Float>(
    model: &Detector<T>,
    train: &Dataset,
    eval: &Dataset,
    config: &EvalConfig,
    batch: usize,
) -> Result<(EvalReport, Vec<DetectionRecord>)> {
    let dets = predict_dataset(model, eval, batch)?;
    let gt = GroundTruth::from_datasets(eval, train)?;
    Ok((compute_report(&dets, &gt, config)?, dets))
}

/// Shared state of runs in one process: pretrained checkpoints and
/// generated datasets, both keyed by content hash.
#[derive(Default)]
pub struct RunContext {
    pub out_dir: PathBuf,
    pretrained: Mutex<HashMap<String, Arc<Checkpoint>>>,
    datasets: Mutex<HashMap<String, Arc<(Dataset, Dataset)>>>,
}

impl RunContext {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        RunContext { out_dir: out_dir.into(), ..Default::default() }
    }

    pub fn pretrain_path(&self, hash: &str) -> PathBuf {
        self.out_dir.join("pretrain").join(format!("{hash}.ckpt"))
    }

    /// The pretrained checkpoint of `cfg`, trained at most once per
    /// output directory.
    pub fn pretrained(&self, p: &PretrainConfig, detector_backbone: &BackboneSpec) -> Result<Arc<Checkpoint>> {
        if let Some(path) = &p.checkpoint {
            return Ok(Arc::new(Checkpoint::load(path)?));
        }
        let hash = p.hash(detector_backbone);
        // holding the lock while training serializes duplicate requests
        let mut cache = self.pretrained.lock().expect("pretrain cache poisoned");
        if let Some(c) = cache.get(&hash) {
            return Ok(c.clone());
        }
        let path = self.pretrain_path(&hash);
        let ckpt = if path.is_file() {
            Checkpoint::load(&path)?
        } else {
            let spec = p.backbone(detector_backbone);
            let ds = generate_classification_set(p.scale, &p.dataset_spec())?;
            log::info!("pretraining {} backbone on {} images ({hash})", p.scale.as_str(), ds.samples.len());
            let out = pretrain_classifier::<f32>(&spec, &ds, &p.train)?;
            out.checkpoint.save(&path)?;
            crate::io::write_atomic(path.with_extension("log.jsonl"), out.log.to_jsonl()?.as_bytes())?;
            out.checkpoint
        };
        let ckpt = Arc::new(ckpt);
        cache.insert(hash, ckpt.clone());
        Ok(ckpt)
    }

    pub fn datasets(&self, d: &DetectionData) -> Result<Arc<(Dataset, Dataset)>> {
        let key = short_hash(d);
        let mut cache = self.datasets.lock().expect("dataset cache poisoned");
        if let Some(v) = cache.get(&key) {
            return Ok(v.clone());
        }
        let v = Arc::new(d.generate()?);
        cache.insert(key, v.clone());
        Ok(v)
    }
}

/// Everything a run produced besides the record.
pub struct RunArtifacts {
    pub model: Detector<f32>,
    pub log: RunLog,
    pub detections: Vec<DetectionRecord>,
}

/// Trains and evaluates `cfg` for one seed. `cfg.seeds` must hold that
/// seed only (see [`ExperimentConfig::with_seed`]).
pub fn execute_run(cfg: &ExperimentConfig, ctx: &RunContext) -> Result<(RunRecord, RunArtifacts)> {
    cfg.validate()?;
    let &[seed] = cfg.seeds.as_slice() else {
        return Err(Error::config(format!("{}: a run takes exactly one seed, got {:?}", cfg.name, cfg.seeds)));
    };
    let started = unix_now();
    let clock = Instant::now();
    let data = ctx.datasets(&cfg.data)?;
    let (train, eval) = (&data.0, &data.1);
    let pretrained = cfg.pretrain.as_ref().map(|p| ctx.pretrained(p, &cfg.detector.backbone)).transpose()?;
    let mut model = build_detector::<f32>(&cfg.detector, seed)?;
    partition_parameters(&mut model, cfg.regime, pretrained.as_deref())?;
    let mut log = train_detector(&mut model, train, &cfg.train, &cfg.augment)?;
    let (mut report, mut dets) = evaluate(&model, train, eval, &cfg.eval, cfg.eval_batch)?;
    let mut stage1 = None;
    if let Some(s2) = &cfg.stage2 {
        let extra = balanced_stage2_tune(&mut model, train, s2)?;
        log.epochs.extend(extra.epochs);
        let (r2, d2) = evaluate(&model, train, eval, &cfg.eval, cfg.eval_batch)?;
        stage1 = Some(std::mem::replace(&mut report, r2));
        dets = d2;
    }
    let input = [cfg.train.batch_size, cfg.detector.backbone.input_channels, train.samples[0].height(), train.samples[0].width()];
    let cost = cost_report(&model, &cfg.name, cfg.regime, input)?;
    let record = RunRecord {
        config_hash: cfg.hash(),
        cell_hash: cfg.cell_hash(),
        name: cfg.name.clone(),
        seed,
        status: RunStatus::Ok,
        error: None,
        config: cfg.clone(),
        eval: Some(report),
        stage1_eval: stage1,
        cost: Some(cost),
        pretrain_hash: cfg.pretrain.as_ref().map(|p| p.hash(&cfg.detector.backbone)),
        run_dir: None,
        started_unix: started,
        finished_unix: unix_now(),
        wall_seconds: clock.elapsed().as_secs_f64(),
    };
    Ok((record, RunArtifacts { model, log, detections: dets }))
}

/// Writes the run log, detections and final weights under
/// `ctx.out_dir/runs/<hash>` and returns that directory, relative to the
/// output root.
pub fn save_artifacts(record: &RunRecord, art: &RunArtifacts, ctx: &RunContext) -> Result<String> {
    let rel = format!("runs/{}-{}", record.name.replace('/', "_"), record.config_hash);
    let dir = ctx.out_dir.join(&rel);
    crate::io::write_atomic(dir.join("run_log.jsonl"), art.log.to_jsonl()?.as_bytes())?;
    crate::eval::write_detections(dir.join("detections.json"), &art.detections)?;
    let meta = serde_json::json!({ "config_hash": record.config_hash, "seed": record.seed });
    Checkpoint::from_store(&art.model.store, None, meta).save(dir.join("final.ckpt"))?;
    Ok(rel)
}

pub fn failed_record(cfg: &ExperimentConfig, err: &Error, started: u64, wall: f64) -> RunRecord {
    RunRecord {
        config_hash: cfg.hash(),
        cell_hash: cfg.cell_hash(),
        name: cfg.name.clone(),
        seed: cfg.seeds.first().copied().unwrap_or(0),
        status: RunStatus::Failed,
        error: Some(err.to_string()),
        config: cfg.clone(),
        eval: None,
        stage1_eval: None,
        cost: None,
        pretrain_hash: None,
        run_dir: None,
        started_unix: started,
        finished_unix: unix_now(),
        wall_seconds: wall,
    }
}
