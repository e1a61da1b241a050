use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{execute_run, failed_record, save_artifacts, unix_now, ExperimentConfig, RunContext, RunRecord, RunStatus};
use crate::data::PretrainScale;
use crate::error::{Error, Result};
use crate::model::DecoderVariant;
use crate::train::TrainRegime;

/// Axes of a sweep; absent axes keep the base value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridAxes {
    #[serde(default)]
    pub regime: Option<Vec<TrainRegime>>,
    #[serde(default)]
    pub decoder: Option<Vec<DecoderVariant>>,
    #[serde(default)]
    pub filters: Option<Vec<usize>>,
    #[serde(default)]
    pub rpn_convs: Option<Vec<usize>>,
    #[serde(default)]
    pub cascade_stages: Option<Vec<usize>>,
    #[serde(default)]
    pub pretrain_scale: Option<Vec<PretrainScale>>,
    /// `true` turns a `freeze` cell into `freeze_with_adapters`.
    #[serde(default)]
    pub adapters: Option<Vec<bool>>,
    #[serde(default)]
    pub seed: Option<Vec<u64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub base: ExperimentConfig,
    #[serde(default)]
    pub axes: GridAxes,
}

type Edit = Box<dyn Fn(&mut ExperimentConfig, &mut Vec<String>)>;

fn axis<V: Clone + 'static>(values: &Option<Vec<V>>, apply: impl Fn(&mut ExperimentConfig, &V) -> String + Clone + 'static) -> Option<Vec<Edit>> {
    values.as_ref().map(|vs| {
        vs.iter()
            .map(|v| {
                let (v, apply) = (v.clone(), apply.clone());
                Box::new(move |c: &mut ExperimentConfig, tags: &mut Vec<String>| tags.push(apply(c, &v))) as Edit
            })
            .collect()
    })
}

impl GridSpec {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    /// Cartesian product of the axes, one config per (cell, seed), in a
    /// fixed order: axes as declared in [`GridAxes`], seeds innermost.
    pub fn cells(&self) -> Result<Vec<ExperimentConfig>> {
        let a = &self.axes;
        let axes: Vec<Vec<Edit>> = [
            axis(&a.regime, |c, r: &TrainRegime| {
                c.regime = *r;
                r.as_str().to_owned()
            }),
            axis(&a.decoder, |c, d: &DecoderVariant| {
                c.detector.decoder.variant = *d;
                format!("{d:?}").to_lowercase()
            }),
            axis(&a.filters, |c, f: &usize| {
                c.detector.decoder.filters = *f;
                format!("f{f}")
            }),
            axis(&a.rpn_convs, |c, n: &usize| {
                c.detector.head.rpn_convs = *n;
                format!("rpn{n}")
            }),
            axis(&a.cascade_stages, |c, n: &usize| {
                c.detector.head.cascade_stages = *n;
                format!("cascade{n}")
            }),
            axis(&a.pretrain_scale, |c, s: &PretrainScale| {
                if let Some(p) = c.pretrain.as_mut() {
                    p.scale = *s;
                }
                s.as_str().to_owned()
            }),
            axis(&a.adapters, |c, on: &bool| {
                c.detector.adapter.enabled = *on;
                if *on && c.regime == TrainRegime::Freeze {
                    c.regime = TrainRegime::FreezeWithAdapters;
                }
                if *on { "adapters" } else { "no_adapters" }.to_owned()
            }),
        ]
        .into_iter()
        .flatten()
        .collect();
        let seeds = a.seed.clone().unwrap_or_else(|| self.base.seeds.clone());
        let mut out = Vec::new();
        let mut idx = vec![0usize; axes.len()];
        loop {
            let mut cfg = self.base.clone();
            let mut tags = vec![self.base.name.clone()];
            for (k, &i) in idx.iter().enumerate() {
                axes[k][i](&mut cfg, &mut tags);
            }
            // scratch cells of a regime axis carry no pretraining
            if cfg.regime == TrainRegime::Scratch {
                cfg.pretrain = None;
            }
            cfg.name = tags.join("/");
            for &s in &seeds {
                out.push(cfg.with_seed(s));
            }
            let mut k = axes.len();
            loop {
                if k == 0 {
                    return check_unique(out);
                }
                k -= 1;
                idx[k] += 1;
                if idx[k] < axes[k].len() {
                    break;
                }
                idx[k] = 0;
            }
        }
    }
}

fn check_unique(cells: Vec<ExperimentConfig>) -> Result<Vec<ExperimentConfig>> {
    let mut seen = BTreeSet::new();
    for c in &cells {
        if !seen.insert(c.hash()) {
            return Err(Error::config(format!("grid produces the cell {} twice", c.name)));
        }
    }
    Ok(cells)
}

#[derive(Debug, Clone)]
pub struct SweepOptions {
    pub out_dir: PathBuf,
    pub workers: usize,
    /// Skip cells that already have a successful record.
    pub resume: bool,
}

#[derive(Debug, Clone, Default)]
pub struct SweepOutcome {
    /// Records written by this invocation, in cell order.
    pub new_records: Vec<RunRecord>,
    pub skipped: usize,
    pub failed: usize,
}

fn records_dir(out: &Path) -> PathBuf {
    out.join("records")
}

/// Every record under `out/records`, sorted by (name, seed, file name).
pub fn load_records(out: &Path) -> Result<Vec<RunRecord>> {
    let dir = records_dir(out);
    let mut files: Vec<PathBuf> = match std::fs::read_dir(&dir) {
        Ok(rd) => rd.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.extension().is_some_and(|x| x == "json")).collect(),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => vec![],
        Err(e) => return Err(Error::io(&dir, e)),
    };
    files.sort();
    let mut out: Vec<(PathBuf, RunRecord)> = Vec::with_capacity(files.len());
    for f in files {
        let r: RunRecord = crate::io::read_json(&f)?;
        out.push((f, r));
    }
    out.sort_by(|a, b| (a.1.name.as_str(), a.1.seed, &a.0).cmp(&(b.1.name.as_str(), b.1.seed, &b.0)));
    Ok(out.into_iter().map(|x| x.1).collect())
}

static RECORD_LOCK: Mutex<()> = Mutex::new(());

/// Writes `rec` to the next free `records/<hash>.<k>.json` and returns
/// its path. Records are never overwritten.
pub fn append_record(out: &Path, rec: &RunRecord) -> Result<PathBuf> {
    let _g = RECORD_LOCK.lock().unwrap_or_else(|p| p.into_inner());
    let dir = records_dir(out);
    let mut k = 0;
    loop {
        let p = dir.join(format!("{}.{k}.json", rec.config_hash));
        if !p.exists() {
            crate::io::write_json(&p, rec)?;
            return Ok(p);
        }
        k += 1;
    }
}

/// Runs every cell of `grid`. Failed cells are recorded with their error
/// text and the sweep carries on with the rest.
pub fn run_sweep(grids: &[GridSpec], opts: &SweepOptions) -> Result<SweepOutcome> {
    let mut cells = Vec::new();
    for g in grids {
        cells.extend(g.cells()?);
    }
    check_unique(cells.clone())?;
    for c in &cells {
        c.validate()?;
    }
    let done: BTreeSet<String> = if opts.resume {
        load_records(&opts.out_dir)?.into_iter().filter(|r| r.status == RunStatus::Ok).map(|r| r.config_hash).collect()
    } else {
        BTreeSet::new()
    };
    let todo: Vec<&ExperimentConfig> = cells.iter().filter(|c| !done.contains(&c.hash())).collect();
    let skipped = cells.len() - todo.len();
    log::info!("sweep: {} cells, {} already complete, {} to run", cells.len(), skipped, todo.len());
    let ctx = RunContext::new(&opts.out_dir);
    // shared pretraining first, once per distinct job
    let mut jobs = BTreeSet::new();
    for c in &todo {
        if let Some(p) = &c.pretrain {
            if jobs.insert(p.hash(&c.detector.backbone)) {
                ctx.pretrained(p, &c.detector.backbone)?;
            }
        }
    }
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<(usize, RunRecord)>> = Mutex::new(Vec::new());
    let worker = || -> Result<()> {
        loop {
            let i = next.fetch_add(1, Ordering::SeqCst);
            let Some(cfg) = todo.get(i) else { return Ok(()) };
            let (started, clock) = (unix_now(), Instant::now());
            log::info!("run {}/{}: {} seed {}", i + 1, todo.len(), cfg.name, cfg.seeds[0]);
            let rec = match execute_run(cfg, &ctx).and_then(|(mut rec, art)| {
                rec.run_dir = Some(save_artifacts(&rec, &art, &ctx)?);
                Ok(rec)
            }) {
                Ok(rec) => rec,
                Err(e) => {
                    log::error!("{} seed {} failed: {e}", cfg.name, cfg.seeds[0]);
                    failed_record(cfg, &e, started, clock.elapsed().as_secs_f64())
                }
            };
            append_record(&opts.out_dir, &rec)?;
            results.lock().expect("results poisoned").push((i, rec));
        }
    };
    let workers = opts.workers.clamp(1, todo.len().max(1));
    std::thread::scope(|s| -> Result<()> {
        let handles: Vec<_> = (0..workers).map(|_| s.spawn(worker)).collect();
        for h in handles {
            h.join().map_err(|_| Error::invariant("sweep worker panicked"))??;
        }
        Ok(())
    })?;
    let mut new_records = results.into_inner().expect("results poisoned");
    new_records.sort_by_key(|r| r.0);
    let new_records: Vec<RunRecord> = new_records.into_iter().map(|r| r.1).collect();
    let failed = new_records.iter().filter(|r| r.status == RunStatus::Failed).count();
    Ok(SweepOutcome { new_records, skipped, failed })
}
