use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{short_hash, ExperimentConfig, RunRecord, RunStatus};
use crate::cost::{attach_deltas, training_cost_summary, CostRow};
use crate::error::{Error, Result};
use crate::eval::{classwise_relative_curve, CurvePoint, EvalReport};
use crate::model::AdapterSpec;
use crate::report::{csv_row, fmt_delta, fmt_percent, fmt_points, render_table, Spread};
use crate::train::{RunLog, TrainRegime};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportOptions {
    pub baseline: TrainRegime,
    /// Kernel width of the class-wise curve, in annotations.
    pub curve_sigma: f64,
}

impl Default for ReportOptions {
    fn default() -> Self {
        ReportOptions { baseline: TrainRegime::FineTune, curve_sigma: 50.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub name: String,
    pub cell_hash: String,
    pub regime: TrainRegime,
    pub seeds: Vec<u64>,
    pub config_hashes: Vec<String>,
    pub map: Spread,
    pub ap50: f64,
    pub map_r: Option<f64>,
    pub map_c: Option<f64>,
    pub map_f: Option<f64>,
    pub trained_fraction: Option<f64>,
    pub baseline: Option<String>,
    pub delta_map: Option<f64>,
    pub delta_map_r: Option<f64>,
    pub delta_map_f: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub cell: String,
    pub baseline: String,
    pub curve: Vec<CurvePoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub baseline: TrainRegime,
    pub cells: Vec<CellSummary>,
    pub comparisons: Vec<Comparison>,
}

/// The config a cell is compared against: same everything, baseline
/// regime and no adapters. `keep_pretrain` is false when matching a
/// scratch cell, which has no pretraining to match on.
fn baseline_key(cfg: &ExperimentConfig, baseline: TrainRegime, keep_pretrain: bool) -> String {
    let mut c = cfg.without_seed();
    c.regime = baseline;
    c.detector.adapter = AdapterSpec::default();
    c.name = String::new();
    if baseline == TrainRegime::Scratch || !keep_pretrain {
        c.pretrain = None;
    }
    short_hash(&c)
}

fn mean_opt(v: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Option<Vec<f64>> = v.collect();
    let v = v?;
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Per-class AP averaged over seeds; a class lacking AP in any seed has none.
fn mean_report(reports: &[&EvalReport]) -> EvalReport {
    let mut out = reports[0].clone();
    for (k, c) in out.per_class.iter_mut().enumerate() {
        c.ap = mean_opt(reports.iter().map(|r| r.per_class[k].ap));
        c.ap50 = mean_opt(reports.iter().map(|r| r.per_class[k].ap50));
    }
    out.map = reports.iter().map(|r| r.map).sum::<f64>() / reports.len() as f64;
    out
}

struct Group<'a> {
    cfg: &'a ExperimentConfig,
    records: Vec<&'a RunRecord>,
}

/// Aggregates successful records by cell. Pure over its input, so the
/// same records always give the same report. A config run more than once
/// counts once, with its first record in input order.
pub fn build_report(records: &[RunRecord], opts: &ReportOptions) -> Result<Report> {
    let mut groups: BTreeMap<(String, String), Group> = BTreeMap::new();
    let mut seen = std::collections::BTreeSet::new();
    for r in records.iter().filter(|r| r.status == RunStatus::Ok && r.eval.is_some()) {
        if !seen.insert(r.config_hash.as_str()) {
            continue;
        }
        groups.entry((r.name.clone(), r.cell_hash.clone())).or_insert_with(|| Group { cfg: &r.config, records: vec![] }).records.push(r);
    }
    if groups.is_empty() {
        return Err(Error::data("no successful run records to report"));
    }
    let mut by_key: BTreeMap<String, Vec<&(String, String)>> = BTreeMap::new();
    let mut by_loose_key: BTreeMap<String, Vec<&(String, String)>> = BTreeMap::new();
    for (k, g) in groups.iter().filter(|(_, g)| g.cfg.regime == opts.baseline) {
        by_key.entry(baseline_key(g.cfg, opts.baseline, true)).or_default().push(k);
        by_loose_key.entry(baseline_key(g.cfg, opts.baseline, false)).or_default().push(k);
    }
    let mut cells = Vec::new();
    let mut comparisons = Vec::new();
    for (key, g) in &groups {
        let mut recs = g.records.clone();
        recs.sort_by_key(|r| r.seed);
        let evals: Vec<&EvalReport> = recs.iter().map(|r| r.eval.as_ref().expect("filtered")).collect();
        let maps: Vec<f64> = evals.iter().map(|e| e.map).collect();
        let loose = g.cfg.regime == TrainRegime::Scratch;
        let index = if loose { &by_loose_key } else { &by_key };
        let base = match index.get(&baseline_key(g.cfg, opts.baseline, !loose)).map(Vec::as_slice) {
            Some([k]) => Some(&groups[*k]),
            Some(ks) if ks.len() > 1 => {
                let names: Vec<&str> = ks.iter().map(|k| k.0.as_str()).collect();
                return Err(Error::data(format!("cell {} matches several baseline cells: {}", key.0, names.join(", "))));
            }
            _ if g.cfg.regime == opts.baseline => None,
            _ => return Err(Error::data(format!("cell {} has no {} baseline cell among the records", key.0, opts.baseline.as_str()))),
        };
        let mut summary = CellSummary {
            name: key.0.clone(),
            cell_hash: key.1.clone(),
            regime: g.cfg.regime,
            seeds: recs.iter().map(|r| r.seed).collect(),
            config_hashes: recs.iter().map(|r| r.config_hash.clone()).collect(),
            map: Spread::of(&maps).expect("non-empty group"),
            ap50: evals.iter().map(|e| e.ap50).sum::<f64>() / evals.len() as f64,
            map_r: mean_opt(evals.iter().map(|e| e.map_r)),
            map_c: mean_opt(evals.iter().map(|e| e.map_c)),
            map_f: mean_opt(evals.iter().map(|e| e.map_f)),
            trained_fraction: recs[0].cost.as_ref().map(|c| c.trained_fraction),
            baseline: None,
            delta_map: None,
            delta_map_r: None,
            delta_map_f: None,
        };
        if let Some(b) = base {
            let bev: Vec<&EvalReport> = b.records.iter().map(|r| r.eval.as_ref().expect("filtered")).collect();
            let bmap = bev.iter().map(|e| e.map).sum::<f64>() / bev.len() as f64;
            let bname = b.records[0].name.clone();
            summary.delta_map = Some(summary.map.mean - bmap);
            summary.delta_map_r = summary.map_r.zip(mean_opt(bev.iter().map(|e| e.map_r))).map(|(a, b)| a - b);
            summary.delta_map_f = summary.map_f.zip(mean_opt(bev.iter().map(|e| e.map_f))).map(|(a, b)| a - b);
            if g.cfg.regime != opts.baseline {
                let counts: Vec<usize> = evals[0].per_class.iter().map(|c| c.train_annotations).collect();
                let curve = classwise_relative_curve(&mean_report(&evals), &mean_report(&bev), &counts, opts.curve_sigma)?;
                comparisons.push(Comparison { cell: key.0.clone(), baseline: bname.clone(), curve });
            }
            summary.baseline = Some(bname);
        }
        cells.push(summary);
    }
    Ok(Report { baseline: opts.baseline, cells, comparisons })
}

fn opt_points(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), fmt_points)
}

fn opt_delta(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), fmt_delta)
}

const COLUMNS: [&str; 10] = ["cell", "regime", "seeds", "mAP", "AP50", "mAP_r", "mAP_f", "trained %", "Δ mAP", "Δ mAP_r"];

fn cells_of(c: &CellSummary, maps: &str) -> Vec<String> {
    vec![
        c.name.clone(),
        c.regime.as_str().into(),
        c.seeds.len().to_string(),
        maps.to_owned(),
        fmt_points(c.ap50),
        opt_points(c.map_r),
        opt_points(c.map_f),
        c.trained_fraction.map_or_else(|| "-".into(), fmt_percent),
        opt_delta(c.delta_map),
        opt_delta(c.delta_map_r),
    ]
}

pub fn render_report_text(r: &Report) -> String {
    let rows: Vec<Vec<String>> = r
        .cells
        .iter()
        .map(|c| {
            let spread = if c.seeds.len() > 1 {
                format!("{} ({}–{})", fmt_points(c.map.mean), fmt_points(c.map.min), fmt_points(c.map.max))
            } else {
                fmt_points(c.map.mean)
            };
            cells_of(c, &spread)
        })
        .collect();
    let mut s = format!("baseline regime: {}\n\n", r.baseline.as_str());
    s.push_str(&render_table(&COLUMNS, &rows));
    s
}

/// Same numbers as the text table, plus the raw min and max.
pub fn render_report_csv(r: &Report) -> String {
    let mut header: Vec<String> = COLUMNS.iter().map(|c| (*c).to_owned()).collect();
    header.extend(["mAP_min".into(), "mAP_max".into(), "config_hashes".into()]);
    let mut s = csv_row(&header);
    s.push('\n');
    for c in &r.cells {
        let mut row = cells_of(c, &fmt_points(c.map.mean));
        row.extend([fmt_points(c.map.min), fmt_points(c.map.max), c.config_hashes.join(" ")]);
        s.push_str(&csv_row(&row));
        s.push('\n');
    }
    s
}

/// One row per (comparison, class), deltas in points.
pub fn render_curve_csv(r: &Report) -> String {
    let mut s = csv_row(&["cell", "baseline", "class", "annotations", "delta_raw", "delta_smoothed"].map(String::from));
    s.push('\n');
    for c in &r.comparisons {
        for p in &c.curve {
            let row = [c.cell.clone(), c.baseline.clone(), p.class.clone(), p.annotations.to_string(), fmt_delta(p.delta_raw), fmt_delta(p.delta_smoothed)];
            s.push_str(&csv_row(&row));
            s.push('\n');
        }
    }
    s
}

/// Name of the model a cell trains: its name without regime and adapter tags.
fn model_name(name: &str) -> String {
    const TAGS: [&str; 6] = ["scratch", "fine_tune", "freeze", "freeze_with_adapters", "adapters", "no_adapters"];
    name.split('/').filter(|t| !TAGS.contains(t)).collect::<Vec<_>>().join("/")
}

/// One cost row per cell: static costs and run log of its first seed,
/// mAP averaged over seeds. Run logs are read from `out` when present.
pub fn cost_rows(records: &[RunRecord], out: &Path, baseline: TrainRegime) -> Result<Vec<CostRow>> {
    let mut cells: BTreeMap<(String, String), Vec<&RunRecord>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.status == RunStatus::Ok && r.cost.is_some()) {
        cells.entry((r.name.clone(), r.cell_hash.clone())).or_default().push(r);
    }
    let mut rows = Vec::new();
    for recs in cells.values() {
        let first = recs[0];
        let log = match &first.run_dir {
            Some(d) => {
                let p = out.join(d).join("run_log.jsonl");
                let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
                RunLog::from_jsonl(&text)?
            }
            None => RunLog::default(),
        };
        let map = mean_opt(recs.iter().map(|r| r.eval.as_ref().map(|e| e.map)));
        let mut cost = first.cost.clone().expect("filtered");
        cost.model = model_name(&first.name);
        rows.push(training_cost_summary(&log, &cost, map));
    }
    attach_deltas(&mut rows, baseline);
    Ok(rows)
}
