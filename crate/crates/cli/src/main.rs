//! `detlab`: pretrain, train, evaluate, sweep and report detector
//! experiments on the synthetic benchmarks.
//!
//! Exit codes: 0 success, 1 configuration error, 2 runtime or numerical
//! failure, 3 sweep finished with failed cells.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use detlab::cost::{cost_report, render_cost_table};
use detlab::experiment::{
    append_record, build_report, cost_rows, evaluate, execute_run, failed_record, load_records, render_curve_csv, render_report_csv, render_report_text,
    run_sweep, save_artifacts, ExperimentConfig, GridSpec, ReportOptions, RunContext, SweepOptions,
};
use detlab::model::{build_classifier, build_detector};
use detlab::train::{partition_parameters, Checkpoint, TrainRegime};
use detlab::{Error, Result};

#[derive(Parser)]
#[command(name = "detlab", version, about = "Detector training experiments on synthetic benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train (or reuse) the pretrained backbone of an experiment.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate one experiment, one run per seed.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated, replaces the config's seed list.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Evaluate stored detector weights on an experiment's eval split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also write detections.json and eval.json here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the cartesian product of one or more grid files.
    Sweep {
        #[arg(long, required = true)]
        config: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Skip cells that already have a successful record.
        #[arg(long)]
        resume: bool,
    },
    /// Comparison tables and curves from the records under `--out`.
    Report {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "fine_tune")]
        baseline: String,
        /// Kernel width of the class-wise curve, in annotations.
        #[arg(long, default_value_t = 50.0)]
        sigma: f64,
        /// Only cells whose name starts with this prefix.
        #[arg(long)]
        cells: Option<String>,
    },
    /// Parameter, FLOP and memory accounting: of one config, or of every
    /// recorded cell under `--out`.
    Account {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Errors reading configs are configuration errors whatever their kind.
fn load_config(path: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::load(path).map_err(as_config)
}

fn as_config(e: Error) -> Error {
    if e.is_config() {
        e
    } else {
        Error::config(e.to_string())
    }
}

fn out_dir(cli: Option<PathBuf>, cfg: &ExperimentConfig) -> PathBuf {
    cli.or_else(|| cfg.output_dir.clone()).unwrap_or_else(|| PathBuf::from("detlab-out"))
}

fn print_json(v: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn parse_regime(s: &str) -> Result<TrainRegime> {
    serde_json::from_value(serde_json::Value::String(s.to_owned())).map_err(|_| Error::config(format!("unknown regime {s:?}")))
}

fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Pretrain { config, out } => {
            let cfg = load_config(&config)?;
            let p = cfg.pretrain.as_ref().ok_or_else(|| Error::config(format!("{}: no pretrain section", cfg.name)))?;
            let ctx = RunContext::new(out_dir(out, &cfg));
            ctx.pretrained(p, &cfg.detector.backbone)?;
            let path = p.checkpoint.clone().unwrap_or_else(|| ctx.pretrain_path(&p.hash(&cfg.detector.backbone)));
            println!("{}", path.display());
        }
        Command::Train { config, out, seeds } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = seeds {
                cfg.seeds = s;
            }
            cfg.validate()?;
            let ctx = RunContext::new(out_dir(out, &cfg));
            let mut first_err = None;
            for &seed in &cfg.seeds {
                let c = cfg.with_seed(seed);
                let started = std::time::SystemTime::now();
                let rec = match execute_run(&c, &ctx).and_then(|(mut rec, art)| {
                    rec.run_dir = Some(save_artifacts(&rec, &art, &ctx)?);
                    Ok(rec)
                }) {
                    Ok(r) => r,
                    Err(e) => {
                        log::error!("seed {seed}: {e}");
                        let unix = started.duration_since(std::time::UNIX_EPOCH).map_or(0, |d| d.as_secs());
                        let rec = failed_record(&c, &e, unix, started.elapsed().map_or(0.0, |d| d.as_secs_f64()));
                        first_err.get_or_insert(e);
                        rec
                    }
                };
                let path = append_record(&ctx.out_dir, &rec)?;
                log::info!("wrote {}", path.display());
                print_json(&rec)?;
            }
            if let Some(e) = first_err {
                return Err(e);
            }
        }
        Command::Eval { config, checkpoint, out } => {
            let cfg = load_config(&config)?;
            let ckpt = Checkpoint::load(&checkpoint).map_err(as_config)?;
            let mut model = build_detector::<f32>(&cfg.detector, cfg.seeds.first().copied().unwrap_or(0))?;
            ckpt.restore_store(&mut model.store)?;
            let ctx = RunContext::new(out_dir(out.clone(), &cfg));
            let data = ctx.datasets(&cfg.data)?;
            let (report, dets) = evaluate(&model, &data.0, &data.1, &cfg.eval, cfg.eval_batch)?;
            if let Some(dir) = out {
                detlab::eval::write_detections(dir.join("detections.json"), &dets)?;
                detlab::io::write_json(dir.join("eval.json"), &report)?;
            }
            print_json(&report)?;
        }
        Command::Sweep { config, out, seeds, workers, resume } => {
            let mut grids = config.iter().map(|p| GridSpec::load(p).map_err(as_config)).collect::<Result<Vec<_>>>()?;
            if let Some(s) = seeds {
                for g in &mut grids {
                    g.axes.seed = Some(s.clone());
                }
            }
            let outcome = run_sweep(&grids, &SweepOptions { out_dir: out, workers, resume })?;
            println!("{} new records, {} cells skipped, {} failed", outcome.new_records.len(), outcome.skipped, outcome.failed);
            if outcome.failed > 0 {
                return Ok(ExitCode::from(3));
            }
        }
        Command::Report { out, baseline, sigma, cells } => {
            let opts = ReportOptions { baseline: parse_regime(&baseline)?, curve_sigma: sigma };
            let mut records = load_records(&out)?;
            if let Some(prefix) = &cells {
                records.retain(|r| r.name.starts_with(prefix.as_str()));
                if records.is_empty() {
                    return Err(Error::config(format!("no recorded cell name starts with {prefix:?}")));
                }
            }
            let report = build_report(&records, &opts)?;
            let text = render_report_text(&report);
            let dir = out.join("report");
            detlab::io::write_atomic(dir.join("report.txt"), text.as_bytes())?;
            detlab::io::write_atomic(dir.join("report.csv"), render_report_csv(&report).as_bytes())?;
            detlab::io::write_atomic(dir.join("curves.csv"), render_curve_csv(&report).as_bytes())?;
            detlab::io::write_json(dir.join("report.json"), &report)?;
            let rows = cost_rows(&records, &out, opts.baseline)?;
            detlab::io::write_atomic(dir.join("costs.txt"), render_cost_table(&rows).as_bytes())?;
            detlab::io::write_json(dir.join("costs.json"), &rows)?;
            print!("{text}");
        }
        Command::Account { config: Some(config), .. } => {
            let cfg = load_config(&config)?;
            cfg.validate()?;
            let seed = cfg.seeds[0];
            let mut model = build_detector::<f32>(&cfg.detector, seed)?;
            // costs do not depend on weight values, so any compatible
            // checkpoint stands in for the pretrained one
            let stand_in = match &cfg.pretrain {
                Some(p) => {
                    let c = build_classifier::<f32>(&p.backbone(&cfg.detector.backbone), seed)?;
                    Some(Checkpoint::from_store(&c.store, None, serde_json::Value::Null))
                }
                None => None,
            };
            partition_parameters(&mut model, cfg.regime, stand_in.as_ref())?;
            let (h, w) = cfg.data.canvas();
            let input = [cfg.train.batch_size, cfg.detector.backbone.input_channels, h, w];
            print_json(&cost_report(&model, &cfg.name, cfg.regime, input)?)?;
        }
        Command::Account { config: None, out: Some(out) } => {
            let rows = cost_rows(&load_records(&out)?, &out, TrainRegime::FineTune)?;
            print!("{}", render_cost_table(&rows));
        }
        Command::Account { config: None, out: None } => return Err(Error::config("account needs --config or --out")),
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if e.use_stderr() => {
            let _ = e.print();
            return ExitCode::from(1);
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 1 } else { 2 })
        }
    }
}
