//! `stgcl`: synthesize data, train, evaluate and report.

mod report;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use stgcl_core::data::{synth_generate, write_series, Split, SynthConfig};
use stgcl_core::gradcheck::{run_suite, GradCheckConfig};
use stgcl_core::graph::write_edge_list;
use stgcl_core::model::load_checkpoint;
use stgcl_core::train::{evaluate, train_run, MetricsReport};
use stgcl_core::{Error, ErrorClass, ExperimentConfig, Level, Result, Scheme};

#[derive(Parser)]
#[command(
    name = "stgcl",
    version,
    about = "Spatio-temporal graph forecasting with contrastive learning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SchemeArg {
    Joint,
    PretrainFinetune,
    BaseOnly,
}

#[derive(Clone, Copy, ValueEnum)]
enum LevelArg {
    Node,
    Graph,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic sensor network: series.stgs, edges.csv and experiment.json.
    Synth {
        #[arg(long, default_value_t = 15)]
        nodes: usize,
        #[arg(long, default_value_t = 30)]
        days: usize,
        #[arg(long, default_value_t = 48)]
        steps_per_day: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one or more seeds; each writes metrics.jsonl, report.json and ckpt_best.stgc.
    Train {
        /// Experiment config; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        scheme: Option<SchemeArg>,
        #[arg(long, value_enum)]
        contrast: Option<LevelArg>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        /// First seed; defaults to the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Number of consecutive seeds to run.
        #[arg(long, default_value_t = 1)]
        seeds: usize,
        /// Overrides the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Defaults to config.json next to the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Summarize run directories: mean±std, per-horizon tables, t-tests and loss-curve TSVs.
    Report {
        /// One directory per arm, holding seed runs or a single run.
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        /// Where loss-curve TSVs go; defaults to each arm's directory.
        #[arg(long)]
        tsv_dir: Option<PathBuf>,
    },
    /// Check every autodiff op and both contrastive losses against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, class) = match e.class() {
                ErrorClass::Config => (2, "config"),
                ErrorClass::Data => (3, "data"),
                ErrorClass::Numeric => (4, "numeric"),
            };
            eprintln!("error[{class}]: {}", e.to_string().replace('\n', " "));
            ExitCode::from(code)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth {
            nodes,
            days,
            steps_per_day,
            seed,
            out,
        } => synth(
            &SynthConfig {
                nodes,
                days,
                steps_per_day,
                seed,
                ..SynthConfig::default()
            },
            &out,
        ),
        Command::Train {
            config,
            scheme,
            contrast,
            lambda,
            epochs,
            seed,
            seeds,
            out,
        } => {
            let (mut cfg, base) = match &config {
                Some(p) => (ExperimentConfig::load(p)?, parent(p)),
                None => (ExperimentConfig::default(), PathBuf::from(".")),
            };
            if let Some(s) = scheme {
                cfg.train.scheme = match s {
                    SchemeArg::Joint => Scheme::Joint,
                    SchemeArg::PretrainFinetune => Scheme::PretrainFinetune,
                    SchemeArg::BaseOnly => Scheme::BaseOnly,
                };
            }
            if let Some(l) = contrast {
                cfg.train.level = match l {
                    LevelArg::Node => Level::Node,
                    LevelArg::Graph => Level::Graph,
                };
            }
            if let Some(l) = lambda {
                cfg.train.lambda = l;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            if let Some(o) = out {
                cfg.output_dir = o;
            }
            let bad = cfg.invalid_keys();
            if !bad.is_empty() {
                return Err(Error::Config(bad));
            }
            if seeds == 0 {
                return Err(Error::Config(vec!["--seeds".into()]));
            }
            cfg.resolve_paths(&base)?;
            train(&cfg, seeds)
        }
        Command::Eval {
            ckpt,
            config,
            split,
        } => {
            let config = config.unwrap_or_else(|| parent(&ckpt).join("config.json"));
            let cfg = ExperimentConfig::load(&config)?;
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Val => Split::Val,
                SplitArg::Test => Split::Test,
            };
            eval(&cfg, &parent(&config), &ckpt, split)
        }
        Command::Report { runs, tsv_dir } => report::report(&runs, tsv_dir.as_deref()),
        Command::Gradcheck {
            instances,
            seed,
            tolerance,
        } => gradcheck(&GradCheckConfig {
            instances,
            seed,
            tolerance,
            ..GradCheckConfig::default()
        }),
    }
}

fn parent(p: &Path) -> PathBuf {
    match p.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn synth(cfg: &SynthConfig, out: &Path) -> Result<()> {
    let generated = synth_generate(cfg)?;
    std::fs::create_dir_all(out)?;
    write_series(&out.join("series.stgs"), &generated.dataset)?;
    write_edge_list(&out.join("edges.csv"), &generated.edges)?;
    let mut exp = ExperimentConfig::default();
    exp.dataset.synth = None;
    exp.dataset.series = Some("series.stgs".into());
    exp.dataset.edges = Some("edges.csv".into());
    std::fs::write(out.join("experiment.json"), exp.to_json())?;
    println!(
        "wrote {} nodes × {} steps ({} per day), {} graph edges to {}",
        generated.dataset.nodes(),
        generated.dataset.steps(),
        cfg.steps_per_day,
        generated.graph.num_edges(),
        out.display()
    );
    Ok(())
}

/// Worker threads for multi-seed runs, capped by `STGCL_THREADS`.
fn thread_count(runs: usize) -> usize {
    let available = std::thread::available_parallelism().map_or(1, |n| n.get());
    let cap = std::env::var("STGCL_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(available);
    cap.min(runs).max(1)
}

fn train(cfg: &ExperimentConfig, seeds: usize) -> Result<()> {
    let (data, graph) = cfg.load_data(Path::new("."))?;
    let first = cfg.train.seed;
    let out = &cfg.output_dir;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.json"), cfg.to_json())?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count(seeds))
        .build()
        .map_err(|e| Error::invalid(e.to_string()))?;
    let results: Vec<Result<_>> = pool.install(|| {
        (0..seeds as u64)
            .into_par_iter()
            .map(|k| {
                let mut run_cfg = cfg.clone();
                run_cfg.train.seed = first + k;
                let dir = if seeds == 1 {
                    out.clone()
                } else {
                    out.join(format!("seed{}", first + k))
                };
                std::fs::create_dir_all(&dir)?;
                run_cfg.output_dir = dir.clone();
                std::fs::write(dir.join("config.json"), run_cfg.to_json())?;
                let report = train_run(&run_cfg.model, &run_cfg.train, &data, &graph, Some(&dir))
                    .map_err(|e| e.context(format!("seed {}", first + k)))?;
                Ok((dir, report))
            })
            .collect()
    });
    let mut maes = Vec::new();
    for r in results {
        let (dir, report) = r?;
        println!(
            "seed {}: best epoch {} val MAE {:.4} test MAE {:.4} ({:.1}s) -> {}",
            report.seed,
            report.best_epoch,
            report.best_val_mae,
            report.test.average.mae,
            report.wall_clock_secs,
            dir.display()
        );
        maes.push(report.test.average.mae);
    }
    if maes.len() > 1 {
        println!(
            "test MAE {}",
            stgcl_core::train::Summary::of(&maes).display()
        );
    }
    Ok(())
}

fn print_metrics(m: &MetricsReport) {
    println!(
        "{:>8} {:>10} {:>10} {:>10}",
        "step", "MAE", "RMSE", "MAPE(%)"
    );
    for h in &m.horizons {
        println!(
            "{:>8} {:>10.4} {:>10.4} {:>10.4}",
            h.step, h.metrics.mae, h.metrics.rmse, h.metrics.mape
        );
    }
    println!(
        "{:>8} {:>10.4} {:>10.4} {:>10.4}",
        "average", m.average.mae, m.average.rmse, m.average.mape
    );
}

fn eval(cfg: &ExperimentConfig, base: &Path, ckpt: &Path, split: Split) -> Result<()> {
    let mut model = load_checkpoint(ckpt)?;
    let mc = model.config();
    if mc.history != cfg.model.history || mc.horizon != cfg.model.horizon {
        return Err(Error::Checkpoint(format!(
            "checkpoint windows {}→{} differ from config {}→{}",
            mc.history, mc.horizon, cfg.model.history, cfg.model.horizon
        )));
    }
    let (data, graph) = cfg.load_data(base)?;
    let m = evaluate(
        &mut model,
        &data,
        &graph,
        split,
        &cfg.train.horizons,
        cfg.train.batch_size,
    )?;
    println!("{split:?} split, {} windows", data.instances(split).len());
    print_metrics(&m);
    Ok(())
}

fn gradcheck(cfg: &GradCheckConfig) -> Result<()> {
    let start = std::time::Instant::now();
    let reports = run_suite(cfg)?;
    let mut failed = 0;
    for r in &reports {
        println!(
            "{:<26} {:>4} instances  max rel error {:.3e}  {}",
            r.name,
            r.instances,
            r.max_rel_error,
            if r.passed { "ok" } else { "FAIL" }
        );
        failed += usize::from(!r.passed);
    }
    println!(
        "{} cases in {:.1}s",
        reports.len(),
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        return Err(Error::Autodiff(format!(
            "{failed} case(s) exceed relative error {:e}",
            cfg.tolerance
        )));
    }
    Ok(())
}
