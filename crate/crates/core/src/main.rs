use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::error;

use ausds::active::{BudgetCheckpoint, ExperimentLog};
use ausds::data::{Dataset, DatasetManifest};
use ausds::harness::eval::{eval_checkpoints, read_checkpoint, rows_to_csv};
use ausds::harness::experiment::{run_experiment, RunConfig};
use ausds::harness::report::{
    histograms_to_csv, margin_histogram, margin_series, series_to_csv, speed_report, speed_to_csv,
    StepWindow, WARMUP_STEPS,
};
use ausds::harness::synthetic::{generate_synthetic, SyntheticKind, SyntheticSpec};
use ausds::{Error, Result};

#[derive(Parser)]
#[command(name = "ausds", version, about = "Adversarial uncertainty sampling for active learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run strategies over seeds as described by a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Replaces the seed list.
        #[arg(long)]
        seed: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Replaces the strategy list.
        #[arg(long)]
        strategy: Vec<String>,
    },
    /// Write a synthetic corpus (embeddings, labels, manifest).
    Gen {
        #[arg(long)]
        out: PathBuf,
        /// TOML file with a synthetic spec; flags override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_parser = parse_kind)]
        kind: Option<SyntheticKind>,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        per_class: Option<usize>,
        #[arg(long)]
        spread: Option<f64>,
        #[arg(long)]
        separation: Option<f64>,
        #[arg(long)]
        boundary_noise: Option<f64>,
        #[arg(long)]
        intrinsic_dim: Option<usize>,
        #[arg(long)]
        test_per_class: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train from scratch on every checkpoint of a run directory.
    EvalScratch {
        #[arg(long)]
        manifest: PathBuf,
        /// Directory written by `run`.
        #[arg(long)]
        run: PathBuf,
        /// Run config supplying the training settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Mean selection-step time per strategy, relative to US.
    ReportSpeed {
        logs: Vec<PathBuf>,
        #[arg(long, default_value_t = WARMUP_STEPS)]
        warmup: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-step mean margin and windowed margin histograms.
    ReportMargin {
        logs: Vec<PathBuf>,
        /// Histogram window as the final share of steps.
        #[arg(long, default_value_t = 0.2)]
        window_fraction: f64,
        /// Explicit window start step (overrides the fraction).
        #[arg(long)]
        window_start: Option<usize>,
        #[arg(long)]
        window_end: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_kind(s: &str) -> std::result::Result<SyntheticKind, String> {
    match s {
        "gaussian_blobs" | "blobs" => Ok(SyntheticKind::GaussianBlobs),
        "ring_vs_disk" => Ok(SyntheticKind::RingVsDisk),
        _ => Err(format!("unknown kind {s:?}; expected gaussian_blobs or ring_vs_disk")),
    }
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| Error::Config(format!("{}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn read_logs(paths: &[PathBuf]) -> Result<Vec<ExperimentLog>> {
    if paths.is_empty() {
        return Err(Error::Config("no log files given".into()));
    }
    paths.iter().map(|p| ExperimentLog::read(p)).collect()
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::Config(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    out.sort();
    Ok(out)
}

/// Checkpoints under `<run>/<strategy>/seed-<n>/checkpoint-<fraction>.tsv`.
fn collect_checkpoints(dataset: &Dataset, run: &Path) -> Result<Vec<(String, u64, Vec<BudgetCheckpoint>)>> {
    let mut found = Vec::new();
    for strategy_dir in sorted_entries(run)?.into_iter().filter(|p| p.is_dir()) {
        let strategy = strategy_dir.file_name().unwrap().to_string_lossy().to_string();
        for seed_dir in sorted_entries(&strategy_dir)?.into_iter().filter(|p| p.is_dir()) {
            let name = seed_dir.file_name().unwrap().to_string_lossy().to_string();
            let Some(seed) = name.strip_prefix("seed-").and_then(|s| s.parse().ok()) else {
                continue;
            };
            let mut cps = Vec::new();
            for f in sorted_entries(&seed_dir)? {
                let fname = f.file_name().unwrap().to_string_lossy().to_string();
                let Some(fraction) = fname
                    .strip_prefix("checkpoint-")
                    .and_then(|s| s.strip_suffix(".tsv"))
                    .and_then(|s| s.parse().ok())
                else {
                    continue;
                };
                let labeled = read_checkpoint(&f, dataset.task)?;
                cps.push(BudgetCheckpoint {
                    fraction,
                    step: 0,
                    oracle_queries: 0,
                    labeled,
                });
            }
            found.push((strategy.clone(), seed, cps));
        }
    }
    Ok(found)
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            config,
            seed,
            out,
            strategy,
        } => {
            let mut c = RunConfig::from_file(&config)?;
            if !seed.is_empty() {
                c.seeds = seed;
            }
            if let Some(o) = out {
                c.out = o;
            }
            if !strategy.is_empty() {
                c.strategies = strategy;
            }
            let summary = run_experiment(&c)?;
            for p in summary.log_paths {
                println!("{}", p.display());
            }
            Ok(())
        }
        Command::Gen {
            out,
            config,
            kind,
            dim,
            classes,
            per_class,
            spread,
            separation,
            boundary_noise,
            intrinsic_dim,
            test_per_class,
            seed,
        } => {
            let mut spec = match config {
                Some(p) => {
                    let text = std::fs::read_to_string(&p)
                        .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                    toml::from_str::<SyntheticSpec>(&text)?
                }
                None => SyntheticSpec::default(),
            };
            if let Some(v) = kind {
                spec.kind = v;
            }
            if let Some(v) = dim {
                spec.dim = v;
            }
            if let Some(v) = classes {
                spec.classes = v;
            }
            if let Some(v) = per_class {
                spec.per_class = v;
            }
            if let Some(v) = spread {
                spec.spread = v;
            }
            if let Some(v) = separation {
                spec.separation = v;
            }
            if let Some(v) = boundary_noise {
                spec.boundary_noise = v;
            }
            if intrinsic_dim.is_some() {
                spec.intrinsic_dim = intrinsic_dim;
            }
            if let Some(v) = test_per_class {
                spec.test_per_class = v;
            }
            if let Some(v) = seed {
                spec.seed = v;
            }
            let manifest = generate_synthetic(&spec, &out)?;
            println!("{}", manifest.display());
            Ok(())
        }
        Command::EvalScratch {
            manifest,
            run,
            config,
            out,
        } => {
            let dataset = Dataset::load(&DatasetManifest::from_file(&manifest)?)?;
            let train = match config {
                Some(p) => RunConfig::from_file(&p)?.learner.train,
                None => Default::default(),
            };
            let mut rows = Vec::new();
            for (strategy, seed, cps) in collect_checkpoints(&dataset, &run)? {
                rows.extend(eval_checkpoints(&dataset, &cps, &train, &strategy, seed)?);
            }
            write_or_print(out.as_deref(), &rows_to_csv(&rows))
        }
        Command::ReportSpeed { logs, warmup, out } => {
            let logs = read_logs(&logs)?;
            let refs: Vec<_> = logs.iter().collect();
            write_or_print(out.as_deref(), &speed_to_csv(&speed_report(&refs, warmup)))
        }
        Command::ReportMargin {
            logs,
            window_fraction,
            window_start,
            window_end,
            out,
        } => {
            let logs = read_logs(&logs)?;
            let refs: Vec<_> = logs.iter().collect();
            std::fs::create_dir_all(&out).map_err(|e| Error::Config(format!("{}: {e}", out.display())))?;
            let series = margin_series(&refs);
            std::fs::write(out.join("margin_series.csv"), series_to_csv(&series))
                .map_err(|e| Error::Config(e.to_string()))?;
            let mut strategies: Vec<String> = Vec::new();
            for (_, s, _) in &series {
                if !strategies.contains(s) {
                    strategies.push(s.clone());
                }
            }
            let hists: Vec<_> = strategies
                .iter()
                .map(|s| {
                    let steps = refs
                        .iter()
                        .flat_map(|l| l.records.iter())
                        .filter(|r| &r.strategy == s)
                        .map(|r| r.step + 1)
                        .max()
                        .unwrap_or(0);
                    let window = match window_start {
                        Some(start) => StepWindow {
                            start,
                            end: window_end.unwrap_or(steps),
                        },
                        None => StepWindow::last_fraction(steps, window_fraction),
                    };
                    margin_histogram(&refs, s, window)
                })
                .collect();
            std::fs::write(out.join("margin_histograms.csv"), histograms_to_csv(&hists))
                .map_err(|e| Error::Config(e.to_string()))?;
            for h in &hists {
                println!(
                    "{}: steps {}..{}, {} selections, mean margin {:.4}",
                    h.strategy, h.window.start, h.window.end, h.total, h.mean
                );
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
