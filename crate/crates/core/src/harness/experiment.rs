//! Run configuration and the drivers that execute strategies over seeds.

use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use crate::active::{ActiveLearner, LearnerConfig, RunOutput, StopRule};
use crate::attacks::AttackMethod;
use crate::data::{Dataset, DatasetManifest};
use crate::error::{Error, Result};
use crate::harness::eval::{eval_checkpoints, rows_to_csv, EvalRow};
use crate::harness::report::{
    margin_series, series_to_csv, speed_report, speed_to_csv, ScalingPoint, WARMUP_STEPS,
};
use crate::harness::synthetic::{synthesize, SyntheticSpec};
use crate::sampler::{SamplerConfig, Strategy};
use crate::store::write_atomic;

/// A strategy name as used on the command line and in logs:
/// `ausds-fgv`, `ausds-deepfool`, `ausds-cw`, `us` or `rm`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StrategySpec {
    pub label: String,
    pub strategy: Strategy,
    pub attack: Option<AttackMethod>,
}

impl StrategySpec {
    pub fn parse(name: &str) -> Result<Self> {
        let (strategy, attack) = match name {
            "ausds-fgv" | "ausds" => (Strategy::Ausds, Some(AttackMethod::Fgv)),
            "ausds-deepfool" => (Strategy::Ausds, Some(AttackMethod::DeepFool)),
            "ausds-cw" => (Strategy::Ausds, Some(AttackMethod::Cw)),
            "us" => (Strategy::Us, None),
            "rm" => (Strategy::Rm, None),
            other => return Err(Error::Config(format!("unknown strategy {other:?}"))),
        };
        let label = match attack {
            Some(a) => format!("ausds-{}", a.name()),
            None => name.to_string(),
        };
        Ok(StrategySpec {
            label,
            strategy,
            attack,
        })
    }

    pub fn sampler(&self, base: &SamplerConfig) -> SamplerConfig {
        let mut s = base.clone();
        s.strategy = self.strategy;
        if let Some(a) = self.attack {
            s.attack.method = a;
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub name: String,
    pub out: PathBuf,
    pub seeds: Vec<u64>,
    pub strategies: Vec<String>,
    /// Dataset manifest; relative paths resolve against the config file.
    pub manifest: Option<PathBuf>,
    pub synthetic: Option<SyntheticSpec>,
    /// Run the from-scratch evaluation on every checkpoint.
    pub evaluate: bool,
    #[serde(flatten)]
    pub learner: LearnerConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            name: "run".into(),
            out: "runs".into(),
            seeds: vec![0, 1, 2, 3, 4],
            strategies: vec!["ausds-fgv".into(), "rm".into()],
            manifest: None,
            synthetic: None,
            evaluate: true,
            learner: LearnerConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        if let Some(m) = &config.manifest {
            if m.is_relative() {
                config.manifest = Some(base.join(m));
            }
        }
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.strategies.is_empty() {
            return Err(Error::Config("at least one strategy is required".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.manifest.is_some() == self.synthetic.is_some() {
            return Err(Error::Config(
                "exactly one of `manifest` and `synthetic` must be set".into(),
            ));
        }
        for s in &self.strategies {
            StrategySpec::parse(s)?;
        }
        Ok(())
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        match (&self.manifest, &self.synthetic) {
            (Some(m), None) => Dataset::load(&DatasetManifest::from_file(m)?),
            (None, Some(spec)) => synthesize(spec),
            _ => Err(Error::Config(
                "exactly one of `manifest` and `synthetic` must be set".into(),
            )),
        }
    }
}

/// One strategy for one seed.
pub fn run_one(
    dataset: &Dataset,
    base: &LearnerConfig,
    spec: &StrategySpec,
    seed: u64,
) -> Result<RunOutput> {
    let mut config = base.clone();
    config.looping.seed = seed;
    config.train.seed = seed;
    config.sampler = spec.sampler(&base.sampler);
    ActiveLearner::initialize(dataset, config, &spec.label)?.run()
}

#[derive(Clone, Debug, Default)]
pub struct ExperimentSummary {
    pub eval: Vec<EvalRow>,
    pub log_paths: Vec<PathBuf>,
}

/// Runs every strategy for every seed and writes logs, checkpoints and
/// reports under `config.out`.
pub fn run_experiment(config: &RunConfig) -> Result<ExperimentSummary> {
    config.validate()?;
    let dataset = config.load_dataset()?;
    let out = &config.out;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_atomic(&out.join("config.json"), serde_json::to_string_pretty(config)?.as_bytes())?;
    let mut summary = ExperimentSummary::default();
    let mut logs = Vec::new();
    for name in &config.strategies {
        let spec = StrategySpec::parse(name)?;
        for &seed in &config.seeds {
            info!("{} seed {seed}", spec.label);
            let run = run_one(&dataset, &config.learner, &spec, seed)?;
            let dir = out.join(&spec.label).join(format!("seed-{seed}"));
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let log_path = dir.join("log.jsonl");
            run.log.write(&log_path, true)?;
            for c in &run.checkpoints {
                c.write(&dir)?;
            }
            if config.evaluate && dataset.test.is_some() {
                summary
                    .eval
                    .extend(eval_checkpoints(&dataset, &run.checkpoints, &config.learner.train, &spec.label, seed)?);
            }
            summary.log_paths.push(log_path);
            logs.push(run.log);
        }
    }
    let refs: Vec<_> = logs.iter().collect();
    write_atomic(&out.join("speed.csv"), speed_to_csv(&speed_report(&refs, WARMUP_STEPS)).as_bytes())?;
    write_atomic(&out.join("margins.csv"), series_to_csv(&margin_series(&refs)).as_bytes())?;
    if !summary.eval.is_empty() {
        write_atomic(&out.join("eval.csv"), rows_to_csv(&summary.eval).as_bytes())?;
    }
    Ok(summary)
}

/// Runs `steps` selection steps of each strategy on pools of each size and
/// reports the mean selection time after warm-up.
pub fn scaling_bench(
    spec: &SyntheticSpec,
    sizes: &[usize],
    strategies: &[StrategySpec],
    steps: usize,
    base: &LearnerConfig,
) -> Result<Vec<ScalingPoint>> {
    let mut points = Vec::new();
    for &size in sizes {
        let spec = SyntheticSpec {
            per_class: size.div_ceil(spec.classes),
            test_per_class: 0,
            ..spec.clone()
        };
        let dataset = synthesize(&spec)?;
        for s in strategies {
            let mut config = base.clone();
            config.looping.max_steps = Some(steps + WARMUP_STEPS);
            config.looping.stop_rule = StopRule::PoolExhausted;
            let run = run_one(&dataset, &config, s, spec.seed)?;
            let row = speed_report(&[&run.log], WARMUP_STEPS).remove(0);
            points.push(ScalingPoint {
                strategy: s.label.clone(),
                pool_size: dataset.len(),
                mean_step_us: row.mean_step_us,
                mean_decoder_evals: row.mean_decoder_evals,
            });
        }
    }
    Ok(points)
}
